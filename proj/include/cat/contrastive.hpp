#pragma once
// Supervised contrastive loss and the instance-pair (NT-Xent) loss, with
// analytic gradients w.r.t. the unit-norm embeddings.

#include "cat/core.hpp"

#include <algorithm>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace cat {

struct ContrastiveConfig {
  double temperature = 0.1;
  int warmup_epochs = 1;

  void validate() const {
    if (!(temperature > 0)) throw ConfigError("contrastive.temperature must be > 0");
    if (warmup_epochs < 0) throw ConfigError("contrastive.warmup_epochs must be >= 0");
  }
};

struct ContrastiveResult {
  double loss = 0.0;
  Matrix grad;
  // Anchors whose positive set was empty; they add 0 but stay in the mean.
  int anchors_without_positives = 0;
  std::vector<std::string> warnings;
};

namespace detail {
inline void require_unit_rows(const Matrix& z) {
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double n = z.row(i).norm();
    if (std::abs(n - 1.0) > 1e-6)
      throw ContractViolation("contrastive loss needs unit-norm embeddings; row " + std::to_string(i) +
                              " has norm " + std::to_string(n));
  }
}
}  // namespace detail

/// SupCon. For anchor i with positives P(i) (same label, i excluded) and
/// candidates A(i) (everything but i):
///   loss_i = -1/|P(i)| sum_{p in P(i)} log( exp(z_i.z_p/T) / sum_{a in A(i)} exp(z_i.z_a/T) )
/// averaged over all anchors; anchors with empty P(i) contribute 0.
inline ContrastiveResult supcon_loss(const Matrix& z, std::span<const int> labels, double temperature) {
  require(static_cast<Eigen::Index>(labels.size()) == z.rows(), "supcon labels/embeddings mismatch");
  if (!(temperature > 0)) throw ConfigError("temperature must be > 0");
  detail::require_unit_rows(z);
  const Eigen::Index n = z.rows();
  ContrastiveResult out;
  out.grad = Matrix::Zero(n, z.cols());
  if (n < 2) {
    out.anchors_without_positives = static_cast<int>(n);
    return out;
  }
  const Matrix logits = (z * z.transpose()) / temperature;
  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix g = Matrix::Zero(n, n);  // d loss / d (z_i . z_j), anchor i
  for (Eigen::Index i = 0; i < n; ++i) {
    int positives = 0;
    for (Eigen::Index j = 0; j < n; ++j) positives += (j != i && labels[j] == labels[i]);
    if (positives == 0) {
      ++out.anchors_without_positives;
      continue;
    }
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) m = std::max(m, logits(i, j));
    double denom = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) denom += std::exp(logits(i, j) - m);
    const double lse = m + std::log(denom);
    double pos_sum = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i && labels[j] == labels[i]) pos_sum += logits(i, j);
    out.loss += inv_n * (lse - pos_sum / positives);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double soft = std::exp(logits(i, j) - lse);
      const double target = labels[j] == labels[i] ? 1.0 / positives : 0.0;
      g(i, j) = inv_n * (soft - target) / temperature;
    }
  }
  // s_ij = z_i . z_j, so d/dz_i gets g_ij z_j and d/dz_j gets g_ij z_i.
  out.grad = (g + g.transpose()) * z;
  return out;
}

/// NT-Xent over two row-aligned views: the positive of each view is the other
/// view of the same row, negatives are all other views. Symmetric in the views.
/// Returns the gradient stacked as [d anchors; d positives].
inline ContrastiveResult unsup_nce_loss(const Matrix& anchors, const Matrix& positives, double temperature) {
  require(anchors.rows() == positives.rows() && anchors.cols() == positives.cols(),
          "unsup_nce views must be row-aligned");
  const Eigen::Index n = anchors.rows();
  Matrix z(2 * n, anchors.cols());
  z.topRows(n) = anchors;
  z.bottomRows(n) = positives;
  std::vector<int> pair_id(static_cast<std::size_t>(2 * n));
  for (Eigen::Index i = 0; i < n; ++i) pair_id[i] = pair_id[n + i] = static_cast<int>(i);
  ContrastiveResult out = supcon_loss(z, pair_id, temperature);
  if (n == 1) out.warnings.push_back("unsup_nce_loss: single pair, no negatives; loss is 0");
  return out;
}

}  // namespace cat
