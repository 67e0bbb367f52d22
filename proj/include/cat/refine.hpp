#pragma once
// Noisy pseudo-label refinement: exact cosine kNN over projection embeddings,
// neighbour majority vote, and per-class alpha-fractile clean-set selection.

#include "cat/core.hpp"
#include "cat/threshold.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <span>
#include <unordered_map>
#include <vector>

namespace cat {

struct RefineConfig {
  int k_neighbors = 10;
  double alpha = 0.5;
  int min_class_size = 2;
  // Cutoff from all agreement scores pooled instead of per pseudo-class.
  bool global_fractile = false;
  bool enabled = true;

  void validate() const {
    if (k_neighbors < 1) throw ConfigError("refine.k_neighbors must be >= 1");
    if (!(alpha > 0 && alpha < 1)) throw ConfigError("refine.alpha must be in (0, 1)");
    if (min_class_size < 1) throw ConfigError("refine.min_class_size must be >= 1");
  }
};

struct CleanMember {
  std::int64_t example_id = 0;
  int corrected_label = 0;
  double agreement = 0.0;
};

struct CleanSet {
  std::vector<CleanMember> members;
  std::vector<std::int64_t> complement;

  bool empty() const { return members.empty(); }
  std::size_t size() const { return members.size(); }
};

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "cosine similarity of vectors with different lengths");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (!(na > 0) || !(nb > 0)) throw NumericError("cosine similarity of a zero-norm vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

struct NeighborVote {
  int corrected_label = 0;
  double agreement = 0.0;
};

/// For every row, the K most cosine-similar other rows (ties to the lower
/// example id) vote with their pseudo-labels. A tied vote keeps the row's own
/// label; agreement is the fraction of neighbours sharing the row's own label.
inline std::vector<NeighborVote> knn_aggregate(const Matrix& embeddings, std::span<const int> pseudo_labels,
                                               std::span<const std::int64_t> example_ids,
                                               const RefineConfig& cfg) {
  const auto n = static_cast<std::size_t>(embeddings.rows());
  require(pseudo_labels.size() == n && example_ids.size() == n, "refine inputs misaligned");
  if (cfg.k_neighbors < 1 || static_cast<std::size_t>(cfg.k_neighbors) >= n)
    throw ConfigError("k_neighbors = " + std::to_string(cfg.k_neighbors) + " needs at least " +
                      std::to_string(cfg.k_neighbors + 1) + " samples, got " + std::to_string(n));
  const auto k = static_cast<std::size_t>(cfg.k_neighbors);

  // Fixed-order loops: sim(i, j) depends only on the two rows, not on their
  // positions in the matrix.
  const auto d = static_cast<std::size_t>(embeddings.cols());
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < d; ++c) s += embeddings(i, c) * embeddings(i, c);
    if (!(s > 0)) throw NumericError("zero-norm embedding in refinement");
    norms[i] = std::sqrt(s);
  }
  std::vector<double> sim(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += embeddings(i, c) * embeddings(j, c);
      sim[i * n + j] = sim[j * n + i] = dot / (norms[i] * norms[j]);
    }
  }

  int max_label = 0;
  for (int l : pseudo_labels) max_label = std::max(max_label, l);
  std::vector<int> votes(static_cast<std::size_t>(max_label) + 1);

  std::vector<NeighborVote> out(n);
  std::vector<std::size_t> order(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t w = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) order[w++] = j;
    auto closer = [&](std::size_t a, std::size_t b) {
      const double sa = sim[i * n + a];
      const double sb = sim[i * n + b];
      if (sa != sb) return sa > sb;
      return example_ids[a] < example_ids[b];
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), closer);
    std::fill(votes.begin(), votes.end(), 0);
    int same = 0;
    for (std::size_t r = 0; r < k; ++r) {
      const int l = pseudo_labels[order[r]];
      ++votes[l];
      same += l == pseudo_labels[i];
    }
    const int top = *std::max_element(votes.begin(), votes.end());
    const auto winners = std::count(votes.begin(), votes.end(), top);
    int corrected = pseudo_labels[i];
    if (winners == 1) corrected = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    out[i] = {corrected, static_cast<double>(same) / static_cast<double>(k)};
  }
  return out;
}

/// Linear-interpolation quantile of `values` (sorted copy, position alpha * (n - 1)).
inline double fractile(std::vector<double> values, double alpha) {
  require(!values.empty(), "fractile of an empty set");
  std::sort(values.begin(), values.end());
  const double h = alpha * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

/// Members: agreement at or above their pseudo-class cutoff and a corrected
/// label equal to the pseudo-label. Pseudo-classes with fewer than
/// min_class_size samples contribute no members.
inline CleanSet select_clean(std::span<const NeighborVote> votes, std::span<const int> pseudo_labels,
                             std::span<const std::int64_t> example_ids, const RefineConfig& cfg) {
  require(votes.size() == pseudo_labels.size() && votes.size() == example_ids.size(),
          "select_clean inputs misaligned");
  CleanSet out;
  if (votes.empty()) return out;

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < votes.size(); ++i) by_class[pseudo_labels[i]].push_back(i);

  double global_cut = 0.0;
  if (cfg.global_fractile) {
    std::vector<double> all;
    for (const auto& v : votes) all.push_back(v.agreement);
    global_cut = fractile(std::move(all), cfg.alpha);
  }

  std::vector<bool> member(votes.size(), false);
  for (const auto& [label, idx] : by_class) {
    if (static_cast<int>(idx.size()) < cfg.min_class_size) continue;
    double cut = global_cut;
    if (!cfg.global_fractile) {
      std::vector<double> scores;
      scores.reserve(idx.size());
      for (std::size_t i : idx) scores.push_back(votes[i].agreement);
      cut = fractile(std::move(scores), cfg.alpha);
    }
    for (std::size_t i : idx)
      member[i] = votes[i].agreement >= cut && votes[i].corrected_label == pseudo_labels[i];
  }
  for (std::size_t i = 0; i < votes.size(); ++i) {
    if (member[i])
      out.members.push_back({example_ids[i], votes[i].corrected_label, votes[i].agreement});
    else
      out.complement.push_back(example_ids[i]);
  }
  return out;
}

/// Per-row record of one refinement round, in threshold-selected row order.
struct RefinementRound {
  std::vector<std::int64_t> example_ids;
  std::vector<int> pseudo_labels;
  std::vector<NeighborVote> votes;
  CleanSet clean;
};

/// kNN aggregation plus clean selection over the threshold-selected rows of `batch`.
inline RefinementRound refine_round(const Matrix& embeddings, const PseudoLabelBatch& batch,
                                    std::span<const std::int64_t> example_ids, const RefineConfig& cfg) {
  require(static_cast<std::size_t>(embeddings.rows()) == batch.size() && example_ids.size() == batch.size(),
          "refine: embeddings not row-aligned with the pseudo-label batch");
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (batch.selected[i]) rows.push_back(static_cast<Eigen::Index>(i));
  RefinementRound out;
  if (rows.empty()) return out;
  Matrix z(static_cast<Eigen::Index>(rows.size()), embeddings.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    z.row(static_cast<Eigen::Index>(r)) = embeddings.row(rows[r]);
    out.pseudo_labels.push_back(batch.pseudo_label[rows[r]]);
    out.example_ids.push_back(example_ids[rows[r]]);
  }
  out.votes = knn_aggregate(z, out.pseudo_labels, out.example_ids, cfg);
  out.clean = select_clean(out.votes, out.pseudo_labels, out.example_ids, cfg);
  return out;
}

inline CleanSet refine(const Matrix& embeddings, const PseudoLabelBatch& batch,
                       std::span<const std::int64_t> example_ids, const RefineConfig& cfg) {
  return refine_round(embeddings, batch, example_ids, cfg).clean;
}

}  // namespace cat
