#pragma once
// Class- and domain-aware adaptive confidence thresholds.
//
// Each source domain keeps an EMA of the mean max-confidence (the global
// threshold) and an EMA of the batch-mean predicted distribution (the class
// expectations). The local threshold of class c is the global threshold
// scaled by E(c) / max E. A sample is pseudo-labelled when its confidence is
// strictly above the local threshold of its argmax class.

#include "cat/core.hpp"

#include <algorithm>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace cat {

struct ThresholdState {
  double tau_g = 0.0;
  Vector expectations;
  std::int64_t step = 0;
  double lambda = 0.999;
  int num_classes = 0;

  static ThresholdState initial(int num_classes, double lambda) {
    if (num_classes < 1) throw ConfigError("threshold state needs at least one class");
    if (!(lambda > 0 && lambda < 1)) throw ConfigError("EMA lambda must be in (0, 1)");
    ThresholdState s;
    s.num_classes = num_classes;
    s.lambda = lambda;
    s.tau_g = 1.0 / num_classes;
    s.expectations = Vector::Constant(num_classes, 1.0 / num_classes);
    return s;
  }

  bool operator==(const ThresholdState&) const = default;
};

/// tau_g <- lambda tau_g + (1 - lambda) mean(confidences); advances the step.
/// Returns false (state untouched) for an empty batch.
inline bool update_global(ThresholdState& s, std::span<const double> confidences) {
  if (confidences.empty()) return false;
  double sum = 0.0;
  for (double c : confidences) sum += c;
  s.tau_g = s.lambda * s.tau_g + (1.0 - s.lambda) * (sum / static_cast<double>(confidences.size()));
  ++s.step;
  return true;
}

/// E <- lambda E + (1 - lambda) * batch-mean distribution.
inline bool update_expectations(ThresholdState& s, const Matrix& distributions) {
  if (distributions.rows() == 0) return false;
  require(distributions.cols() == s.num_classes, "distribution width differs from class count");
  const Vector mean = distributions.colwise().mean().transpose();
  s.expectations = s.lambda * s.expectations + (1.0 - s.lambda) * mean;
  return true;
}

/// Per-class thresholds tau_g * E(c) / max E. Sets `degenerate` and returns
/// tau_g for every class when max E is not positive.
inline Vector local_thresholds(const ThresholdState& s, bool* degenerate = nullptr) {
  const double top = s.expectations.size() ? s.expectations.maxCoeff() : 0.0;
  if (degenerate) *degenerate = !(top > 0.0);
  if (!(top > 0.0)) return Vector::Constant(s.num_classes, s.tau_g);
  Vector out(s.num_classes);
  for (int c = 0; c < s.num_classes; ++c) {
    // Exact tau_g for the argmax class (x / x == 1 in IEEE arithmetic).
    out[c] = (s.expectations[c] / top) * s.tau_g;
  }
  return out;
}

struct PseudoLabelBatch {
  Matrix distributions;
  std::vector<int> pseudo_label;
  std::vector<double> confidence;
  std::vector<double> threshold;
  std::vector<bool> selected;
  std::vector<int> domain_id;

  std::size_t size() const { return pseudo_label.size(); }

  std::size_t num_selected() const {
    std::size_t n = 0;
    for (bool b : selected) n += b;
    return n;
  }

  void append(const PseudoLabelBatch& o) {
    Matrix merged(distributions.rows() + o.distributions.rows(),
                  std::max(distributions.cols(), o.distributions.cols()));
    if (distributions.rows()) merged.topRows(distributions.rows()) = distributions;
    if (o.distributions.rows()) merged.bottomRows(o.distributions.rows()) = o.distributions;
    distributions = std::move(merged);
    pseudo_label.insert(pseudo_label.end(), o.pseudo_label.begin(), o.pseudo_label.end());
    confidence.insert(confidence.end(), o.confidence.begin(), o.confidence.end());
    threshold.insert(threshold.end(), o.threshold.begin(), o.threshold.end());
    selected.insert(selected.end(), o.selected.begin(), o.selected.end());
    domain_id.insert(domain_id.end(), o.domain_id.begin(), o.domain_id.end());
  }
};

namespace detail {

// argmax with ties to the lowest index
inline std::pair<int, double> arg_max(const Matrix& q, Eigen::Index row) {
  int best = 0;
  double v = q(row, 0);
  for (Eigen::Index c = 1; c < q.cols(); ++c) {
    if (q(row, c) > v) {
      v = q(row, c);
      best = static_cast<int>(c);
    }
  }
  return {best, v};
}

inline PseudoLabelBatch label_batch(const Matrix& q, int domain_id) {
  PseudoLabelBatch b;
  b.distributions = q;
  const auto n = static_cast<std::size_t>(q.rows());
  b.pseudo_label.resize(n);
  b.confidence.resize(n);
  b.threshold.resize(n);
  b.selected.resize(n);
  b.domain_id.assign(n, domain_id);
  for (std::size_t i = 0; i < n; ++i) {
    auto [c, v] = arg_max(q, static_cast<Eigen::Index>(i));
    b.pseudo_label[i] = c;
    b.confidence[i] = v;
  }
  return b;
}

}  // namespace detail

/// Fixed global-threshold selection: selected iff max(q) > tau.
inline PseudoLabelBatch fixed_select(double tau, const Matrix& distributions, int domain_id = 0) {
  if (!(tau > 0 && tau < 1)) throw ConfigError("fixed threshold must be in (0, 1)");
  PseudoLabelBatch b = detail::label_batch(distributions, domain_id);
  for (std::size_t i = 0; i < b.size(); ++i) {
    b.threshold[i] = tau;
    b.selected[i] = b.confidence[i] > tau;
  }
  return b;
}

/// Selection against precomputed per-class thresholds.
inline PseudoLabelBatch select_with(const Vector& thresholds, const Matrix& distributions,
                                    int domain_id) {
  require(distributions.cols() == thresholds.size(), "distribution width differs from class count");
  PseudoLabelBatch b = detail::label_batch(distributions, domain_id);
  for (std::size_t i = 0; i < b.size(); ++i) {
    b.threshold[i] = thresholds[b.pseudo_label[i]];
    b.selected[i] = b.confidence[i] > b.threshold[i];
  }
  return b;
}

/// Owns one ThresholdState per source domain, or a single shared state when
/// per-domain thresholds are switched off.
class ThresholdController {
 public:
  ThresholdController(std::vector<int> domains, int num_classes, double lambda, bool per_domain = true)
      : per_domain_(per_domain) {
    if (domains.empty()) throw ConfigError("threshold controller needs at least one domain");
    for (int d : domains) {
      domains_.push_back(d);
      if (per_domain_) states_.emplace(d, ThresholdState::initial(num_classes, lambda));
    }
    if (!per_domain_) states_.emplace(kShared, ThresholdState::initial(num_classes, lambda));
  }

  bool per_domain() const { return per_domain_; }
  const std::vector<int>& domains() const { return domains_; }

  const ThresholdState& state(int domain_id) const { return states_.at(key(domain_id)); }

  Vector thresholds(int domain_id) {
    bool degenerate = false;
    Vector t = local_thresholds(state(domain_id), &degenerate);
    if (degenerate) warn("all-zero class expectations for domain " + std::to_string(domain_id));
    return t;
  }

  PseudoLabelBatch select(const Matrix& distributions, int domain_id) {
    return select_with(thresholds(domain_id), distributions, domain_id);
  }

  /// Per-domain update. In shared mode the state is updated once per call.
  void update(int domain_id, const Matrix& distributions) {
    ThresholdState& s = states_.at(key(domain_id));
    std::vector<double> conf(static_cast<std::size_t>(distributions.rows()));
    for (Eigen::Index i = 0; i < distributions.rows(); ++i) conf[i] = distributions.row(i).maxCoeff();
    if (!update_global(s, conf)) {
      warn("empty batch for domain " + std::to_string(domain_id) + "; thresholds unchanged");
      return;
    }
    update_expectations(s, distributions);
  }

  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  static constexpr int kShared = -1;

  int key(int domain_id) const {
    if (std::find(domains_.begin(), domains_.end(), domain_id) == domains_.end())
      throw ContractViolation("unknown domain id " + std::to_string(domain_id));
    return per_domain_ ? domain_id : kShared;
  }

  void warn(std::string w) { warnings_.push_back(std::move(w)); }

  bool per_domain_;
  std::vector<int> domains_;
  std::map<int, ThresholdState> states_;
  std::vector<std::string> warnings_;
};

}  // namespace cat
