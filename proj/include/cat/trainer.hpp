#pragma once
// Training loop for CAT and its comparators, leave-one-domain-out evaluation
// and parameter sweeps.
//
// Per main-phase step (method cat):
//   L_T = L_s + lambda_u * L_u + lambda_scl * L_scl
// with L_s the labelled cross-entropy, L_u the cross-entropy of strong views
// against thresholded weak-view pseudo-labels (denominator: all unlabelled rows
// of the step), and L_scl = SupCon over clean-set members in the batch plus
// NT-Xent over the remaining unlabelled rows. The contrastive term is only
// active while the cached clean set is non-empty. Warm-up epochs train
// L_s + NT-Xent over all unlabelled rows and do not touch the thresholds.

#include "cat/augment.hpp"
#include "cat/contrastive.hpp"
#include "cat/datamodel.hpp"
#include "cat/model.hpp"
#include "cat/refine.hpp"
#include "cat/threshold.hpp"

#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace cat {

enum class Method { cat, fixmatch_baseline, supervised_only };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::cat: return "cat";
    case Method::fixmatch_baseline: return "fixmatch_baseline";
    case Method::supervised_only: return "supervised_only";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "cat") return Method::cat;
  if (s == "fixmatch_baseline") return Method::fixmatch_baseline;
  if (s == "supervised_only") return Method::supervised_only;
  throw ConfigError("unknown method '" + s + "' (valid: cat, fixmatch_baseline, supervised_only)");
}

inline const std::vector<Method>& all_methods() {
  static const std::vector<Method> m{Method::cat, Method::fixmatch_baseline, Method::supervised_only};
  return m;
}

struct ThresholdConfig {
  double ema_lambda = 0.99;
  bool per_domain_thresholds = true;
  // Threshold of the fixed-threshold baseline.
  double fixed_tau = 0.95;

  void validate() const {
    if (!(ema_lambda > 0 && ema_lambda < 1)) throw ConfigError("threshold.ema_lambda must be in (0, 1)");
    if (!(fixed_tau > 0 && fixed_tau < 1)) throw ConfigError("threshold.fixed_tau must be in (0, 1)");
  }
};

struct TrainConfig {
  Method method = Method::cat;
  int epochs = 20;
  int steps_per_epoch = 40;
  int labeled_batch_per_domain = 16;
  int unlabeled_ratio = 1;
  double lr = 0.003;
  double momentum = 0.9;
  double lambda_u = 1.0;
  double lambda_scl = 1.0;
  // 0 means once per epoch.
  int refine_interval = 0;
  bool per_domain_unsup_loss = false;
  int labels_per_class = 10;
  // 0 means all non-target domains.
  int num_sources = 0;
  std::vector<int> hidden = {64, 64};
  int proj_dim = 32;
  std::uint64_t seed = 0;

  AugmentConfig augment;
  RefineConfig refine;
  ContrastiveConfig contrastive;
  ThresholdConfig threshold;

  void validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (steps_per_epoch < 1) throw ConfigError("train.steps_per_epoch must be >= 1");
    if (labeled_batch_per_domain < 1) throw ConfigError("train.labeled_batch_per_domain must be >= 1");
    if (unlabeled_ratio < 1) throw ConfigError("train.unlabeled_ratio must be >= 1");
    if (!(lambda_u >= 0)) throw ConfigError("train.lambda_u must be >= 0");
    if (!(lambda_scl >= 0)) throw ConfigError("train.lambda_scl must be >= 0");
    if (refine_interval < 0) throw ConfigError("train.refine_interval must be >= 0");
    if (labels_per_class < 1) throw ConfigError("train.labels_per_class must be >= 1");
    if (num_sources < 0) throw ConfigError("train.num_sources must be >= 0");
    if (proj_dim < 1) throw ConfigError("train.proj_dim must be >= 1");
    for (int h : hidden)
      if (h < 1) throw ConfigError("train.hidden widths must be >= 1");
    if (!(lr >= 0)) throw ConfigError("train.lr must be >= 0");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train.momentum must be in [0, 1)");
    augment.validate();
    refine.validate();
    contrastive.validate();
    threshold.validate();
  }

  int effective_refine_interval() const { return refine_interval > 0 ? refine_interval : steps_per_epoch; }

  int warmup_epochs() const { return method == Method::cat ? contrastive.warmup_epochs : 0; }
};

struct LossComponents {
  double supervised = 0.0;
  double unsupervised = 0.0;
  double contrastive = 0.0;
  double total = 0.0;
};

struct PseudoStats {
  int domain = 0;
  std::int64_t seen = 0;
  std::int64_t selected = 0;
  std::int64_t with_truth = 0;  // selected and ground truth known
  std::int64_t correct = 0;

  double yield() const { return seen ? static_cast<double>(selected) / static_cast<double>(seen) : 0.0; }
  std::optional<double> precision() const {
    if (!with_truth) return std::nullopt;
    return static_cast<double>(correct) / static_cast<double>(with_truth);
  }

  PseudoStats& operator+=(const PseudoStats& o) {
    seen += o.seen;
    selected += o.selected;
    with_truth += o.with_truth;
    correct += o.correct;
    return *this;
  }
};

struct ThresholdSnapshot {
  int domain = 0;
  double tau_g = 0.0;
  std::vector<double> expectations;
};

struct EpochMetrics {
  int epoch = 0;
  bool warmup = false;
  double target_accuracy = 0.0;
  double source_accuracy = 0.0;
  std::vector<PseudoStats> pseudo;
  std::size_t clean_size = 0;
  std::optional<double> clean_accuracy;
  LossComponents loss;  // mean over the epoch's steps
  std::vector<ThresholdSnapshot> thresholds;
};

struct ThresholdLogRow {
  std::int64_t step = 0;
  int domain = 0;
  double tau_g = 0.0;
  std::vector<double> expectations;  // empty for the fixed-threshold baseline
  double yield = 0.0;
  std::optional<double> precision;
};

/// Everything a step saw, for observers. weak_distributions[k] belongs to
/// source_domains[k].
struct StepRecord {
  std::int64_t step = 0;
  int epoch = 0;
  bool warmup = false;
  std::vector<int> source_domains;
  std::vector<Matrix> weak_distributions;
  std::vector<PseudoLabelBatch> selections;
  LossComponents loss;
};

using StepObserver = std::function<void(const StepRecord&)>;

struct FoldResult {
  int held_out_domain = 0;
  std::vector<int> source_domains;
  std::vector<EpochMetrics> history;
  double final_score = 0.0;
  std::vector<ThresholdLogRow> threshold_log;
  ModelParams params;
  std::optional<RefinementRound> last_refinement;
  std::vector<std::string> warnings;
};

/// Inputs of one step. Rows of the unlabelled matrices are grouped by source
/// domain, in source_domains order.
struct StepBatch {
  Matrix labeled;
  std::vector<int> labels;
  Matrix weak;
  Matrix strong;
  std::vector<int> unlabeled_domain;
  std::vector<std::int64_t> unlabeled_ids;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> domain_rows;  // [begin, end) per source domain
};

/// Targets held fixed while differentiating a step (pseudo-labels and masks are
/// not differentiated through).
struct StepTargets {
  bool warmup = false;
  std::vector<int> pseudo_label;
  std::vector<bool> selected;
  // Clean-set corrected label per unlabelled row, -1 when not a member.
  std::vector<int> clean_label;
  bool contrastive_active = false;
};

struct StepLoss {
  LossComponents loss;
  Gradients grads;
};

/// L_T and its gradient for fixed targets.
inline StepLoss composite_loss(const ModelParams& params, const StepBatch& batch, const StepTargets& targets,
                               const TrainConfig& cfg) {
  StepLoss out;
  const ForwardTrace lab = forward(params, batch.labeled);
  const LossAndGrad ce = cross_entropy(lab.logits, batch.labels);
  out.loss.supervised = ce.loss;
  out.grads = backward(params, lab, ce.grad, Matrix::Zero(lab.embedding.rows(), lab.embedding.cols()));

  const bool uses_unlabeled = cfg.method != Method::supervised_only && batch.weak.rows() > 0;
  if (uses_unlabeled) {
    const Eigen::Index m = batch.weak.rows();
    Matrix both(2 * m, batch.weak.cols());
    both.topRows(m) = batch.weak;
    both.bottomRows(m) = batch.strong;
    const ForwardTrace un = forward(params, both);
    Matrix d_logits = Matrix::Zero(2 * m, un.logits.cols());
    Matrix d_z = Matrix::Zero(2 * m, un.embedding.cols());

    if (!targets.warmup) {
      const Matrix strong_logits = un.logits.bottomRows(m);
      if (cfg.per_domain_unsup_loss) {
        const double share = 1.0 / static_cast<double>(batch.domain_rows.size());
        for (auto [b, e] : batch.domain_rows) {
          if (e == b) continue;
          std::vector<int> lbl(targets.pseudo_label.begin() + b, targets.pseudo_label.begin() + e);
          std::vector<bool> msk(targets.selected.begin() + b, targets.selected.begin() + e);
          const LossAndGrad lu =
              masked_cross_entropy(strong_logits.middleRows(b, e - b), lbl, msk, static_cast<double>(e - b));
          out.loss.unsupervised += share * lu.loss;
          d_logits.middleRows(m + b, e - b) = (cfg.lambda_u * share) * lu.grad;
        }
      } else {
        const LossAndGrad lu =
            masked_cross_entropy(strong_logits, targets.pseudo_label, targets.selected, static_cast<double>(m));
        out.loss.unsupervised = lu.loss;
        d_logits.bottomRows(m) = cfg.lambda_u * lu.grad;
      }
    }

    const Matrix zw = un.embedding.topRows(m);
    const Matrix zs = un.embedding.bottomRows(m);
    if (targets.warmup && cfg.method == Method::cat) {
      const ContrastiveResult nce = unsup_nce_loss(zw, zs, cfg.contrastive.temperature);
      out.loss.contrastive = nce.loss;
      d_z.topRows(m) = cfg.lambda_scl * nce.grad.topRows(m);
      d_z.bottomRows(m) = cfg.lambda_scl * nce.grad.bottomRows(m);
    } else if (targets.contrastive_active) {
      std::vector<Eigen::Index> members, rest;
      for (Eigen::Index i = 0; i < m; ++i) (targets.clean_label[i] >= 0 ? members : rest).push_back(i);
      if (!members.empty()) {
        const auto p = static_cast<Eigen::Index>(members.size());
        Matrix z(2 * p, zw.cols());
        std::vector<int> lbl(static_cast<std::size_t>(2 * p));
        for (Eigen::Index r = 0; r < p; ++r) {
          z.row(r) = zw.row(members[r]);
          z.row(p + r) = zs.row(members[r]);
          lbl[r] = lbl[p + r] = targets.clean_label[members[r]];
        }
        const ContrastiveResult sc = supcon_loss(z, lbl, cfg.contrastive.temperature);
        out.loss.contrastive += sc.loss;
        for (Eigen::Index r = 0; r < p; ++r) {
          d_z.row(members[r]) += cfg.lambda_scl * sc.grad.row(r);
          d_z.row(m + members[r]) += cfg.lambda_scl * sc.grad.row(p + r);
        }
      }
      if (!rest.empty()) {
        const auto q = static_cast<Eigen::Index>(rest.size());
        Matrix a(q, zw.cols()), b(q, zw.cols());
        for (Eigen::Index r = 0; r < q; ++r) {
          a.row(r) = zw.row(rest[r]);
          b.row(r) = zs.row(rest[r]);
        }
        const ContrastiveResult nce = unsup_nce_loss(a, b, cfg.contrastive.temperature);
        out.loss.contrastive += nce.loss;
        for (Eigen::Index r = 0; r < q; ++r) {
          d_z.row(rest[r]) += cfg.lambda_scl * nce.grad.row(r);
          d_z.row(m + rest[r]) += cfg.lambda_scl * nce.grad.row(q + r);
        }
      }
    }
    out.grads += backward(params, un, d_logits, d_z);
  }
  out.loss.total = out.loss.supervised + cfg.lambda_u * out.loss.unsupervised + cfg.lambda_scl * out.loss.contrastive;
  return out;
}

namespace detail {

// Cycles through a shuffled index list, reshuffling at each wrap.
class CyclicSampler {
 public:
  explicit CyclicSampler(std::size_t n) : order_(n) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    pos_ = n;
  }

  std::size_t next(Rng& rng) {
    if (pos_ >= order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_;
};

inline Matrix stack_features(const std::vector<const Vector*>& rows, int dim) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i]->transpose();
  return m;
}

inline double accuracy(const std::vector<int>& predicted, const std::vector<std::optional<int>>& truth) {
  std::size_t n = 0, ok = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (!truth[i]) continue;
    ++n;
    ok += predicted[i] == *truth[i];
  }
  return n ? static_cast<double>(ok) / static_cast<double>(n) : 0.0;
}

}  // namespace detail

/// Training state for one leave-one-domain-out fold.
class FoldTrainer {
 public:
  FoldTrainer(const SsdgSplit& split, TrainConfig cfg)
      : split_(split),
        cfg_((cfg.validate(), std::move(cfg))),
        augmenter_(cfg_.augment),
        params_(ModelParams::init(model_shape(split, cfg_), derive_seed(cfg_.seed, 0x3de1))),
        optimizer_(cfg_.lr, cfg_.momentum),
        thresholds_(split.source_domains, split.num_classes, cfg_.threshold.ema_lambda,
                    cfg_.threshold.per_domain_thresholds),
        labeled_rng_(derive_seed(cfg_.seed, 0x1abe)),
        unlabeled_rng_(derive_seed(cfg_.seed, 0x0b1a)) {
    for (int d : split_.source_domains) {
      std::vector<std::size_t> lab, unl;
      for (std::size_t i = 0; i < split_.labeled.size(); ++i)
        if (split_.labeled[i].domain_id == d) lab.push_back(i);
      for (std::size_t i = 0; i < split_.unlabeled.size(); ++i)
        if (split_.unlabeled[i].domain_id == d) unl.push_back(i);
      if (lab.empty()) throw DataError("source domain " + std::to_string(d) + " has no labelled examples");
      labeled_by_domain_.push_back(std::move(lab));
      unlabeled_by_domain_.push_back(std::move(unl));
      labeled_samplers_.emplace_back(labeled_by_domain_.back().size());
      unlabeled_samplers_.emplace_back(unlabeled_by_domain_.back().size());
    }
    std::vector<const Vector*> rows;
    for (const auto& ex : split_.target) {
      rows.push_back(&ex.features);
      target_truth_.push_back(ex.label);
    }
    target_x_ = detail::stack_features(rows, split_.feature_dim);
    rows.clear();
    for (const auto& ex : split_.unlabeled) {
      rows.push_back(&ex.features);
      unlabeled_ids_.push_back(ex.example_id);
    }
    unlabeled_x_ = detail::stack_features(rows, split_.feature_dim);
  }

  static ModelShape model_shape(const SsdgSplit& split, const TrainConfig& cfg) {
    return {split.feature_dim, cfg.hidden, split.num_classes, cfg.proj_dim};
  }

  const TrainConfig& config() const { return cfg_; }
  const ModelParams& params() const { return params_; }
  ModelParams& mutable_params() { return params_; }
  const ThresholdController& thresholds() const { return thresholds_; }
  const CleanSet& clean_set() const { return clean_; }
  const std::optional<RefinementRound>& last_refinement() const { return last_round_; }
  void set_clean_set(CleanSet c) {
    clean_ = std::move(c);
    clean_label_.clear();
    for (const auto& mbr : clean_.members) clean_label_[mbr.example_id] = mbr.corrected_label;
  }

  /// Draws labelled rows (weakly augmented) and, unless supervised-only, the
  /// weak/strong views of unlabelled rows for every source domain.
  StepBatch draw_batch() {
    StepBatch b;
    const int dim = split_.feature_dim;
    const auto nd = split_.source_domains.size();
    const int per_lab = cfg_.labeled_batch_per_domain;
    b.labeled.resize(static_cast<Eigen::Index>(nd) * per_lab, dim);
    Eigen::Index r = 0;
    for (std::size_t k = 0; k < nd; ++k) {
      for (int i = 0; i < per_lab; ++i, ++r) {
        const Example& ex = split_.labeled[labeled_by_domain_[k][labeled_samplers_[k].next(labeled_rng_)]];
        b.labeled.row(r) = augmenter_.weak(ex.features, labeled_rng_).transpose();
        b.labels.push_back(*ex.label);
      }
    }
    if (cfg_.method == Method::supervised_only) return b;
    const int per_unl = cfg_.unlabeled_ratio * per_lab;
    Eigen::Index total = 0;
    for (std::size_t k = 0; k < nd; ++k) total += unlabeled_by_domain_[k].empty() ? 0 : per_unl;
    b.weak.resize(total, dim);
    b.strong.resize(total, dim);
    r = 0;
    for (std::size_t k = 0; k < nd; ++k) {
      const Eigen::Index begin = r;
      if (!unlabeled_by_domain_[k].empty()) {
        for (int i = 0; i < per_unl; ++i, ++r) {
          const UnlabeledExample& ex =
              split_.unlabeled[unlabeled_by_domain_[k][unlabeled_samplers_[k].next(unlabeled_rng_)]];
          b.weak.row(r) = augmenter_.weak(ex.features, unlabeled_rng_).transpose();
          b.strong.row(r) = augmenter_.strong(ex.features, unlabeled_rng_).transpose();
          b.unlabeled_domain.push_back(ex.domain_id);
          b.unlabeled_ids.push_back(ex.example_id);
        }
      }
      b.domain_rows.emplace_back(begin, r);
    }
    return b;
  }

  /// Runs one optimisation step on `batch` and updates thresholds.
  StepRecord train_step(const StepBatch& batch, bool warmup) {
    StepRecord rec;
    rec.step = step_;
    rec.warmup = warmup;
    rec.source_domains = split_.source_domains;

    StepTargets targets;
    targets.warmup = warmup;
    const Eigen::Index m = batch.weak.rows();
    const bool pseudo = cfg_.method != Method::supervised_only && !warmup && m > 0;
    if (pseudo) {
      const Matrix q = softmax_rows(forward(params_, batch.weak).logits);
      targets.pseudo_label.assign(static_cast<std::size_t>(m), 0);
      targets.selected.assign(static_cast<std::size_t>(m), false);
      for (std::size_t k = 0; k < batch.domain_rows.size(); ++k) {
        auto [b, e] = batch.domain_rows[k];
        const int d = split_.source_domains[k];
        Matrix qd = q.middleRows(b, e - b);
        PseudoLabelBatch sel = cfg_.method == Method::cat ? thresholds_.select(qd, d)
                                                          : fixed_select(cfg_.threshold.fixed_tau, qd, d);
        for (Eigen::Index i = 0; i < e - b; ++i) {
          targets.pseudo_label[b + i] = sel.pseudo_label[i];
          targets.selected[b + i] = sel.selected[i];
        }
        rec.weak_distributions.push_back(std::move(qd));
        rec.selections.push_back(std::move(sel));
      }
    }
    if (cfg_.method == Method::cat && !warmup && !clean_.empty() && cfg_.refine.enabled) {
      targets.contrastive_active = true;
      targets.clean_label.assign(static_cast<std::size_t>(m), -1);
      for (Eigen::Index i = 0; i < m; ++i) {
        auto it = clean_label_.find(batch.unlabeled_ids[i]);
        if (it != clean_label_.end()) targets.clean_label[i] = it->second;
      }
    }

    StepLoss sl = composite_loss(params_, batch, targets, cfg_);
    rec.loss = sl.loss;
    if (!std::isfinite(sl.loss.total) || !sl.grads.all_finite()) throw NumericError(diagnostic(batch, sl.loss));
    optimizer_.step(params_, sl.grads);

    if (pseudo && cfg_.method == Method::cat) {
      if (thresholds_.per_domain()) {
        for (std::size_t k = 0; k < rec.weak_distributions.size(); ++k)
          thresholds_.update(split_.source_domains[k], rec.weak_distributions[k]);
      } else {
        Matrix pooled(m, split_.num_classes);
        Eigen::Index r = 0;
        for (const auto& qd : rec.weak_distributions) {
          pooled.middleRows(r, qd.rows()) = qd;
          r += qd.rows();
        }
        thresholds_.update(split_.source_domains.front(), pooled);
      }
    }
    ++step_;
    return rec;
  }

  /// Recomputes the clean set from the current model over every unlabelled
  /// example that passes the current thresholds (thresholds are not updated).
  void refresh_clean_set() {
    CleanSet fresh;
    if (unlabeled_x_.rows() > 0) {
      const ForwardTrace tr = forward(params_, unlabeled_x_);
      PseudoLabelBatch all;
      for (int d : split_.source_domains) {
        std::vector<Eigen::Index> rows;
        for (std::size_t i = 0; i < split_.unlabeled.size(); ++i)
          if (split_.unlabeled[i].domain_id == d) rows.push_back(static_cast<Eigen::Index>(i));
        Matrix q(static_cast<Eigen::Index>(rows.size()), tr.probs.cols());
        for (std::size_t r = 0; r < rows.size(); ++r) q.row(static_cast<Eigen::Index>(r)) = tr.probs.row(rows[r]);
        PseudoLabelBatch sel = thresholds_.select(q, d);
        all.append(sel);
      }
      // Rows of `all` follow domain order; rebuild the matching embedding/id order.
      Matrix z(tr.embedding.rows(), tr.embedding.cols());
      std::vector<std::int64_t> ids;
      Eigen::Index r = 0;
      for (int d : split_.source_domains)
        for (std::size_t i = 0; i < split_.unlabeled.size(); ++i)
          if (split_.unlabeled[i].domain_id == d) {
            z.row(r++) = tr.embedding.row(static_cast<Eigen::Index>(i));
            ids.push_back(split_.unlabeled[i].example_id);
          }
      z.conservativeResize(r, Eigen::NoChange);
      if (all.num_selected() > static_cast<std::size_t>(cfg_.refine.k_neighbors)) {
        last_round_ = refine_round(z, all, ids, cfg_.refine);
        fresh = last_round_->clean;
      } else {
        warnings_.push_back("refinement skipped at step " + std::to_string(step_) + ": only " +
                            std::to_string(all.num_selected()) + " selected samples");
      }
    }
    set_clean_set(std::move(fresh));
  }

  double target_accuracy() const {
    if (target_x_.rows() == 0) return 0.0;
    return detail::accuracy(predict(params_, target_x_), target_truth_);
  }

  /// Accuracy on the unlabelled source examples, scored with the hidden labels.
  double source_accuracy() const {
    if (unlabeled_x_.rows() == 0) return 0.0;
    std::vector<std::optional<int>> truth;
    for (auto id : unlabeled_ids_) truth.push_back(split_.evaluation_labels().label_of(id));
    return detail::accuracy(predict(params_, unlabeled_x_), truth);
  }

  std::optional<double> clean_set_accuracy() const {
    std::size_t n = 0, ok = 0;
    for (const auto& mbr : clean_.members) {
      auto truth = split_.evaluation_labels().label_of(mbr.example_id);
      if (!truth) continue;
      ++n;
      ok += *truth == mbr.corrected_label;
    }
    if (!n) return std::nullopt;
    return static_cast<double>(ok) / static_cast<double>(n);
  }

  /// Full run: warm-up epochs, then the main phase with refinement refreshed
  /// every refine_interval main steps (starting with the first).
  FoldResult run(const StepObserver& observer = {}) {
    FoldResult res;
    res.held_out_domain = split_.held_out_domain;
    res.source_domains = split_.source_domains;
    const int warm = std::min(cfg_.warmup_epochs(), cfg_.epochs);
    const int interval = cfg_.effective_refine_interval();
    const bool refining = cfg_.method == Method::cat && cfg_.refine.enabled;
    std::int64_t main_step = 0;
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      const bool warmup = epoch < warm;
      EpochMetrics em;
      em.epoch = epoch;
      em.warmup = warmup;
      em.pseudo.resize(split_.source_domains.size());
      for (std::size_t k = 0; k < em.pseudo.size(); ++k) em.pseudo[k].domain = split_.source_domains[k];
      for (int s = 0; s < cfg_.steps_per_epoch; ++s) {
        if (!warmup && refining && main_step % interval == 0) refresh_clean_set();
        const StepBatch batch = draw_batch();
        StepRecord rec = train_step(batch, warmup);
        rec.epoch = epoch;
        if (!warmup) ++main_step;
        em.loss.supervised += rec.loss.supervised;
        em.loss.unsupervised += rec.loss.unsupervised;
        em.loss.contrastive += rec.loss.contrastive;
        em.loss.total += rec.loss.total;
        for (std::size_t k = 0; k < rec.selections.size(); ++k) {
          const PseudoStats st = score(rec.selections[k], batch, k);
          em.pseudo[k] += st;
          log_thresholds(res, rec, k, st);
        }
        if (observer) observer(rec);
      }
      const double steps = cfg_.steps_per_epoch;
      em.loss.supervised /= steps;
      em.loss.unsupervised /= steps;
      em.loss.contrastive /= steps;
      em.loss.total /= steps;
      em.target_accuracy = target_accuracy();
      em.source_accuracy = source_accuracy();
      em.clean_size = clean_.size();
      em.clean_accuracy = clean_set_accuracy();
      if (cfg_.method == Method::cat) {
        for (int d : split_.source_domains) {
          const ThresholdState& st = thresholds_.state(d);
          em.thresholds.push_back({d, st.tau_g, {st.expectations.begin(), st.expectations.end()}});
        }
      }
      res.history.push_back(std::move(em));
    }
    const std::size_t last = std::min<std::size_t>(5, res.history.size());
    if (res.history.size() < 5)
      warnings_.push_back("fewer than 5 epochs; final score averages all " + std::to_string(last) + " epochs");
    double sum = 0.0;
    for (std::size_t i = res.history.size() - last; i < res.history.size(); ++i) sum += res.history[i].target_accuracy;
    res.final_score = sum / static_cast<double>(last);
    res.params = params_;
    res.last_refinement = last_round_;
    res.warnings = warnings_;
    for (const auto& w : thresholds_.warnings()) res.warnings.push_back(w);
    return res;
  }

 private:
  PseudoStats score(const PseudoLabelBatch& sel, const StepBatch& batch, std::size_t k) const {
    PseudoStats st;
    st.domain = split_.source_domains[k];
    const Eigen::Index begin = batch.domain_rows[k].first;
    st.seen = static_cast<std::int64_t>(sel.size());
    for (std::size_t i = 0; i < sel.size(); ++i) {
      if (!sel.selected[i]) continue;
      ++st.selected;
      auto truth = split_.evaluation_labels().label_of(batch.unlabeled_ids[begin + static_cast<Eigen::Index>(i)]);
      if (!truth) continue;
      ++st.with_truth;
      st.correct += *truth == sel.pseudo_label[i];
    }
    return st;
  }

  void log_thresholds(FoldResult& res, const StepRecord& rec, std::size_t k, const PseudoStats& st) const {
    ThresholdLogRow row;
    row.step = rec.step;
    row.domain = split_.source_domains[k];
    if (cfg_.method == Method::cat) {
      const ThresholdState& s = thresholds_.state(row.domain);
      row.tau_g = s.tau_g;
      row.expectations.assign(s.expectations.begin(), s.expectations.end());
    } else {
      row.tau_g = cfg_.threshold.fixed_tau;
    }
    row.yield = st.yield();
    row.precision = st.precision();
    res.threshold_log.push_back(std::move(row));
  }

  std::string diagnostic(const StepBatch& batch, const LossComponents& l) const {
    std::ostringstream os;
    os.precision(17);
    os << "non-finite loss at step " << step_ << " (L_s=" << l.supervised << ", L_u=" << l.unsupervised
       << ", L_scl=" << l.contrastive << ", L_T=" << l.total << ")\n";
    os << "labelled batch:\n" << batch.labeled << "\nlabels:";
    for (int y : batch.labels) os << ' ' << y;
    os << "\nweak views:\n" << batch.weak << "\nstrong views:\n" << batch.strong << '\n';
    return os.str();
  }

  const SsdgSplit& split_;
  TrainConfig cfg_;
  Augmenter augmenter_;
  ModelParams params_;
  SgdOptimizer optimizer_;
  ThresholdController thresholds_;
  Rng labeled_rng_;
  Rng unlabeled_rng_;
  std::vector<std::vector<std::size_t>> labeled_by_domain_;
  std::vector<std::vector<std::size_t>> unlabeled_by_domain_;
  std::vector<detail::CyclicSampler> labeled_samplers_;
  std::vector<detail::CyclicSampler> unlabeled_samplers_;
  Matrix target_x_;
  std::vector<std::optional<int>> target_truth_;
  Matrix unlabeled_x_;
  std::vector<std::int64_t> unlabeled_ids_;
  CleanSet clean_;
  std::optional<RefinementRound> last_round_;
  std::unordered_map<std::int64_t, int> clean_label_;
  std::vector<std::string> warnings_;
  std::int64_t step_ = 0;
};

inline FoldResult run_fold(const SsdgSplit& split, const TrainConfig& cfg, const StepObserver& observer = {}) {
  FoldTrainer trainer(split, cfg);
  return trainer.run(observer);
}

struct LodoResult {
  std::vector<FoldResult> folds;
  double aggregate = 0.0;
};

inline FoldOptions fold_options(const TrainConfig& cfg) {
  return {cfg.labels_per_class, cfg.num_sources, cfg.seed};
}

/// Every domain held out once; aggregate is the mean of the fold scores.
inline LodoResult run_lodo(const DomainDataset& dataset, const TrainConfig& cfg) {
  cfg.validate();
  dataset.validate();
  const auto splits = build_lodo_folds(dataset, fold_options(cfg));
  LodoResult out;
  double sum = 0.0;
  for (std::size_t k = 0; k < splits.size(); ++k) {
    TrainConfig fold_cfg = cfg;
    fold_cfg.seed = derive_seed(cfg.seed, 0xf01d, k);
    out.folds.push_back(run_fold(splits[k], fold_cfg));
    sum += out.folds.back().final_score;
  }
  out.aggregate = sum / static_cast<double>(out.folds.size());
  return out;
}

enum class SweepAxis { labels_per_class, num_sources, method };

inline SweepAxis parse_axis(const std::string& s) {
  if (s == "labels" || s == "labels_per_class") return SweepAxis::labels_per_class;
  if (s == "K" || s == "k" || s == "num_sources") return SweepAxis::num_sources;
  if (s == "method") return SweepAxis::method;
  throw ConfigError("unknown sweep axis '" + s + "' (valid: labels_per_class, num_sources, method)");
}

inline std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::labels_per_class: return "labels_per_class";
    case SweepAxis::num_sources: return "num_sources";
    case SweepAxis::method: return "method";
  }
  return "?";
}

struct SweepRow {
  std::string value;
  Method method = Method::cat;
  std::vector<int> held_out;
  std::vector<double> fold_scores;
  double average = 0.0;
};

struct SweepTable {
  SweepAxis axis = SweepAxis::method;
  std::vector<SweepRow> rows;
};

/// One run_lodo per (axis value, method). For the method axis the values are
/// the methods themselves and `methods` is ignored.
inline SweepTable sweep(const DomainDataset& dataset, const TrainConfig& base, SweepAxis axis,
                        const std::vector<std::string>& values,
                        const std::vector<Method>& methods = all_methods()) {
  if (values.empty()) throw ConfigError("sweep needs at least one axis value");
  auto parse_int = [](const std::string& v, const char* what) {
    std::size_t used = 0;
    int x = 0;
    try {
      x = std::stoi(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size()) throw ConfigError(std::string("invalid ") + what + " value '" + v + "'");
    return x;
  };
  SweepTable table;
  table.axis = axis;
  struct Cell {
    std::string value;
    TrainConfig cfg;
  };
  std::vector<Cell> cells;
  for (const auto& v : values) {
    if (axis == SweepAxis::method) {
      TrainConfig c = base;
      c.method = parse_method(v);
      cells.push_back({v, c});
      continue;
    }
    const int x = parse_int(v, axis == SweepAxis::labels_per_class ? "labels_per_class" : "num_sources");
    if (axis == SweepAxis::labels_per_class && x < 1)
      throw ConfigError("invalid labels_per_class value '" + v + "' (valid: integers >= 1)");
    if (axis == SweepAxis::num_sources && (x < 1 || x > dataset.num_domains() - 1))
      throw ConfigError("invalid num_sources value '" + v + "' (valid: 1.." +
                        std::to_string(dataset.num_domains() - 1) + ")");
    for (Method m : methods) {
      TrainConfig c = base;
      c.method = m;
      (axis == SweepAxis::labels_per_class ? c.labels_per_class : c.num_sources) = x;
      cells.push_back({v, c});
    }
  }
  for (auto& cell : cells) {
    const LodoResult r = run_lodo(dataset, cell.cfg);
    SweepRow row;
    row.value = cell.value;
    row.method = cell.cfg.method;
    for (const auto& f : r.folds) {
      row.held_out.push_back(f.held_out_domain);
      row.fold_scores.push_back(f.final_score);
    }
    row.average = r.aggregate;
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace cat
