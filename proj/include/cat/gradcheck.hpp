#pragma once
// Finite-difference verification of every training loss through the full
// network (backbone, classifier head, normalised projector).
//
// Parameters whose perturbation flips a ReLU are skipped (the loss has a kink
// there) and counted in `skipped`.
//
// Relative error per parameter: |analytic - numeric| / max(|analytic|, |numeric|, kGradFloor),
// numeric gradients by the fourth-order central stencil with step kFdStep.

#include "cat/contrastive.hpp"
#include "cat/model.hpp"
#include "cat/trainer.hpp"

#include <functional>
#include <string>
#include <vector>

namespace cat {

inline constexpr double kFdStep = 1e-4;
inline constexpr double kGradFloor = 1e-6;

struct GradcheckSuite {
  std::string name;
  int instances = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double max_rel_error = 0.0;
  std::string worst_block;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckSuite> suites;
  double tolerance = 1e-4;
  bool passed() const {
    for (const auto& s : suites)
      if (!s.passed) return false;
    return !suites.empty();
  }
};

namespace gradcheck_detail {

struct Instance {
  ModelParams params;
  std::function<double(const ModelParams&)> loss;
  std::function<Gradients(const ModelParams&)> grad;
  Matrix inputs;  // every row the loss forwards
};

/// Sign pattern of all backbone pre-activations.
inline std::vector<bool> relu_pattern(const ModelParams& p, const Matrix& x) {
  std::vector<bool> out;
  for (const auto& pre : forward(p, x).pre)
    for (Eigen::Index i = 0; i < pre.size(); ++i) out.push_back(pre.data()[i] > 0.0);
  return out;
}

struct Comparison {
  double worst = 0.0;
  std::string block;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// He-initialised weights with positive biases so that small networks keep live units.
inline ModelParams small_params(const ModelShape& s, Rng& rng) {
  ModelParams p = ModelParams::init(s, rng());
  std::uniform_real_distribution<double> b(0.1, 0.5);
  auto fill = [&](AffineLayer& l) {
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = b(rng);
  };
  for (auto& l : p.backbone) fill(l);
  fill(p.classifier);
  fill(p.projector);
  return p;
}

inline ModelShape small_shape(Rng& rng) {
  std::uniform_int_distribution<int> w(3, 6);
  return {w(rng), {w(rng), w(rng)}, w(rng), w(rng)};
}

/// Max relative error over all parameters and the block it occurred in.
inline Comparison compare(const Instance& inst, bool inject_fault) {
  Gradients analytic = inst.grad(inst.params);
  if (inject_fault) analytic.classifier.weight(0, 0) += 1e-2 * (1.0 + std::abs(analytic.classifier.weight(0, 0)));
  const auto names = inst.params.block_names();
  ModelParams probe = inst.params;
  auto probe_blocks = probe.blocks();
  const auto grad_blocks = analytic.blocks();
  const std::vector<bool> base = relu_pattern(inst.params, inst.inputs);
  Comparison out;
  out.block = names.front();
  for (std::size_t b = 0; b < probe_blocks.size(); ++b) {
    for (std::size_t i = 0; i < probe_blocks[b].size(); ++i) {
      const double keep = probe_blocks[b][i];
      auto at = [&](double offset) {
        probe_blocks[b][i] = keep + offset;
        return inst.loss(probe);
      };
      bool kink = false;
      for (double off : {-2.0 * kFdStep, 2.0 * kFdStep}) {
        probe_blocks[b][i] = keep + off;
        kink = kink || relu_pattern(probe, inst.inputs) != base;
      }
      if (kink) {
        probe_blocks[b][i] = keep;
        ++out.skipped;
        continue;
      }
      const double numeric =
          (8.0 * (at(kFdStep) - at(-kFdStep)) - (at(2.0 * kFdStep) - at(-2.0 * kFdStep))) / (12.0 * kFdStep);
      probe_blocks[b][i] = keep;
      const double a = grad_blocks[b][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kGradFloor});
      ++out.checked;
      if (rel > out.worst) {
        out.worst = rel;
        out.block = names[b];
      }
    }
  }
  return out;
}

inline Matrix zeros_like_rows(Eigen::Index n, Eigen::Index c) { return Matrix::Zero(n, c); }

inline Instance cross_entropy_instance(Rng& rng) {
  const ModelShape s = small_shape(rng);
  Instance inst{small_params(s, rng), {}, {}, {}};
  std::uniform_int_distribution<int> n_rows(2, 7), lab(0, s.num_classes - 1);
  const Matrix x = random_matrix(n_rows(rng), s.input_dim, rng);
  std::vector<int> y(static_cast<std::size_t>(x.rows()));
  for (auto& v : y) v = lab(rng);
  inst.inputs = x;
  inst.loss = [x, y](const ModelParams& p) { return cross_entropy(forward(p, x).logits, y).loss; };
  inst.grad = [x, y](const ModelParams& p) {
    const ForwardTrace tr = forward(p, x);
    return backward(p, tr, cross_entropy(tr.logits, y).grad, zeros_like_rows(x.rows(), tr.embedding.cols()));
  };
  return inst;
}

inline Instance masked_unsup_instance(Rng& rng) {
  const ModelShape s = small_shape(rng);
  Instance inst{small_params(s, rng), {}, {}, {}};
  std::uniform_int_distribution<int> n_rows(3, 8), lab(0, s.num_classes - 1);
  std::bernoulli_distribution keep(0.6);
  const Matrix x = random_matrix(n_rows(rng), s.input_dim, rng);
  std::vector<int> y(static_cast<std::size_t>(x.rows()));
  std::vector<bool> mask(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = lab(rng);
    mask[i] = keep(rng);
  }
  mask[0] = true;
  const double denom = static_cast<double>(y.size());
  inst.inputs = x;
  inst.loss = [=](const ModelParams& p) { return masked_cross_entropy(forward(p, x).logits, y, mask, denom).loss; };
  inst.grad = [=](const ModelParams& p) {
    const ForwardTrace tr = forward(p, x);
    return backward(p, tr, masked_cross_entropy(tr.logits, y, mask, denom).grad,
                    zeros_like_rows(x.rows(), tr.embedding.cols()));
  };
  return inst;
}

inline Instance supcon_instance(Rng& rng) {
  const ModelShape s = small_shape(rng);
  Instance inst{small_params(s, rng), {}, {}, {}};
  std::uniform_int_distribution<int> n_rows(3, 8), lab(0, 2);
  std::uniform_real_distribution<double> temp(0.2, 1.0);
  const Matrix x = random_matrix(n_rows(rng), s.input_dim, rng);
  std::vector<int> y(static_cast<std::size_t>(x.rows()));
  for (auto& v : y) v = lab(rng);
  const double t = temp(rng);
  inst.inputs = x;
  inst.loss = [=](const ModelParams& p) { return supcon_loss(forward(p, x).embedding, y, t).loss; };
  inst.grad = [=](const ModelParams& p) {
    const ForwardTrace tr = forward(p, x);
    return backward(p, tr, zeros_like_rows(x.rows(), tr.logits.cols()), supcon_loss(tr.embedding, y, t).grad);
  };
  return inst;
}

inline Instance nt_xent_instance(Rng& rng) {
  const ModelShape s = small_shape(rng);
  Instance inst{small_params(s, rng), {}, {}, {}};
  std::uniform_int_distribution<int> n_rows(2, 5);
  std::uniform_real_distribution<double> temp(0.2, 1.0);
  const Eigen::Index n = n_rows(rng);
  const Matrix a = random_matrix(n, s.input_dim, rng);
  const Matrix b = a + 0.3 * random_matrix(n, s.input_dim, rng);
  Matrix both(2 * n, s.input_dim);
  both << a, b;
  const double t = temp(rng);
  inst.inputs = both;
  inst.loss = [=](const ModelParams& p) {
    const Matrix z = forward(p, both).embedding;
    return unsup_nce_loss(z.topRows(n), z.bottomRows(n), t).loss;
  };
  inst.grad = [=](const ModelParams& p) {
    const ForwardTrace tr = forward(p, both);
    const ContrastiveResult r = unsup_nce_loss(tr.embedding.topRows(n), tr.embedding.bottomRows(n), t);
    return backward(p, tr, zeros_like_rows(2 * n, tr.logits.cols()), r.grad);
  };
  return inst;
}

/// Random small step: two source domains, random pseudo-labels, mask and clean membership.
inline std::pair<StepBatch, StepTargets> random_step(const ModelShape& s, Rng& rng, bool warmup) {
  std::uniform_int_distribution<int> lab(0, s.num_classes - 1);
  std::bernoulli_distribution coin(0.5);
  StepBatch b;
  b.labeled = random_matrix(4, s.input_dim, rng);
  for (int i = 0; i < 4; ++i) b.labels.push_back(lab(rng));
  b.weak = random_matrix(6, s.input_dim, rng);
  b.strong = b.weak + 0.5 * random_matrix(6, s.input_dim, rng);
  b.domain_rows = {{0, 3}, {3, 6}};
  for (int i = 0; i < 6; ++i) {
    b.unlabeled_domain.push_back(i < 3 ? 0 : 1);
    b.unlabeled_ids.push_back(i);
  }
  StepTargets t;
  t.warmup = warmup;
  t.contrastive_active = !warmup;
  for (int i = 0; i < 6; ++i) {
    t.pseudo_label.push_back(lab(rng));
    t.selected.push_back(coin(rng));
    t.clean_label.push_back(coin(rng) ? lab(rng) : -1);
  }
  return {b, t};
}

inline Instance composite_instance(Rng& rng, bool warmup) {
  const ModelShape s = small_shape(rng);
  Instance inst{small_params(s, rng), {}, {}, {}};
  auto [batch, targets] = random_step(s, rng, warmup);
  TrainConfig cfg;
  cfg.method = Method::cat;
  cfg.contrastive.temperature = 0.5;
  cfg.lambda_u = 0.7;
  cfg.lambda_scl = 1.3;
  cfg.per_domain_unsup_loss = std::bernoulli_distribution(0.5)(rng);
  inst.inputs.resize(batch.labeled.rows() + batch.weak.rows() + batch.strong.rows(), s.input_dim);
  inst.inputs << batch.labeled, batch.weak, batch.strong;
  inst.loss = [=](const ModelParams& p) { return composite_loss(p, batch, targets, cfg).loss.total; };
  inst.grad = [=](const ModelParams& p) { return composite_loss(p, batch, targets, cfg).grads; };
  return inst;
}

}  // namespace gradcheck_detail

/// Runs every suite on `instances` random small networks each.
inline GradcheckReport run_gradcheck(std::uint64_t seed, int instances = 20, double tolerance = 1e-4,
                                     bool inject_fault = false) {
  using namespace gradcheck_detail;
  GradcheckReport report;
  report.tolerance = tolerance;
  struct Suite {
    const char* name;
    std::function<Instance(Rng&)> make;
  };
  const std::vector<Suite> suites = {
      {"cross_entropy", cross_entropy_instance},
      {"masked_unsupervised", masked_unsup_instance},
      {"supcon", supcon_instance},
      {"nt_xent", nt_xent_instance},
      {"composite_main", [](Rng& r) { return composite_instance(r, false); }},
      {"composite_warmup", [](Rng& r) { return composite_instance(r, true); }},
  };
  for (std::size_t k = 0; k < suites.size(); ++k) {
    Rng rng(derive_seed(seed, 0x9c, k));
    GradcheckSuite out;
    out.name = suites[k].name;
    out.worst_block = "-";
    for (int i = 0; i < instances; ++i) {
      const Instance inst = suites[k].make(rng);
      const Comparison c = compare(inst, inject_fault && i == 0);
      out.checked += c.checked;
      out.skipped += c.skipped;
      if (i == 0 || c.worst > out.max_rel_error) {
        out.max_rel_error = c.worst;
        out.worst_block = c.block;
      }
      ++out.instances;
    }
    out.passed = out.max_rel_error <= tolerance && out.checked > 0;
    report.suites.push_back(std::move(out));
  }
  return report;
}

}  // namespace cat
