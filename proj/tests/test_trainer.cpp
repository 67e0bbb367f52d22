#include "cat/gradcheck.hpp"
#include "cat/report.hpp"
#include "cat/synthgen.hpp"
#include "cat/trainer.hpp"
#include "oracles.hpp"

#include <catch_amalgamated.hpp>

using namespace cat;
using Catch::Approx;

namespace {

DomainDataset tiny_dataset(int domains = 3, std::uint64_t seed = 0) {
  SynthConfig c;
  c.num_classes = 3;
  c.num_domains = domains;
  c.feature_dim = 6;
  c.samples_per_class_per_domain = 30;
  c.seed = seed;
  return generate(c);
}

TrainConfig tiny_config(Method m = Method::cat) {
  TrainConfig cfg;
  cfg.method = m;
  cfg.epochs = 3;
  cfg.steps_per_epoch = 6;
  cfg.labeled_batch_per_domain = 4;
  cfg.hidden = {12};
  cfg.proj_dim = 5;
  cfg.labels_per_class = 4;
  cfg.refine.k_neighbors = 5;
  cfg.lr = 0.01;
  return cfg;
}

SsdgSplit tiny_split(const DomainDataset& ds, const TrainConfig& cfg, int target = 0) {
  return build_fold(ds, target, fold_options(cfg));
}

Matrix as_row(const std::vector<double>& v) {
  Matrix m(1, static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = v[i];
  return m;
}

}  // namespace

TEST_CASE("zero unsupervised weight and no clean set give the supervised gradient", "[trainer]") {
  const auto ds = tiny_dataset();
  TrainConfig cat_cfg = tiny_config(Method::cat);
  cat_cfg.lambda_u = 0.0;
  const auto split = tiny_split(ds, cat_cfg);
  FoldTrainer trainer(split, cat_cfg);
  const StepBatch batch = trainer.draw_batch();
  StepTargets targets;
  const auto q = softmax_rows(forward(trainer.params(), batch.weak).logits);
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    targets.pseudo_label.push_back(detail::arg_max(q, i).first);
    targets.selected.push_back(true);
  }
  const StepLoss with_unlabeled = composite_loss(trainer.params(), batch, targets, cat_cfg);
  TrainConfig sup_cfg = cat_cfg;
  sup_cfg.method = Method::supervised_only;
  const StepLoss supervised = composite_loss(trainer.params(), batch, {}, sup_cfg);
  CHECK(with_unlabeled.grads.flatten() == supervised.grads.flatten());
  CHECK(with_unlabeled.loss.total == supervised.loss.total);
}

TEST_CASE("cat without unlabelled terms retraces supervised-only training", "[trainer]") {
  const auto ds = tiny_dataset();
  TrainConfig cat_cfg = tiny_config(Method::cat);
  cat_cfg.lambda_u = 0.0;
  cat_cfg.contrastive.warmup_epochs = 0;
  cat_cfg.refine.enabled = false;
  TrainConfig sup_cfg = cat_cfg;
  sup_cfg.method = Method::supervised_only;
  const auto split = tiny_split(ds, cat_cfg);
  const FoldResult a = run_fold(split, cat_cfg);
  const FoldResult b = run_fold(split, sup_cfg);
  CHECK(a.params.flatten() == b.params.flatten());
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e)
    CHECK(a.history[e].target_accuracy == b.history[e].target_accuracy);
}

TEST_CASE("no selected sample gives zero unsupervised loss while thresholds update", "[trainer]") {
  const auto ds = tiny_dataset();
  TrainConfig cfg = tiny_config(Method::cat);
  cfg.contrastive.warmup_epochs = 0;
  const auto split = tiny_split(ds, cfg);
  FoldTrainer trainer(split, cfg);
  // Uniform predictions: confidence 1/C never exceeds the initial threshold 1/C.
  trainer.mutable_params().classifier.weight.setZero();
  trainer.mutable_params().classifier.bias.setZero();
  const auto before = trainer.thresholds().state(1);
  const StepRecord rec = trainer.train_step(trainer.draw_batch(), false);
  for (const auto& sel : rec.selections) CHECK(sel.num_selected() == 0);
  CHECK(rec.loss.unsupervised == 0.0);
  const auto& after = trainer.thresholds().state(1);
  CHECK(after.step == before.step + 1);
  CHECK(after.tau_g == Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("warm-up steps leave thresholds alone", "[trainer]") {
  const auto ds = tiny_dataset();
  TrainConfig cfg = tiny_config(Method::cat);
  const auto split = tiny_split(ds, cfg);
  FoldTrainer trainer(split, cfg);
  const StepRecord rec = trainer.train_step(trainer.draw_batch(), true);
  CHECK(rec.selections.empty());
  CHECK(rec.loss.unsupervised == 0.0);
  CHECK(rec.loss.contrastive > 0.0);
  for (int d : split.source_domains) CHECK(trainer.thresholds().state(d).step == 0);
}

TEST_CASE("composite loss gradient matches finite differences", "[trainer]") {
  for (bool warmup : {false, true}) {
    Rng rng(warmup ? 5 : 6);
    const ModelShape shape{4, {6, 5}, 3, 4};
    ModelParams p = gradcheck_detail::small_params(shape, rng);
    auto [batch, targets] = gradcheck_detail::random_step(shape, rng, warmup);
    REQUIRE(batch.labeled.rows() + batch.weak.rows() == 10);
    TrainConfig cfg;
    cfg.lambda_u = 0.8;
    cfg.lambda_scl = 1.2;
    cfg.contrastive.temperature = 0.5;
    const StepLoss sl = composite_loss(p, batch, targets, cfg);
    const Matrix numeric = oracle::numeric_gradient(
        [&](const Matrix& flat) {
          ModelParams q = p;
          q.assign(std::span<const double>(flat.data(), static_cast<std::size_t>(flat.size())));
          return composite_loss(q, batch, targets, cfg).loss.total;
        },
        as_row(p.flatten()), 1e-5);
    CHECK(oracle::max_rel_error(as_row(sl.grads.flatten()), numeric, 1e-3) <= 1e-4);
  }
}

TEST_CASE("total loss is the weighted sum of its parts", "[trainer]") {
  Rng rng(3);
  const ModelShape shape{4, {6}, 3, 4};
  ModelParams p = gradcheck_detail::small_params(shape, rng);
  auto [batch, targets] = gradcheck_detail::random_step(shape, rng, false);
  TrainConfig cfg;
  cfg.lambda_u = 0.37;
  cfg.lambda_scl = 2.9;
  const auto l = composite_loss(p, batch, targets, cfg).loss;
  CHECK(l.unsupervised > 0.0);
  CHECK(l.contrastive > 0.0);
  CHECK(std::abs(l.total - (l.supervised + 0.37 * l.unsupervised + 2.9 * l.contrastive)) <= 1e-12);
}

TEST_CASE("per-domain unsupervised loss equals the pooled loss for equal domain shares", "[trainer]") {
  Rng rng(4);
  const ModelShape shape{4, {6}, 3, 4};
  ModelParams p = gradcheck_detail::small_params(shape, rng);
  auto [batch, targets] = gradcheck_detail::random_step(shape, rng, false);
  TrainConfig cfg;
  const double pooled = composite_loss(p, batch, targets, cfg).loss.unsupervised;
  cfg.per_domain_unsup_loss = true;
  CHECK(composite_loss(p, batch, targets, cfg).loss.unsupervised == Approx(pooled).epsilon(1e-12));
}

TEST_CASE("fewer than five epochs averages every epoch with a warning", "[trainer]") {
  const auto ds = tiny_dataset();
  const TrainConfig cfg = tiny_config(Method::fixmatch_baseline);
  const FoldResult r = run_fold(tiny_split(ds, cfg), cfg);
  REQUIRE(r.history.size() == 3);
  double mean = 0;
  for (const auto& m : r.history) mean += m.target_accuracy / 3.0;
  CHECK(r.final_score == Approx(mean).epsilon(1e-14));
  bool warned = false;
  for (const auto& w : r.warnings) warned = warned || w.find("fewer than 5 epochs") != std::string::npos;
  CHECK(warned);
}

TEST_CASE("final score averages the last five epochs", "[trainer]") {
  const auto ds = tiny_dataset();
  TrainConfig cfg = tiny_config(Method::supervised_only);
  cfg.epochs = 7;
  cfg.steps_per_epoch = 2;
  const FoldResult r = run_fold(tiny_split(ds, cfg), cfg);
  double mean = 0;
  for (int e = 2; e < 7; ++e) mean += r.history[e].target_accuracy / 5.0;
  CHECK(r.final_score == Approx(mean).epsilon(1e-14));
  CHECK(r.warnings.empty());
}

TEST_CASE("supervised-only never pseudo-labels", "[trainer]") {
  const auto ds = tiny_dataset();
  const TrainConfig cfg = tiny_config(Method::supervised_only);
  const FoldResult r = run_fold(tiny_split(ds, cfg), cfg);
  CHECK(r.threshold_log.empty());
  for (const auto& m : r.history) {
    for (const auto& p : m.pseudo) {
      CHECK(p.selected == 0);
      CHECK(p.yield() == 0.0);
    }
    CHECK(m.loss.unsupervised == 0.0);
    CHECK(m.loss.contrastive == 0.0);
    CHECK(m.clean_size == 0);
  }
}

TEST_CASE("cat runs warm-up, thresholds and refinement", "[trainer]") {
  const auto ds = tiny_dataset();
  TrainConfig cfg = tiny_config(Method::cat);
  cfg.epochs = 4;
  const FoldResult r = run_fold(tiny_split(ds, cfg), cfg);
  CHECK(r.history[0].warmup);
  CHECK_FALSE(r.history[1].warmup);
  CHECK(r.history[0].thresholds.size() == 2);
  CHECK(r.history[0].thresholds[0].tau_g == Approx(1.0 / 3).epsilon(1e-15));
  CHECK(r.history[3].thresholds[0].tau_g != r.history[0].thresholds[0].tau_g);
  std::size_t clean = 0;
  for (const auto& m : r.history) clean += m.clean_size;
  CHECK(clean > 0);
  CHECK(r.threshold_log.size() == 3u * 6u * 2u);
}

TEST_CASE("same config and seed give identical histories", "[trainer]") {
  const auto ds = tiny_dataset();
  TrainConfig cfg = tiny_config(Method::cat);
  const auto split = tiny_split(ds, cfg);
  const FoldResult a = run_fold(split, cfg);
  const FoldResult b = run_fold(split, cfg);
  CHECK(report::metrics_ndjson(a) == report::metrics_ndjson(b));
  CHECK(a.params.flatten() == b.params.flatten());
  cfg.seed = 1;
  CHECK(report::metrics_ndjson(run_fold(split, cfg)) != report::metrics_ndjson(a));
}

TEST_CASE("observer sees every step", "[trainer]") {
  const auto ds = tiny_dataset();
  TrainConfig cfg = tiny_config(Method::fixmatch_baseline);
  int steps = 0;
  run_fold(tiny_split(ds, cfg), cfg, [&](const StepRecord& rec) {
    CHECK(rec.step == steps);
    CHECK(rec.weak_distributions.size() == 2);
    ++steps;
  });
  CHECK(steps == cfg.epochs * cfg.steps_per_epoch);
}

TEST_CASE("shared thresholds run", "[trainer]") {
  const auto ds = tiny_dataset();
  TrainConfig cfg = tiny_config(Method::cat);
  cfg.threshold.per_domain_thresholds = false;
  const FoldResult r = run_fold(tiny_split(ds, cfg), cfg);
  const auto& t = r.history.back().thresholds;
  REQUIRE(t.size() == 2);
  CHECK(t[0].tau_g == t[1].tau_g);
}

TEST_CASE("a non-finite loss aborts with a diagnostic", "[trainer]") {
  const auto ds = tiny_dataset();
  const TrainConfig cfg = tiny_config(Method::cat);
  const auto split = tiny_split(ds, cfg);
  FoldTrainer trainer(split, cfg);
  trainer.mutable_params().classifier.weight(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    trainer.train_step(trainer.draw_batch(), false);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("non-finite loss") != std::string::npos);
    CHECK(msg.find("labelled batch") != std::string::npos);
  }
}

TEST_CASE("leave-one-domain-out aggregates fold scores", "[trainer]") {
  const auto ds = tiny_dataset(4);
  TrainConfig cfg = tiny_config(Method::fixmatch_baseline);
  cfg.epochs = 2;
  const LodoResult r = run_lodo(ds, cfg);
  REQUIRE(r.folds.size() == 4);
  double mean = 0;
  for (int k = 0; k < 4; ++k) {
    CHECK(r.folds[k].held_out_domain == k);
    mean += r.folds[k].final_score;
  }
  mean /= 4;
  CHECK(std::abs(r.aggregate - mean) <= 1e-12);
}

TEST_CASE("sweep table has one row per value and method", "[trainer]") {
  const auto ds = tiny_dataset(4);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  cfg.steps_per_epoch = 2;
  const auto t = sweep(ds, cfg, SweepAxis::num_sources, {"1", "2", "3"},
                       {Method::cat, Method::supervised_only});
  REQUIRE(t.rows.size() == 6);
  CHECK(t.rows[0].value == "1");
  CHECK(t.rows[1].method == Method::supervised_only);
  for (const auto& row : t.rows) CHECK(row.fold_scores.size() == 4);
  const auto m = sweep(ds, cfg, SweepAxis::method, {"supervised_only"});
  REQUIRE(m.rows.size() == 1);
  const std::string csv = report::sweep_csv(t);
  CHECK(csv.rfind("num_sources,method,domain_0,domain_1,domain_2,domain_3,avg\n", 0) == 0);
}

TEST_CASE("invalid sweep values are reported with the valid range", "[trainer]") {
  const auto ds = tiny_dataset(4);
  const TrainConfig cfg = tiny_config();
  try {
    sweep(ds, cfg, SweepAxis::num_sources, {"4"});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("1..3") != std::string::npos);
  }
  CHECK_THROWS_AS(sweep(ds, cfg, SweepAxis::labels_per_class, {"five"}), ConfigError);
  CHECK_THROWS_AS(sweep(ds, cfg, SweepAxis::method, {"mixmatch"}), ConfigError);
  CHECK_THROWS_AS(sweep(ds, cfg, SweepAxis::method, {}), ConfigError);
  CHECK_THROWS_AS(parse_axis("depth"), ConfigError);
  CHECK(parse_axis("K") == SweepAxis::num_sources);
}

TEST_CASE("invalid training settings are configuration errors", "[trainer]") {
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(parse_method("meanteacher"), ConfigError);
  for (Method m : all_methods()) CHECK(parse_method(to_string(m)) == m);
}
