// Command-line front end: gen-data, train, eval, sweep, gradcheck.
//
// Exit codes: 0 success, 1 runtime/config/data failure, 2 usage error,
// 3 training aborted on a non-finite loss, 4 gradient check failed.

#include "cat/config.hpp"
#include "cat/gradcheck.hpp"
#include "cat/report.hpp"
#include "cat/synthgen.hpp"
#include "cat/trainer.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using cat::report::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
};

void add_common(CLI::App* cmd, CommonOptions& o, const std::string& out_help) {
  cmd->add_option("--config", o.config_path, "JSON run config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "overrides train.seed and synth.seed");
  cmd->add_option("--out", o.out, out_help)->required();
  cmd->add_option("--data", o.data, "embeddings CSV (overrides the synth section)");
}

cat::RunConfig resolve_config(const CommonOptions& o) {
  cat::RunConfig rc = o.config_path.empty() ? cat::RunConfig{} : cat::load_config(o.config_path);
  if (o.seed) {
    rc.train.seed = *o.seed;
    if (rc.synth) rc.synth->seed = *o.seed;
  }
  if (!o.data.empty()) rc.data = o.data;
  cat::validate(rc);
  return rc;
}

cat::DomainDataset resolve_dataset(const cat::RunConfig& rc) {
  if (rc.data) return cat::load_embeddings_csv(*rc.data);
  if (rc.synth) return cat::generate(*rc.synth);
  throw UsageError("no dataset: pass --data or give a synth section in the config");
}

void write_json(const fs::path& p, const json& j) { cat::report::write_atomic(p, j.dump(2) + "\n"); }

int cmd_gen_data(const CommonOptions& o) {
  cat::RunConfig rc = resolve_config(o);
  if (!rc.synth) rc.synth.emplace();
  if (o.seed) rc.synth->seed = *o.seed;
  const cat::DomainDataset ds = cat::generate(*rc.synth);
  std::ostringstream os;
  cat::write_embeddings_csv(os, ds);
  const fs::path out(o.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  cat::report::write_atomic(out, os.str());
  std::cout << "wrote " << ds.size() << " examples (" << ds.num_domains() << " domains, " << ds.num_classes
            << " classes, d=" << ds.feature_dim << ") to " << out.string() << '\n';
  return 0;
}

int cmd_train(const CommonOptions& o, const std::string& method) {
  cat::RunConfig rc = resolve_config(o);
  if (!method.empty()) rc.train.method = cat::parse_method(method);
  const cat::DomainDataset ds = resolve_dataset(rc);
  ds.validate();
  const fs::path out(o.out);
  fs::create_directories(out);
  write_json(out / "effective_config.json", cat::to_json(rc));
  cat::LodoResult result;
  try {
    result = cat::run_lodo(ds, rc.train);
  } catch (const cat::NumericError& e) {
    cat::report::write_atomic(out / "nan_abort.txt", e.what());
    std::cerr << "training aborted: non-finite loss; diagnostic written to " << (out / "nan_abort.txt").string() << '\n';
    return 3;
  }
  for (const auto& f : result.folds) {
    const std::string tag = "fold" + std::to_string(f.held_out_domain);
    cat::report::write_atomic(out / ("metrics_" + tag + ".jsonl"), cat::report::metrics_ndjson(f));
    cat::report::write_atomic(out / ("thresholds_" + tag + ".csv"),
                              cat::report::threshold_csv(f.threshold_log, ds.num_classes));
    std::ostringstream ck;
    cat::checkpoint::save(ck, f.params);
    cat::report::write_atomic(out / ("model_" + tag + ".ckpt"), ck.str());
    if (const auto& r = f.last_refinement)
      cat::report::write_atomic(out / ("refinement_" + tag + ".csv"),
                                cat::report::refinement_csv(r->example_ids, r->pseudo_labels, r->votes, r->clean));
  }
  const json summary = cat::report::summary_json(result, rc.train);
  write_json(out / "summary.json", summary);
  std::cout << "method " << cat::to_string(rc.train.method) << "\n";
  for (const auto& f : result.folds)
    std::cout << "  held-out domain " << f.held_out_domain << ": " << 100.0 * f.final_score << "%\n";
  std::cout << "  average: " << 100.0 * result.aggregate << "%\n";
  return 0;
}

int cmd_eval(const CommonOptions& o, const std::string& checkpoint, std::vector<int> domains) {
  cat::RunConfig rc = resolve_config(o);
  const cat::DomainDataset ds = resolve_dataset(rc);
  ds.validate();
  const cat::ModelParams params = cat::checkpoint::load_file(checkpoint);
  const cat::ModelShape shape = params.shape();
  if (shape.input_dim != ds.feature_dim || shape.num_classes < ds.num_classes)
    throw cat::DataError("checkpoint shape does not match the dataset");
  if (domains.empty())
    for (int k = 0; k < ds.num_domains(); ++k) domains.push_back(k);
  json per_domain = json::array();
  for (int k : domains) {
    if (k < 0 || k >= ds.num_domains()) throw UsageError("domain " + std::to_string(k) + " not in dataset");
    const auto& rows = ds.domains[k];
    cat::Matrix x(static_cast<Eigen::Index>(rows.size()), ds.feature_dim);
    for (std::size_t i = 0; i < rows.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = rows[i].features.transpose();
    const auto pred = cat::predict(params, x);
    std::size_t n = 0, ok = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!rows[i].label) continue;
      ++n;
      ok += pred[i] == *rows[i].label;
    }
    const double acc = n ? static_cast<double>(ok) / static_cast<double>(n) : 0.0;
    per_domain.push_back({{"domain", k}, {"labeled", n}, {"accuracy", acc}});
    std::cout << "domain " << k << ": " << 100.0 * acc << "% of " << n << " labelled examples\n";
  }
  fs::create_directories(o.out);
  write_json(fs::path(o.out) / "eval.json", {{"checkpoint", checkpoint}, {"domains", per_domain}});
  return 0;
}

int cmd_sweep(const CommonOptions& o, const std::string& axis_name, const std::vector<std::string>& values,
              const std::vector<std::string>& method_names) {
  if (values.empty()) throw UsageError("--values must list at least one value");
  cat::RunConfig rc = resolve_config(o);
  const cat::DomainDataset ds = resolve_dataset(rc);
  ds.validate();
  const cat::SweepAxis axis = cat::parse_axis(axis_name);
  std::vector<cat::Method> methods;
  for (const auto& m : method_names) methods.push_back(cat::parse_method(m));
  if (methods.empty()) methods = cat::all_methods();
  const fs::path out(o.out);
  fs::create_directories(out);
  write_json(out / "effective_config.json", cat::to_json(rc));
  cat::SweepTable table;
  try {
    table = cat::sweep(ds, rc.train, axis, values, methods);
  } catch (const cat::NumericError& e) {
    cat::report::write_atomic(out / "nan_abort.txt", e.what());
    std::cerr << "sweep aborted: non-finite loss\n";
    return 3;
  }
  cat::report::write_atomic(out / "sweep.csv", cat::report::sweep_csv(table));
  const std::string text = cat::report::sweep_text(table);
  cat::report::write_atomic(out / "sweep.txt", text);
  std::cout << text;
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, int instances, double tolerance, bool inject_fault, const std::string& out) {
  const cat::GradcheckReport rep = cat::run_gradcheck(seed, instances, tolerance, inject_fault);
  std::ostringstream os;
  os << "gradient check (seed " << seed << ", " << instances << " instances per suite, tolerance " << tolerance
     << ")\n";
  for (const auto& s : rep.suites) {
    char line[200];
    std::snprintf(line, sizeof line, "  %-20s max rel error %.3e  (%zu checked, %zu at ReLU kinks)  %s",
                  s.name.c_str(), s.max_rel_error, s.checked, s.skipped, s.passed ? "PASS" : "FAIL");
    os << line;
    if (!s.passed) os << "  (worst parameter block: " << s.worst_block << ")";
    os << '\n';
  }
  os << (rep.passed() ? "all suites passed\n" : "gradient check FAILED\n");
  std::cout << os.str();
  if (!out.empty()) {
    fs::create_directories(out);
    cat::report::write_atomic(fs::path(out) / "gradcheck.txt", os.str());
  }
  return rep.passed() ? 0 : 4;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised domain generalisation with class- and domain-aware thresholds"};
  app.require_subcommand(1);
  app.footer(cat::describe_keys());

  CommonOptions gen_opts, train_opts, eval_opts, sweep_opts;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset as embeddings CSV");
  add_common(gen, gen_opts, "output CSV path");

  auto* train = app.add_subcommand("train", "leave-one-domain-out training; writes metrics, summary, checkpoints");
  add_common(train, train_opts, "output directory");
  std::string method;
  train->add_option("--method", method, "overrides train.method");

  auto* eval = app.add_subcommand("eval", "accuracy of a checkpoint on dataset domains");
  add_common(eval, eval_opts, "output directory for eval.json");
  std::string checkpoint;
  std::vector<int> eval_domains;
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--domain", eval_domains, "domains to score (default: all)");

  auto* sw = app.add_subcommand("sweep", "compare methods across label budgets, source counts or methods");
  add_common(sw, sweep_opts, "output directory");
  std::string axis, values, methods;
  sw->add_option("--axis", axis, "labels_per_class | num_sources | method")->required();
  sw->add_option("--values", values, "comma-separated axis values")->required();
  sw->add_option("--methods", methods, "comma-separated methods (default: all)");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every loss gradient");
  std::uint64_t gc_seed = 0;
  int gc_instances = 20;
  double gc_tol = 1e-4;
  bool gc_fault = false;
  std::string gc_out;
  gc->add_option("--seed", gc_seed, "seed");
  gc->add_option("--instances", gc_instances, "random instances per suite")->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", gc_tol, "max relative error");
  gc->add_option("--out", gc_out, "directory for gradcheck.txt");
  gc->add_flag("--inject-fault", gc_fault, "perturb one analytic gradient (test hook)")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_data(gen_opts);
    if (*train) return cmd_train(train_opts, method);
    if (*eval) return cmd_eval(eval_opts, checkpoint, eval_domains);
    if (*sw) return cmd_sweep(sweep_opts, axis, split_list(values), split_list(methods));
    if (*gc) return cmd_gradcheck(gc_seed, gc_instances, gc_tol, gc_fault, gc_out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const cat::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 1;
  } catch (const cat::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
