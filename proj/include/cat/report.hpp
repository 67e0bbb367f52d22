#pragma once
// Serialisation of metrics, summaries, threshold trajectories, refinement
// reports and sweep tables, plus atomic file writes.

#include "cat/trainer.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace cat::report {

using nlohmann::json;

inline json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json to_json(const EpochMetrics& m) {
  json pseudo = json::array();
  for (const auto& p : m.pseudo)
    pseudo.push_back({{"domain", p.domain},
                      {"seen", p.seen},
                      {"selected", p.selected},
                      {"yield", p.yield()},
                      {"precision", optional_number(p.precision())}});
  json thresholds = json::array();
  for (const auto& t : m.thresholds)
    thresholds.push_back({{"domain", t.domain}, {"tau_g", t.tau_g}, {"expectations", t.expectations}});
  return {{"epoch", m.epoch},
          {"phase", m.warmup ? "warmup" : "main"},
          {"target_accuracy", m.target_accuracy},
          {"source_accuracy", m.source_accuracy},
          {"pseudo_labels", pseudo},
          {"clean_set", {{"size", m.clean_size}, {"accuracy", optional_number(m.clean_accuracy)}}},
          {"loss",
           {{"supervised", m.loss.supervised},
            {"unsupervised", m.loss.unsupervised},
            {"contrastive", m.loss.contrastive},
            {"total", m.loss.total}}},
          {"thresholds", thresholds}};
}

inline std::string metrics_ndjson(const FoldResult& f) {
  std::string out;
  for (const auto& m : f.history) out += to_json(m).dump() + "\n";
  return out;
}

inline json summary_json(const LodoResult& r, const TrainConfig& cfg) {
  json folds = json::array();
  for (const auto& f : r.folds)
    folds.push_back({{"held_out_domain", f.held_out_domain},
                     {"source_domains", f.source_domains},
                     {"final_score", f.final_score},
                     {"epochs", f.history.size()},
                     {"warnings", f.warnings}});
  return {{"method", to_string(cfg.method)},
          {"seed", cfg.seed},
          {"labels_per_class", cfg.labels_per_class},
          {"num_sources", cfg.num_sources},
          {"folds", folds},
          {"average", r.aggregate}};
}

inline std::string csv_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// `step,domain,tau_g,E_0..E_{C-1},yield,precision`; E cells are empty for the
/// fixed-threshold baseline and precision is empty when nothing was selected.
inline std::string threshold_csv(const std::vector<ThresholdLogRow>& rows, int num_classes) {
  std::ostringstream os;
  os << "step,domain,tau_g";
  for (int c = 0; c < num_classes; ++c) os << ",E_" << c;
  os << ",yield,precision\n";
  for (const auto& r : rows) {
    os << r.step << ',' << r.domain << ',' << csv_number(r.tau_g);
    for (int c = 0; c < num_classes; ++c) {
      os << ',';
      if (c < static_cast<int>(r.expectations.size())) os << csv_number(r.expectations[c]);
    }
    os << ',' << csv_number(r.yield) << ',';
    if (r.precision) os << csv_number(*r.precision);
    os << '\n';
  }
  return os.str();
}

/// `example_id,pseudo_label,corrected_label,agreement,selected`
inline std::string refinement_csv(std::span<const std::int64_t> ids, std::span<const int> pseudo,
                                  std::span<const NeighborVote> votes, const CleanSet& clean) {
  std::unordered_map<std::int64_t, bool> member;
  for (const auto& m : clean.members) member[m.example_id] = true;
  std::ostringstream os;
  os << "example_id,pseudo_label,corrected_label,agreement,selected\n";
  for (std::size_t i = 0; i < ids.size(); ++i)
    os << ids[i] << ',' << pseudo[i] << ',' << votes[i].corrected_label << ',' << csv_number(votes[i].agreement) << ','
       << (member.count(ids[i]) ? 1 : 0) << '\n';
  return os.str();
}

/// CSV: axis value, method, one column per held-out domain, avg.
inline std::string sweep_csv(const SweepTable& t) {
  std::ostringstream os;
  os << to_string(t.axis) << ",method";
  if (!t.rows.empty())
    for (int d : t.rows.front().held_out) os << ",domain_" << d;
  os << ",avg\n";
  for (const auto& r : t.rows) {
    os << r.value << ',' << to_string(r.method);
    for (double s : r.fold_scores) os << ',' << csv_number(s);
    os << ',' << csv_number(r.average) << '\n';
  }
  return os.str();
}

/// Fixed-width table with accuracies in percent.
inline std::string sweep_text(const SweepTable& t) {
  std::ostringstream os;
  os << std::left << std::setw(18) << to_string(t.axis) << std::setw(20) << "method";
  if (!t.rows.empty())
    for (int d : t.rows.front().held_out) os << std::right << std::setw(9) << ("D" + std::to_string(d));
  os << std::right << std::setw(9) << "Avg" << '\n';
  os << std::fixed << std::setprecision(2);
  for (const auto& r : t.rows) {
    os << std::left << std::setw(18) << r.value << std::setw(20) << to_string(r.method) << std::right;
    for (double s : r.fold_scores) os << std::setw(9) << 100.0 * s;
    os << std::setw(9) << 100.0 * r.average << '\n';
  }
  return os.str();
}

/// Writes `content` to a temporary sibling then renames it over `path`.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + tmp.string() + " for writing");
    os << content;
    os.flush();
    if (!os) throw DataError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace cat::report
