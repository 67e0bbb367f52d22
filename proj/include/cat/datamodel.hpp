#pragma once
// Examples, multi-domain datasets, label-budget splits and leave-one-domain-out folds.

#include "cat/core.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cat {

struct Example {
  Vector features;
  std::optional<int> label;
  int domain_id = 0;
  std::int64_t example_id = 0;
};

// An unlabeled training example. It carries no label field at all, so training
// code paths cannot read ground truth for it.
struct UnlabeledExample {
  Vector features;
  int domain_id = 0;
  std::int64_t example_id = 0;
};

struct DomainDataset {
  std::vector<std::vector<Example>> domains;
  int num_classes = 0;
  int feature_dim = 0;

  int num_domains() const { return static_cast<int>(domains.size()); }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& d : domains) n += d.size();
    return n;
  }

  void validate() const {
    if (num_classes < 1) throw DataError("dataset has no classes");
    if (feature_dim < 1) throw DataError("dataset feature dimension must be >= 1");
    for (std::size_t k = 0; k < domains.size(); ++k) {
      for (const auto& ex : domains[k]) {
        if (ex.features.size() != feature_dim)
          throw DataError("example " + std::to_string(ex.example_id) + " has dimension " +
                          std::to_string(ex.features.size()) + ", expected " +
                          std::to_string(feature_dim));
        if (ex.label && (*ex.label < 0 || *ex.label >= num_classes))
          throw DataError("example " + std::to_string(ex.example_id) + " has label out of range");
        if (ex.domain_id != static_cast<int>(k))
          throw DataError("example " + std::to_string(ex.example_id) + " stored under domain " +
                          std::to_string(k) + " but tagged " + std::to_string(ex.domain_id));
      }
    }
  }
};

// Ground truth for unlabeled training examples. Only metric code reads this.
class HiddenLabels {
 public:
  void insert(std::int64_t example_id, int label) { labels_[example_id] = label; }

  std::optional<int> label_of(std::int64_t example_id) const {
    auto it = labels_.find(example_id);
    if (it == labels_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t size() const { return labels_.size(); }

 private:
  std::unordered_map<std::int64_t, int> labels_;
};

class SsdgSplit {
 public:
  std::vector<Example> labeled;
  std::vector<UnlabeledExample> unlabeled;
  std::vector<Example> target;
  std::vector<int> source_domains;
  int held_out_domain = 0;
  int num_classes = 0;
  int feature_dim = 0;

  const HiddenLabels& evaluation_labels() const { return hidden_; }
  void set_evaluation_labels(HiddenLabels h) { hidden_ = std::move(h); }

 private:
  HiddenLabels hidden_;
};

/// Draws exactly `n_labeled` examples per class from one domain.
///
/// Examples without a label are always unlabeled. The draw is a pure function
/// of (domain contents, n_labeled, seed). Throws DataError naming the first
/// class that has fewer than `n_labeled` labeled examples.
inline std::pair<std::vector<Example>, std::vector<Example>> split_labels(
    const std::vector<Example>& domain, int n_labeled, int num_classes, std::uint64_t seed) {
  if (n_labeled < 0) throw ConfigError("labels per class must be >= 0");
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < domain.size(); ++i) {
    if (domain[i].label) by_class.at(*domain[i].label).push_back(i);
  }
  std::vector<bool> take(domain.size(), false);
  Rng rng(seed);
  for (int c = 0; c < num_classes; ++c) {
    auto& idx = by_class[c];
    if (static_cast<int>(idx.size()) < n_labeled)
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                      " labeled examples, fewer than the requested " +
                      std::to_string(n_labeled));
    // partial Fisher-Yates
    for (int j = 0; j < n_labeled; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, idx.size() - 1);
      std::swap(idx[j], idx[pick(rng)]);
      take[idx[j]] = true;
    }
  }
  std::pair<std::vector<Example>, std::vector<Example>> out;
  for (std::size_t i = 0; i < domain.size(); ++i) {
    (take[i] ? out.first : out.second).push_back(domain[i]);
  }
  return out;
}

struct FoldOptions {
  int labels_per_class = 10;
  // 0 means every non-target domain is a source.
  int num_sources = 0;
  std::uint64_t seed = 0;
};

/// Source domains for a held-out target. With num_sources > 0 the sources are a
/// seeded draw of that many domains from the remaining ones, returned sorted.
inline std::vector<int> choose_sources(int num_domains, int target, int num_sources,
                                       std::uint64_t seed) {
  std::vector<int> rest;
  for (int k = 0; k < num_domains; ++k)
    if (k != target) rest.push_back(k);
  if (num_sources <= 0 || num_sources == static_cast<int>(rest.size())) return rest;
  if (num_sources > static_cast<int>(rest.size()))
    throw ConfigError("requested " + std::to_string(num_sources) + " source domains but only " +
                      std::to_string(rest.size()) + " are available");
  Rng rng(derive_seed(seed, 0x50c5, static_cast<std::uint64_t>(target)));
  std::shuffle(rest.begin(), rest.end(), rng);
  rest.resize(num_sources);
  std::sort(rest.begin(), rest.end());
  return rest;
}

inline SsdgSplit build_fold(const DomainDataset& dataset, int target, const FoldOptions& opt) {
  if (dataset.num_domains() < 2)
    throw ConfigError("leave-one-domain-out needs at least 2 domains, got " +
                      std::to_string(dataset.num_domains()));
  if (target < 0 || target >= dataset.num_domains())
    throw ConfigError("target domain " + std::to_string(target) + " out of range");
  SsdgSplit split;
  split.held_out_domain = target;
  split.num_classes = dataset.num_classes;
  split.feature_dim = dataset.feature_dim;
  split.source_domains = choose_sources(dataset.num_domains(), target, opt.num_sources, opt.seed);
  split.target = dataset.domains[target];
  HiddenLabels hidden;
  for (int k : split.source_domains) {
    // Seed depends on the domain only, so a domain's labeled subset is the same in every fold.
    auto [labeled, rest] = split_labels(dataset.domains[k], opt.labels_per_class,
                                        dataset.num_classes,
                                        derive_seed(opt.seed, 0x1abe1, static_cast<std::uint64_t>(k)));
    for (auto& ex : labeled) split.labeled.push_back(std::move(ex));
    for (auto& ex : rest) {
      if (ex.label) hidden.insert(ex.example_id, *ex.label);
      split.unlabeled.push_back({std::move(ex.features), ex.domain_id, ex.example_id});
    }
  }
  split.set_evaluation_labels(std::move(hidden));
  return split;
}

/// One split per domain; split k holds domain k out as the target.
inline std::vector<SsdgSplit> build_lodo_folds(const DomainDataset& dataset,
                                               const FoldOptions& opt = {}) {
  if (dataset.num_domains() < 2)
    throw ConfigError("leave-one-domain-out needs at least 2 domains, got " +
                      std::to_string(dataset.num_domains()));
  std::vector<SsdgSplit> folds;
  folds.reserve(dataset.domains.size());
  for (int k = 0; k < dataset.num_domains(); ++k) folds.push_back(build_fold(dataset, k, opt));
  return folds;
}

}  // namespace cat
