#pragma once
// Weak and strong feature-space views. Weak: additive Gaussian noise. Strong:
// larger Gaussian noise followed by independent coordinate dropout.

#include "cat/core.hpp"

namespace cat {

struct AugmentConfig {
  double weak_sigma = 0.1;
  double strong_sigma = 0.5;
  double strong_dropout = 0.2;

  void validate() const {
    if (!(weak_sigma >= 0) || !(strong_sigma >= 0))
      throw ConfigError("augment sigmas must be >= 0");
    if (weak_sigma > 0 && strong_sigma > 0 && !(weak_sigma < strong_sigma))
      throw ConfigError("augment.weak_sigma must be < augment.strong_sigma");
    if (!(strong_dropout >= 0 && strong_dropout < 1))
      throw ConfigError("augment.strong_dropout must be in [0, 1)");
  }
};

class Augmenter {
 public:
  explicit Augmenter(AugmentConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const AugmentConfig& config() const { return cfg_; }

  Vector weak(const Vector& x, Rng& rng) const {
    Vector out = x;
    if (cfg_.weak_sigma > 0) {
      std::normal_distribution<double> n(0.0, cfg_.weak_sigma);
      for (Eigen::Index i = 0; i < out.size(); ++i) out[i] += n(rng);
    }
    return out;
  }

  Vector strong(const Vector& x, Rng& rng) const {
    Vector out = x;
    if (cfg_.strong_sigma > 0) {
      std::normal_distribution<double> n(0.0, cfg_.strong_sigma);
      for (Eigen::Index i = 0; i < out.size(); ++i) out[i] += n(rng);
    }
    if (cfg_.strong_dropout > 0) {
      std::bernoulli_distribution drop(cfg_.strong_dropout);
      for (Eigen::Index i = 0; i < out.size(); ++i)
        if (drop(rng)) out[i] = 0.0;
    }
    return out;
  }

 private:
  AugmentConfig cfg_;
};

}  // namespace cat
