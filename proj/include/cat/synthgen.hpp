#pragma once
// Synthetic multi-domain Gaussian-cluster data and the embeddings CSV format.
//
// CSV schema: header `domain,label,f0,...,f{d-1}`, one example per line.
// `domain` is an integer >= 0, `label` an integer in [-1, C) where -1 marks an
// unlabeled row, features are decimal numbers with `.` as separator.

#include "cat/datamodel.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string_view>

namespace cat {

struct SynthConfig {
  int num_classes = 5;
  int num_domains = 4;
  int feature_dim = 20;
  int samples_per_class_per_domain = 100;
  double class_separation = 3.0;
  double domain_shift = 1.0;
  double noise_sigma = 1.0;
  double label_noise_rate = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw ConfigError("synth.num_classes must be >= 2");
    if (num_domains < 2) throw ConfigError("synth.num_domains must be >= 2");
    if (feature_dim < 2) throw ConfigError("synth.feature_dim must be >= 2");
    if (samples_per_class_per_domain < 1)
      throw ConfigError("synth.samples_per_class_per_domain must be >= 1");
    if (!(class_separation >= 0)) throw ConfigError("synth.class_separation must be >= 0");
    if (!(domain_shift >= 0)) throw ConfigError("synth.domain_shift must be >= 0");
    if (!(noise_sigma >= 0)) throw ConfigError("synth.noise_sigma must be >= 0");
    if (!(label_noise_rate >= 0 && label_noise_rate < 1))
      throw ConfigError("synth.label_noise_rate must be in [0, 1)");
  }
};

namespace detail {

inline Vector gaussian_vector(int d, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Vector v(d);
  for (int i = 0; i < d; ++i) v[i] = n01(rng);
  return v;
}

inline Vector random_unit(int d, Rng& rng) {
  Vector v;
  do {
    v = gaussian_vector(d, rng);
  } while (v.norm() < 1e-12);
  return v / v.norm();
}

// Rotation by `angle` inside the plane spanned by two random orthonormal vectors.
inline Matrix plane_rotation(int d, double angle, Rng& rng) {
  Vector u = random_unit(d, rng);
  Vector v;
  do {
    v = gaussian_vector(d, rng);
    v -= v.dot(u) * u;
  } while (v.norm() < 1e-12);
  v /= v.norm();
  Matrix r = Matrix::Identity(d, d);
  r += (std::cos(angle) - 1.0) * (u * u.transpose() + v * v.transpose());
  r += std::sin(angle) * (v * u.transpose() - u * v.transpose());
  return r;
}

}  // namespace detail

struct DomainTransform {
  Matrix rotation;
  Vector translation;
};

/// Per-domain affine transform; identity when domain_shift is 0.
inline DomainTransform domain_transform(const SynthConfig& cfg, int domain) {
  const int d = cfg.feature_dim;
  Rng rng(derive_seed(cfg.seed, 0xd0a1, static_cast<std::uint64_t>(domain)));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double angle = cfg.domain_shift * unit(rng) * std::numbers::pi / 4.0;
  DomainTransform t;
  t.rotation = detail::plane_rotation(d, angle, rng);
  t.translation = cfg.domain_shift * detail::random_unit(d, rng);
  if (cfg.domain_shift == 0.0) {
    t.rotation = Matrix::Identity(d, d);
    t.translation = Vector::Zero(d);
  }
  return t;
}

/// Base class centroids, one per row, each at distance class_separation from the origin.
inline Matrix class_centroids(const SynthConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, 0xce47));
  Matrix c(cfg.num_classes, cfg.feature_dim);
  for (int k = 0; k < cfg.num_classes; ++k)
    c.row(k) = cfg.class_separation * detail::random_unit(cfg.feature_dim, rng).transpose();
  return c;
}

inline DomainDataset generate(const SynthConfig& cfg) {
  cfg.validate();
  const Matrix centroids = class_centroids(cfg);
  DomainDataset ds;
  ds.num_classes = cfg.num_classes;
  ds.feature_dim = cfg.feature_dim;
  ds.domains.resize(cfg.num_domains);
  const std::int64_t per_domain =
      static_cast<std::int64_t>(cfg.num_classes) * cfg.samples_per_class_per_domain;
  for (int k = 0; k < cfg.num_domains; ++k) {
    const DomainTransform tf = domain_transform(cfg, k);
    Rng sample_rng(derive_seed(cfg.seed, 0x5a4e, static_cast<std::uint64_t>(k)));
    // Separate stream so that features do not depend on label_noise_rate.
    Rng noise_rng(derive_seed(cfg.seed, 0x1ab7, static_cast<std::uint64_t>(k)));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::uniform_int_distribution<int> other(0, cfg.num_classes - 2);
    auto& out = ds.domains[k];
    out.reserve(per_domain);
    std::int64_t id = per_domain * k;
    for (int c = 0; c < cfg.num_classes; ++c) {
      const Vector mean = tf.rotation * centroids.row(c).transpose() + tf.translation;
      for (int i = 0; i < cfg.samples_per_class_per_domain; ++i) {
        Example ex;
        ex.features = mean + cfg.noise_sigma * detail::gaussian_vector(cfg.feature_dim, sample_rng);
        const bool flip = u01(noise_rng) < cfg.label_noise_rate;
        const int alt = other(noise_rng);
        ex.label = flip ? (alt >= c ? alt + 1 : alt) : c;
        ex.domain_id = k;
        ex.example_id = id++;
        out.push_back(std::move(ex));
      }
    }
  }
  return ds;
}

inline void write_embeddings_csv(std::ostream& os, const DomainDataset& ds) {
  os << "domain,label";
  for (int j = 0; j < ds.feature_dim; ++j) os << ",f" << j;
  os << '\n';
  char buf[40];
  for (const auto& domain : ds.domains) {
    for (const auto& ex : domain) {
      os << ex.domain_id << ',' << (ex.label ? *ex.label : -1);
      for (int j = 0; j < ds.feature_dim; ++j) {
        // %.17g round-trips every double exactly.
        std::snprintf(buf, sizeof buf, "%.17g", ex.features[j]);
        os << ',' << buf;
      }
      os << '\n';
    }
  }
}

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && !s.empty();
}

}  // namespace detail

/// Parses the embeddings CSV. When `num_classes` is absent it is inferred as
/// max(label) + 1. Errors carry the 1-based line number.
inline DomainDataset read_embeddings_csv(std::istream& is,
                                         std::optional<int> num_classes = std::nullopt) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(is, line)) throw ParseError(1, "missing header");
  ++line_no;
  auto header = detail::split_commas(line);
  if (header.size() < 3 || detail::trim(header[0]) != "domain" || detail::trim(header[1]) != "label")
    throw ParseError(line_no, "header must start with domain,label and name at least one feature");
  const int d = static_cast<int>(header.size()) - 2;
  for (int j = 0; j < d; ++j) {
    if (detail::trim(header[j + 2]) != "f" + std::to_string(j))
      throw ParseError(line_no, "expected feature column f" + std::to_string(j));
  }
  if (num_classes && *num_classes < 1) throw ConfigError("num_classes must be >= 1");

  std::vector<Example> rows;
  int max_label = -1;
  int max_domain = -1;
  while (std::getline(is, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_commas(line);
    if (static_cast<int>(cells.size()) != d + 2)
      throw ParseError(line_no, "expected " + std::to_string(d + 2) + " fields, got " +
                                    std::to_string(cells.size()));
    Example ex;
    if (!detail::parse_number(cells[0], ex.domain_id) || ex.domain_id < 0)
      throw ParseError(line_no, "domain must be an integer >= 0");
    int label = 0;
    if (!detail::parse_number(cells[1], label)) throw ParseError(line_no, "label must be an integer");
    if (label < -1 || (num_classes && label >= *num_classes))
      throw ParseError(line_no, "label " + std::to_string(label) + " out of range");
    if (label >= 0) ex.label = label;
    ex.features.resize(d);
    for (int j = 0; j < d; ++j) {
      double v = 0;
      if (!detail::parse_number(cells[j + 2], v) || !std::isfinite(v))
        throw ParseError(line_no, "feature f" + std::to_string(j) + " is not a finite number");
      ex.features[j] = v;
    }
    ex.example_id = static_cast<std::int64_t>(rows.size());
    max_label = std::max(max_label, label);
    max_domain = std::max(max_domain, ex.domain_id);
    rows.push_back(std::move(ex));
  }
  DomainDataset ds;
  ds.feature_dim = d;
  ds.num_classes = num_classes ? *num_classes : max_label + 1;
  ds.domains.resize(max_domain + 1);
  for (auto& ex : rows) ds.domains[ex.domain_id].push_back(std::move(ex));
  for (int k = 0; k <= max_domain; ++k)
    if (ds.domains[k].empty()) throw DataError("domain " + std::to_string(k) + " has no rows");
  return ds;
}

inline DomainDataset load_embeddings_csv(const std::string& path,
                                         std::optional<int> num_classes = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return read_embeddings_csv(in, num_classes);
}

}  // namespace cat
