#pragma once
// Slow, independent reference implementations used by the tests.

#include "cat/core.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <vector>

namespace oracle {

using cat::Matrix;

/// Central-difference gradient of f at x (every entry of x perturbed in turn).
inline Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, Matrix x, double h = 1e-6) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f(x);
    x.data()[i] = keep - h;
    const double down = f(x);
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double max_rel_error(const Matrix& a, const Matrix& b, double floor = 1e-8) {
  double worst = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double d = std::abs(a.data()[i] - b.data()[i]);
    worst = std::max(worst, d / std::max({std::abs(a.data()[i]), std::abs(b.data()[i]), floor}));
  }
  return worst;
}

/// SupCon written straight from the definition: double loop, no max shift.
inline double supcon(const Matrix& z, const std::vector<int>& y, double t) {
  const auto n = z.rows();
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double denom = 0;
    for (Eigen::Index a = 0; a < n; ++a)
      if (a != i) denom += std::exp(z.row(i).dot(z.row(a)) / t);
    double acc = 0;
    int np = 0;
    for (Eigen::Index p = 0; p < n; ++p) {
      if (p == i || y[p] != y[i]) continue;
      acc += std::log(std::exp(z.row(i).dot(z.row(p)) / t) / denom);
      ++np;
    }
    if (np) total += -acc / np;
  }
  return total / static_cast<double>(n);
}

struct Vote {
  int label;
  double agreement;
};

/// Exhaustive kNN vote: full similarity sort per row.
inline std::vector<Vote> knn(const Matrix& z, const std::vector<int>& y, const std::vector<std::int64_t>& ids,
                             int k) {
  const auto n = static_cast<std::size_t>(z.rows());
  std::vector<Vote> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::int64_t>> cand;
    std::map<std::int64_t, std::size_t> pos;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double dot = 0, ni = 0, nj = 0;
      for (Eigen::Index c = 0; c < z.cols(); ++c) {
        dot += z(i, c) * z(j, c);
        ni += z(i, c) * z(i, c);
        nj += z(j, c) * z(j, c);
      }
      cand.push_back({-dot / (std::sqrt(ni) * std::sqrt(nj)), ids[j]});
      pos[ids[j]] = j;
    }
    std::sort(cand.begin(), cand.end());
    std::map<int, int> count;
    int same = 0;
    for (int r = 0; r < k; ++r) {
      const int l = y[pos[cand[r].second]];
      ++count[l];
      same += l == y[i];
    }
    int best = -1, best_n = -1, ties = 0;
    for (auto [l, c] : count) {
      if (c > best_n) {
        best = l;
        best_n = c;
        ties = 1;
      } else if (c == best_n) {
        ++ties;
      }
    }
    out.push_back({ties == 1 ? best : y[i], static_cast<double>(same) / k});
  }
  return out;
}

/// Quantile by linear interpolation between order statistics (numpy "linear").
inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto below = static_cast<std::size_t>(pos);
  if (below + 1 >= v.size()) return v.back();
  if (v[below] == v[below + 1]) return v[below];
  const double frac = pos - static_cast<double>(below);
  return v[below] * (1 - frac) + v[below + 1] * frac;
}

}  // namespace oracle
