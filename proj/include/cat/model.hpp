#pragma once
// MLP backbone with a classifier head and an L2-normalised projection head.
// Forward and reverse passes are written out explicitly; all arithmetic is
// 64-bit.

#include "cat/core.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <span>
#include <vector>

namespace cat {

struct AffineLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

struct ModelShape {
  int input_dim = 0;
  std::vector<int> hidden = {64, 64};
  int num_classes = 0;
  int proj_dim = 32;
};

// Parameter layout shared by ModelParams and Gradients.
struct ParameterTree {
  std::vector<AffineLayer> backbone;
  AffineLayer classifier;
  AffineLayer projector;

  ModelShape shape() const {
    ModelShape s;
    s.input_dim = backbone.empty() ? static_cast<int>(classifier.weight.cols())
                                   : static_cast<int>(backbone.front().weight.cols());
    s.hidden.clear();
    for (const auto& l : backbone) s.hidden.push_back(static_cast<int>(l.weight.rows()));
    s.num_classes = static_cast<int>(classifier.weight.rows());
    s.proj_dim = static_cast<int>(projector.weight.rows());
    return s;
  }

  std::vector<std::span<double>> blocks() {
    std::vector<std::span<double>> out;
    auto add = [&](AffineLayer& l) {
      out.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
      out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
    };
    for (auto& l : backbone) add(l);
    add(classifier);
    add(projector);
    return out;
  }

  std::vector<std::span<const double>> blocks() const {
    std::vector<std::span<const double>> out;
    for (auto s : const_cast<ParameterTree*>(this)->blocks()) out.emplace_back(s.data(), s.size());
    return out;
  }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (auto b : blocks()) n += b.size();
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(num_values());
    for (auto b : blocks()) out.insert(out.end(), b.begin(), b.end());
    return out;
  }

  void assign(std::span<const double> flat) {
    require(flat.size() == num_values(), "flat parameter vector has wrong length");
    std::size_t off = 0;
    for (auto b : blocks()) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), b.size(), b.begin());
      off += b.size();
    }
  }

  bool all_finite() const {
    for (auto b : blocks())
      for (double v : b)
        if (!std::isfinite(v)) return false;
    return true;
  }

  // Names of the parameter blocks in blocks() order, for diagnostics.
  std::vector<std::string> block_names() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < backbone.size(); ++i) {
      out.push_back("backbone[" + std::to_string(i) + "].weight");
      out.push_back("backbone[" + std::to_string(i) + "].bias");
    }
    for (const char* head : {"classifier", "projector"}) {
      out.push_back(std::string(head) + ".weight");
      out.push_back(std::string(head) + ".bias");
    }
    return out;
  }

  static ParameterTree zeros(const ModelShape& s) {
    ParameterTree t;
    int in = s.input_dim;
    for (int h : s.hidden) {
      t.backbone.push_back({Matrix::Zero(h, in), Vector::Zero(h)});
      in = h;
    }
    t.classifier = {Matrix::Zero(s.num_classes, in), Vector::Zero(s.num_classes)};
    t.projector = {Matrix::Zero(s.proj_dim, in), Vector::Zero(s.proj_dim)};
    return t;
  }
};

struct Gradients : ParameterTree {
  Gradients() = default;
  explicit Gradients(ParameterTree t) : ParameterTree(std::move(t)) {}

  static Gradients zeros_like(const ParameterTree& p) { return Gradients(ParameterTree::zeros(p.shape())); }

  Gradients& operator+=(const Gradients& o) {
    auto mine = blocks();
    auto theirs = o.blocks();
    require(mine.size() == theirs.size(), "gradient structures differ");
    for (std::size_t b = 0; b < mine.size(); ++b) {
      require(mine[b].size() == theirs[b].size(), "gradient block sizes differ");
      for (std::size_t i = 0; i < mine[b].size(); ++i) mine[b][i] += theirs[b][i];
    }
    return *this;
  }
};

struct ModelParams : ParameterTree {
  ModelParams() = default;
  explicit ModelParams(ParameterTree t) : ParameterTree(std::move(t)) {}

  /// He-scaled Gaussian weights, zero biases.
  static ModelParams init(const ModelShape& s, std::uint64_t seed) {
    require(s.input_dim > 0 && s.num_classes > 0 && s.proj_dim > 0, "model shape must be positive");
    ModelParams p(ParameterTree::zeros(s));
    Rng rng(derive_seed(seed, 0x1417));
    auto fill = [&](Matrix& w) {
      std::normal_distribution<double> n(0.0, std::sqrt(2.0 / static_cast<double>(w.cols())));
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
    };
    for (auto& l : p.backbone) fill(l.weight);
    fill(p.classifier.weight);
    fill(p.projector.weight);
    return p;
  }
};

struct ForwardTrace {
  Matrix input;
  std::vector<Matrix> pre;  // per backbone layer, before ReLU
  std::vector<Matrix> act;  // per backbone layer, after ReLU
  Matrix logits;
  Matrix probs;
  Matrix proj;       // projector output before normalisation
  Vector proj_norm;  // row norms of proj
  Matrix embedding;  // unit rows

  const Matrix& features() const { return act.empty() ? input : act.back(); }
};

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - m).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

inline Vector log_sum_exp_rows(const Matrix& logits) {
  Vector out(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    out[i] = m + std::log((logits.row(i).array() - m).exp().sum());
  }
  return out;
}

namespace detail {
inline Matrix affine(const Matrix& x, const AffineLayer& l) {
  Matrix out = x * l.weight.transpose();
  out.rowwise() += l.bias.transpose();
  return out;
}
}  // namespace detail

inline ForwardTrace forward(const ParameterTree& params, const Matrix& batch) {
  const ModelShape s = params.shape();
  if (batch.cols() != s.input_dim)
    throw ContractViolation("batch has " + std::to_string(batch.cols()) + " columns, model expects " +
                            std::to_string(s.input_dim));
  if (!batch.allFinite()) throw NumericError("non-finite value in model input");
  ForwardTrace tr;
  tr.input = batch;
  const Matrix* h = &tr.input;
  for (const auto& layer : params.backbone) {
    tr.pre.push_back(detail::affine(*h, layer));
    tr.act.push_back(tr.pre.back().cwiseMax(0.0));
    h = &tr.act.back();
  }
  tr.logits = detail::affine(*h, params.classifier);
  tr.probs = softmax_rows(tr.logits);
  tr.proj = detail::affine(*h, params.projector);
  tr.proj_norm = tr.proj.rowwise().norm();
  tr.embedding = tr.proj;
  // A zero projection (all features dead, zero bias) maps to the first basis vector.
  for (Eigen::Index i = 0; i < tr.proj.rows(); ++i) {
    if (tr.proj_norm[i] > 0.0) {
      tr.embedding.row(i) /= tr.proj_norm[i];
    } else {
      tr.embedding.row(i).setZero();
      tr.embedding(i, 0) = 1.0;
    }
  }
  return tr;
}

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;  // w.r.t. the loss input (logits or embeddings)
};

/// Mean cross-entropy from logits, computed through log-sum-exp.
/// Gradient w.r.t. logits is (softmax - onehot) / N.
inline LossAndGrad cross_entropy(const Matrix& logits, std::span<const int> labels) {
  require(static_cast<Eigen::Index>(labels.size()) == logits.rows(), "labels/logits row mismatch");
  LossAndGrad out;
  out.grad = Matrix::Zero(logits.rows(), logits.cols());
  if (labels.empty()) return out;
  const double n = static_cast<double>(labels.size());
  const Vector lse = log_sum_exp_rows(logits);
  const Matrix p = softmax_rows(logits);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[i];
    require(y >= 0 && y < logits.cols(), "label out of range");
    out.loss += lse[i] - logits(i, y);
    out.grad.row(i) = p.row(i) / n;
    out.grad(i, y) -= 1.0 / n;
  }
  out.loss /= n;
  return out;
}

/// Cross-entropy summed over rows with mask[i] set, divided by `denominator`.
/// Unmasked rows contribute nothing but still count in the denominator.
inline LossAndGrad masked_cross_entropy(const Matrix& logits, std::span<const int> labels,
                                        const std::vector<bool>& mask, double denominator) {
  require(static_cast<Eigen::Index>(labels.size()) == logits.rows() &&
              mask.size() == labels.size(),
          "masked cross-entropy inputs misaligned");
  require(denominator > 0, "masked cross-entropy denominator must be positive");
  LossAndGrad out;
  out.grad = Matrix::Zero(logits.rows(), logits.cols());
  const Vector lse = log_sum_exp_rows(logits);
  const Matrix p = softmax_rows(logits);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    if (!mask[i]) continue;
    const int y = labels[i];
    require(y >= 0 && y < logits.cols(), "label out of range");
    out.loss += lse[i] - logits(i, y);
    out.grad.row(i) = p.row(i) / denominator;
    out.grad(i, y) -= 1.0 / denominator;
  }
  out.loss /= denominator;
  return out;
}

/// Mean of -log p(y) for already-normalised probabilities (no gradient).
inline double cross_entropy_from_probs(const Matrix& probs, std::span<const int> labels) {
  require(static_cast<Eigen::Index>(labels.size()) == probs.rows(), "labels/probs row mismatch");
  if (labels.empty()) return 0.0;
  double s = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    s -= std::log(std::max(probs(i, labels[i]), std::numeric_limits<double>::min()));
  return s / static_cast<double>(labels.size());
}

/// Reverse pass. Cotangents from the classifier and projector heads are summed
/// in the shared backbone.
inline Gradients backward(const ParameterTree& params, const ForwardTrace& tr, const Matrix& d_logits,
                          const Matrix& d_embedding) {
  const Eigen::Index n = tr.input.rows();
  require(d_logits.rows() == n && d_logits.cols() == tr.logits.cols(), "d_logits shape mismatch");
  require(d_embedding.rows() == n && d_embedding.cols() == tr.embedding.cols(),
          "d_embedding shape mismatch");
  require(tr.pre.size() == params.backbone.size(), "trace does not match parameters");

  Gradients g = Gradients::zeros_like(params);
  // Jacobian of u / |u|: (I - z z^T) / |u|
  Matrix d_proj(n, tr.proj.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double along = tr.embedding.row(i).dot(d_embedding.row(i));
    if (tr.proj_norm[i] > 0.0)
      d_proj.row(i) = (d_embedding.row(i) - along * tr.embedding.row(i)) / tr.proj_norm[i];
    else
      d_proj.row(i).setZero();
  }
  const Matrix& h_last = tr.features();
  g.classifier.weight = d_logits.transpose() * h_last;
  g.classifier.bias = d_logits.colwise().sum().transpose();
  g.projector.weight = d_proj.transpose() * h_last;
  g.projector.bias = d_proj.colwise().sum().transpose();

  Matrix d_h = d_logits * params.classifier.weight + d_proj * params.projector.weight;
  for (std::size_t l = params.backbone.size(); l-- > 0;) {
    Matrix d_pre = d_h.cwiseProduct((tr.pre[l].array() > 0.0).cast<double>().matrix());
    const Matrix& h_in = l == 0 ? tr.input : tr.act[l - 1];
    g.backbone[l].weight = d_pre.transpose() * h_in;
    g.backbone[l].bias = d_pre.colwise().sum().transpose();
    if (l > 0) d_h = d_pre * params.backbone[l].weight;
  }
  return g;
}

/// Heavy-ball SGD: v <- m v + g, p <- p - lr v.
class SgdOptimizer {
 public:
  SgdOptimizer(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (!(lr >= 0)) throw ConfigError("learning rate must be >= 0");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
  }

  void step(ParameterTree& params, const Gradients& grads) {
    if (velocity_.backbone.empty() && velocity_.classifier.weight.size() == 0)
      velocity_ = Gradients::zeros_like(params);
    auto p = params.blocks();
    auto g = grads.blocks();
    auto v = velocity_.blocks();
    require(p.size() == g.size() && p.size() == v.size(), "optimizer shapes differ");
    for (std::size_t b = 0; b < p.size(); ++b) {
      require(p[b].size() == g[b].size(), "optimizer block sizes differ");
      for (std::size_t i = 0; i < p[b].size(); ++i) {
        v[b][i] = momentum_ * v[b][i] + g[b][i];
        p[b][i] -= lr_ * v[b][i];
      }
    }
  }

  double lr() const { return lr_; }
  double momentum() const { return momentum_; }

 private:
  double lr_;
  double momentum_;
  Gradients velocity_;
};

inline std::vector<int> predict(const ParameterTree& params, const Matrix& batch) {
  const ForwardTrace tr = forward(params, batch);
  std::vector<int> out(static_cast<std::size_t>(batch.rows()));
  for (Eigen::Index i = 0; i < batch.rows(); ++i) {
    Eigen::Index arg = 0;
    tr.logits.row(i).maxCoeff(&arg);
    out[i] = static_cast<int>(arg);
  }
  return out;
}

// Checkpoint layout (all integers uint32 little-endian, values IEEE-754 binary64
// little-endian):
//   magic "CATCKPT1" (8 bytes), version (=1), hidden layer count L,
//   then for each of the L backbone layers, the classifier and the projector:
//   rows, cols, rows*cols weights row-major, rows biases.
namespace checkpoint {

inline constexpr char kMagic[8] = {'C', 'A', 'T', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian host");

inline void save(std::ostream& os, const ParameterTree& p) {
  auto put_u32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); };
  os.write(kMagic, sizeof kMagic);
  put_u32(kVersion);
  put_u32(static_cast<std::uint32_t>(p.backbone.size()));
  auto put_layer = [&](const AffineLayer& l) {
    put_u32(static_cast<std::uint32_t>(l.weight.rows()));
    put_u32(static_cast<std::uint32_t>(l.weight.cols()));
    os.write(reinterpret_cast<const char*>(l.weight.data()),
             static_cast<std::streamsize>(sizeof(double) * l.weight.size()));
    os.write(reinterpret_cast<const char*>(l.bias.data()),
             static_cast<std::streamsize>(sizeof(double) * l.bias.size()));
  };
  for (const auto& l : p.backbone) put_layer(l);
  put_layer(p.classifier);
  put_layer(p.projector);
  if (!os) throw DataError("checkpoint write failed");
}

inline ModelParams load(std::istream& is) {
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw DataError("not a checkpoint file");
  auto get_u32 = [&] {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw DataError("truncated checkpoint");
    return v;
  };
  if (get_u32() != kVersion) throw DataError("unsupported checkpoint version");
  const std::uint32_t layers = get_u32();
  auto get_layer = [&] {
    const std::uint32_t rows = get_u32();
    const std::uint32_t cols = get_u32();
    AffineLayer l{Matrix(rows, cols), Vector(rows)};
    is.read(reinterpret_cast<char*>(l.weight.data()),
            static_cast<std::streamsize>(sizeof(double) * l.weight.size()));
    is.read(reinterpret_cast<char*>(l.bias.data()),
            static_cast<std::streamsize>(sizeof(double) * l.bias.size()));
    if (!is) throw DataError("truncated checkpoint");
    return l;
  };
  ModelParams p;
  for (std::uint32_t i = 0; i < layers; ++i) p.backbone.push_back(get_layer());
  p.classifier = get_layer();
  p.projector = get_layer();
  Eigen::Index in = p.backbone.empty() ? p.classifier.weight.cols() : p.backbone.front().weight.cols();
  for (const auto& l : p.backbone) {
    if (l.weight.cols() != in) throw DataError("checkpoint layer shapes do not chain");
    in = l.weight.rows();
  }
  if (p.classifier.weight.cols() != in || p.projector.weight.cols() != in)
    throw DataError("checkpoint head shapes do not chain");
  return p;
}

inline void save_file(const std::string& path, const ParameterTree& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  save(os, p);
}

inline ModelParams load_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return load(is);
}

}  // namespace checkpoint

}  // namespace cat
