#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "flowxpert/error.hpp"
#include "flowxpert/types.hpp"

// Dense building blocks with hand-written backpropagation. Activations are
// column-major matrices of shape features x batch, so every sample is a column.
// All blocks are templated on the scalar: float for training and inference,
// double for gradient verification.
namespace flowxpert::nn {

using Index = Eigen::Index;
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

enum class Mode { train, eval };

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// View of one parameter tensor. Buffers (BatchNorm running statistics) carry
// an empty grad and trainable == false.
template <typename T>
struct ParamRef {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  std::span<T> value;
  std::span<T> grad;
  bool trainable = true;
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

template <typename T, int R, int C>
ParamRef<T> make_ref(std::string name, Eigen::Matrix<T, R, C>& value, Eigen::Matrix<T, R, C>* grad) {
  ParamRef<T> p;
  p.name = std::move(name);
  p.rows = value.rows();
  p.cols = value.cols();
  p.value = std::span<T>(value.data(), static_cast<std::size_t>(value.size()));
  if (grad) {
    p.grad = std::span<T>(grad->data(), static_cast<std::size_t>(grad->size()));
  } else {
    p.trainable = false;
  }
  return p;
}

template <typename T>
std::size_t count_trainable(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) {
    if (p.trainable) n += p.value.size();
  }
  return n;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

// z = W x + b.
template <typename T>
class Dense {
 public:
  Dense() = default;
  Dense(Index in, Index out)
      : weight(Matrix<T>::Zero(out, in)),
        bias(Vector<T>::Zero(out)),
        weight_grad(Matrix<T>::Zero(out, in)),
        bias_grad(Vector<T>::Zero(out)) {}

  Index in_features() const { return weight.cols(); }
  Index out_features() const { return weight.rows(); }

  // Glorot-uniform weights, zero bias.
  void init(std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in_features() + out_features()));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Index i = 0; i < weight.size(); ++i) weight.data()[i] = static_cast<T>(dist(rng));
    bias.setZero();
  }

  Matrix<T> forward(const Matrix<T>& x) {
    input_ = x;
    return infer(x);
  }

  Matrix<T> infer(const Matrix<T>& x) const {
    Matrix<T> z = weight * x;
    z.colwise() += bias;
    return z;
  }

  // Overwrites the parameter gradients; returns dL/dx.
  Matrix<T> backward(const Matrix<T>& dz) {
    weight_grad.noalias() = dz * input_.transpose();
    bias_grad = dz.rowwise().sum();
    return weight.transpose() * dz;
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back(make_ref(prefix + ".weight", weight, &weight_grad));
    out.push_back(make_ref(prefix + ".bias", bias, &bias_grad));
  }

  Matrix<T> weight;
  Vector<T> bias;
  Matrix<T> weight_grad;
  Vector<T> bias_grad;

 private:
  Matrix<T> input_;
};

template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(Index features, T momentum = static_cast<T>(kBatchNormMomentum),
                     T epsilon = static_cast<T>(kBatchNormEpsilon))
      : gamma(Vector<T>::Ones(features)),
        beta(Vector<T>::Zero(features)),
        running_mean(Vector<T>::Zero(features)),
        running_var(Vector<T>::Ones(features)),
        gamma_grad(Vector<T>::Zero(features)),
        beta_grad(Vector<T>::Zero(features)),
        momentum(momentum),
        epsilon(epsilon) {}

  Index features() const { return gamma.size(); }

  void init() {
    gamma.setOnes();
    beta.setZero();
    running_mean.setZero();
    running_var.setOnes();
  }

  // Train mode normalises with batch statistics (biased variance) and folds
  // them into the running estimates (unbiased variance).
  Matrix<T> forward(const Matrix<T>& x, Mode mode) {
    if (mode == Mode::eval) {
      inv_std_ = (running_var.array() + epsilon).rsqrt().matrix();
      xhat_ = (x.colwise() - running_mean).array().colwise() * inv_std_.array();
      train_batch_ = false;
      return scale_shift(xhat_);
    }
    const Index n = x.cols();
    if (n < 2) throw BatchTooSmallForTrainMode("batch norm needs at least 2 samples in train mode");
    const Vector<T> mean = x.rowwise().mean();
    Matrix<T> centered = x.colwise() - mean;
    const Vector<T> var = centered.array().square().rowwise().mean().matrix();
    inv_std_ = (var.array() + epsilon).rsqrt().matrix();
    xhat_ = centered.array().colwise() * inv_std_.array();
    train_batch_ = true;
    const T unbias = static_cast<T>(n) / static_cast<T>(n - 1);
    running_mean = (T(1) - momentum) * running_mean + momentum * mean;
    running_var = (T(1) - momentum) * running_var + momentum * unbias * var;
    return scale_shift(xhat_);
  }

  Matrix<T> infer(const Matrix<T>& x) const {
    const Vector<T> inv_std = (running_var.array() + epsilon).rsqrt().matrix();
    Matrix<T> xhat = (x.colwise() - running_mean).array().colwise() * inv_std.array();
    return scale_shift(xhat);
  }

  Matrix<T> backward(const Matrix<T>& dy) {
    gamma_grad = dy.cwiseProduct(xhat_).rowwise().sum();
    beta_grad = dy.rowwise().sum();
    Matrix<T> dxhat = dy.array().colwise() * gamma.array();
    if (!train_batch_) return dxhat.array().colwise() * inv_std_.array();
    const T n = static_cast<T>(dy.cols());
    const Vector<T> sum_dxhat = dxhat.rowwise().sum();
    const Vector<T> sum_dxhat_xhat = dxhat.cwiseProduct(xhat_).rowwise().sum();
    Matrix<T> dx = (n * dxhat).colwise() - sum_dxhat;
    dx.array() -= xhat_.array().colwise() * sum_dxhat_xhat.array();
    return (dx.array().colwise() * (inv_std_.array() / n)).matrix();
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back(make_ref(prefix + ".gamma", gamma, &gamma_grad));
    out.push_back(make_ref(prefix + ".beta", beta, &beta_grad));
  }

  void collect_buffers(ParamList<T>& out, const std::string& prefix) {
    out.push_back(make_ref<T, Eigen::Dynamic, 1>(prefix + ".running_mean", running_mean, nullptr));
    out.push_back(make_ref<T, Eigen::Dynamic, 1>(prefix + ".running_var", running_var, nullptr));
  }

  Vector<T> gamma;
  Vector<T> beta;
  Vector<T> running_mean;
  Vector<T> running_var;
  Vector<T> gamma_grad;
  Vector<T> beta_grad;
  T momentum = static_cast<T>(kBatchNormMomentum);
  T epsilon = static_cast<T>(kBatchNormEpsilon);

 private:
  Matrix<T> scale_shift(const Matrix<T>& xhat) const {
    Matrix<T> y = xhat.array().colwise() * gamma.array();
    y.colwise() += beta;
    return y;
  }

  Matrix<T> xhat_;
  Vector<T> inv_std_;
  bool train_batch_ = false;
};

// f(x) = x for x >= 0, slope * x otherwise. The derivative at 0 is slope.
template <typename T>
class LeakyReLU {
 public:
  explicit LeakyReLU(T slope = static_cast<T>(kLeakySlope)) : slope(slope) {}

  Matrix<T> forward(const Matrix<T>& x) {
    input_ = x;
    return infer(x);
  }

  Matrix<T> infer(const Matrix<T>& x) const {
    return x.unaryExpr([s = slope](T v) { return v >= T(0) ? v : s * v; });
  }

  Matrix<T> backward(const Matrix<T>& dy) const {
    return dy.binaryExpr(input_, [s = slope](T g, T v) { return v > T(0) ? g : s * g; });
  }

  T slope;

 private:
  Matrix<T> input_;
};

// ---------------------------------------------------------------------------
// Network blocks
// ---------------------------------------------------------------------------

// Linear(in -> hidden), BatchNorm, LeakyReLU, Linear(hidden -> out).
template <typename T>
class EmbeddingNet {
 public:
  static constexpr Index kDefaultIn = 15;
  static constexpr Index kDefaultHidden = 128;
  static constexpr Index kDefaultOut = 16;

  explicit EmbeddingNet(Index in = kDefaultIn, Index hidden = kDefaultHidden, Index out = kDefaultOut)
      : fc1(in, hidden), bn(hidden), fc2(hidden, out) {}

  Index in_features() const { return fc1.in_features(); }
  Index out_features() const { return fc2.out_features(); }

  void init(std::mt19937_64& rng) {
    fc1.init(rng);
    bn.init();
    fc2.init(rng);
  }

  Matrix<T> forward(const Matrix<T>& x, Mode mode) {
    return fc2.forward(act.forward(bn.forward(fc1.forward(x), mode)));
  }

  Matrix<T> backward(const Matrix<T>& dy) { return fc1.backward(bn.backward(act.backward(fc2.backward(dy)))); }

  // Eval mode; independent of other batch members.
  Matrix<T> infer(const Matrix<T>& x) const { return fc2.infer(act.infer(bn.infer(fc1.infer(x)))); }

  ParamList<T> parameters() {
    ParamList<T> out;
    fc1.collect(out, "embedding.fc1");
    bn.collect(out, "embedding.bn");
    fc2.collect(out, "embedding.fc2");
    return out;
  }

  ParamList<T> buffers() {
    ParamList<T> out;
    bn.collect_buffers(out, "embedding.bn");
    return out;
  }

  std::size_t parameter_count() const {
    return static_cast<std::size_t>(fc1.weight.size() + fc1.bias.size() + bn.gamma.size() + bn.beta.size() +
                                    fc2.weight.size() + fc2.bias.size());
  }

  Dense<T> fc1;
  BatchNorm<T> bn;
  LeakyReLU<T> act;
  Dense<T> fc2;
};

// Linear(in -> 512), LeakyReLU, Linear(512 -> 256), LeakyReLU, Linear(256 -> 128).
template <typename T>
class EncoderNet {
 public:
  static constexpr Index kDefaultIn = 31;

  explicit EncoderNet(Index in = kDefaultIn, Index h1 = 512, Index h2 = 256, Index out = 128)
      : fc1(in, h1), fc2(h1, h2), fc3(h2, out) {}

  Index in_features() const { return fc1.in_features(); }
  Index out_features() const { return fc3.out_features(); }

  void init(std::mt19937_64& rng) {
    fc1.init(rng);
    fc2.init(rng);
    fc3.init(rng);
  }

  Matrix<T> forward(const Matrix<T>& x) {
    return fc3.forward(act2.forward(fc2.forward(act1.forward(fc1.forward(x)))));
  }

  Matrix<T> backward(const Matrix<T>& dy) {
    return fc1.backward(act1.backward(fc2.backward(act2.backward(fc3.backward(dy)))));
  }

  Matrix<T> infer(const Matrix<T>& x) const { return fc3.infer(act2.infer(fc2.infer(act1.infer(fc1.infer(x))))); }

  ParamList<T> parameters() {
    ParamList<T> out;
    fc1.collect(out, "encoder.fc1");
    fc2.collect(out, "encoder.fc2");
    fc3.collect(out, "encoder.fc3");
    return out;
  }

  std::size_t parameter_count() const {
    return static_cast<std::size_t>(fc1.weight.size() + fc1.bias.size() + fc2.weight.size() + fc2.bias.size() +
                                    fc3.weight.size() + fc3.bias.size());
  }

  Dense<T> fc1;
  LeakyReLU<T> act1;
  Dense<T> fc2;
  LeakyReLU<T> act2;
  Dense<T> fc3;
};

// Linear(128 -> 2).
template <typename T>
class ClassifierHead {
 public:
  explicit ClassifierHead(Index in = 128, Index classes = 2) : fc(in, classes) {}

  void init(std::mt19937_64& rng) { fc.init(rng); }
  Matrix<T> forward(const Matrix<T>& x) { return fc.forward(x); }
  Matrix<T> backward(const Matrix<T>& dy) { return fc.backward(dy); }
  Matrix<T> infer(const Matrix<T>& x) const { return fc.infer(x); }

  ParamList<T> parameters() {
    ParamList<T> out;
    fc.collect(out, "head.fc");
    return out;
  }

  std::size_t parameter_count() const { return static_cast<std::size_t>(fc.weight.size() + fc.bias.size()); }

  Dense<T> fc;
};

template <typename... Models>
std::size_t param_count(const Models&... models) {
  return (std::size_t{0} + ... + models.parameter_count());
}

// [x; embedding(x)], the residual concatenation fed to the encoder.
template <typename T>
Matrix<T> concat_with_embedding(const Matrix<T>& x, const EmbeddingNet<T>& emb) {
  Matrix<T> xe = emb.infer(x);
  Matrix<T> out(x.rows() + xe.rows(), x.cols());
  out.topRows(x.rows()) = x;
  out.bottomRows(xe.rows()) = xe;
  return out;
}

// Logits of the full detector with the embedding in eval mode.
template <typename T>
Matrix<T> detector_forward(const Matrix<T>& x, const EmbeddingNet<T>& emb, const EncoderNet<T>& enc,
                           const ClassifierHead<T>& head) {
  return head.infer(enc.infer(concat_with_embedding(x, emb)));
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

template <typename T>
struct LossResult {
  T loss = 0;
  Matrix<T> grad;  // dL/d(input), same shape as the input batch
};

struct EmbeddingPair {
  Index first = 0;
  Index second = 0;
  PairLabel label = PairLabel::same;
};

// Hinge pair of the contrastive objective: same-cluster distances above m and
// cross-cluster distances below 2m are penalised linearly.
template <typename T>
T contrastive_hinge(T e_pos, T e_neg, T margin) {
  return std::max(T(0), e_pos - margin) + std::max(T(0), T(2) * margin - e_neg);
}

// Mean positive hinge plus mean negative hinge over the listed pairs of
// embedding columns. A term with no pairs contributes 0. Gradients are 0 at
// the hinge kinks and for coincident embeddings.
template <typename T>
LossResult<T> contrastive_loss(const Matrix<T>& embeddings, std::span<const EmbeddingPair> pairs, T margin) {
  LossResult<T> r;
  r.grad = Matrix<T>::Zero(embeddings.rows(), embeddings.cols());
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  for (const auto& p : pairs) (p.label == PairLabel::same ? n_pos : n_neg) += 1;
  T pos_sum = 0;
  T neg_sum = 0;
  for (const auto& p : pairs) {
    const auto diff = (embeddings.col(p.first) - embeddings.col(p.second)).eval();
    const T dist = diff.norm();
    T dloss_ddist = 0;
    if (p.label == PairLabel::same) {
      if (dist > margin) {
        pos_sum += dist - margin;
        dloss_ddist = T(1) / static_cast<T>(n_pos);
      }
    } else {
      if (dist < T(2) * margin) {
        neg_sum += T(2) * margin - dist;
        dloss_ddist = T(-1) / static_cast<T>(n_neg);
      }
    }
    if (dloss_ddist != T(0) && dist > T(0)) {
      const auto g = (diff * (dloss_ddist / dist)).eval();
      r.grad.col(p.first) += g;
      r.grad.col(p.second) -= g;
    }
  }
  if (n_pos > 0) r.loss += pos_sum / static_cast<T>(n_pos);
  if (n_neg > 0) r.loss += neg_sum / static_cast<T>(n_neg);
  return r;
}

template <typename T>
Matrix<T> softmax(const Matrix<T>& logits) {
  Matrix<T> out(logits.rows(), logits.cols());
  for (Index c = 0; c < logits.cols(); ++c) {
    const T mx = logits.col(c).maxCoeff();
    auto e = (logits.col(c).array() - mx).exp();
    out.col(c) = (e / e.sum()).matrix();
  }
  return out;
}

// Mean softmax cross-entropy, max-subtracted.
template <typename T>
LossResult<T> cross_entropy_loss(const Matrix<T>& logits, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != logits.cols()) {
    throw ShapeMismatch("cross entropy: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(logits.cols()) + " samples");
  }
  LossResult<T> r;
  r.grad = softmax(logits);
  const T inv_n = T(1) / static_cast<T>(logits.cols());
  for (Index c = 0; c < logits.cols(); ++c) {
    const Index y = labels[static_cast<std::size_t>(c)];
    const T mx = logits.col(c).maxCoeff();
    const T lse = mx + std::log((logits.col(c).array() - mx).exp().sum());
    r.loss += (lse - logits(y, c)) * inv_n;
    r.grad(y, c) -= T(1);
  }
  r.grad *= inv_n;
  return r;
}

// ---------------------------------------------------------------------------
// Optimisers
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
 public:
  explicit Adam(double learning_rate = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {}

  void step(const ParamList<T>& params) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value.size(), T(0));
        v_.emplace_back(p.value.size(), T(0));
      }
    }
    if (m_.size() != params.size()) throw ShapeMismatch("adam: parameter list changed between steps");
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (params[k].grad.size() != params[k].value.size() || m_[k].size() != params[k].value.size()) {
        throw ShapeMismatch("adam: shape mismatch for " + params[k].name);
      }
    }
    ++t_;
    const T b1 = static_cast<T>(beta1_);
    const T b2 = static_cast<T>(beta2_);
    const T corr1 = static_cast<T>(1.0 - std::pow(beta1_, static_cast<double>(t_)));
    const T corr2 = static_cast<T>(1.0 - std::pow(beta2_, static_cast<double>(t_)));
    const T lr = static_cast<T>(lr_);
    const T eps = static_cast<T>(eps_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto value = params[k].value;
      auto grad = params[k].grad;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < value.size(); ++i) {
        const T g = grad[i];
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        const T mhat = m[i] / corr1;
        const T vhat = v[i] / corr2;
        value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
};

// Plain gradient descent, W <- W - lr * dL/dW.
template <typename T>
class Sgd {
 public:
  explicit Sgd(double learning_rate) : lr_(learning_rate) {}

  void step(const ParamList<T>& params) {
    const T lr = static_cast<T>(lr_);
    for (const auto& p : params) {
      if (p.grad.size() != p.value.size()) throw ShapeMismatch("sgd: shape mismatch for " + p.name);
      for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] -= lr * p.grad[i];
    }
  }

 private:
  double lr_;
};

enum class OptimizerKind { adam, sgd };

template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), adam_(lr), sgd_(lr) {}

  void step(const ParamList<T>& params) {
    if (kind_ == OptimizerKind::adam) {
      adam_.step(params);
    } else {
      sgd_.step(params);
    }
  }

 private:
  OptimizerKind kind_;
  Adam<T> adam_;
  Sgd<T> sgd_;
};

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

// Central differences against the analytic gradient, per parameter element.
// `compute_grads` must run forward + backward and leave gradients in the
// ParamRefs; `loss` must evaluate the same objective without side effects on
// the result. Relative error is |a - n| / max(|a|, |n|, floor).
template <typename T, typename LossFn, typename GradFn>
FiniteDiffReport finite_diff_check(const ParamList<T>& params, LossFn&& loss, GradFn&& compute_grads, T h,
                                   T floor = T(1e-6), std::size_t max_per_tensor = 0) {
  compute_grads();
  std::vector<std::vector<T>> analytic;
  for (const auto& p : params) analytic.emplace_back(p.grad.begin(), p.grad.end());

  FiniteDiffReport rep;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto value = params[k].value;
    const std::size_t n = value.size();
    const std::size_t stride = (max_per_tensor == 0 || n <= max_per_tensor) ? 1 : n / max_per_tensor;
    for (std::size_t i = 0; i < n; i += stride) {
      const T saved = value[i];
      value[i] = saved + h;
      const T up = loss();
      value[i] = saved - h;
      const T down = loss();
      value[i] = saved;
      const double numeric = (static_cast<double>(up) - static_cast<double>(down)) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[k][i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), static_cast<double>(floor)});
      const double rel = std::abs(a - numeric) / denom;
      ++rep.checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = params[k].name;
        rep.worst_index = i;
      }
    }
  }
  return rep;
}

}  // namespace flowxpert::nn
