#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "pairaug/autodiff.hpp"
#include "pairaug/checkpoint.hpp"
#include "pairaug/nnops.hpp"
#include "pairaug/rng.hpp"

namespace pairaug::nn {

enum class Init { kZeros, kOnes, kXavierUniform, kNormal02 };

/// Insertion-ordered registry of named trainable tensors. Each parameter is
/// initialized from a seed derived from the store seed and its own name, so
/// values do not depend on registration order, and checkpoints serialize in
/// a stable order.
template <typename S>
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed) : seed_(seed) {}

  Var<S> create(const std::string& name, std::vector<int64_t> shape, Init init) {
    PAIRAUG_CHECK(!params_.count(name), StateError, "parameter registered twice: ", name);
    Tensor<S> t(shape);
    Rng rng(derive_seed(seed_, "param/" + name));
    switch (init) {
      case Init::kZeros:
        break;
      case Init::kOnes:
        for (auto& v : t.data) v = S(1);
        break;
      case Init::kXavierUniform: {
        const auto [fan_in, fan_out] = fans(shape);
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (auto& v : t.data) v = static_cast<S>(rng.uniform(-limit, limit));
        break;
      }
      case Init::kNormal02:
        for (auto& v : t.data) v = static_cast<S>(rng.normal() * 0.02);
        break;
    }
    auto var = make_leaf<S>(std::move(t), true);
    var->requires_grad = true;  // params stay trainable regardless of grad mode at creation
    order_.push_back(name);
    params_[name] = var;
    return var;
  }

  Var<S> get(const std::string& name) const {
    auto it = params_.find(name);
    PAIRAUG_CHECK(it != params_.end(), StateError, "unknown parameter: ", name);
    return it->second;
  }

  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return order_.size(); }

  std::vector<Var<S>> all() const {
    std::vector<Var<S>> out;
    out.reserve(order_.size());
    for (const auto& n : order_) out.push_back(params_.at(n));
    return out;
  }

  int64_t count_scalars() const {
    int64_t n = 0;
    for (const auto& name : order_) n += params_.at(name)->value.numel();
    return n;
  }

  void zero_grad() {
    for (const auto& n : order_) {
      auto& p = params_.at(n);
      if (!p->grad.data.empty()) std::fill(p->grad.data.begin(), p->grad.data.end(), S(0));
    }
  }

  Checkpoint to_checkpoint(std::map<std::string, std::string> meta = {}) const {
    Checkpoint ck;
    ck.meta = std::move(meta);
    for (const auto& n : order_) {
      const auto& t = params_.at(n)->value;
      ck.tensors.emplace_back(n, t.template cast<float>());
    }
    return ck;
  }

  /// Restores parameter values. Names and shapes must match exactly.
  void load_checkpoint(const Checkpoint& ck) {
    PAIRAUG_CHECK(ck.tensors.size() == order_.size(), SchemaError,
                  "checkpoint has ", ck.tensors.size(), " tensors, model expects ", order_.size());
    for (const auto& [name, t] : ck.tensors) {
      auto it = params_.find(name);
      PAIRAUG_CHECK(it != params_.end(), SchemaError, "checkpoint tensor not in model: ", name);
      auto& p = it->second;
      PAIRAUG_CHECK(t.shape == p->value.shape, SchemaError, "shape mismatch for ", name, ": file ",
                    shape_str(t.shape), " vs model ", shape_str(p->value.shape));
      p->value = t.template cast<S>();
    }
  }

  uint64_t seed() const { return seed_; }

 private:
  static std::pair<int64_t, int64_t> fans(const std::vector<int64_t>& shape) {
    if (shape.size() == 2) return {shape[0], shape[1]};  // linear [in, out]
    if (shape.size() == 4) {
      const int64_t rf = shape[2] * shape[3];
      return {shape[1] * rf, shape[0] * rf};  // conv [out, in, kh, kw]
    }
    const int64_t n = Tensor<S>::numel_of(shape);
    return {n, n};
  }

  uint64_t seed_;
  std::vector<std::string> order_;
  std::unordered_map<std::string, Var<S>> params_;
};

// ---------------------------------------------------------------------------
// layer helpers
// ---------------------------------------------------------------------------

/// y = x W + b with x [n, in], W [in, out].
template <typename S>
struct Linear {
  Var<S> w, b;
  Linear() = default;
  Linear(ParamStore<S>& ps, const std::string& name, int64_t in, int64_t out) {
    w = ps.create(name + ".w", {in, out}, Init::kXavierUniform);
    b = ps.create(name + ".b", {out}, Init::kZeros);
  }
  Var<S> operator()(const Var<S>& x) const { return add_row(matmul(x, w), b); }
};

template <typename S>
struct Conv2d {
  Var<S> w, b;
  int64_t stride = 1, pad = 0;
  Conv2d() = default;
  Conv2d(ParamStore<S>& ps, const std::string& name, int64_t cin, int64_t cout, int64_t k,
         int64_t stride_, int64_t pad_)
      : stride(stride_), pad(pad_) {
    w = ps.create(name + ".w", {cout, cin, k, k}, Init::kXavierUniform);
    b = ps.create(name + ".b", {cout}, Init::kZeros);
  }
  Var<S> operator()(const Var<S>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename S>
struct LayerNorm {
  Var<S> g, b;
  LayerNorm() = default;
  LayerNorm(ParamStore<S>& ps, const std::string& name, int64_t d) {
    g = ps.create(name + ".g", {d}, Init::kOnes);
    b = ps.create(name + ".b", {d}, Init::kZeros);
  }
  Var<S> operator()(const Var<S>& x) const { return layer_norm(x, g, b); }
};

template <typename S>
struct GroupNorm {
  Var<S> g, b;
  int64_t groups = 1;
  GroupNorm() = default;
  GroupNorm(ParamStore<S>& ps, const std::string& name, int64_t channels, int64_t groups_)
      : groups(groups_) {
    g = ps.create(name + ".g", {channels}, Init::kOnes);
    b = ps.create(name + ".b", {channels}, Init::kZeros);
  }
  Var<S> operator()(const Var<S>& x) const { return group_norm(x, groups, g, b); }
};

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

/// SGD with classical momentum and decoupled weight decay.
template <typename S>
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Var<S>> params, S lr, S momentum, S weight_decay = S(0))
      : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) vel_.push_back(Tensor<S>::zeros(p->value.shape));
  }

  void set_lr(S lr) { lr_ = lr; }
  S lr() const { return lr_; }

  void step() {
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p->grad.data.empty()) continue;
      auto& v = vel_[i];
      for (int64_t j = 0; j < p->value.numel(); ++j) {
        const S g = p->grad.data[j] + weight_decay_ * p->value.data[j];
        v.data[j] = momentum_ * v.data[j] + g;
        p->value.data[j] -= lr_ * v.data[j];
      }
    }
  }

 private:
  std::vector<Var<S>> params_;
  S lr_, momentum_, weight_decay_;
  std::vector<Tensor<S>> vel_;
};

/// AdamW (decoupled weight decay).
template <typename S>
class AdamW {
 public:
  AdamW(std::vector<Var<S>> params, S lr, S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8),
        S weight_decay = S(0))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps),
        weight_decay_(weight_decay) {
    for (const auto& p : params_) {
      m_.push_back(Tensor<S>::zeros(p->value.shape));
      v_.push_back(Tensor<S>::zeros(p->value.shape));
    }
  }

  void set_lr(S lr) { lr_ = lr; }
  S lr() const { return lr_; }

  void step() {
    ++t_;
    const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1_), t_));
    const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2_), t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p->grad.data.empty()) continue;
      for (int64_t j = 0; j < p->value.numel(); ++j) {
        const S g = p->grad.data[j];
        m_[i].data[j] = beta1_ * m_[i].data[j] + (S(1) - beta1_) * g;
        v_[i].data[j] = beta2_ * v_[i].data[j] + (S(1) - beta2_) * g * g;
        const S mhat = m_[i].data[j] / bc1;
        const S vhat = v_[i].data[j] / bc2;
        p->value.data[j] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * p->value.data[j]);
      }
    }
  }

 private:
  std::vector<Var<S>> params_;
  S lr_, beta1_, beta2_, eps_, weight_decay_;
  int64_t t_ = 0;
  std::vector<Tensor<S>> m_, v_;
};

/// Global grad-norm clip; returns the pre-clip norm.
template <typename S>
S clip_grad_norm(const std::vector<Var<S>>& params, S max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    if (p->grad.data.empty()) continue;
    for (S g : p->grad.data) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const S norm = static_cast<S>(std::sqrt(sq));
  if (norm > max_norm && norm > S(0)) {
    const S k = max_norm / norm;
    for (const auto& p : params) {
      if (p->grad.data.empty()) continue;
      for (auto& g : p->grad.data) g *= k;
    }
  }
  return norm;
}

}  // namespace pairaug::nn
