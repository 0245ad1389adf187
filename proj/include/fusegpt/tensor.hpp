#pragma once

// Dense row-major tensors with a dynamic reverse-mode tape, plus the handful
// of neural-net ops the rest of the project is built from. Templated on the
// scalar type: float for ordinary runs, double for gradient verification.

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "fusegpt/common.hpp"

namespace fusegpt {

inline thread_local bool g_grad_enabled = true;

// Disables tape construction in scope; used for inference-only passes.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = prev; }
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated lazily during backward
  bool requires_grad = false;
  // Tape node. needs_grad means a requires_grad leaf is reachable below.
  bool needs_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    impl_->shape = std::move(shape);
    impl_->data.assign(shape_numel(impl_->shape), T(0));
    impl_->requires_grad = requires_grad;
    impl_->needs_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data(), t.data() + t.size(), value);
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

  static Tensor from_data(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != values.size())
      throw DimensionError("from_data: shape " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1)) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = T(dist(rng)) * stddev;
    return t;
  }

  // Kaiming-uniform with the given fan-in: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
  static Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double bound = std::sqrt(6.0 / double(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = T(dist(rng));
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  std::vector<T>& buffer() { return impl_->data; }
  const std::vector<T>& buffer() const { return impl_->data; }

  T item() const {
    if (size() != 1) throw ContractError("item(): tensor is not scalar, shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) {
    impl_->requires_grad = v;
    impl_->needs_grad = v || !impl_->parents.empty();
  }

  bool has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }
  T* grad() { return impl_->grad.data(); }
  const T* grad() const { return impl_->grad.data(); }
  void zero_grad() { impl_->grad.assign(impl_->data.size(), T(0)); }
  void drop_grad() { impl_->grad.clear(); }

  // Leaf copy sharing nothing with the source; never carries tape state.
  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = impl_->requires_grad;
    t.impl_->needs_grad = impl_->requires_grad;
    return t;
  }

  // Detached view-free copy: a frozen leaf with the same values.
  Tensor detach_copy() const {
    Tensor t = clone();
    t.impl_->requires_grad = false;
    t.impl_->needs_grad = false;
    return t;
  }

  bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }
  std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

  static Tensor wrap(std::shared_ptr<TensorImpl<T>> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

namespace detail {

template <typename T>
Tensor<T> make_node(Shape shape, std::vector<Tensor<T>> parents,
                    std::function<void(TensorImpl<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape));
  if (!g_grad_enabled) return out;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.impl()->needs_grad;
  if (!needs) return out;
  auto impl = out.impl();
  impl->needs_grad = true;
  impl->parents.reserve(parents.size());
  for (const auto& p : parents) impl->parents.push_back(p.impl());
  impl->backward_fn = std::move(backward_fn);
  return out;
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
                 int lda, const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
                 int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core arithmetic

// a: [..., K] (>= 2 dims), b: [K, N]. Leading dims of a are flattened into rows.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() < 2 || b.ndim() != 2)
    throw DimensionError("matmul: need a with >=2 dims and 2-D b, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  const std::size_t k = a.dim(a.ndim() - 1);
  if (k != b.dim(0))
    throw DimensionError("matmul: inner dims differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const std::size_t n = b.dim(1);
  const std::size_t m = a.size() / k;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);

  auto ai = a.impl();
  auto bi = b.impl();
  Tensor<T> out = detail::make_node<T>(
      out_shape, {a, b}, [ai, bi, m, n, k](TensorImpl<T>& self) {
        if (ai->needs_grad) {
          ai->ensure_grad();
          // dA = dC . B^T
          detail::gemm(false, true, int(m), int(k), int(n), T(1), self.grad.data(), int(n),
                       bi->data.data(), int(n), T(1), ai->grad.data(), int(k));
        }
        if (bi->needs_grad) {
          bi->ensure_grad();
          // dB = A^T . dC
          detail::gemm(true, false, int(k), int(n), int(m), T(1), ai->data.data(), int(k),
                       self.grad.data(), int(n), T(1), bi->grad.data(), int(n));
        }
      });
  detail::gemm(false, false, int(m), int(n), int(k), T(1), a.data(), int(k), b.data(), int(n),
               T(0), out.data(), int(n));
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  auto ai = a.impl();
  auto bi = b.impl();
  Tensor<T> out = detail::make_node<T>(a.shape(), {a, b}, [ai, bi](TensorImpl<T>& self) {
    if (ai->needs_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
    }
    if (bi->needs_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i];
    }
  });
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  auto ai = a.impl();
  auto bi = b.impl();
  Tensor<T> out = detail::make_node<T>(a.shape(), {a, b}, [ai, bi](TensorImpl<T>& self) {
    if (ai->needs_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
    }
    if (bi->needs_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] -= self.grad[i];
    }
  });
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  return out;
}

// Elementwise (Hadamard) product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "elementwise_product");
  auto ai = a.impl();
  auto bi = b.impl();
  Tensor<T> out = detail::make_node<T>(a.shape(), {a, b}, [ai, bi](TensorImpl<T>& self) {
    if (ai->needs_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * bi->data[i];
    }
    if (bi->needs_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i] * ai->data[i];
    }
  });
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  auto ai = a.impl();
  Tensor<T> out = detail::make_node<T>(a.shape(), {a}, [ai, s](TensorImpl<T>& self) {
    if (!ai->needs_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * s;
  });
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = a.data()[i] * s;
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  auto ai = a.impl();
  Tensor<T> out = detail::make_node<T>(Shape{1}, {a}, [ai](TensorImpl<T>& self) {
    if (!ai->needs_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += self.grad[0];
  });
  T acc = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i];
  out.data()[0] = acc;
  return out;
}

// ---------------------------------------------------------------------------
// Neural-net ops

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  auto xi = x.impl();
  Tensor<T> out = detail::make_node<T>(x.shape(), {x}, [xi](TensorImpl<T>& self) {
    if (!xi->needs_grad) return;
    xi->ensure_grad();
    const double inv_sqrt2 = 0.7071067811865475;
    const double inv_sqrt2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = double(xi->data[i]);
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      xi->grad[i] += self.grad[i] * T(cdf + v * pdf);
    }
  });
  const double inv_sqrt2 = 0.7071067811865475;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = double(x.data()[i]);
    out.data()[i] = T(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  return out;
}

// RMS normalization over the last dim with a learnable gain vector.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-5)) {
  if (x.ndim() < 1 || gain.ndim() != 1 || gain.dim(0) != x.dim(x.ndim() - 1))
    throw DimensionError("rms_norm: gain " + shape_str(gain.shape()) + " does not match " +
                         shape_str(x.shape()));
  const std::size_t h = gain.dim(0);
  const std::size_t rows = x.size() / h;
  auto rstd = std::make_shared<std::vector<T>>(rows);
  auto xi = x.impl();
  auto gi = gain.impl();
  Tensor<T> out =
      detail::make_node<T>(x.shape(), {x, gain}, [xi, gi, rstd, rows, h](TensorImpl<T>& self) {
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xr = xi->data.data() + r * h;
          const T* dy = self.grad.data() + r * h;
          const T rs = (*rstd)[r];
          if (gi->needs_grad) {
            gi->ensure_grad();
            for (std::size_t j = 0; j < h; ++j) gi->grad[j] += dy[j] * xr[j] * rs;
          }
          if (xi->needs_grad) {
            xi->ensure_grad();
            T dot = T(0);
            for (std::size_t j = 0; j < h; ++j) dot += dy[j] * gi->data[j] * xr[j];
            T* dx = xi->grad.data() + r * h;
            const T c = dot * rs * rs * rs / T(h);
            for (std::size_t j = 0; j < h; ++j) dx[j] += dy[j] * gi->data[j] * rs - xr[j] * c;
          }
        }
      });
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * h;
    T ms = T(0);
    for (std::size_t j = 0; j < h; ++j) ms += xr[j] * xr[j];
    const T rs = T(1) / std::sqrt(ms / T(h) + eps);
    (*rstd)[r] = rs;
    T* yr = out.data() + r * h;
    for (std::size_t j = 0; j < h; ++j) yr[j] = xr[j] * rs * gain.data()[j];
  }
  return out;
}

// [B,S,H] -> [B,nh,S,H/nh]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t n_heads) {
  if (x.ndim() != 3 || x.dim(2) % n_heads != 0)
    throw DimensionError("split_heads: bad input " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), s = x.dim(1), h = x.dim(2), dh = h / n_heads;
  auto xi = x.impl();
  Tensor<T> out = detail::make_node<T>(
      {b, n_heads, s, dh}, {x}, [xi, b, s, h, dh, n_heads](TensorImpl<T>& self) {
        if (!xi->needs_grad) return;
        xi->ensure_grad();
        for (std::size_t bb = 0; bb < b; ++bb)
          for (std::size_t hh = 0; hh < n_heads; ++hh)
            for (std::size_t ss = 0; ss < s; ++ss)
              for (std::size_t d = 0; d < dh; ++d)
                xi->grad[(bb * s + ss) * h + hh * dh + d] +=
                    self.grad[((bb * n_heads + hh) * s + ss) * dh + d];
      });
  for (std::size_t bb = 0; bb < b; ++bb)
    for (std::size_t hh = 0; hh < n_heads; ++hh)
      for (std::size_t ss = 0; ss < s; ++ss)
        std::memcpy(out.data() + ((bb * n_heads + hh) * s + ss) * dh,
                    x.data() + (bb * s + ss) * h + hh * dh, dh * sizeof(T));
  return out;
}

// [B,nh,S,dh] -> [B,S,nh*dh]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  if (x.ndim() != 4) throw DimensionError("merge_heads: bad input " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), nh = x.dim(1), s = x.dim(2), dh = x.dim(3), h = nh * dh;
  auto xi = x.impl();
  Tensor<T> out =
      detail::make_node<T>({b, s, h}, {x}, [xi, b, s, h, dh, nh](TensorImpl<T>& self) {
        if (!xi->needs_grad) return;
        xi->ensure_grad();
        for (std::size_t bb = 0; bb < b; ++bb)
          for (std::size_t hh = 0; hh < nh; ++hh)
            for (std::size_t ss = 0; ss < s; ++ss)
              for (std::size_t d = 0; d < dh; ++d)
                xi->grad[((bb * nh + hh) * s + ss) * dh + d] +=
                    self.grad[(bb * s + ss) * h + hh * dh + d];
      });
  for (std::size_t bb = 0; bb < b; ++bb)
    for (std::size_t hh = 0; hh < nh; ++hh)
      for (std::size_t ss = 0; ss < s; ++ss)
        std::memcpy(out.data() + (bb * s + ss) * h + hh * dh,
                    x.data() + ((bb * nh + hh) * s + ss) * dh, dh * sizeof(T));
  return out;
}

// Scaled-dot-product attention with a causal mask; q,k,v: [B,nh,S,dh].
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (q.ndim() != 4 || q.shape() != k.shape() || q.shape() != v.shape())
    throw DimensionError("causal_attention: q/k/v shapes must match, got " +
                         shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                         shape_str(v.shape()));
  const std::size_t b = q.dim(0), nh = q.dim(1), s = q.dim(2), dh = q.dim(3);
  const T att_scale = T(1) / std::sqrt(T(dh));
  auto probs = std::make_shared<std::vector<T>>(b * nh * s * s);

  auto qi = q.impl();
  auto ki = k.impl();
  auto vi = v.impl();
  Tensor<T> out = detail::make_node<T>(
      q.shape(), {q, k, v}, [qi, ki, vi, probs, b, nh, s, dh, att_scale](TensorImpl<T>& self) {
        std::vector<T> dp(s * s), da(s * s);
        const bool nq = qi->needs_grad, nk = ki->needs_grad, nv = vi->needs_grad;
        if (nq) qi->ensure_grad();
        if (nk) ki->ensure_grad();
        if (nv) vi->ensure_grad();
        for (std::size_t g = 0; g < b * nh; ++g) {
          const T* p = probs->data() + g * s * s;
          const T* dy = self.grad.data() + g * s * dh;
          if (nv)
            detail::gemm(true, false, int(s), int(dh), int(s), T(1), p, int(s), dy, int(dh), T(1),
                         vi->grad.data() + g * s * dh, int(dh));
          if (!nq && !nk) continue;
          // dP = dy . V^T, then softmax backward row-wise into dA
          detail::gemm(false, true, int(s), int(s), int(dh), T(1), dy, int(dh),
                       vi->data.data() + g * s * dh, int(dh), T(0), dp.data(), int(s));
          for (std::size_t i = 0; i < s; ++i) {
            T dot = T(0);
            for (std::size_t j = 0; j <= i; ++j) dot += dp[i * s + j] * p[i * s + j];
            for (std::size_t j = 0; j < s; ++j)
              da[i * s + j] = j <= i ? p[i * s + j] * (dp[i * s + j] - dot) : T(0);
          }
          if (nq)
            detail::gemm(false, false, int(s), int(dh), int(s), att_scale, da.data(), int(s),
                         ki->data.data() + g * s * dh, int(dh), T(1),
                         qi->grad.data() + g * s * dh, int(dh));
          if (nk)
            detail::gemm(true, false, int(s), int(dh), int(s), att_scale, da.data(), int(s),
                         qi->data.data() + g * s * dh, int(dh), T(1),
                         ki->grad.data() + g * s * dh, int(dh));
        }
      });

  std::vector<T> scores(s * s);
  for (std::size_t g = 0; g < b * nh; ++g) {
    const T* qg = q.data() + g * s * dh;
    const T* kg = k.data() + g * s * dh;
    detail::gemm(false, true, int(s), int(s), int(dh), att_scale, qg, int(dh), kg, int(dh), T(0),
                 scores.data(), int(s));
    T* pg = probs->data() + g * s * s;
    for (std::size_t i = 0; i < s; ++i) {
      T mx = scores[i * s];
      for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, scores[i * s + j]);
      T z = T(0);
      for (std::size_t j = 0; j <= i; ++j) {
        pg[i * s + j] = std::exp(scores[i * s + j] - mx);
        z += pg[i * s + j];
      }
      for (std::size_t j = 0; j <= i; ++j) pg[i * s + j] /= z;
      for (std::size_t j = i + 1; j < s; ++j) pg[i * s + j] = T(0);
    }
    detail::gemm(false, false, int(s), int(dh), int(s), T(1), pg, int(s), v.data() + g * s * dh,
                 int(dh), T(0), out.data() + g * s * dh, int(dh));
  }
  return out;
}

// Row gather: out[b,s,:] = table[ids[b,s],:]. Backward scatter-adds into the table.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::int32_t>& ids, std::size_t b,
                    std::size_t s) {
  if (table.ndim() != 2) throw DimensionError("embedding: table must be 2-D");
  if (ids.size() != b * s) throw DimensionError("embedding: id count does not match batch shape");
  const std::size_t v = table.dim(0), d = table.dim(1);
  for (auto id : ids)
    if (id < 0 || std::size_t(id) >= v)
      throw ContractError("embedding: token id " + std::to_string(id) + " out of vocab " +
                          std::to_string(v));
  auto ti = table.impl();
  auto ids_copy = std::make_shared<std::vector<std::int32_t>>(ids);
  Tensor<T> out = detail::make_node<T>({b, s, d}, {table}, [ti, ids_copy, d](TensorImpl<T>& self) {
    if (!ti->needs_grad) return;
    ti->ensure_grad();
    for (std::size_t r = 0; r < ids_copy->size(); ++r) {
      T* dst = ti->grad.data() + std::size_t((*ids_copy)[r]) * d;
      const T* src = self.grad.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::memcpy(out.data() + r * d, table.data() + std::size_t(ids[r]) * d, d * sizeof(T));
  return out;
}

// y[b,s,:] = x[b,s,:] + pos[s,:] using the first S rows of the position table.
template <typename T>
Tensor<T> add_positions(const Tensor<T>& x, const Tensor<T>& pos) {
  if (x.ndim() != 3 || pos.ndim() != 2 || pos.dim(1) != x.dim(2) || pos.dim(0) < x.dim(1))
    throw DimensionError("add_positions: " + shape_str(pos.shape()) + " cannot cover " +
                         shape_str(x.shape()));
  const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
  auto xi = x.impl();
  auto pi = pos.impl();
  Tensor<T> out = detail::make_node<T>(x.shape(), {x, pos}, [xi, pi, b, s, d](TensorImpl<T>& self) {
    if (xi->needs_grad) {
      xi->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += self.grad[i];
    }
    if (pi->needs_grad) {
      pi->ensure_grad();
      for (std::size_t bb = 0; bb < b; ++bb)
        for (std::size_t ss = 0; ss < s; ++ss)
          for (std::size_t j = 0; j < d; ++j)
            pi->grad[ss * d + j] += self.grad[(bb * s + ss) * d + j];
    }
  });
  for (std::size_t bb = 0; bb < b; ++bb)
    for (std::size_t ss = 0; ss < s; ++ss)
      for (std::size_t j = 0; j < d; ++j)
        out.data()[(bb * s + ss) * d + j] = x.data()[(bb * s + ss) * d + j] + pos.data()[ss * d + j];
  return out;
}

// Softmax along the batch dimension of a [B,S,H] tensor: for each (s,h) the B
// values form a probability vector. B == 1 is rejected: every output would be
// exactly 1 and a KL loss over it is identically zero.
template <typename T>
Tensor<T> softmax_dim0(const Tensor<T>& x) {
  if (x.ndim() != 3)
    throw DimensionError("softmax_dim0: expected [B,S,H], got " + shape_str(x.shape()));
  if (x.dim(0) < 2)
    throw ContractError(
        "softmax_dim0: batch dimension 1 gives a degenerate one-point distribution (all outputs "
        "1.0, KL identically 0); use batch size >= 2");
  const std::size_t b = x.dim(0), cols = x.dim(1) * x.dim(2);
  auto xi = x.impl();
  auto yi = std::make_shared<std::vector<T>>(x.size());
  Tensor<T> out = detail::make_node<T>(x.shape(), {x}, [xi, yi, b, cols](TensorImpl<T>& self) {
    if (!xi->needs_grad) return;
    xi->ensure_grad();
    for (std::size_t c = 0; c < cols; ++c) {
      T dot = T(0);
      for (std::size_t i = 0; i < b; ++i) dot += self.grad[i * cols + c] * (*yi)[i * cols + c];
      for (std::size_t i = 0; i < b; ++i)
        xi->grad[i * cols + c] += (*yi)[i * cols + c] * (self.grad[i * cols + c] - dot);
    }
  });
  for (std::size_t c = 0; c < cols; ++c) {
    T mx = x.data()[c];
    for (std::size_t i = 1; i < b; ++i) mx = std::max(mx, x.data()[i * cols + c]);
    T z = T(0);
    for (std::size_t i = 0; i < b; ++i) {
      const T e = std::exp(x.data()[i * cols + c] - mx);
      (*yi)[i * cols + c] = e;
      z += e;
    }
    for (std::size_t i = 0; i < b; ++i) {
      (*yi)[i * cols + c] /= z;
      out.data()[i * cols + c] = (*yi)[i * cols + c];
    }
  }
  return out;
}

// Sum over every element of p*log(p/q); log arguments clamped below at 1e-12.
template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& p, const Tensor<T>& q) {
  detail::check_same_shape(p, q, "kl_divergence");
  const T eps = T(1e-12);
  auto pi = p.impl();
  auto qi = q.impl();
  Tensor<T> out = detail::make_node<T>(Shape{1}, {p, q}, [pi, qi, eps](TensorImpl<T>& self) {
    const T g = self.grad[0];
    if (qi->needs_grad) {
      qi->ensure_grad();
      for (std::size_t i = 0; i < qi->grad.size(); ++i) {
        const T qc = std::max(qi->data[i], eps);
        if (qi->data[i] >= eps) qi->grad[i] -= g * pi->data[i] / qc;
      }
    }
    if (pi->needs_grad) {
      pi->ensure_grad();
      for (std::size_t i = 0; i < pi->grad.size(); ++i) {
        const T pc = std::max(pi->data[i], eps);
        const T qc = std::max(qi->data[i], eps);
        pi->grad[i] += g * (std::log(pc / qc) + (pi->data[i] >= eps ? T(1) : T(0)));
      }
    }
  });
  T acc = T(0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T pc = std::max(p.data()[i], eps);
    const T qc = std::max(q.data()[i], eps);
    acc += p.data()[i] * std::log(pc / qc);
  }
  out.data()[0] = acc;
  return out;
}

// Mean next-token negative log-likelihood. logits: [B,S,V]; position t of each
// sequence predicts ids[t+1], so S-1 positions per sequence are scored.
template <typename T>
Tensor<T> next_token_nll(const Tensor<T>& logits, const std::vector<std::int32_t>& ids) {
  if (logits.ndim() != 3)
    throw DimensionError("next_token_nll: expected [B,S,V], got " + shape_str(logits.shape()));
  const std::size_t b = logits.dim(0), s = logits.dim(1), v = logits.dim(2);
  if (ids.size() != b * s) throw DimensionError("next_token_nll: id count mismatch");
  if (s < 2) throw ContractError("next_token_nll: sequence length must be >= 2");
  const std::size_t count = b * (s - 1);
  auto li = logits.impl();
  auto probs = std::make_shared<std::vector<T>>();
  auto ids_copy = std::make_shared<std::vector<std::int32_t>>(ids);
  const bool save = g_grad_enabled && li->needs_grad;
  if (save) probs->resize(b * (s - 1) * v);

  Tensor<T> out = detail::make_node<T>(
      Shape{1}, {logits}, [li, probs, ids_copy, b, s, v, count](TensorImpl<T>& self) {
        if (!li->needs_grad) return;
        li->ensure_grad();
        const T g = self.grad[0] / T(count);
        for (std::size_t bb = 0; bb < b; ++bb)
          for (std::size_t ss = 0; ss + 1 < s; ++ss) {
            const T* pr = probs->data() + (bb * (s - 1) + ss) * v;
            T* dl = li->grad.data() + (bb * s + ss) * v;
            const std::size_t target = std::size_t((*ids_copy)[bb * s + ss + 1]);
            for (std::size_t j = 0; j < v; ++j) dl[j] += g * pr[j];
            dl[target] -= g;
          }
      });

  double acc = 0.0;
  std::vector<T> row(v);
  for (std::size_t bb = 0; bb < b; ++bb)
    for (std::size_t ss = 0; ss + 1 < s; ++ss) {
      const T* lr = logits.data() + (bb * s + ss) * v;
      T mx = lr[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) {
        row[j] = std::exp(lr[j] - mx);
        z += double(row[j]);
      }
      const std::size_t target = std::size_t(ids[bb * s + ss + 1]);
      acc += std::log(z) - double(lr[target] - mx);
      if (save) {
        T* pr = probs->data() + (bb * (s - 1) + ss) * v;
        for (std::size_t j = 0; j < v; ++j) pr[j] = T(double(row[j]) / z);
      }
    }
  out.data()[0] = T(acc / double(count));
  return out;
}

// ---------------------------------------------------------------------------
// Reverse pass

// Propagates dLoss through the tape. Leaf requires_grad tensors keep their
// gradients; intermediate grads and the tape itself are freed afterwards.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  auto root = loss.impl();
  if (!root->needs_grad) return;

  // Iterative post-order topological sort over parents.
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> visited;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorImpl<T>* p = node->parents[idx++].get();
      if (p->needs_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* node = *it;
    if (node->backward_fn && node->grad.size() == node->data.size()) node->backward_fn(*node);
  }
  // Free the tape and intermediate gradients.
  for (TensorImpl<T>* node : order) {
    if (!node->parents.empty()) {
      node->parents.clear();
      node->backward_fn = nullptr;
      if (!node->requires_grad) {
        node->grad.clear();
        node->needs_grad = false;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Optimization

template <typename T>
struct CosineSchedule {
  T initial_lr = T(0);
  long total_steps = 1;
  T min_lr = T(0);

  T operator()(long step) const {
    if (total_steps <= 0) return min_lr;
    const long t = std::min(std::max(step, 0L), total_steps);
    if (t == 0) return initial_lr;
    if (t == total_steps) return min_lr;
    constexpr double pi = 3.14159265358979323846;
    const double c = 0.5 * (1.0 + std::cos(pi * double(t) / double(total_steps)));
    return min_lr + T(c) * (initial_lr - min_lr);
  }
};

template <typename T>
struct AdamConfig {
  T beta1 = T(0.9);
  T beta2 = T(0.95);
  T eps = T(1e-8);
};

template <typename T>
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor<T>>> params, AdamConfig<T> cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    states_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      states_[i].m.assign(params_[i].second.size(), T(0));
      states_[i].v.assign(params_[i].second.size(), T(0));
    }
  }

  void step(T lr) {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(double(cfg_.beta1), double(step_count_));
    const double bc2 = 1.0 - std::pow(double(cfg_.beta2), double(step_count_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& [name, p] = params_[i];
      auto& st = states_[i];
      const T* g = p.has_grad() ? p.grad() : nullptr;
      for (std::size_t j = 0; j < p.size(); ++j) {
        const T gj = g ? g[j] : T(0);
        if (!std::isfinite(double(gj)))
          throw NumericalError("adam_step: non-finite gradient in parameter '" + name +
                               "' at step " + std::to_string(step_count_));
        st.m[j] = cfg_.beta1 * st.m[j] + (T(1) - cfg_.beta1) * gj;
        st.v[j] = cfg_.beta2 * st.v[j] + (T(1) - cfg_.beta2) * gj * gj;
        const T mhat = T(double(st.m[j]) / bc1);
        const T vhat = T(double(st.v[j]) / bc2);
        p.data()[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  long step_count() const { return step_count_; }
  const AdamConfig<T>& config() const { return cfg_; }

 private:
  struct State {
    std::vector<T> m, v;
  };
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<State> states_;
  AdamConfig<T> cfg_;
  long step_count_ = 0;
};

}  // namespace fusegpt
