#pragma once

// A linear layer whose effective weight is the base weight plus any number of
// frozen injected weights, each gated elementwise by a learnable low-rank
// coefficient pair, plus an optional LoRA adapter on the base weight.
//
// Weights are stored [in x out]; a token row x maps to x . W.

#include <optional>
#include <vector>

#include "fusegpt/tensor.hpp"

namespace fusegpt {

template <typename T>
struct Injection {
  Tensor<T> frozen;   // injected weight, never trained
  Tensor<T> left;     // [in x r], zero-initialized
  Tensor<T> right;    // [r x out], Kaiming-initialized
  std::size_t rank = 0;
};

template <typename T>
struct LoraAdapter {
  Tensor<T> a;  // [in x r], zero-initialized
  Tensor<T> b;  // [r x out], Kaiming-initialized
  std::size_t rank = 0;
};

template <typename T>
struct FusedLinear {
  Tensor<T> base;
  std::vector<Injection<T>> injections;
  std::optional<LoraAdapter<T>> lora;

  FusedLinear() = default;
  explicit FusedLinear(Tensor<T> weight) : base(std::move(weight)) {}

  std::size_t in_dim() const { return base.dim(0); }
  std::size_t out_dim() const { return base.dim(1); }
  std::size_t fusion_count() const { return injections.size(); }

  // Taped expression for the effective weight:
  //   W0 [+ A.B] [+ sum_f (Cl_f . Cr_f) (.) Wf]
  Tensor<T> effective_weight() const {
    Tensor<T> w = base;
    if (lora) w = add(w, matmul(lora->a, lora->b));
    for (const auto& inj : injections) w = add(w, mul(matmul(inj.left, inj.right), inj.frozen));
    return w;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (injections.empty() && !lora) return matmul(x, base);
    return matmul(x, effective_weight());
  }

  // Collapses adapter and injections into one dense base weight.
  void bake() {
    if (injections.empty() && !lora) return;
    NoGradGuard ng;
    Tensor<T> w = effective_weight();
    bool trainable = base.requires_grad();
    base = w.clone();
    base.set_requires_grad(trainable);
    injections.clear();
    lora.reset();
  }

  std::size_t parameter_count() const {
    std::size_t n = base.size();
    if (lora) n += lora->a.size() + lora->b.size();
    for (const auto& inj : injections) n += inj.frozen.size() + inj.left.size() + inj.right.size();
    return n;
  }
};

// Appends an injection gated by a fresh zero/Kaiming coefficient pair. The
// zero C_left guarantees the layer's output is unchanged until training moves
// the coefficients.
template <typename T>
void fuse_layer(FusedLinear<T>& target, const Tensor<T>& source_weight, std::size_t rank,
                Rng& rng) {
  if (source_weight.shape() != target.base.shape())
    throw ContractError("fuse_layer: source weight " + shape_str(source_weight.shape()) +
                        " does not match target " + shape_str(target.base.shape()));
  const std::size_t d = target.in_dim(), k = target.out_dim();
  if (rank == 0 || rank > std::min(d, k))
    throw ContractError("fuse_layer: rank " + std::to_string(rank) + " invalid for " +
                        shape_str(target.base.shape()));
  Injection<T> inj;
  inj.frozen = source_weight.detach_copy();
  inj.left = Tensor<T>::zeros({d, rank});
  inj.left.set_requires_grad(true);
  inj.right = Tensor<T>::kaiming_uniform({rank, k}, rank, rng);
  inj.right.set_requires_grad(true);
  inj.rank = rank;
  target.injections.push_back(std::move(inj));
}

// Attaches a LoRA adapter (A zero, B Kaiming); the base weight is frozen and
// updates flow through A/B instead. No-op if an adapter is already attached.
template <typename T>
void attach_lora(FusedLinear<T>& slot, std::size_t rank, Rng& rng) {
  if (slot.lora) return;
  const std::size_t d = slot.in_dim(), k = slot.out_dim();
  if (rank == 0 || rank > std::min(d, k))
    throw ContractError("attach_lora: rank " + std::to_string(rank) + " invalid for " +
                        shape_str(slot.base.shape()));
  LoraAdapter<T> ad;
  ad.a = Tensor<T>::zeros({d, rank});
  ad.a.set_requires_grad(true);
  ad.b = Tensor<T>::kaiming_uniform({rank, k}, rank, rng);
  ad.b.set_requires_grad(true);
  ad.rank = rank;
  slot.lora = std::move(ad);
  slot.base.set_requires_grad(false);
}

}  // namespace fusegpt
