#pragma once

// Group construction and block-level fusion. The partial group is the window
// of G live blocks around the prune target p that receive the pruned block's
// weights and are later fine-tuned.

#include <algorithm>

#include "fusegpt/gpt.hpp"

namespace fusegpt {

struct PartialGroup {
  std::vector<int> live_indices;  // contiguous, 1-based live positions, contains prune_index
  int prune_index = 0;
  int group_size = 0;

  bool contains(int live) const {
    return std::find(live_indices.begin(), live_indices.end(), live) != live_indices.end();
  }
  int first() const { return live_indices.front(); }
  int last() const { return live_indices.back(); }
};

// Window of G+1 contiguous live indices around p:
//   middle: {p - floor(G/2), ..., p + ceil(G/2)} for ceil(G/2) < p <= n - ceil(G/2)
//   left boundary  (p <= ceil(G/2)):     {1, ..., G+1}
//   right boundary (p > n - ceil(G/2)):  {n-G, ..., n}
// When the live model has fewer than G+1 blocks the group degenerates to all
// live blocks.
inline PartialGroup build_partial_group(int p, int n, int g) {
  if (g < 1) throw ContractError("build_partial_group: group size must be >= 1");
  if (p < 1 || p > n)
    throw ContractError("build_partial_group: prune index " + std::to_string(p) +
                        " out of range 1.." + std::to_string(n));
  PartialGroup group;
  group.prune_index = p;
  group.group_size = g;
  int lo, hi;
  if (n < g + 1) {
    lo = 1;
    hi = n;
  } else {
    const int half_up = (g + 1) / 2;  // ceil(G/2)
    const int half_down = g / 2;      // floor(G/2)
    if (p <= half_up) {
      lo = 1;
      hi = g + 1;
    } else if (p > n - half_up) {
      lo = n - g;
      hi = n;
    } else {
      lo = p - half_down;
      hi = p + half_up;
    }
  }
  for (int i = lo; i <= hi; ++i) group.live_indices.push_back(i);
  return group;
}

// Fuses the source block's six linears into the target block pairwise by
// functional role. Norm gains are not fused. Appends an injection on each
// slot, so repeated fusion of one target accumulates.
template <typename T>
void fuse_block_into(TransformerBlock<T>& target, const TransformerBlock<T>& source,
                     std::size_t rank, Rng& rng) {
  for (const auto& role : slot_roles()) {
    const auto& src = source.slot(role);
    if (src.fusion_count() > 0 || src.lora)
      throw ContractError("fuse_block_into: source block " +
                          std::to_string(source.original_index) +
                          " still carries fusion state; bake it first");
    fuse_layer(target.slot(role), src.base, rank, rng);
  }
}

// Collapses a fused block back to six plain weights. Used before a fused
// block itself becomes a fusion source, and for deployment baking.
template <typename T>
void bake_source(TransformerBlock<T>& block) {
  for (const auto& role : slot_roles()) block.slot(role).bake();
}

// Bakes every block of the model; the result carries zero fusion overhead.
template <typename T>
void bake_weights(GptModel<T>& model) {
  for (auto& b : model.blocks()) bake_source(b);
}

template <typename T>
bool model_has_fusion_state(const GptModel<T>& model) {
  for (const auto& b : model.blocks())
    for (const auto& role : slot_roles()) {
      const auto& s = b.slot(role);
      if (s.fusion_count() > 0 || s.lora) return true;
    }
  return false;
}

}  // namespace fusegpt
