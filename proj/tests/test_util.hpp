#pragma once

// Shared test helpers: central finite differences against the tape, tiny
// model builders, deterministic corpus text.

#include <functional>
#include <string>
#include <vector>

#include "fusegpt/gpt.hpp"

namespace testutil {

using fusegpt::GptConfig;
using fusegpt::GptModel;
using fusegpt::Rng;
using fusegpt::Tensor;

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;
};

// Compares stored analytic gradients on `params` against central finite
// differences of `loss_fn` (which must recompute the loss from current
// parameter values, without touching the tape). Entries where both analytic
// and numeric gradients are below `zero_floor` are treated as agreeing.
inline GradCheckResult check_gradients(
    std::vector<std::pair<std::string, Tensor<double>>> params,
    const std::function<double()>& loss_fn, double h = 1e-5, double zero_floor = 1e-9,
    std::size_t max_entries_per_param = 256) {
  GradCheckResult res;
  for (auto& [name, p] : params) {
    const std::size_t n = p.size();
    const std::size_t step = n <= max_entries_per_param ? 1 : n / max_entries_per_param;
    for (std::size_t j = 0; j < n; j += step) {
      const double orig = p.data()[j];
      p.data()[j] = orig + h;
      const double lp = loss_fn();
      p.data()[j] = orig - h;
      const double lm = loss_fn();
      p.data()[j] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = p.has_grad() ? p.grad()[j] : 0.0;
      const double denom = std::max(std::abs(an), std::abs(fd));
      if (denom < zero_floor) continue;
      const double rel = std::abs(an - fd) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = name + "[" + std::to_string(j) + "] analytic=" + std::to_string(an) +
                    " fd=" + std::to_string(fd);
      }
    }
  }
  return res;
}

// Makes block `live_index` an exact identity on hidden states by zeroing its
// attention-output and MLP-down projections.
template <typename T>
void make_identity_block(GptModel<T>& model, std::size_t live_index) {
  auto& b = model.block(live_index);
  std::fill(b.wo.base.data(), b.wo.base.data() + b.wo.base.size(), T(0));
  std::fill(b.w_down.base.data(), b.w_down.base.data() + b.w_down.base.size(), T(0));
}

template <typename T>
GptModel<T> tiny_model(std::size_t n_blocks = 3, std::size_t d_model = 16, std::size_t n_heads = 2,
                       std::size_t d_ff = 32, std::size_t max_seq = 16, std::uint64_t seed = 7) {
  GptConfig cfg;
  cfg.n_blocks = n_blocks;
  cfg.d_model = d_model;
  cfg.n_heads = n_heads;
  cfg.d_ff = d_ff;
  cfg.max_seq_len = max_seq;
  cfg.seed = seed;
  return GptModel<T>::init(cfg);
}

template <typename T>
fusegpt::TokenBatch random_batch(std::size_t b, std::size_t s, Rng& rng,
                                 std::int32_t vocab = fusegpt::kByteVocab) {
  fusegpt::TokenBatch batch;
  batch.batch = b;
  batch.seq = s;
  std::uniform_int_distribution<std::int32_t> dist(0, vocab - 1);
  for (std::size_t i = 0; i < b * s; ++i) batch.ids.push_back(dist(rng));
  return batch;
}

// Deterministic word-salad corpus with strong local structure: sentences of
// Zipf-weighted words from a small vocabulary, so a toy model has something
// learnable and pruning visibly hurts.
inline std::string synthetic_corpus(std::size_t target_bytes, std::uint64_t seed) {
  static const std::vector<std::string> words = {
      "the",    "model", "block",  "layer",  "weight", "token",  "state",  "prune",
      "fuse",   "group", "train",  "learn",  "deep",   "wide",   "small",  "large",
      "stream", "score", "merge",  "input",  "output", "hidden", "dense",  "sparse"};
  Rng rng(seed);
  std::vector<double> weights;
  for (std::size_t i = 0; i < words.size(); ++i) weights.push_back(1.0 / double(i + 1));
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  std::uniform_int_distribution<int> sentence_len(4, 9);
  std::string text;
  while (text.size() < target_bytes) {
    const int len = sentence_len(rng);
    for (int w = 0; w < len; ++w) {
      text += words[pick(rng)];
      text += w + 1 == len ? "." : " ";
    }
    text += ' ';
  }
  return text;
}

inline double max_abs_diff(const double* a, const double* b, std::size_t n) {
  double m = 0.0;
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const float* a, const float* b, std::size_t n) {
  double m = 0.0;
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace testutil
