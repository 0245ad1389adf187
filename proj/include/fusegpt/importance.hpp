#pragma once

// Block-importance metrics on the current model state: BI (local cosine change
// across one block), MI (cosine change of the final hidden state after
// removal), SLEB (next-token NLL of the model with one block removed).
//
// Reports use a uniform "highest selection score = most removable" convention:
// all three raw metrics are lower-is-more-removable, so the selection score is
// the negated raw value. Ties break to the lowest original index.

#include <iostream>
#include <json.hpp>

#include "fusegpt/gpt.hpp"

namespace fusegpt {

enum class MetricKind { MI, BI, SLEB };

inline std::string metric_name(MetricKind m) {
  switch (m) {
    case MetricKind::MI: return "mi";
    case MetricKind::BI: return "bi";
    case MetricKind::SLEB: return "sleb";
  }
  return "?";
}

inline MetricKind metric_from_name(const std::string& s) {
  if (s == "mi") return MetricKind::MI;
  if (s == "bi") return MetricKind::BI;
  if (s == "sleb") return MetricKind::SLEB;
  throw ConfigError("unknown metric '" + s + "' (expected mi|bi|sleb)");
}

struct BlockScore {
  int original_index = 0;
  int live_index = 0;
  double value = 0.0;            // raw metric value (MI/BI/SLEB as defined)
  double selection_score = 0.0;  // higher = more removable
};

struct ImportanceReport {
  MetricKind metric = MetricKind::MI;
  int iteration = 0;
  std::vector<BlockScore> scores;
  int selected_live_index = 0;
  int selected_original_index = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["metric"] = metric_name(metric);
    j["iteration"] = iteration;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& s : scores)
      arr.push_back({{"block", s.original_index}, {"value", s.value}});
    j["scores"] = arr;
    j["selected"] = selected_original_index;
    return j;
  }
};

struct ImportanceOptions {
  // MI normally compares last hidden states before the final norm (the literal
  // output of the last block); this switches to the post-norm state.
  bool use_post_norm_hidden = false;
  // Reads the selection convention literally as "remove the highest raw MI";
  // default removes the block whose removal perturbs the output least.
  bool literal_highest_score = false;
};

namespace detail {

// Sum of per-row cosine similarities between two [B,S,H] states, plus row
// count. Zero-norm rows contribute cosine 0 with a warning.
template <typename T>
void accumulate_row_cosine(const Tensor<T>& a, const Tensor<T>& b, double& cos_sum,
                           std::size_t& rows) {
  check_same_shape(a, b, "row_cosine");
  const std::size_t h = a.dim(a.ndim() - 1);
  const std::size_t r = a.size() / h;
  for (std::size_t i = 0; i < r; ++i) {
    const T* ar = a.data() + i * h;
    const T* br = b.data() + i * h;
    double dot = 0, na = 0, nb = 0;
    for (std::size_t j = 0; j < h; ++j) {
      dot += double(ar[j]) * double(br[j]);
      na += double(ar[j]) * double(ar[j]);
      nb += double(br[j]) * double(br[j]);
    }
    if (na == 0.0 || nb == 0.0) {
      std::cerr << "warning: zero-norm hidden row in cosine metric, treating cosine as 0\n";
    } else {
      cos_sum += dot / (std::sqrt(na) * std::sqrt(nb));
    }
    ++rows;
  }
  // rows counted even for degenerate rows so the expectation stays a flat mean
}

inline ImportanceReport finalize_report(MetricKind metric, int iteration,
                                        std::vector<BlockScore> scores, bool select_highest_raw) {
  ImportanceReport rep;
  rep.metric = metric;
  rep.iteration = iteration;
  for (auto& s : scores) s.selection_score = select_highest_raw ? s.value : -s.value;
  rep.scores = std::move(scores);
  const BlockScore* best = nullptr;
  for (const auto& s : rep.scores)
    if (!best || s.selection_score > best->selection_score ||
        (s.selection_score == best->selection_score && s.original_index < best->original_index))
      best = &s;
  if (best) {
    rep.selected_live_index = best->live_index;
    rep.selected_original_index = best->original_index;
  }
  return rep;
}

}  // namespace detail

template <typename T>
ImportanceReport bi_scores(const GptModel<T>& model, const std::vector<TokenBatch>& calib,
                           int iteration = 0, const ImportanceOptions& opts = {}) {
  if (calib.empty()) throw ContractError("bi_scores: empty calibration set");
  NoGradGuard ng;
  const std::size_t n = model.n_live_blocks();
  std::vector<double> cos_sum(n, 0.0);
  std::vector<std::size_t> rows(n, 0);
  std::set<int> capture;
  for (std::size_t i = 0; i <= n; ++i) capture.insert(int(i));
  for (const auto& batch : calib) {
    auto out = model.forward(batch, capture);
    for (std::size_t i = 1; i <= n; ++i)
      detail::accumulate_row_cosine(out.captured.at(int(i) - 1), out.captured.at(int(i)),
                                    cos_sum[i - 1], rows[i - 1]);
  }
  std::vector<BlockScore> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    scores[i].original_index = model.block(i + 1).original_index;
    scores[i].live_index = int(i) + 1;
    scores[i].value = 1.0 - cos_sum[i] / double(rows[i]);
  }
  return detail::finalize_report(MetricKind::BI, iteration, std::move(scores),
                                 opts.literal_highest_score);
}

template <typename T>
ImportanceReport mi_scores(const GptModel<T>& model, const std::vector<TokenBatch>& calib,
                           int iteration = 0, const ImportanceOptions& opts = {}) {
  if (calib.empty()) throw ContractError("mi_scores: empty calibration set");
  NoGradGuard ng;
  const std::size_t n = model.n_live_blocks();
  std::vector<double> cos_sum(n, 0.0);
  std::vector<std::size_t> rows(n, 0);
  for (const auto& batch : calib) {
    auto dense = model.forward(batch);
    const Tensor<T>& ref = opts.use_post_norm_hidden ? dense.post_norm_hidden : dense.last_hidden;
    for (std::size_t i = 1; i <= n; ++i) {
      auto pruned = model.forward_skipping(batch, {int(i)});
      const Tensor<T>& cmp =
          opts.use_post_norm_hidden ? pruned.post_norm_hidden : pruned.last_hidden;
      detail::accumulate_row_cosine(ref, cmp, cos_sum[i - 1], rows[i - 1]);
    }
  }
  std::vector<BlockScore> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    scores[i].original_index = model.block(i + 1).original_index;
    scores[i].live_index = int(i) + 1;
    scores[i].value = 1.0 - cos_sum[i] / double(rows[i]);
  }
  return detail::finalize_report(MetricKind::MI, iteration, std::move(scores),
                                 opts.literal_highest_score);
}

template <typename T>
ImportanceReport sleb_scores(const GptModel<T>& model, const std::vector<TokenBatch>& calib,
                             int iteration = 0, const ImportanceOptions& opts = {}) {
  if (calib.empty()) throw ContractError("sleb_scores: empty calibration set");
  NoGradGuard ng;
  const std::size_t n = model.n_live_blocks();
  std::vector<BlockScore> scores(n);
  for (std::size_t i = 1; i <= n; ++i) {
    double nll_sum = 0.0;
    for (const auto& batch : calib) {
      auto out = model.forward_skipping(batch, {int(i)});
      nll_sum += double(next_token_nll(out.logits, batch.ids).item());
    }
    scores[i - 1].original_index = model.block(i).original_index;
    scores[i - 1].live_index = int(i);
    scores[i - 1].value = nll_sum / double(calib.size());
  }
  return detail::finalize_report(MetricKind::SLEB, iteration, std::move(scores),
                                 opts.literal_highest_score);
}

template <typename T>
ImportanceReport importance_scores(MetricKind metric, const GptModel<T>& model,
                                   const std::vector<TokenBatch>& calib, int iteration = 0,
                                   const ImportanceOptions& opts = {}) {
  switch (metric) {
    case MetricKind::MI: return mi_scores(model, calib, iteration, opts);
    case MetricKind::BI: return bi_scores(model, calib, iteration, opts);
    case MetricKind::SLEB: return sleb_scores(model, calib, iteration, opts);
  }
  throw ContractError("importance_scores: bad metric");
}

// Deterministic selection: best selection score, ties to the lowest original
// index. A single live block cannot be pruned.
inline const BlockScore& select_prune_target(const ImportanceReport& report) {
  if (report.scores.empty()) throw ContractError("select_prune_target: empty report");
  if (report.scores.size() == 1)
    throw ContractError("select_prune_target: single live block, cannot prune to zero");
  const BlockScore* best = nullptr;
  for (const auto& s : report.scores)
    if (!best || s.selection_score > best->selection_score ||
        (s.selection_score == best->selection_score && s.original_index < best->original_index))
      best = &s;
  return *best;
}

}  // namespace fusegpt
