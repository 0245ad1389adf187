#pragma once

// Iterative detect -> group -> fuse -> distill -> remove orchestration, the
// ablation arms, toy-model pre-training and perplexity evaluation.

#include <chrono>
#include <cmath>

#include "fusegpt/checkpoint.hpp"
#include "fusegpt/distill.hpp"

namespace fusegpt {

enum class AblationMode { detect_only, detect_ft, full_fusion };

inline std::string ablation_name(AblationMode m) {
  switch (m) {
    case AblationMode::detect_only: return "detect_only";
    case AblationMode::detect_ft: return "detect_ft";
    case AblationMode::full_fusion: return "full_fusion";
  }
  return "?";
}

inline AblationMode ablation_from_name(const std::string& s) {
  if (s == "detect_only") return AblationMode::detect_only;
  if (s == "detect_ft") return AblationMode::detect_ft;
  if (s == "full_fusion") return AblationMode::full_fusion;
  throw ConfigError("unknown ablation mode '" + s +
                    "' (expected detect_only|detect_ft|full_fusion)");
}

template <typename T>
struct RunConfig {
  double sparsity = 0.25;
  MetricKind metric = MetricKind::MI;
  int group_size = 7;
  std::size_t rank = 8;
  std::size_t lora_rank = 8;
  bool use_lora = true;
  int epochs = 20;
  std::size_t batch_size = 8;
  std::size_t calib_samples = 32;
  std::size_t finetune_samples = 256;
  std::size_t seq_len = 64;
  T lr_coeff = T(1e-3);
  T lr_base = T(9.65e-6);
  std::uint64_t seed = 0;
  AblationMode ablation = AblationMode::full_fusion;
  ImportanceOptions importance;

  nlohmann::ordered_json to_json() const {
    return {{"sparsity", sparsity},
            {"metric", metric_name(metric)},
            {"group_size", group_size},
            {"rank", rank},
            {"lora_rank", lora_rank},
            {"use_lora", use_lora},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"calib_samples", calib_samples},
            {"finetune_samples", finetune_samples},
            {"seq_len", seq_len},
            {"lr_coeff", double(lr_coeff)},
            {"lr_base", double(lr_base)},
            {"seed", seed},
            {"ablation", ablation_name(ablation)}};
  }
};

struct IterationRecord {
  int iteration = 0;
  ImportanceReport importance;
  std::vector<int> group_original;  // original indices of the group, prune target included
  int pruned_original = 0;
  std::vector<double> epoch_losses;
  double detect_seconds = 0.0;
  double fuse_seconds = 0.0;
  double distill_seconds = 0.0;
};

struct BlockFate {
  int original_index = 0;
  std::string status;                // "kept" or "removed"
  int removed_iteration = -1;
  std::vector<int> fused_into;       // original indices that absorbed this block
};

template <typename T>
struct RunReport {
  RunConfig<T> config;
  int initial_blocks = 0;
  int blocks_removed = 0;
  std::vector<IterationRecord> iterations;
  std::vector<BlockFate> block_map;
  std::vector<LossTracePoint> loss_trace;
  double pre_perplexity = 0.0;
  double post_perplexity = 0.0;
  double eval_seconds = 0.0;
  double total_seconds = 0.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["config"] = config.to_json();
    j["initial_blocks"] = initial_blocks;
    j["blocks_removed"] = blocks_removed;
    j["pre_perplexity"] = pre_perplexity;
    j["post_perplexity"] = post_perplexity;
    auto iters = nlohmann::ordered_json::array();
    for (const auto& it : iterations) {
      iters.push_back({{"iteration", it.iteration},
                       {"importance", it.importance.to_json()},
                       {"group", it.group_original},
                       {"pruned", it.pruned_original},
                       {"epoch_losses", it.epoch_losses},
                       {"timings", {{"detect_seconds", it.detect_seconds},
                                    {"fuse_seconds", it.fuse_seconds},
                                    {"distill_seconds", it.distill_seconds}}}});
    }
    j["iterations"] = iters;
    auto fates = nlohmann::ordered_json::array();
    for (const auto& f : block_map) {
      nlohmann::ordered_json e{{"block", f.original_index}, {"status", f.status}};
      if (f.status == "removed") {
        e["removed_iteration"] = f.removed_iteration;
        e["fused_into"] = f.fused_into;
      }
      fates.push_back(e);
    }
    j["block_map"] = fates;
    auto tr = nlohmann::ordered_json::array();
    for (const auto& p : loss_trace) tr.push_back(p.to_json());
    j["loss_trace"] = tr;
    j["timings"] = {{"eval_seconds", eval_seconds}, {"total_seconds", total_seconds}};
    return j;
  }
};

inline int blocks_to_remove(std::size_t n_blocks, double sparsity) {
  if (sparsity < 0.0 || sparsity >= 1.0)
    throw ConfigError("sparsity must be in [0,1), got " + std::to_string(sparsity));
  // Fractional products round up, as in prior depth-pruning work.
  return int(std::ceil(double(n_blocks) * sparsity));
}

// Non-overlapping (by default) window perplexity: exp of the mean NLL over
// every scored position.
template <typename T>
double evaluate_perplexity(const GptModel<T>& model, const std::vector<std::int32_t>& stream,
                           std::size_t seq_len, std::size_t stride = 0) {
  if (stride == 0) stride = seq_len;
  if (seq_len < 2) throw ConfigError("evaluate_perplexity: seq_len must be >= 2");
  if (stream.size() < seq_len + 1)
    throw ConfigError("evaluate_perplexity: corpus has " + std::to_string(stream.size()) +
                      " tokens, need at least " + std::to_string(seq_len + 1));
  NoGradGuard ng;
  std::vector<std::vector<std::int32_t>> rows;
  double nll_sum = 0.0;
  std::size_t windows = 0;
  auto flush = [&]() {
    if (rows.empty()) return;
    TokenBatch batch = TokenBatch::from_rows(rows);
    auto out = model.forward(batch);
    nll_sum += double(next_token_nll(out.logits, batch.ids).item()) * double(rows.size());
    windows += rows.size();
    rows.clear();
  };
  for (std::size_t start = 0; start + seq_len <= stream.size(); start += stride) {
    rows.emplace_back(stream.begin() + std::ptrdiff_t(start),
                      stream.begin() + std::ptrdiff_t(start + seq_len));
    if (rows.size() == 8) flush();
  }
  flush();
  return std::exp(nll_sum / double(windows));
}

namespace detail {

struct Stopwatch {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double lap() {
    auto t1 = std::chrono::steady_clock::now();
    double s = std::chrono::duration<double>(t1 - t0).count();
    t0 = t1;
    return s;
  }
};

}  // namespace detail

// The main loop. Mutates the model in place (detect, fuse, distill, remove,
// final bake) and returns the audit report. Calibration and fine-tuning
// windows are disjoint seeded draws from the training region of the corpus;
// the perplexities are measured on the held-out tail.
template <typename T>
RunReport<T> run_fusegpt(GptModel<T>& model, const Corpus& corpus, const RunConfig<T>& cfg) {
  detail::Stopwatch total_watch;
  RunReport<T> report;
  report.config = cfg;
  report.initial_blocks = int(model.n_live_blocks());
  const int removals = blocks_to_remove(model.n_live_blocks(), cfg.sparsity);
  if (removals >= int(model.n_live_blocks()))
    throw ConfigError("unreachable sparsity: removing " + std::to_string(removals) + " of " +
                      std::to_string(model.n_live_blocks()) + " blocks");
  report.blocks_removed = removals;

  Rng data_rng(cfg.seed);
  std::vector<std::size_t> taken;
  auto calib_windows =
      sample_windows(corpus.stream, corpus.train_end, cfg.seq_len, cfg.calib_samples, data_rng,
                     &taken);
  auto finetune_windows =
      sample_windows(corpus.stream, corpus.train_end, cfg.seq_len, cfg.finetune_samples, data_rng,
                     &taken);
  auto calib = make_batches(calib_windows, std::min(cfg.batch_size, cfg.calib_samples));
  auto finetune = make_batches(finetune_windows, cfg.batch_size);

  const auto heldout = corpus.heldout();
  detail::Stopwatch eval_watch;
  report.pre_perplexity = evaluate_perplexity(model, heldout, cfg.seq_len);
  report.eval_seconds += eval_watch.lap();

  // fate bookkeeping by original index
  std::map<int, BlockFate> fates;
  for (const auto& b : model.blocks())
    fates[b.original_index] = BlockFate{b.original_index, "kept", -1, {}};

  Rng fusion_rng(cfg.seed ^ 0xc2b2ae3d27d4eb4full);
  for (int it = 1; it <= removals; ++it) {
    IterationRecord rec;
    rec.iteration = it;
    detail::Stopwatch watch;

    rec.importance = importance_scores(cfg.metric, model, calib, it, cfg.importance);
    const BlockScore target = select_prune_target(rec.importance);
    rec.detect_seconds = watch.lap();
    rec.pruned_original = target.original_index;

    PartialGroup group =
        build_partial_group(target.live_index, int(model.n_live_blocks()), cfg.group_size);
    for (int i : group.live_indices)
      rec.group_original.push_back(model.block(std::size_t(i)).original_index);

    if (cfg.ablation != AblationMode::detect_only) {
      auto& prune_block = model.block(std::size_t(group.prune_index));
      if (cfg.ablation == AblationMode::full_fusion &&
          (prune_block.fusion_count() > 0 ||
           [&] {
             for (const auto& role : slot_roles())
               if (prune_block.slot(role).lora) return true;
             return false;
           }()))
        bake_source(prune_block);  // a fused block becomes a plain source first

      TeacherCache<T> teacher = cache_teacher(model, group, finetune);

      if (cfg.ablation == AblationMode::full_fusion) {
        for (int i : group.live_indices) {
          if (i == group.prune_index) continue;
          fuse_block_into(model.block(std::size_t(i)), prune_block, cfg.rank, fusion_rng);
          fates[target.original_index].fused_into.push_back(
              model.block(std::size_t(i)).original_index);
        }
      }
      if (cfg.use_lora) {
        for (int i : group.live_indices) {
          if (i == group.prune_index) continue;
          auto& b = model.block(std::size_t(i));
          for (const auto& role : slot_roles()) attach_lora(b.slot(role), cfg.lora_rank, fusion_rng);
        }
      }
      rec.fuse_seconds = watch.lap();

      DistillConfig<T> dcfg;
      dcfg.epochs = cfg.epochs;
      dcfg.lr_coeff = cfg.lr_coeff;
      dcfg.lr_base = cfg.lr_base;
      dcfg.seed = cfg.seed + std::uint64_t(it);
      rec.epoch_losses = distill_group(model, group, finetune, teacher, dcfg, it,
                                       &report.loss_trace);
      rec.distill_seconds = watch.lap();
    }

    fates[target.original_index].status = "removed";
    fates[target.original_index].removed_iteration = it;
    model.remove_block(std::size_t(target.live_index));
    report.iterations.push_back(std::move(rec));
  }

  bake_weights(model);
  eval_watch.lap();
  report.post_perplexity = evaluate_perplexity(model, heldout, cfg.seq_len);
  report.eval_seconds += eval_watch.lap();

  for (auto& [orig, fate] : fates) report.block_map.push_back(fate);
  report.total_seconds = total_watch.lap();
  return report;
}

// Runs the three ablation arms on clones of the same starting model with the
// same seed and data; returns the arm reports keyed by mode.
template <typename T>
struct AblationReport {
  RunReport<T> detect_only, detect_ft, full_fusion;

  nlohmann::ordered_json to_json() const {
    return {{"detect_only", detect_only.to_json()},
            {"detect_ft", detect_ft.to_json()},
            {"full_fusion", full_fusion.to_json()}};
  }
};

template <typename T>
AblationReport<T> run_ablation(const GptModel<T>& start, const Corpus& corpus,
                               const RunConfig<T>& cfg) {
  AblationReport<T> out;
  for (AblationMode mode :
       {AblationMode::detect_only, AblationMode::detect_ft, AblationMode::full_fusion}) {
    GptModel<T> model = start.clone();
    RunConfig<T> arm_cfg = cfg;
    arm_cfg.ablation = mode;
    RunReport<T> rep = run_fusegpt(model, corpus, arm_cfg);
    switch (mode) {
      case AblationMode::detect_only: out.detect_only = std::move(rep); break;
      case AblationMode::detect_ft: out.detect_ft = std::move(rep); break;
      case AblationMode::full_fusion: out.full_fusion = std::move(rep); break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Toy pre-training (stands in for a pre-trained checkpoint)

template <typename T>
struct PretrainSpec {
  GptConfig config;
  long max_steps = 3000;
  double target_nll = 0.0;  // 0 disables early stop
  T lr = T(1e-3);
  T min_lr = T(1e-4);
  std::size_t batch_size = 16;
  std::size_t seq_len = 64;
  std::uint64_t seed = 0;
};

template <typename T>
struct PretrainResult {
  GptModel<T> model;
  long steps_run = 0;
  double final_nll = 0.0;
};

template <typename T>
PretrainResult<T> pretrain_toy(const PretrainSpec<T>& spec, const Corpus& corpus) {
  if (corpus.train_end < spec.seq_len + 1)
    throw ConfigError("pretrain_toy: corpus too small for one batch (" +
                      std::to_string(corpus.train_end) + " train tokens, window " +
                      std::to_string(spec.seq_len) + ")");
  GptConfig cfg = spec.config;
  cfg.seed = spec.seed;
  PretrainResult<T> result;
  result.model = GptModel<T>::init(cfg);
  auto params = result.model.named_parameters();
  for (auto& [n, t] : params) t.set_requires_grad(true);
  Adam<T> opt(params);
  CosineSchedule<T> sched{spec.lr, spec.max_steps, spec.min_lr};
  Rng rng(spec.seed);

  double nll = 0.0;
  long step = 0;
  for (; step < spec.max_steps; ++step) {
    auto windows = sample_windows(corpus.stream, corpus.train_end, spec.seq_len, spec.batch_size,
                                  rng);
    TokenBatch batch = TokenBatch::from_rows(windows);
    Tensor<T> loss = result.model.next_token_nll(batch);
    nll = double(loss.item());
    if (!std::isfinite(nll))
      throw NumericalError("pretrain_toy: non-finite loss at step " + std::to_string(step));
    if (spec.target_nll > 0.0 && nll < spec.target_nll) break;
    backward(loss);
    opt.step(sched(step));
    opt.zero_grad();
  }
  for (auto& [n, t] : params) {
    t.set_requires_grad(false);
    t.drop_grad();
  }
  result.steps_run = step;
  result.final_nll = nll;
  return result;
}

}  // namespace fusegpt
