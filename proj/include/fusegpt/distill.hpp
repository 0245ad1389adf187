#pragma once

// Group-level knowledge learning: cache the original group's activations
// (with the prune target still present), then train the fused group against
// them with a batch-dim softmax + KL loss, dual Adam parameter groups and
// cosine-decayed learning rates.

#include <json.hpp>

#include "fusegpt/fusion.hpp"
#include "fusegpt/importance.hpp"

namespace fusegpt {

template <typename T>
struct DistillConfig {
  int epochs = 20;
  T lr_coeff = T(1e-3);   // decomposed coefficient matrices
  T lr_base = T(9.65e-6); // origin weights (or their LoRA adapters)
  T beta1 = T(0.9);
  T beta2 = T(0.95);
  std::uint64_t seed = 0;
  // Recomputes the group input live each step instead of using the cache.
  // Upstream blocks never train during a job, so this only trades time for
  // memory; kept for comparison runs.
  bool recompute_upstream = false;
};

template <typename T>
struct TeacherCache {
  std::vector<Tensor<T>> inputs;   // hidden state entering the group's first block
  std::vector<Tensor<T>> outputs;  // hidden state after the group's last block
};

struct LossTracePoint {
  int iteration = 0;
  int epoch = 0;
  double mean_loss = 0.0;
  double lr_coeff = 0.0;
  double lr_base = 0.0;

  nlohmann::ordered_json to_json() const {
    return {{"iteration", iteration},
            {"epoch", epoch},
            {"mean_loss", mean_loss},
            {"lr_coeff", lr_coeff},
            {"lr_base", lr_base}};
  }
};

// One full-model forward per batch; the prune target is still in the path.
template <typename T>
TeacherCache<T> cache_teacher(const GptModel<T>& model, const PartialGroup& group,
                              const std::vector<TokenBatch>& batches) {
  NoGradGuard ng;
  TeacherCache<T> cache;
  const int before = group.first() - 1;
  const int last = group.last();
  for (const auto& batch : batches) {
    auto out = model.forward(batch, {before, last});
    cache.inputs.push_back(out.captured.at(before).detach_copy());
    cache.outputs.push_back(out.captured.at(last).detach_copy());
  }
  return cache;
}

// Applies the group's blocks (minus the prune target) to a cached input
// hidden state. Taped, so gradients reach the group's trainable parameters.
template <typename T>
Tensor<T> student_forward(const GptModel<T>& model, const PartialGroup& group,
                          const Tensor<T>& input_hidden) {
  if (input_hidden.ndim() != 3 || input_hidden.dim(2) != model.config().d_model)
    throw ContractError("student_forward: cached input " + shape_str(input_hidden.shape()) +
                        " does not match d_model " + std::to_string(model.config().d_model));
  Tensor<T> h = input_hidden;
  for (int i : group.live_indices) {
    if (i == group.prune_index) continue;
    h = model.block(std::size_t(i)).forward(h, model.config().n_heads);
  }
  return h;
}

namespace detail {

// Trainable parameter roster of a group, split into the coefficient group
// (low-rank gate factors) and the base group (origin weights or adapters).
template <typename T>
struct GroupRoster {
  std::vector<std::pair<std::string, Tensor<T>>> coeff;
  std::vector<std::pair<std::string, Tensor<T>>> base;

  std::vector<Tensor<T>> all() const {
    std::vector<Tensor<T>> out;
    for (const auto& [n, t] : coeff) out.push_back(t);
    for (const auto& [n, t] : base) out.push_back(t);
    return out;
  }
};

template <typename T>
GroupRoster<T> build_roster(GptModel<T>& model, const PartialGroup& group) {
  GroupRoster<T> roster;
  for (int i : group.live_indices) {
    if (i == group.prune_index) continue;
    auto& b = model.block(std::size_t(i));
    const std::string prefix = "block" + std::to_string(b.original_index) + ".";
    for (const auto& role : slot_roles()) {
      auto& s = b.slot(role);
      for (std::size_t f = 0; f < s.injections.size(); ++f) {
        const std::string ip = prefix + role + ".inj" + std::to_string(f) + ".";
        roster.coeff.emplace_back(ip + "left", s.injections[f].left);
        roster.coeff.emplace_back(ip + "right", s.injections[f].right);
      }
      if (s.lora) {
        roster.base.emplace_back(prefix + role + ".lora_a", s.lora->a);
        roster.base.emplace_back(prefix + role + ".lora_b", s.lora->b);
      } else {
        roster.base.emplace_back(prefix + role + ".base", s.base);
      }
    }
  }
  return roster;
}

}  // namespace detail

// Trains the fused group against the cached teacher activations. Returns the
// per-epoch mean KL loss; optionally appends a trace point per epoch.
template <typename T>
std::vector<double> distill_group(GptModel<T>& model, const PartialGroup& group,
                                  const std::vector<TokenBatch>& batches,
                                  const TeacherCache<T>& cache, const DistillConfig<T>& cfg,
                                  int iteration = 0,
                                  std::vector<LossTracePoint>* trace = nullptr) {
  if (batches.empty()) throw ConfigError("distill_group: no fine-tuning batches");
  for (const auto& b : batches)
    if (b.batch < 2)
      throw ConfigError(
          "distill_group: batch size 1 makes the batch-dim softmax a degenerate one-point "
          "distribution (KL identically 0); use batch size >= 2");
  if (cache.inputs.size() != batches.size() || cache.outputs.size() != batches.size())
    throw ContractError("distill_group: teacher cache does not cover the fine-tuning batches");

  // Teacher distributions are fixed for the whole job.
  std::vector<Tensor<T>> teacher_probs;
  {
    NoGradGuard ng;
    for (const auto& out : cache.outputs) teacher_probs.push_back(softmax_dim0(out));
  }

  auto roster = detail::build_roster(model, group);
  for (auto& [n, t] : roster.coeff) t.set_requires_grad(true);
  for (auto& [n, t] : roster.base) t.set_requires_grad(true);

  AdamConfig<T> adam_cfg{cfg.beta1, cfg.beta2, T(1e-8)};
  Adam<T> opt_coeff(roster.coeff, adam_cfg);
  Adam<T> opt_base(roster.base, adam_cfg);
  const long total_steps = long(cfg.epochs) * long(batches.size());
  CosineSchedule<T> sched_coeff{cfg.lr_coeff, total_steps, T(0)};
  CosineSchedule<T> sched_base{cfg.lr_base, total_steps, T(0)};

  Rng shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<std::size_t> order(batches.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<double> epoch_losses;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    double last_lr_coeff = 0.0, last_lr_base = 0.0;
    for (std::size_t bi : order) {
      Tensor<T> input = cfg.recompute_upstream
                            ? cache_teacher(model, group, {batches[bi]}).inputs[0]
                            : cache.inputs[bi];
      Tensor<T> student = student_forward(model, group, input);
      Tensor<T> q = softmax_dim0(student);
      Tensor<T> loss = kl_divergence(teacher_probs[bi], q);
      const double lv = double(loss.item());
      if (!std::isfinite(lv))
        throw NumericalError("distill_group: non-finite KL loss at iteration " +
                             std::to_string(iteration) + ", epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(bi) +
                             " (loss-explosion regime; check the softmax axis and learning rates)");
      loss_sum += lv;
      backward(loss);
      const T lr_c = sched_coeff(step);
      const T lr_b = sched_base(step);
      last_lr_coeff = double(lr_c);
      last_lr_base = double(lr_b);
      if (!roster.coeff.empty()) opt_coeff.step(lr_c);
      if (!roster.base.empty()) opt_base.step(lr_b);
      opt_coeff.zero_grad();
      opt_base.zero_grad();
      ++step;
    }
    const double mean_loss = loss_sum / double(batches.size());
    epoch_losses.push_back(mean_loss);
    if (trace)
      trace->push_back(LossTracePoint{iteration, epoch, mean_loss, last_lr_coeff, last_lr_base});
  }

  for (auto& [n, t] : roster.coeff) {
    t.set_requires_grad(false);
    t.drop_grad();
  }
  for (auto& [n, t] : roster.base) {
    t.set_requires_grad(false);
    t.drop_grad();
  }
  return epoch_losses;
}

}  // namespace fusegpt
