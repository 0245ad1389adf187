#pragma once

// Minimal decoder-only GPT: pre-norm blocks (RMS norm, causal self-attention,
// two-layer GeLU MLP, no projection biases), byte-level vocab, learned
// absolute positions. Blocks are 1-based in every user-facing index to match
// the pruning bookkeeping.

#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "fusegpt/data.hpp"
#include "fusegpt/fused_linear.hpp"

namespace fusegpt {

struct GptConfig {
  std::size_t n_blocks = 12;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab_size = std::size_t(kVocabSize);
  std::size_t max_seq_len = 64;
  std::string norm_kind = "rmsnorm";
  std::string pos_kind = "learned_absolute";
  std::uint64_t seed = 0;

  void validate() const {
    if (n_blocks < 2) throw ConfigError("GptConfig: n_blocks must be >= 2, got " +
                                        std::to_string(n_blocks));
    if (n_heads == 0 || d_model % n_heads != 0)
      throw ConfigError("GptConfig: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    if (d_model == 0 || d_ff == 0 || max_seq_len == 0 || vocab_size == 0)
      throw ConfigError("GptConfig: zero-sized dimension");
  }
};

// Role names for the six fusable linear slots, in fixed order.
inline const std::vector<std::string>& slot_roles() {
  static const std::vector<std::string> roles = {"wq", "wk", "wv", "wo", "w_up", "w_down"};
  return roles;
}

template <typename T>
struct TransformerBlock {
  int original_index = 0;  // 1-based index in the original dense model
  Tensor<T> norm1_gain, norm2_gain;
  FusedLinear<T> wq, wk, wv, wo, w_up, w_down;

  FusedLinear<T>& slot(const std::string& role) {
    if (role == "wq") return wq;
    if (role == "wk") return wk;
    if (role == "wv") return wv;
    if (role == "wo") return wo;
    if (role == "w_up") return w_up;
    if (role == "w_down") return w_down;
    throw ContractError("unknown slot role: " + role);
  }
  const FusedLinear<T>& slot(const std::string& role) const {
    return const_cast<TransformerBlock*>(this)->slot(role);
  }

  std::size_t fusion_count() const { return wq.fusion_count(); }

  Tensor<T> forward(const Tensor<T>& x, std::size_t n_heads) const {
    Tensor<T> a = rms_norm(x, norm1_gain);
    Tensor<T> q = split_heads(wq.forward(a), n_heads);
    Tensor<T> k = split_heads(wk.forward(a), n_heads);
    Tensor<T> v = split_heads(wv.forward(a), n_heads);
    Tensor<T> att = wo.forward(merge_heads(causal_attention(q, k, v)));
    Tensor<T> h = add(x, att);
    Tensor<T> m = w_down.forward(gelu(w_up.forward(rms_norm(h, norm2_gain))));
    return add(h, m);
  }

  TransformerBlock clone() const {
    TransformerBlock b;
    b.original_index = original_index;
    b.norm1_gain = norm1_gain.clone();
    b.norm2_gain = norm2_gain.clone();
    auto clone_slot = [](const FusedLinear<T>& s) {
      FusedLinear<T> c(s.base.clone());
      for (const auto& inj : s.injections) {
        Injection<T> ci{inj.frozen.clone(), inj.left.clone(), inj.right.clone(), inj.rank};
        c.injections.push_back(std::move(ci));
      }
      if (s.lora) c.lora = LoraAdapter<T>{s.lora->a.clone(), s.lora->b.clone(), s.lora->rank};
      return c;
    };
    b.wq = clone_slot(wq);
    b.wk = clone_slot(wk);
    b.wv = clone_slot(wv);
    b.wo = clone_slot(wo);
    b.w_up = clone_slot(w_up);
    b.w_down = clone_slot(w_down);
    return b;
  }
};

template <typename T>
struct ForwardOutput {
  Tensor<T> logits;
  Tensor<T> last_hidden;       // output of the last live block, before the final norm
  Tensor<T> post_norm_hidden;  // after the final norm, before the output head
  std::map<int, Tensor<T>> captured;  // live index -> hidden state (0 = embedding output)
};

template <typename T>
class GptModel {
 public:
  GptModel() = default;

  // Fresh toy model: scaled-normal weights (std 0.02), unit norm gains.
  static GptModel init(const GptConfig& cfg) {
    cfg.validate();
    GptModel m;
    m.config_ = cfg;
    Rng rng(cfg.seed);
    const T std_w = T(0.02);
    m.tok_emb_ = Tensor<T>::randn({cfg.vocab_size, cfg.d_model}, rng, std_w);
    m.pos_emb_ = Tensor<T>::randn({cfg.max_seq_len, cfg.d_model}, rng, std_w);
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
      TransformerBlock<T> b;
      b.original_index = int(i) + 1;
      b.norm1_gain = Tensor<T>::ones({cfg.d_model});
      b.norm2_gain = Tensor<T>::ones({cfg.d_model});
      b.wq = FusedLinear<T>(Tensor<T>::randn({cfg.d_model, cfg.d_model}, rng, std_w));
      b.wk = FusedLinear<T>(Tensor<T>::randn({cfg.d_model, cfg.d_model}, rng, std_w));
      b.wv = FusedLinear<T>(Tensor<T>::randn({cfg.d_model, cfg.d_model}, rng, std_w));
      b.wo = FusedLinear<T>(Tensor<T>::randn({cfg.d_model, cfg.d_model}, rng, std_w));
      b.w_up = FusedLinear<T>(Tensor<T>::randn({cfg.d_model, cfg.d_ff}, rng, std_w));
      b.w_down = FusedLinear<T>(Tensor<T>::randn({cfg.d_ff, cfg.d_model}, rng, std_w));
      m.blocks_.push_back(std::move(b));
    }
    m.final_norm_gain_ = Tensor<T>::ones({cfg.d_model});
    m.head_ = Tensor<T>::randn({cfg.d_model, cfg.vocab_size}, rng, std_w);
    return m;
  }

  const GptConfig& config() const { return config_; }
  GptConfig& config() { return config_; }
  std::size_t n_live_blocks() const { return blocks_.size(); }

  // Live indices are 1-based.
  TransformerBlock<T>& block(std::size_t live_index) {
    check_live(live_index);
    return blocks_[live_index - 1];
  }
  const TransformerBlock<T>& block(std::size_t live_index) const {
    check_live(live_index);
    return blocks_[live_index - 1];
  }
  std::vector<TransformerBlock<T>>& blocks() { return blocks_; }
  const std::vector<TransformerBlock<T>>& blocks() const { return blocks_; }

  Tensor<T>& tok_emb() { return tok_emb_; }
  Tensor<T>& pos_emb() { return pos_emb_; }
  Tensor<T>& final_norm_gain() { return final_norm_gain_; }
  Tensor<T>& head() { return head_; }
  const Tensor<T>& tok_emb() const { return tok_emb_; }
  const Tensor<T>& pos_emb() const { return pos_emb_; }
  const Tensor<T>& final_norm_gain() const { return final_norm_gain_; }
  const Tensor<T>& head() const { return head_; }

  void remove_block(std::size_t live_index) {
    check_live(live_index);
    if (blocks_.size() <= 1) throw ContractError("remove_block: cannot prune the last live block");
    blocks_.erase(blocks_.begin() + std::ptrdiff_t(live_index - 1));
    config_.n_blocks = blocks_.size();
  }

  void append_block(TransformerBlock<T> b) {
    blocks_.push_back(std::move(b));
    config_.n_blocks = blocks_.size();
  }

  GptModel clone() const {
    GptModel m;
    m.config_ = config_;
    m.tok_emb_ = tok_emb_.clone();
    m.pos_emb_ = pos_emb_.clone();
    m.final_norm_gain_ = final_norm_gain_.clone();
    m.head_ = head_.clone();
    for (const auto& b : blocks_) m.blocks_.push_back(b.clone());
    return m;
  }

  void validate_batch(const TokenBatch& batch) const {
    if (batch.batch == 0 || batch.seq == 0) throw ContractError("forward: empty batch");
    if (batch.seq > config_.max_seq_len)
      throw ContractError("forward: sequence length " + std::to_string(batch.seq) +
                          " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    for (auto id : batch.ids)
      if (id < 0 || std::size_t(id) >= config_.vocab_size)
        throw ContractError("forward: token id " + std::to_string(id) + " out of vocab");
  }

  // Full forward with optional per-block capture and block skipping. Capture
  // and skip sets use 1-based live indices; capture index 0 means the
  // embedding output.
  ForwardOutput<T> forward(const TokenBatch& batch, const std::set<int>& capture = {},
                           const std::set<int>& skip = {}) const {
    validate_batch(batch);
    if (!skip.empty()) {
      if (skip.size() >= blocks_.size())
        throw ContractError("forward: cannot skip all " + std::to_string(blocks_.size()) +
                            " live blocks");
      for (int s : skip)
        if (s < 1 || std::size_t(s) > blocks_.size())
          throw ContractError("forward: skip index " + std::to_string(s) + " out of range");
    }
    ForwardOutput<T> out;
    Tensor<T> h = add_positions(embedding(tok_emb_, batch.ids, batch.batch, batch.seq), pos_emb_);
    if (capture.count(0)) out.captured[0] = h;
    for (std::size_t i = 1; i <= blocks_.size(); ++i) {
      if (skip.count(int(i))) continue;
      h = blocks_[i - 1].forward(h, config_.n_heads);
      if (capture.count(int(i))) out.captured[int(i)] = h;
    }
    out.last_hidden = h;
    out.post_norm_hidden = rms_norm(h, final_norm_gain_);
    out.logits = matmul(out.post_norm_hidden, head_);
    return out;
  }

  ForwardOutput<T> forward_skipping(const TokenBatch& batch, const std::set<int>& skip) const {
    return forward(batch, {}, skip);
  }

  Tensor<T> next_token_nll(const TokenBatch& batch) const {
    if (batch.seq < 2) throw ContractError("next_token_nll: need sequence length >= 2");
    return fusegpt::next_token_nll(forward(batch).logits, batch.ids);
  }

  // Stable parameter enumeration: embeddings, blocks in live order (norms,
  // then slots in role order with base / lora / injections), final norm, head.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("tok_emb", tok_emb_);
    out.emplace_back("pos_emb", pos_emb_);
    for (auto& b : blocks_) {
      const std::string prefix = "block" + std::to_string(b.original_index) + ".";
      out.emplace_back(prefix + "norm1", b.norm1_gain);
      out.emplace_back(prefix + "norm2", b.norm2_gain);
      for (const auto& role : slot_roles()) {
        auto& s = b.slot(role);
        out.emplace_back(prefix + role + ".base", s.base);
        if (s.lora) {
          out.emplace_back(prefix + role + ".lora_a", s.lora->a);
          out.emplace_back(prefix + role + ".lora_b", s.lora->b);
        }
        for (std::size_t f = 0; f < s.injections.size(); ++f) {
          const std::string ip = prefix + role + ".inj" + std::to_string(f) + ".";
          out.emplace_back(ip + "frozen", s.injections[f].frozen);
          out.emplace_back(ip + "left", s.injections[f].left);
          out.emplace_back(ip + "right", s.injections[f].right);
        }
      }
    }
    out.emplace_back("final_norm", final_norm_gain_);
    out.emplace_back("head", head_);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& [name, t] : named_parameters()) n += t.size();
    return n;
  }

 private:
  void check_live(std::size_t live_index) const {
    if (live_index < 1 || live_index > blocks_.size())
      throw ContractError("block index " + std::to_string(live_index) + " out of live range 1.." +
                          std::to_string(blocks_.size()));
  }

  GptConfig config_;
  Tensor<T> tok_emb_, pos_emb_, final_norm_gain_, head_;
  std::vector<TransformerBlock<T>> blocks_;
};

template <typename T>
double perplexity_of_nll(T nll) {
  return std::exp(double(nll));
}

}  // namespace fusegpt
