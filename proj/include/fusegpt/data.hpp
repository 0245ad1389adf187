#pragma once

// Byte-level tokenization and corpus windowing. Vocab is the 256 byte values
// plus BOS/EOS/PAD specials; round-tripping plain bytes is exact.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "fusegpt/common.hpp"

namespace fusegpt {

constexpr std::int32_t kByteVocab = 256;
constexpr std::int32_t kBosToken = 256;
constexpr std::int32_t kEosToken = 257;
constexpr std::int32_t kPadToken = 258;
constexpr std::int32_t kVocabSize = 259;

inline std::vector<std::int32_t> tokenize(std::string_view text) {
  std::vector<std::int32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(std::int32_t(c));
  return ids;
}

inline std::string detokenize(const std::vector<std::int32_t>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (auto id : ids)
    if (id >= 0 && id < kByteVocab) out.push_back(char(static_cast<unsigned char>(id)));
  return out;
}

struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;  // row-major [batch x seq]

  static TokenBatch from_rows(const std::vector<std::vector<std::int32_t>>& rows) {
    TokenBatch b;
    if (rows.empty()) return b;
    b.batch = rows.size();
    b.seq = rows[0].size();
    for (const auto& r : rows) {
      if (r.size() != b.seq) throw DimensionError("TokenBatch: ragged rows");
      b.ids.insert(b.ids.end(), r.begin(), r.end());
    }
    return b;
  }
};

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return text;
}

// A tokenized corpus with a train/held-out split carved from the tail.
struct Corpus {
  std::vector<std::int32_t> stream;
  std::size_t train_end = 0;  // stream[0, train_end) is training data

  static Corpus from_text(const std::string& text, double heldout_fraction = 0.1) {
    Corpus c;
    c.stream = tokenize(text);
    const auto held = std::size_t(double(c.stream.size()) * heldout_fraction);
    c.train_end = c.stream.size() - held;
    return c;
  }

  static Corpus from_file(const std::string& path, double heldout_fraction = 0.1) {
    return from_text(read_text_file(path), heldout_fraction);
  }

  std::vector<std::int32_t> heldout() const {
    return {stream.begin() + std::ptrdiff_t(train_end), stream.end()};
  }
};

// Draws `count` distinct windows of length seq_len from stream[0, limit),
// seeded. Used for calibration/fine-tuning sample selection; passing the same
// rng for consecutive draws keeps the two sets disjoint with high probability,
// and the helper below enforces it outright.
inline std::vector<std::vector<std::int32_t>> sample_windows(const std::vector<std::int32_t>& stream,
                                                             std::size_t limit, std::size_t seq_len,
                                                             std::size_t count, Rng& rng,
                                                             std::vector<std::size_t>* taken = nullptr) {
  if (limit > stream.size()) limit = stream.size();
  if (limit < seq_len)
    throw ConfigError("corpus too small: " + std::to_string(limit) + " tokens for window " +
                      std::to_string(seq_len));
  const std::size_t starts = limit - seq_len + 1;
  std::uniform_int_distribution<std::size_t> dist(0, starts - 1);
  std::vector<std::vector<std::int32_t>> out;
  out.reserve(count);
  std::vector<std::size_t> used = taken ? *taken : std::vector<std::size_t>{};
  std::size_t attempts = 0;
  while (out.size() < count) {
    const std::size_t s = dist(rng);
    bool clash = false;
    for (auto u : used)
      if (u == s) {
        clash = true;
        break;
      }
    if (clash && ++attempts < count * 64 && starts > count + used.size()) continue;
    used.push_back(s);
    out.emplace_back(stream.begin() + std::ptrdiff_t(s),
                     stream.begin() + std::ptrdiff_t(s + seq_len));
  }
  if (taken) *taken = used;
  return out;
}

// Groups windows into fixed-size batches; trailing remainder is dropped so all
// batches share one shape (the batch-dim softmax requires it).
inline std::vector<TokenBatch> make_batches(const std::vector<std::vector<std::int32_t>>& windows,
                                            std::size_t batch_size) {
  std::vector<TokenBatch> batches;
  for (std::size_t i = 0; i + batch_size <= windows.size(); i += batch_size) {
    std::vector<std::vector<std::int32_t>> rows(windows.begin() + std::ptrdiff_t(i),
                                                windows.begin() + std::ptrdiff_t(i + batch_size));
    batches.push_back(TokenBatch::from_rows(rows));
  }
  if (batches.empty()) throw ConfigError("not enough windows for a single batch");
  return batches;
}

}  // namespace fusegpt
