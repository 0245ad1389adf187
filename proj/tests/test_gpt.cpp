#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "fusegpt/checkpoint.hpp"
#include "fusegpt/pipeline.hpp"
#include "test_util.hpp"

using namespace fusegpt;
using testutil::make_identity_block;
using testutil::random_batch;
using testutil::tiny_model;

TEST_CASE("tokenizer round trip") {
  auto ids = tokenize("AB");
  CHECK(ids == std::vector<std::int32_t>{65, 66});
  CHECK(tokenize("").empty());

  Rng rng(1);
  std::uniform_int_distribution<int> len(0, 64), byte(0, 255);
  for (int rep = 0; rep < 20; ++rep) {
    std::string s;
    const int n = len(rng);
    for (int i = 0; i < n; ++i) s.push_back(char(byte(rng)));
    CHECK(detokenize(tokenize(s)) == s);
  }
}

TEST_CASE("residual identity: zeroed projections make a block transparent") {
  auto model = tiny_model<double>(3);
  make_identity_block(model, 2);
  Rng rng(2);
  auto batch = random_batch<double>(2, 8, rng);
  NoGradGuard ng;
  auto out = model.forward(batch, {1, 2});
  CHECK(out.captured.at(1).buffer() == out.captured.at(2).buffer());  // bitwise

  // skipping the identity block changes nothing, bitwise
  auto skipped = model.forward_skipping(batch, {2});
  CHECK(out.logits.buffer() == skipped.logits.buffer());
}

TEST_CASE("forward capture and skip contracts") {
  auto model = tiny_model<double>(3);
  Rng rng(3);
  auto batch = random_batch<double>(2, 8, rng);
  NoGradGuard ng;

  auto plain = model.forward(batch);
  CHECK(plain.captured.empty());

  CHECK(model.forward_skipping(batch, {}).logits.buffer() == plain.logits.buffer());
  CHECK_THROWS_AS(model.forward_skipping(batch, {1, 2, 3}), ContractError);
  CHECK_THROWS_AS(model.forward_skipping(batch, {4}), ContractError);

  TokenBatch oversized = random_batch<double>(1, 17, rng);
  CHECK_THROWS_AS(model.forward(oversized), ContractError);
}

TEST_CASE("forward_skipping equals a physically rebuilt model") {
  auto model = tiny_model<float>(4);
  Rng rng(4);
  auto batch = random_batch<float>(2, 8, rng);
  NoGradGuard ng;
  for (int skip = 1; skip <= 4; ++skip) {
    auto fast = model.forward_skipping(batch, {skip});

    GptModel<float> rebuilt;
    rebuilt.config() = model.config();
    rebuilt.tok_emb() = model.tok_emb().clone();
    rebuilt.pos_emb() = model.pos_emb().clone();
    rebuilt.final_norm_gain() = model.final_norm_gain().clone();
    rebuilt.head() = model.head().clone();
    for (int i = 1; i <= 4; ++i)
      if (i != skip) rebuilt.append_block(model.block(std::size_t(i)).clone());
    auto slow = rebuilt.forward(batch);

    double scale = 0.0;
    for (auto v : slow.logits.buffer()) scale = std::max(scale, std::abs(double(v)));
    CHECK(testutil::max_abs_diff(fast.logits.data(), slow.logits.data(), fast.logits.size()) <
          1e-6 * std::max(1.0, scale));
  }
}

TEST_CASE("causality: a later token never changes earlier logits") {
  auto model = tiny_model<double>(3);
  Rng rng(5);
  auto batch = random_batch<double>(1, 8, rng);
  NoGradGuard ng;
  auto base = model.forward(batch);
  const std::size_t t = 5;
  auto perturbed = batch;
  perturbed.ids[t] = (perturbed.ids[t] + 1) % kByteVocab;
  auto out = model.forward(perturbed);
  const std::size_t v = model.config().vocab_size;
  for (std::size_t s = 0; s < t; ++s)
    for (std::size_t j = 0; j < v; ++j)
      CHECK(base.logits.data()[s * v + j] == out.logits.data()[s * v + j]);
}

TEST_CASE("permuting batch rows permutes logits rows") {
  auto model = tiny_model<double>(2);
  Rng rng(6);
  auto batch = random_batch<double>(2, 8, rng);
  TokenBatch swapped = batch;
  std::swap_ranges(swapped.ids.begin(), swapped.ids.begin() + 8, swapped.ids.begin() + 8);
  NoGradGuard ng;
  auto a = model.forward(batch);
  auto b = model.forward(swapped);
  const std::size_t half = a.logits.size() / 2;
  for (std::size_t i = 0; i < half; ++i) {
    CHECK(a.logits.data()[i] == b.logits.data()[half + i]);
    CHECK(a.logits.data()[half + i] == b.logits.data()[i]);
  }
}

TEST_CASE("uniform-logit model gives nll == ln(vocab)") {
  auto model = tiny_model<double>(2);
  std::fill(model.head().data(), model.head().data() + model.head().size(), 0.0);
  Rng rng(7);
  auto batch = random_batch<double>(2, 8, rng);
  NoGradGuard ng;
  const double nll = model.next_token_nll(batch).item();
  CHECK(nll == doctest::Approx(std::log(259.0)).epsilon(1e-9));
  CHECK(std::log(259.0) == doctest::Approx(5.5568).epsilon(1e-4));
  CHECK(perplexity_of_nll(nll) == doctest::Approx(259.0));

  TokenBatch one = random_batch<double>(1, 1, rng);
  CHECK_THROWS_AS(model.next_token_nll(one), ContractError);
}

TEST_CASE("model memorizes a repeated pattern") {
  GptConfig cfg;
  cfg.n_blocks = 2;
  cfg.d_model = 32;
  cfg.n_heads = 2;
  cfg.d_ff = 64;
  cfg.max_seq_len = 16;
  cfg.seed = 8;
  auto model = GptModel<double>::init(cfg);
  auto params = model.named_parameters();
  for (auto& [n, t] : params) t.set_requires_grad(true);
  Adam<double> opt(params);
  CosineSchedule<double> sched{1e-2, 300, 1e-3};

  const std::vector<std::int32_t> pattern = {65, 66, 67, 68};  // "ABCD" repeated
  TokenBatch batch;
  batch.batch = 2;
  batch.seq = 16;
  for (std::size_t i = 0; i < 32; ++i) batch.ids.push_back(pattern[i % 4]);

  double nll = 1e9;
  for (int step = 0; step < 300 && nll > 0.05; ++step) {
    auto loss = model.next_token_nll(batch);
    nll = loss.item();
    backward(loss);
    opt.step(sched(step));
    opt.zero_grad();
  }
  CHECK(nll < 0.1);
}

TEST_CASE("full-model gradient matches finite differences on a tiny config") {
  GptConfig cfg;
  cfg.n_blocks = 2;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 12;
  cfg.max_seq_len = 4;
  cfg.seed = 9;
  auto model = GptModel<double>::init(cfg);
  auto params = model.named_parameters();
  for (auto& [n, t] : params) t.set_requires_grad(true);
  Rng rng(10);
  auto batch = random_batch<double>(2, 4, rng);

  auto loss_fn = [&]() {
    NoGradGuard ng;
    return model.next_token_nll(batch).item();
  };
  backward(model.next_token_nll(batch));
  // entries below 1e-6 in both routes count as agreeing: central differences
  // at h=1e-5 carry ~1e-11 roundoff, which swamps near-zero gradients
  auto res = testutil::check_gradients(params, loss_fn, 1e-5, 1e-6, 48);
  CHECK_MESSAGE(res.max_rel_err < 1e-4, res.worst);
}

TEST_CASE("checkpoint round trip") {
  auto model = tiny_model<float>(3);
  const std::string p1 = "/tmp/fusegpt_test_ckpt1.bin";
  const std::string p2 = "/tmp/fusegpt_test_ckpt2.bin";
  save_checkpoint(model, p1);
  auto loaded = load_checkpoint<float>(p1);
  save_checkpoint(loaded, p2);

  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  CHECK(slurp(p1) == slurp(p2));  // byte-identical

  Rng rng(11);
  auto batch = random_batch<float>(2, 8, rng);
  NoGradGuard ng;
  CHECK(model.forward(batch).logits.buffer() == loaded.forward(batch).logits.buffer());
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("checkpoint rejects corruption") {
  auto model = tiny_model<float>(2);
  const std::string path = "/tmp/fusegpt_test_ckpt3.bin";
  save_checkpoint(model, path);

  SUBCASE("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_WITH_AS(load_checkpoint<float>(path), doctest::Contains("magic"), IoError);
  }

  SUBCASE("truncated payload") {
    auto full = [&]() {
      std::ifstream in(path, std::ios::binary);
      return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    }();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(full.data(), std::streamsize(full.size() / 2));
    out.close();
    CHECK_THROWS_AS(load_checkpoint<float>(path), IoError);
  }
  std::remove(path.c_str());
}
