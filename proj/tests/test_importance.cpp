#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fusegpt/importance.hpp"
#include "test_util.hpp"

using namespace fusegpt;
using testutil::make_identity_block;
using testutil::random_batch;
using testutil::tiny_model;

namespace {

// Flat re-computation of the mean row cosine between two hidden states,
// independent of the metric implementation.
template <typename T>
double mean_row_cosine(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t h = a.dim(a.ndim() - 1);
  const std::size_t rows = a.size() / h;
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t j = 0; j < h; ++j) {
      dot += double(a.data()[r * h + j]) * double(b.data()[r * h + j]);
      na += double(a.data()[r * h + j]) * double(a.data()[r * h + j]);
      nb += double(b.data()[r * h + j]) * double(b.data()[r * h + j]);
    }
    acc += dot / (std::sqrt(na) * std::sqrt(nb));
  }
  return acc / double(rows);
}

// Physically rebuilds the model without one block.
template <typename T>
GptModel<T> rebuild_without(const GptModel<T>& model, int live_index) {
  GptModel<T> out;
  out.config() = model.config();
  out.tok_emb() = model.tok_emb().clone();
  out.pos_emb() = model.pos_emb().clone();
  out.final_norm_gain() = model.final_norm_gain().clone();
  out.head() = model.head().clone();
  for (int i = 1; i <= int(model.n_live_blocks()); ++i)
    if (i != live_index) out.append_block(model.block(std::size_t(i)).clone());
  out.config() = model.config();
  out.config().n_blocks = out.n_live_blocks();
  return out;
}

template <typename T>
std::vector<TokenBatch> calib_set(std::size_t batches, Rng& rng) {
  std::vector<TokenBatch> out;
  for (std::size_t i = 0; i < batches; ++i) out.push_back(random_batch<T>(2, 8, rng));
  return out;
}

}  // namespace

TEST_CASE("identity block scores zero and is selected") {
  auto model = tiny_model<double>(3);
  make_identity_block(model, 2);
  Rng rng(21);
  auto calib = calib_set<double>(2, rng);

  auto bi = bi_scores(model, calib);
  CHECK(bi.scores[1].value == 0.0);
  CHECK(select_prune_target(bi).live_index == 2);

  auto mi = mi_scores(model, calib);
  CHECK(std::abs(mi.scores[1].value) <= 1e-9);
  CHECK(select_prune_target(mi).live_index == 2);

  auto sleb = sleb_scores(model, calib);
  // skipping an identity block leaves the nll exactly at the dense value
  NoGradGuard ng;
  double dense_nll = 0;
  for (const auto& b : calib) dense_nll += double(model.next_token_nll(b).item());
  dense_nll /= double(calib.size());
  CHECK(sleb.scores[1].value == dense_nll);
}

TEST_CASE("metric values stay within cosine bounds") {
  auto model = tiny_model<double>(4);
  Rng rng(22);
  auto calib = calib_set<double>(2, rng);
  for (const auto& s : bi_scores(model, calib).scores) {
    CHECK(s.value >= 0.0);
    CHECK(s.value <= 2.0);
  }
  for (const auto& s : mi_scores(model, calib).scores) {
    CHECK(s.value >= 0.0);
    CHECK(s.value <= 2.0);
  }
}

TEST_CASE("uniform-logit model gives flat SLEB scores") {
  auto model = tiny_model<double>(3);
  std::fill(model.head().data(), model.head().data() + model.head().size(), 0.0);
  Rng rng(23);
  auto calib = calib_set<double>(2, rng);
  auto rep = sleb_scores(model, calib);
  for (const auto& s : rep.scores) CHECK(s.value == doctest::Approx(std::log(259.0)).epsilon(1e-9));
  CHECK(rep.selected_live_index == 1);  // tie -> lowest index
}

TEST_CASE("BI matches a flat re-computation over captured states") {
  auto model = tiny_model<double>(3);
  Rng rng(24);
  auto calib = calib_set<double>(2, rng);
  auto rep = bi_scores(model, calib);

  NoGradGuard ng;
  for (std::size_t i = 1; i <= 3; ++i) {
    double cos_acc = 0.0;
    for (const auto& batch : calib) {
      auto out = model.forward(batch, {int(i) - 1, int(i)});
      cos_acc += mean_row_cosine(out.captured.at(int(i) - 1), out.captured.at(int(i)));
    }
    CHECK(std::abs(rep.scores[i - 1].value - (1.0 - cos_acc / 2.0)) < 1e-6);
  }
}

TEST_CASE("MI matches the rebuild oracle") {
  auto model = tiny_model<double>(4);
  Rng rng(25);
  auto calib = calib_set<double>(2, rng);
  auto rep = mi_scores(model, calib);

  NoGradGuard ng;
  for (int i = 1; i <= 4; ++i) {
    auto pruned = rebuild_without(model, i);
    double cos_acc = 0.0;
    for (const auto& batch : calib)
      cos_acc += mean_row_cosine(model.forward(batch).last_hidden,
                                 pruned.forward(batch).last_hidden);
    CHECK(std::abs(rep.scores[std::size_t(i) - 1].value - (1.0 - cos_acc / 2.0)) < 1e-6);
  }
}

TEST_CASE("SLEB selection matches brute force over rebuilt models") {
  auto model = tiny_model<double>(4);
  Rng rng(26);
  auto calib = calib_set<double>(2, rng);
  auto rep = sleb_scores(model, calib);

  NoGradGuard ng;
  int best = 0;
  double best_nll = 1e18;
  for (int i = 1; i <= 4; ++i) {
    auto pruned = rebuild_without(model, i);
    double nll = 0;
    for (const auto& batch : calib) nll += double(pruned.next_token_nll(batch).item());
    nll /= double(calib.size());
    CHECK(std::abs(nll - rep.scores[std::size_t(i) - 1].value) < 1e-6);
    if (nll < best_nll) {
      best_nll = nll;
      best = i;
    }
  }
  CHECK(select_prune_target(rep).live_index == best);
}

TEST_CASE("duplicated consecutive blocks receive near-equal MI, tie to lower index") {
  auto model = tiny_model<double>(4, 16, 2, 32, 16, 42);
  // make blocks 2 and 3 bitwise equal
  auto copy = model.block(2).clone();
  copy.original_index = model.block(3).original_index;
  model.blocks()[2] = std::move(copy);
  Rng rng(27);
  auto calib = calib_set<double>(2, rng);
  auto rep = mi_scores(model, calib);
  CHECK(std::abs(rep.scores[1].value - rep.scores[2].value) < 1e-3);

  // force an exact tie and check the tie rule
  ImportanceReport tied = rep;
  tied.scores[2].selection_score = tied.scores[1].selection_score;
  tied.scores[2].value = tied.scores[1].value;
  const auto& sel = select_prune_target(tied);
  if (tied.scores[1].selection_score >= tied.scores[0].selection_score &&
      tied.scores[1].selection_score >= tied.scores[3].selection_score)
    CHECK(sel.original_index == tied.scores[1].original_index);
}

TEST_CASE("selection rules") {
  ImportanceReport rep;
  rep.metric = MetricKind::MI;
  rep.scores = {{1, 1, 0.0, 0.5}, {2, 2, 0.0, 0.1}, {3, 3, 0.0, 0.9}};
  CHECK(select_prune_target(rep).live_index == 3);

  // argmax is invariant under positive affine rescaling
  ImportanceReport scaled = rep;
  for (auto& s : scaled.scores) s.selection_score = 3.0 * s.selection_score + 7.0;
  CHECK(select_prune_target(scaled).live_index == 3);

  ImportanceReport tie;
  tie.scores = {{1, 1, 0.0, 0.9}, {2, 2, 0.0, 0.9}};
  CHECK(select_prune_target(tie).original_index == 1);

  ImportanceReport single;
  single.scores = {{1, 1, 0.0, 0.9}};
  CHECK_THROWS_AS(select_prune_target(single), ContractError);
}

TEST_CASE("literal selection flag flips the convention") {
  auto model = tiny_model<double>(3);
  make_identity_block(model, 2);
  Rng rng(28);
  auto calib = calib_set<double>(2, rng);
  ImportanceOptions literal;
  literal.literal_highest_score = true;
  auto rep = mi_scores(model, calib, 0, literal);
  CHECK(select_prune_target(rep).live_index != 2);  // highest raw MI is not the identity block
}

TEST_CASE("report serializes to the documented JSON shape") {
  auto model = tiny_model<double>(3);
  Rng rng(29);
  auto calib = calib_set<double>(1, rng);
  auto rep = mi_scores(model, calib, 4);
  auto j = rep.to_json();
  CHECK(j.at("metric") == "mi");
  CHECK(j.at("iteration") == 4);
  CHECK(j.at("scores").size() == 3);
  CHECK(j.at("scores")[0].contains("block"));
  CHECK(j.at("scores")[0].contains("value"));
  CHECK(j.contains("selected"));
}
