#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "rasa/retrieval.hpp"
#include "support/fixtures.hpp"

using namespace rasa;
using namespace rasa::retrieval;
namespace fx = rasa::testing;

namespace {

// Four test identities with two images each: an 8-image gallery.
data::Corpus gallery_corpus(std::uint64_t seed = 3) {
  data::CorpusSpec s = fx::tiny_spec(seed);
  s.n_identities = 8;
  s.test_identities = 4;
  return data::generate_corpus(s);
}

struct Scored {
  int image_id;
  double cosine;
  double match;
};

// Scores one (image, query) pair at a time through the public model API.
std::vector<Scored> score_all_pairs(const model::Network& net, const data::Corpus& c, int text_id, const std::vector<int>& images) {
  std::vector<Scored> out;
  for (int im : images) {
    data::TokenBatch tokens;
    tokens.append(c.texts[static_cast<std::size_t>(text_id)].text);
    const Matrix pixels = data::flatten(c.images[static_cast<std::size_t>(im)].pixels);
    const auto rep = model::represent(net, pixels, tokens);
    const double cosine = rep.image_proj.value().row(0).dot(rep.text_proj.value().row(0));
    const Matrix p = model::probabilities(model::itm_logits(net, model::cls_rows(rep.fused, tokens.length)));
    out.push_back({im, cosine, p(0, objectives::itm_positive)});
  }
  return out;
}

// Shortlist by cosine, rerank the first k by matching probability, ties by smaller id.
std::vector<int> compose_oracle(std::vector<Scored> all, int k) {
  auto by = [](auto key) {
    return [key](const Scored& a, const Scored& b) {
      return key(a) != key(b) ? key(a) > key(b) : a.image_id < b.image_id;
    };
  };
  std::sort(all.begin(), all.end(), by([](const Scored& s) { return s.cosine; }));
  std::sort(all.begin(), all.begin() + k, by([](const Scored& s) { return s.match; }));
  std::vector<int> ids;
  for (const auto& s : all) ids.push_back(s.image_id);
  return ids;
}

RankingResult ranking(int query, std::vector<int> images) {
  RankingResult r;
  r.query_text_id = query;
  r.image_ids = std::move(images);
  r.scores.assign(r.image_ids.size(), 0.0);
  r.stage.assign(r.image_ids.size(), 1);
  return r;
}

// Images 0..9; image i belongs to identity i / 2. Queries 100 + j belong to identity j.
Relevance pairs_relevance() {
  Relevance rel;
  for (int i = 0; i < 10; ++i) rel.image_identity[i] = i / 2;
  for (int j = 0; j < 5; ++j) rel.query_identity[100 + j] = j;
  return rel;
}

double ap_brute_force(const std::vector<bool>& relevant) {
  // Mean over relevant positions r of (#relevant in 1..r) / r.
  double sum = 0.0;
  int n = 0;
  for (std::size_t r = 0; r < relevant.size(); ++r) {
    if (!relevant[r]) continue;
    ++n;
    int hits = 0;
    for (std::size_t q = 0; q <= r; ++q) hits += relevant[q];
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return sum / n;
}

}  // namespace

TEST(Gallery, EmbeddingIsDeterministicAndUnitNorm) {
  const data::Corpus c = gallery_corpus();
  const model::Network net = fx::tiny_network(c);
  const GalleryIndex a = embed_gallery(net, c, data::Split::test);
  const GalleryIndex b = embed_gallery(net, c, data::Split::test);
  EXPECT_EQ(a.size(), 8);
  EXPECT_EQ(a.vectors, b.vectors);
  for (Index r = 0; r < a.size(); ++r) EXPECT_NEAR(a.vectors.row(r).dot(a.vectors.row(r)), 1.0, 1e-12);

  const int one_id = c.image_ids(data::Split::test).front();
  const GalleryIndex one = embed_gallery(net, data::flatten(c.images[static_cast<std::size_t>(one_id)].pixels).eval(), {one_id}, {0});
  EXPECT_EQ(one.size(), 1);
  EXPECT_THROW((void)embed_gallery(net, Matrix(0, 64), {}, {}), ContractError);
}

TEST(TwoStage, FullShortlistEqualsExhaustiveCrossEncoderRanking) {
  const data::Corpus c = gallery_corpus();
  const model::Network net = fx::tiny_network(c, 2);
  const GalleryIndex index = embed_gallery(net, c, data::Split::test);
  for (int text_id : c.text_ids(data::Split::test)) {
    const auto all = score_all_pairs(net, c, text_id, index.image_ids);
    const RankingResult r = rank_two_stage(net, c.texts[static_cast<std::size_t>(text_id)].text, text_id, index, 100);
    EXPECT_EQ(r.k, 8);
    EXPECT_EQ(r.image_ids, compose_oracle(all, 8));
    for (std::size_t i = 0; i < r.image_ids.size(); ++i) {
      const auto it = std::find_if(all.begin(), all.end(), [&](const Scored& s) { return s.image_id == r.image_ids[i]; });
      EXPECT_NEAR(r.scores[i], it->match, 1e-12);
      EXPECT_EQ(r.stage[i], 2);
    }
  }
}

TEST(TwoStage, ShortlistOfOneKeepsStageOneOrder) {
  const data::Corpus c = gallery_corpus();
  const model::Network net = fx::tiny_network(c, 4);
  const GalleryIndex index = embed_gallery(net, c, data::Split::test);
  const int text_id = c.text_ids(data::Split::test).front();
  const auto& query = c.texts[static_cast<std::size_t>(text_id)].text;
  const RankingResult stage1 = rank_two_stage(net, query, text_id, index, 0);
  const RankingResult k1 = rank_two_stage(net, query, text_id, index, 1);
  EXPECT_EQ(stage1.image_ids, k1.image_ids);
  EXPECT_EQ(k1.stage.front(), 2);
  EXPECT_TRUE(std::all_of(k1.stage.begin() + 1, k1.stage.end(), [](auto s) { return s == 1; }));
  EXPECT_THROW((void)rank_two_stage(net, query, text_id, index, -1), ContractError);
}

TEST(TwoStage, EightImagesShortlistFourMatchesOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const data::Corpus c = gallery_corpus(seed);
    const model::Network net = fx::tiny_network(c, seed + 10);
    const GalleryIndex index = embed_gallery(net, c, data::Split::test);
    for (int text_id : c.text_ids(data::Split::test)) {
      const auto all = score_all_pairs(net, c, text_id, index.image_ids);
      const RankingResult r = rank_two_stage(net, c.texts[static_cast<std::size_t>(text_id)].text, text_id, index, 4);
      EXPECT_EQ(r.image_ids, compose_oracle(all, 4));
      for (std::size_t i = 4; i < 8; ++i) {
        const auto it = std::find_if(all.begin(), all.end(), [&](const Scored& s) { return s.image_id == r.image_ids[i]; });
        EXPECT_NEAR(r.scores[i], it->cosine, 1e-12);
      }
    }
  }
}

TEST(TwoStage, TiesBreakBySmallerImageId) {
  const std::vector<double> scores = {0.5, 0.9, 0.5, 0.9, 0.1};
  const std::vector<int> ids = {40, 30, 20, 10, 0};
  EXPECT_EQ(order_by_score(scores, ids), (std::vector<Index>{3, 1, 2, 0, 4}));
}

TEST(TwoStage, GalleryOrderDoesNotChangeResults) {
  const data::Corpus c = gallery_corpus();
  const model::Network net = fx::tiny_network(c, 6);
  const GalleryIndex index = embed_gallery(net, c, data::Split::test);
  std::vector<int> perm(static_cast<std::size_t>(index.size()));
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[1], perm[5]);
  Matrix pixels(index.size(), 64);
  std::vector<int> ids, identities;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const int im = index.image_ids[static_cast<std::size_t>(perm[i])];
    pixels.row(static_cast<Index>(i)) = data::flatten(c.images[static_cast<std::size_t>(im)].pixels);
    ids.push_back(im);
    identities.push_back(c.images[static_cast<std::size_t>(im)].identity_id);
  }
  const GalleryIndex shuffled = embed_gallery(net, pixels, ids, identities);
  std::vector<RankingResult> a, b;
  for (int text_id : c.text_ids(data::Split::test)) {
    const auto& q = c.texts[static_cast<std::size_t>(text_id)].text;
    a.push_back(rank_two_stage(net, q, text_id, index, 3));
    b.push_back(rank_two_stage(net, q, text_id, shuffled, 3));
    EXPECT_EQ(a.back().image_ids, b.back().image_ids);
  }
  const auto rel = relevance_from(c);
  const MetricsReport ma = compute_metrics(a, rel), mb = compute_metrics(b, rel);
  EXPECT_EQ(ma.r1, mb.r1);
  EXPECT_EQ(ma.map, mb.map);
}

TEST(Metrics, HandCountedRecall) {
  const Relevance rel = pairs_relevance();
  std::vector<RankingResult> rs = {
      ranking(100, {0, 2, 4, 6, 8, 1, 3, 5, 7, 9}),  // identity 0 at rank 1
      ranking(101, {0, 2, 4, 6, 8, 1, 3, 5, 7, 9}),  // identity 1 at rank 2
      ranking(102, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}),  // identity 2 at rank 5
      ranking(103, {0, 1, 2, 3, 4, 5, 8, 9, 6, 7}),  // identity 3 at rank 9
      ranking(104, {9, 0, 1, 2, 3, 4, 5, 6, 7, 8}),  // identity 4 at rank 1
  };
  EXPECT_DOUBLE_EQ(recall_at_k(rs, rel, 1), 40.0);
  EXPECT_DOUBLE_EQ(recall_at_k(rs, rel, 2), 60.0);
  EXPECT_DOUBLE_EQ(recall_at_k(rs, rel, 5), 80.0);
  EXPECT_DOUBLE_EQ(recall_at_k(rs, rel, 10), 100.0);
  double previous = 0.0;
  for (int k = 1; k <= 10; ++k) {
    const double r = recall_at_k(rs, rel, k);
    EXPECT_GE(r, previous);
    previous = r;
  }
  EXPECT_THROW((void)recall_at_k(rs, rel, 0), ContractError);
  EXPECT_THROW((void)recall_at_k({}, rel, 1), ContractError);
}

TEST(Metrics, AveragePrecisionClosedForms) {
  Relevance rel;
  rel.query_identity[0] = 1;
  rel.image_identity = {{10, 1}, {11, 2}, {12, 3}};
  EXPECT_DOUBLE_EQ(average_precision(ranking(0, {10, 11}), rel), 1.0);
  EXPECT_DOUBLE_EQ(average_precision(ranking(0, {11, 10}), rel), 0.5);
  EXPECT_THROW((void)average_precision(ranking(0, {11, 12}), rel), DataError);
  EXPECT_THROW((void)recall_at_k({ranking(0, {11, 12})}, rel, 1), DataError);

  const Relevance pairs = pairs_relevance();
  EXPECT_DOUBLE_EQ(mean_average_precision({ranking(100, {1, 0, 5, 6}), ranking(103, {6, 7, 0, 1})}, pairs), 1.0);
}

TEST(Metrics, AveragePrecisionMatchesBruteForce) {
  Rng rng(3);
  Relevance rel;
  rel.query_identity[0] = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> images = {0, 1, 2, 3, 4, 5};
    rng.shuffle(images);
    // Images 0 and 1 are the two relevant ones.
    for (int i = 0; i < 6; ++i) rel.image_identity[i] = i < 2 ? 0 : 1;
    std::vector<bool> relevant;
    for (int im : images) relevant.push_back(im < 2);
    EXPECT_NEAR(average_precision(ranking(0, images), rel), ap_brute_force(relevant), 1e-12);
  }
}

TEST(Metrics, ReportAndJson) {
  const Relevance rel = pairs_relevance();
  const std::vector<RankingResult> rs = {ranking(100, {0, 2}), ranking(101, {0, 2})};
  const MetricsReport m = compute_metrics(rs, rel);
  EXPECT_LE(m.r1, m.r5);
  EXPECT_LE(m.r5, m.r10);
  EXPECT_DOUBLE_EQ(m.map, (1.0 + 0.5) / 2.0);
  const auto j = to_json(m);
  EXPECT_DOUBLE_EQ(j.at("R@1").get<double>(), 50.0);
  EXPECT_EQ(j.at("queries").get<int>(), 2);
  EXPECT_EQ(j.at("per_query").size(), 2u);
}
