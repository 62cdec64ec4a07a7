#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "rasa/checkpoint.hpp"
#include "rasa/network.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace rasa;
using rasa::testing::random_matrix;
using rasa::testing::scratch_dir;
using rasa::testing::tiny_network;
using rasa::testing::tiny_spec;

namespace {

data::PairBatch first_pairs(const data::Corpus& c, int n) {
  std::vector<int> images, texts;
  for (int t = 0; t < n; ++t) {
    texts.push_back(t);
    images.push_back(c.texts[static_cast<std::size_t>(t)].source_image_id);
  }
  return data::make_pair_batch(c, images, texts);
}

Var weighted(const Var& y, std::uint64_t seed) {
  return ag::sum(ag::hadamard(y, ag::constant(random_matrix(y.rows(), y.cols(), seed))));
}

}  // namespace

TEST(Network, ParameterGroupsAndDecayFlags) {
  const data::Corpus c = data::generate_corpus(tiny_spec());
  model::Network net = tiny_network(c);
  int heads = 0, decayed = 0;
  net.visit([&](const std::string& name, Var&, model::ParamGroup group, bool decay) {
    EXPECT_EQ(group == model::ParamGroup::head, name.rfind("head.", 0) == 0) << name;
    const bool is_weight = name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
    EXPECT_EQ(decay, is_weight) << name;
    heads += group == model::ParamGroup::head;
    decayed += decay;
  });
  EXPECT_EQ(heads, 8);  // four heads, weight and bias each
  EXPECT_GT(decayed, 0);
  EXPECT_NEAR(net.tau(), 0.07, 0.0);
}

TEST(Network, RejectsMismatchedShapes) {
  const data::Corpus c = data::generate_corpus(tiny_spec());
  model::ModelConfig bad = train::model_config_for(c, rasa::testing::tiny_arch());
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  const model::Network net = tiny_network(c);
  EXPECT_THROW((void)model::encode_image(net, Matrix::Zero(2, 10)), DimensionError);
  Matrix nan = Matrix::Zero(1, 64);
  nan(0, 3) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW((void)model::encode_image(net, nan), NumericError);
}

TEST(Network, FiniteOnConstantImages) {
  const data::Corpus c = data::generate_corpus(tiny_spec());
  const model::Network net = tiny_network(c);
  data::PairBatch b = first_pairs(c, 2);
  for (double fill : {0.0, 1.0}) {
    b.pixels.setConstant(fill);
    const auto rep = model::represent(net, b.pixels, b.tokens);
    EXPECT_TRUE(rep.visual.value().allFinite());
    EXPECT_TRUE(rep.fused.value().allFinite());
    EXPECT_TRUE(rep.image_proj.value().allFinite());
  }
}

TEST(Network, OutputShapes) {
  const data::Corpus c = data::generate_corpus(tiny_spec());
  const model::Network net = tiny_network(c);
  const data::PairBatch b = first_pairs(c, 3);
  const auto rep = model::represent(net, b.pixels, b.tokens);
  EXPECT_EQ(rep.visual.rows(), 3 * 5);  // four patches and [CLS]
  EXPECT_EQ(rep.textual.rows(), 3 * 10);
  EXPECT_EQ(rep.fused.rows(), rep.textual.rows());
  EXPECT_EQ(rep.fused.cols(), 8);
  EXPECT_EQ(rep.image_proj.cols(), 4);
}

TEST(Network, PaddedTokensDoNotChangeValidOutputs) {
  const data::Corpus c = data::generate_corpus(tiny_spec());
  const model::Network net = tiny_network(c);
  data::PairBatch b = first_pairs(c, 2);
  const auto before = model::represent(net, b.pixels, b.tokens);
  for (std::size_t i = 0; i < b.tokens.ids.size(); ++i) {
    if (b.tokens.valid[i] == 0) b.tokens.ids[i] = c.vocab.id("red");
  }
  const auto after = model::represent(net, b.pixels, b.tokens);
  EXPECT_LT((before.text_proj.value() - after.text_proj.value()).cwiseAbs().maxCoeff(), 1e-12);
  for (std::size_t i = 0; i < b.tokens.ids.size(); ++i) {
    if (b.tokens.valid[i] == 0) continue;
    const auto r = static_cast<Index>(i);
    EXPECT_LT((before.fused.value().row(r) - after.fused.value().row(r)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Network, ProjectionsAreUnitRows) {
  const data::Corpus c = data::generate_corpus(tiny_spec());
  const model::Network net = tiny_network(c);
  const data::PairBatch b = first_pairs(c, 4);
  const auto rep = model::represent(net, b.pixels, b.tokens, false);
  for (Index r = 0; r < 4; ++r) {
    EXPECT_NEAR(rep.image_proj.value().row(r).norm(), 1.0, 1e-12);
    EXPECT_NEAR(rep.text_proj.value().row(r).norm(), 1.0, 1e-12);
  }
  const Matrix x = random_matrix(3, 5, 4);
  const Matrix once = ag::l2_normalize_rows(ag::constant(x)).value();
  const Matrix scaled = ag::l2_normalize_rows(ag::constant(7.5 * x)).value();
  EXPECT_LT((once - scaled).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Network, HeadsGiveProbabilityRows) {
  const data::Corpus c = data::generate_corpus(tiny_spec());
  const model::Network net = tiny_network(c);
  const data::PairBatch b = first_pairs(c, 3);
  const auto rep = model::represent(net, b.pixels, b.tokens);
  const Var cls = model::cls_rows(rep.fused, b.tokens.length);
  for (const Matrix& p : {model::probabilities(model::itm_logits(net, cls)), model::probabilities(model::prd_logits(net, cls)),
                          model::probabilities(model::mlm_logits(net, rep.fused)),
                          model::probabilities(model::rtd_logits(net, rep.fused))}) {
    EXPECT_GE(p.minCoeff(), 0.0);
    for (Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-12);
  }
}

TEST(Network, EveryParameterReceivesGradientAtInit) {
  const data::Corpus c = data::generate_corpus(tiny_spec());
  model::Network net = tiny_network(c);
  const data::PairBatch b = first_pairs(c, 3);
  const auto rep = model::represent(net, b.pixels, b.tokens);
  const Var cls = model::cls_rows(rep.fused, b.tokens.length);
  const Var sims = ag::divide(ag::matmul_transposed(rep.image_proj, rep.text_proj), net.temperature);
  const Var loss = ag::weighted_sum({weighted(sims, 1), weighted(model::itm_logits(net, cls), 2),
                                     weighted(model::prd_logits(net, cls), 3), weighted(model::mlm_logits(net, rep.fused), 4),
                                     weighted(model::rtd_logits(net, rep.fused), 5)},
                                    {1, 1, 1, 1, 1});
  net.zero_grad();
  ag::backward(loss);
  net.visit([](const std::string& name, const Var& v) { EXPECT_GT(v.grad().norm(), 0.0) << name; });
}

TEST(Network, ImageClsIgnoresPatchOrderWithoutPositions) {
  const data::Corpus c = data::generate_corpus(tiny_spec());
  model::Network net = tiny_network(c);
  const data::PairBatch b = first_pairs(c, 1);
  // Swap the top-left and bottom-right 4x4 cells (pixels are row-major).
  Matrix img = Eigen::Map<const Matrix>(b.pixels.data(), 8, 8);
  Matrix swapped = img;
  swapped.block(0, 0, 4, 4) = img.block(4, 4, 4, 4);
  swapped.block(4, 4, 4, 4) = img.block(0, 0, 4, 4);
  Matrix pixels_a = b.pixels;
  Matrix pixels_b(1, 64);
  pixels_b = Eigen::Map<const Matrix>(swapped.data(), 1, 64);
  ASSERT_GT((pixels_a - pixels_b).norm(), 0.0);

  auto cls = [&](const Matrix& px) { return model::cls_rows(model::encode_image(net, px), 5).value(); };
  EXPECT_GT((cls(pixels_a) - cls(pixels_b)).norm(), 1e-6);
  net.image_position.mutable_value().setZero();
  EXPECT_LT((cls(pixels_a) - cls(pixels_b)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Checkpoint, NetworkRoundTripAndTruncation) {
  const data::Corpus c = data::generate_corpus(tiny_spec());
  const model::Network net = tiny_network(c, 5);
  checkpoint::Archive a;
  a.config_echo = "[train]\nseed = 5\n";
  a.metadata["model"] = checkpoint::to_json(net.config);
  checkpoint::add_network(a, net);
  const auto dir = scratch_dir("model_ckpt");
  const auto path = dir / "net.ckpt";
  checkpoint::write(path, a);

  const checkpoint::Archive back = checkpoint::read(path);
  EXPECT_EQ(back.config_echo, a.config_echo);
  const model::ModelConfig mc = checkpoint::model_config_from_json(back.metadata.at("model"));
  EXPECT_EQ(mc, net.config);
  const model::Network loaded = checkpoint::load_network(back, mc, false);
  const auto want = net.named_parameters();
  const auto got = loaded.named_parameters();
  ASSERT_EQ(want.size(), got.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    EXPECT_EQ(want[i].first, got[i].first);
    EXPECT_EQ(want[i].second.value(), got[i].second.value()) << want[i].first;
  }

  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 9);
  EXPECT_THROW((void)checkpoint::read(path), DataError);
  std::ofstream(path, std::ios::trunc) << "not a checkpoint";
  EXPECT_THROW((void)checkpoint::read(path), DataError);
  std::filesystem::remove_all(dir);
}
