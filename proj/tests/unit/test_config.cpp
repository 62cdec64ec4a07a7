#include <gtest/gtest.h>

#include <fstream>

#include "rasa/config.hpp"
#include "support/fixtures.hpp"

using namespace rasa;
using namespace rasa::config;
namespace fx = rasa::testing;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "<no error>";
}

}  // namespace

TEST(Config, EmptyTextGivesDefaults) {
  const LoadedConfig c = parse("");
  EXPECT_EQ(c.config.train.batch_size, train::TrainConfig{}.batch_size);
  EXPECT_EQ(c.config.corpus.n_identities, data::CorpusSpec{}.n_identities);
  EXPECT_EQ(c.config.eval.k, 128);
  EXPECT_EQ(c.config.ablate.rows, (std::vector<std::string>{"cl", "cl_ra", "rasa"}));
}

TEST(Config, ParsesEverySectionAndKeepsTheText) {
  const std::string text =
      "; desk run\n"
      "[corpus]\nn_identities = 12\nocclusion_rate = 0.25\n\n"
      "[model]\nhidden_dim = 32\n"
      "[train]\np_weak = 0.2\npositive_mode = uniform_all\nrtd_generator = frozen\nenable_prd = false\nseed = 9\n"
      "[eval]\nk = 16\nsimilarity = raw\nrerank = false\n"
      "[paths]\ndata_dir = /tmp/x\n"
      "[ablate]\nrows = cl, rasa\nseeds = 1,2,3\n";
  const LoadedConfig c = parse(text);
  EXPECT_EQ(c.echo, text);
  EXPECT_EQ(c.config.corpus.n_identities, 12);
  EXPECT_DOUBLE_EQ(c.config.corpus.occlusion_rate, 0.25);
  EXPECT_EQ(c.config.model.hidden_dim, 32);
  EXPECT_DOUBLE_EQ(c.config.train.p_weak, 0.2);
  EXPECT_EQ(c.config.train.positive_mode, data::PositiveMode::uniform_all);
  EXPECT_EQ(c.config.train.rtd_generator, train::RtdGenerator::frozen);
  EXPECT_FALSE(c.config.train.enable_prd);
  EXPECT_EQ(c.config.train.seed, 9u);
  EXPECT_EQ(c.config.eval.k, 16);
  EXPECT_EQ(c.config.eval.similarity, retrieval::Similarity::raw);
  EXPECT_FALSE(c.config.eval.rerank);
  EXPECT_EQ(c.config.paths.data_dir, "/tmp/x");
  EXPECT_EQ(c.config.ablate.rows, (std::vector<std::string>{"cl", "rasa"}));
  EXPECT_EQ(c.config.ablate.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
}

TEST(Config, UnknownKeysAndSectionsNameTheirPath) {
  EXPECT_NE(error_of([] { (void)parse("[train]\nlearning_rate = 1\n"); }).find("train.learning_rate"), std::string::npos);
  EXPECT_NE(error_of([] { (void)parse("[optimizer]\nlr = 1\n"); }).find("optimizer.lr"), std::string::npos);
  EXPECT_NE(error_of([] { (void)parse("seed = 1\n"); }).find("seed"), std::string::npos);
}

TEST(Config, BadValuesNameTheirPath) {
  EXPECT_NE(error_of([] { (void)parse("[train]\nbatch_size = many\n"); }).find("train.batch_size"), std::string::npos);
  EXPECT_NE(error_of([] { (void)parse("[train]\nbatch_size = 3.5\n"); }).find("train.batch_size"), std::string::npos);
  EXPECT_NE(error_of([] { (void)parse("[train]\nenable_itm = maybe\n"); }).find("train.enable_itm"), std::string::npos);
  EXPECT_NE(error_of([] { (void)parse("[train]\nrtd_generator = distilbert\n"); }).find("train.rtd_generator"), std::string::npos);
  // Parsed but out of range: rejected by validation with the same path form.
  EXPECT_NE(error_of([] { (void)parse("[train]\np_weak = 1.5\n"); }).find("train.p_weak"), std::string::npos);
  EXPECT_NE(error_of([] { (void)parse("[corpus]\nimage_side = 10\npatch_side = 4\n"); }).find("corpus.image_side"),
            std::string::npos);
  EXPECT_NE(error_of([] { (void)parse("[model]\nhidden_dim = 30\nheads = 4\n"); }).find("model.hidden_dim"), std::string::npos);
}

TEST(Config, OverridesApplyAfterTheFileAndAreEchoed) {
  const LoadedConfig c = parse("[train]\nseed = 1\nepochs = 5\n", {"train.seed=4", "eval.k=3"});
  EXPECT_EQ(c.config.train.seed, 4u);
  EXPECT_EQ(c.config.train.epochs, 5);
  EXPECT_EQ(c.config.eval.k, 3);
  EXPECT_NE(c.echo.find("; override train.seed=4"), std::string::npos);
  EXPECT_THROW((void)parse("", {"train.seed"}), ConfigError);
  EXPECT_THROW((void)parse("", {"seed=3"}), ConfigError);
  EXPECT_THROW((void)parse("", {"train.nope=3"}), ConfigError);
}

TEST(Config, CanonicalFormRoundTrips) {
  const LoadedConfig a = parse("[train]\nlr_heads = 0.00123\nlambda_cl = 0.3333333333333333\n[ablate]\nseeds = 5, 6\n");
  const std::string text = canonical(a.config);
  const LoadedConfig b = parse(text);
  EXPECT_EQ(canonical(b.config), text);
  EXPECT_DOUBLE_EQ(b.config.train.lr_heads, 0.00123);
  EXPECT_EQ(b.config.train.lambda_cl, 0.3333333333333333);
  EXPECT_NE(text.find("[corpus]\n"), std::string::npos);
  EXPECT_NE(text.find("lr_heads = 0.00123\n"), std::string::npos);
}

TEST(Config, LoadReadsFromDisk) {
  const auto dir = fx::scratch_dir("config");
  std::ofstream(dir / "run.ini") << "[train]\nepochs = 2\n";
  EXPECT_EQ(load(dir / "run.ini").config.train.epochs, 2);
  EXPECT_THROW((void)load(dir / "missing.ini"), ConfigError);
  std::filesystem::remove_all(dir);
}
