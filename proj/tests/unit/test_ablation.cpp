#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "rasa/ablation.hpp"
#include "support/fixtures.hpp"

using namespace rasa;
namespace fx = rasa::testing;

namespace {

config::RunConfig tiny_run() {
  config::RunConfig c;
  c.corpus = fx::tiny_spec(1);
  c.model = fx::tiny_arch();
  c.train = fx::tiny_train();
  c.train.epochs = 2;
  return c;
}

}  // namespace

TEST(Ablation, PresetsSetTheirSwitches) {
  const config::RunConfig base = tiny_run();
  const auto cl = ablation::row_config(base, "cl", 3);
  EXPECT_FALSE(cl.train.enable_itm);
  EXPECT_FALSE(cl.train.enable_prd);
  EXPECT_FALSE(cl.train.enable_mlm);
  EXPECT_EQ(cl.train.rtd_generator, train::RtdGenerator::off);
  EXPECT_FALSE(cl.eval.rerank);
  EXPECT_EQ(cl.train.seed, 3u);

  const auto itm = ablation::row_config(base, "cl_itm", 0);
  EXPECT_TRUE(itm.train.enable_itm);
  EXPECT_FALSE(itm.train.enable_prd);
  EXPECT_EQ(itm.train.positive_mode, data::PositiveMode::uniform_all);

  const auto s_itm = ablation::row_config(base, "cl_ra_s_itm", 0);
  EXPECT_EQ(s_itm.train.positive_mode, data::PositiveMode::strong_only);

  const auto rasa = ablation::row_config(base, "rasa", 0);
  EXPECT_TRUE(rasa.train.enable_prd && rasa.train.enable_mlm);
  EXPECT_EQ(rasa.train.positive_mode, data::PositiveMode::probabilistic);
  EXPECT_EQ(rasa.train.rtd_generator, train::RtdGenerator::momentum);
  EXPECT_TRUE(rasa.eval.rerank);

  EXPECT_EQ(ablation::row_config(base, "cl_ra_sa_f_rtd", 0).train.rtd_generator, train::RtdGenerator::frozen);
  EXPECT_EQ(ablation::row_config(base, "cl_ra_sa_o_rtd", 0).train.rtd_generator, train::RtdGenerator::online);
  EXPECT_THROW((void)ablation::preset("bert"), ConfigError);
}

TEST(Ablation, FingerprintsDistinguishRowsAndIgnorePaths) {
  const config::RunConfig base = tiny_run();
  std::set<std::string> prints;
  for (const auto& p : ablation::presets()) prints.insert(ablation::fingerprint(ablation::row_config(base, p.name, 0)));
  EXPECT_EQ(prints.size(), ablation::presets().size());

  config::RunConfig moved = base;
  moved.paths.run_dir = "/elsewhere";
  moved.ablate.seeds = {4, 5};
  EXPECT_EQ(ablation::fingerprint(moved), ablation::fingerprint(base));
  EXPECT_NE(ablation::fingerprint(ablation::row_config(base, "rasa", 1)), ablation::fingerprint(ablation::row_config(base, "rasa", 0)));
  EXPECT_EQ(ablation::fingerprint(base).size(), 16u);
}

TEST(Ablation, TableRoundTripsLosslessly) {
  std::vector<ablation::Row> rows(2);
  rows[0] = {0, "cl", 0, "0123456789abcdef", "itm=off;rerank=off", 12.5, 50.0, 75.0, 0.1 + 0.2};
  rows[1] = {1, "rasa", 7, "fedcba9876543210", "itm=on;rerank=on", 100.0 / 3.0, 2.0 / 3.0 * 100.0, 100.0, 1.0 / 7.0};
  std::stringstream ss;
  ablation::write_table(ss, rows);
  EXPECT_EQ(ablation::read_table(ss), rows);

  std::stringstream bad_header("row\tpreset\n");
  EXPECT_THROW((void)ablation::read_table(bad_header), DataError);
  std::stringstream short_line(std::string(ablation::kHeader) + "\n0\tcl\t0\n");
  EXPECT_THROW((void)ablation::read_table(short_line), DataError);
  std::stringstream bad_number(std::string(ablation::kHeader) + "\n0\tcl\t0\tab\ts\tx\t1\t1\t1\n");
  EXPECT_THROW((void)ablation::read_table(bad_number), DataError);
}

TEST(Ablation, MedianPerPreset) {
  std::vector<ablation::Row> rows;
  for (double r1 : {10.0, 30.0, 20.0}) rows.push_back({0, "cl", 0, "", "", r1, 0, 0, 0});
  for (double r1 : {40.0, 60.0}) rows.push_back({0, "rasa", 0, "", "", r1, 0, 0, 0});
  const auto med = ablation::median_r1(rows);
  ASSERT_EQ(med.size(), 2u);
  EXPECT_EQ(med[0], (std::pair<std::string, double>{"cl", 20.0}));
  EXPECT_EQ(med[1], (std::pair<std::string, double>{"rasa", 50.0}));
}

TEST(Ablation, GridOfOneEqualsPlainTrainAndEval) {
  config::RunConfig base = tiny_run();
  base.ablate.rows = {"rasa"};
  base.ablate.seeds = {2};
  const data::Corpus corpus = data::generate_corpus(base.corpus);
  std::vector<ablation::Row> streamed;
  const auto rows = ablation::run(base, corpus, [&](const ablation::Row& r) { streamed.push_back(r); });
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(streamed, rows);

  const config::RunConfig c = ablation::row_config(base, "rasa", 2);
  const auto trained = train::train(c.train, c.model, corpus);
  const auto eval = retrieval::evaluate(trained.state.online, corpus, data::Split::test, c.eval);
  EXPECT_EQ(rows[0].r1, eval.metrics.r1);
  EXPECT_EQ(rows[0].r10, eval.metrics.r10);
  EXPECT_EQ(rows[0].map, eval.metrics.map);
  EXPECT_EQ(rows[0].fingerprint, ablation::fingerprint(c));
  EXPECT_EQ(rows[0].settings, ablation::settings_of(c));
}
