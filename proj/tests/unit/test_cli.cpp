#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "rasa/ablation.hpp"
#include "rasa/checkpoint.hpp"
#include "rasa/config.hpp"
#include "rasa/corpus_io.hpp"
#include "support/fixtures.hpp"

using namespace rasa;
using nlohmann::json;
namespace fs = std::filesystem;
namespace fx = rasa::testing;

namespace {

struct CliResult {
  int rc = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Runs the CLI with RASA_OUTPUT_ROOT set to `root`.
CliResult cli(const fs::path& root, const std::string& args) {
  const fs::path err_file = root / "stderr.txt";
  const std::string cmd = "RASA_OUTPUT_ROOT='" + root.string() + "' '" RASA_CLI_PATH "' " + args + " 2>'" +
                          err_file.string() + "'";
  CliResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  std::array<char, 4096> buf{};
  while (fgets(buf.data(), buf.size(), pipe) != nullptr) r.out += buf.data();
  const int status = pclose(pipe);
  r.rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err_file);
  return r;
}

// A desk config small enough to train in well under a second.
void write_config(const fs::path& root) {
  std::ofstream(root / "run.ini") << "[corpus]\n"
                                     "n_identities = 6\ntest_identities = 2\nimages_per_identity = 2\ntexts_per_image = 1\n"
                                     "n_attributes = 4\nattribute_vocab_size = 4\nimage_side = 8\npatch_side = 4\nmax_len = 10\n"
                                     "[model]\nimage_layers = 1\ntext_layers = 1\ncross_layers = 1\nhidden_dim = 8\nheads = 2\n"
                                     "proj_dim = 4\n"
                                     "[train]\nepochs = 2\nbatch_size = 4\nqueue_size = 16\n"
                                     "[paths]\ndata_dir = data\nrun_dir = run\n"
                                     "[ablate]\nrows = cl, cl_ra, rasa\nseeds = 0\n";
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root = fx::scratch_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
    write_config(root);
  }
  void TearDown() override { fs::remove_all(root); }

  CliResult run(const std::string& args) { return cli(root, args + " -c '" + (root / "run.ini").string() + "'"); }

  fs::path root;
};

}  // namespace

TEST_F(Cli, GenDataWritesAVerifiableCorpusAndRefusesToOverwrite) {
  const CliResult first = run("gen-data");
  ASSERT_EQ(first.rc, 0) << first.err;
  const json out = json::parse(first.out);
  const auto loaded = data::load_corpus(root / "data");
  EXPECT_EQ(out.at("fingerprint"), loaded.fingerprint);
  EXPECT_EQ(slurp(root / "data" / "FINGERPRINT").substr(0, 64), loaded.fingerprint);
  EXPECT_EQ(out.at("texts").get<std::size_t>(), loaded.corpus.texts.size());
  EXPECT_TRUE(fs::exists(root / "data" / "gen-data.run_manifest.json"));

  const CliResult again = run("gen-data");
  EXPECT_EQ(again.rc, 3);
  const json err = json::parse(again.err);
  EXPECT_EQ(err.at("error").at("kind"), "data");
  EXPECT_EQ(err.at("error").at("exit_code"), 3);

  const CliResult forced = run("gen-data --force");
  EXPECT_EQ(forced.rc, 0) << forced.err;
  EXPECT_EQ(json::parse(forced.out).at("fingerprint"), loaded.fingerprint);
}

TEST_F(Cli, TrainThenEvalMatchesTheLibrary) {
  ASSERT_EQ(run("gen-data").rc, 0);
  const CliResult tr = run("train");
  ASSERT_EQ(tr.rc, 0) << tr.err;
  const json t = json::parse(tr.out);
  EXPECT_EQ(t.at("steps").get<long>(), 4);  // 8 train texts, batch 4, 2 epochs
  EXPECT_TRUE(fs::exists(root / "run" / "final.ckpt"));
  EXPECT_TRUE(fs::exists(root / "run" / "train_log.jsonl"));

  const json manifest = json::parse(slurp(root / "run" / "train.run_manifest.json"));
  for (const char* key : {"command", "config_echo", "config_canonical", "corpus_fingerprint", "code_version", "outputs",
                          "started_utc"}) {
    EXPECT_TRUE(manifest.contains(key)) << key;
  }
  EXPECT_EQ(manifest.at("corpus_fingerprint"), data::load_corpus(root / "data").fingerprint);

  const CliResult ev = run("eval --split test --rankings");
  ASSERT_EQ(ev.rc, 0) << ev.err;
  const json e = json::parse(ev.out);
  EXPECT_DOUBLE_EQ(e.at("random_r1").get<double>(), 50.0);

  const auto loaded = data::load_corpus(root / "data");
  const auto archive = checkpoint::read(root / "run" / "final.ckpt");
  const auto mc = checkpoint::model_config_from_json(archive.metadata.at("model"));
  const auto net = checkpoint::load_network(archive, mc, false);
  const auto lib = retrieval::evaluate(net, loaded.corpus, data::Split::test, {});
  EXPECT_DOUBLE_EQ(e.at("R@1").get<double>(), lib.metrics.r1);
  EXPECT_DOUBLE_EQ(e.at("mAP").get<double>(), lib.metrics.map);
  EXPECT_TRUE(fs::exists(root / "run" / "metrics_test.json"));
  EXPECT_TRUE(fs::exists(root / "run" / "rankings_test.tsv"));

  const CliResult em = run("embed --split train");
  ASSERT_EQ(em.rc, 0) << em.err;
  std::ifstream lines(root / "run" / "embeddings_train.jsonl");
  int images = 0, texts = 0;
  for (std::string line; std::getline(lines, line);) {
    const json j = json::parse(line);
    (j.at("kind") == "image" ? images : texts) += 1;
    EXPECT_EQ(j.at("vector").size(), 4u);
  }
  EXPECT_EQ(images, 8);
  EXPECT_EQ(texts, 8);
}

TEST_F(Cli, ConfigErrorsExitWithTwo) {
  ASSERT_EQ(run("gen-data").rc, 0);
  const CliResult unknown = run("train --set train.learnin_rate=3");
  EXPECT_EQ(unknown.rc, 2);
  EXPECT_NE(json::parse(unknown.err).at("error").at("message").get<std::string>().find("train.learnin_rate"),
            std::string::npos);

  const CliResult bad = run("train --set train.p_weak=1.5");
  EXPECT_EQ(bad.rc, 2);
  EXPECT_EQ(json::parse(bad.err).at("error").at("kind"), "config");
  EXPECT_FALSE(fs::exists(root / "run" / "final.ckpt"));

  EXPECT_EQ(run("eval --split validation").rc, 2);
  EXPECT_EQ(cli(root, "frobnicate").rc, 2);
}

TEST_F(Cli, MissingDataAndCheckpointExitWithThree) {
  EXPECT_EQ(run("train").rc, 3);
  ASSERT_EQ(run("gen-data").rc, 0);
  const CliResult ev = run("eval --split test");
  EXPECT_EQ(ev.rc, 3);
  EXPECT_EQ(json::parse(ev.err).at("error").at("kind"), "data");
}

TEST_F(Cli, AblateWritesOneRowPerPresetAndSeed) {
  ASSERT_EQ(run("gen-data").rc, 0);
  const CliResult ab = run("ablate --set train.epochs=1");
  ASSERT_EQ(ab.rc, 0) << ab.err;
  std::ifstream is(root / "run" / "ablation.tsv");
  const auto rows = ablation::read_table(is);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].preset, "cl");
  EXPECT_EQ(rows[1].preset, "cl_ra");
  EXPECT_EQ(rows[2].preset, "rasa");
  const json out = json::parse(ab.out);
  EXPECT_EQ(out.at("median_r1").at("rasa").get<double>(), rows[2].r1);
  EXPECT_TRUE(fs::exists(root / "run" / "ablate.run_manifest.json"));
}
