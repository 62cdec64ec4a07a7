// rasa: corpus generation, training, evaluation, embedding export and the
// objective ablation, all driven by one INI config plus --set overrides.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rasa/ablation.hpp"
#include "rasa/checkpoint.hpp"
#include "rasa/config.hpp"
#include "rasa/corpus_io.hpp"
#include "rasa/error.hpp"
#include "rasa/retrieval.hpp"
#include "rasa/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
};

rasa::config::LoadedConfig load_config(const Common& common) {
  if (common.config_path.empty()) return rasa::config::parse("", common.overrides);
  return rasa::config::load(common.config_path, common.overrides);
}

/// Relative paths resolve against $RASA_OUTPUT_ROOT when it is set.
fs::path resolve(const std::string& p) {
  fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv("RASA_OUTPUT_ROOT"); root != nullptr && *root != '\0') return fs::path(root) / path;
  return path;
}

fs::path checkpoint_path(const rasa::config::RunConfig& c) {
  return c.paths.checkpoint.empty() ? resolve(c.paths.run_dir) / "final.ckpt" : resolve(c.paths.checkpoint);
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw rasa::DataError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

/// Records what is about to run; written before any compute.
void write_run_manifest(const fs::path& dir, const std::string& command, const rasa::config::LoadedConfig& cfg,
                        const std::optional<std::string>& corpus_fingerprint, const json& outputs) {
  json m = {{"command", command},
            {"config_echo", cfg.echo},
            {"config_canonical", rasa::config::canonical(cfg.config)},
            {"corpus_fingerprint", corpus_fingerprint ? json(*corpus_fingerprint) : json(nullptr)},
            {"code_version", RASA_VERSION},
            {"outputs", outputs},
            {"started_utc", utc_now()}};
  write_json(dir / (command + ".run_manifest.json"), m);
}

rasa::data::Split parse_split_option(const std::string& s) {
  if (s == "train") return rasa::data::Split::train;
  if (s == "test") return rasa::data::Split::test;
  throw rasa::ConfigError("--split: expected train or test, got '" + s + "'");
}

rasa::model::Network load_online(const fs::path& path, const rasa::data::Corpus& corpus) {
  const rasa::checkpoint::Archive a = rasa::checkpoint::read(path);
  const rasa::model::ModelConfig mc = rasa::checkpoint::model_config_from_json(a.metadata.at("model"));
  if (mc.vocab_size != corpus.vocab.size() || mc.max_len != corpus.spec.max_len || mc.image_side != corpus.spec.image_side ||
      mc.patch_side != corpus.spec.patch_side) {
    throw rasa::DataError("checkpoint " + path.string() + " does not fit the corpus (vocabulary or shape differs)");
  }
  return rasa::checkpoint::load_network(a, mc, false);
}

json metrics_json(const rasa::retrieval::MetricsReport& m) { return rasa::retrieval::to_json(m); }

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& common, bool force) {
  const auto cfg = load_config(common);
  const fs::path dir = resolve(cfg.config.paths.data_dir);
  if (rasa::data::corpus_exists(dir) && !force) {
    throw rasa::DataError("corpus already exists in " + dir.string() + "; pass --force to overwrite");
  }
  fs::create_directories(dir);
  write_run_manifest(dir, "gen-data", cfg, std::nullopt, {{"data_dir", dir.string()}});
  const rasa::data::Corpus corpus = rasa::data::generate_corpus(cfg.config.corpus);
  const std::string fp = rasa::data::save_corpus(dir, corpus);
  std::cout << json{{"data_dir", dir.string()},
                    {"fingerprint", fp},
                    {"images", corpus.images.size()},
                    {"texts", corpus.texts.size()},
                    {"vocab_size", corpus.vocab.size()}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_train(const Common& common, const std::string& resume) {
  const auto cfg = load_config(common);
  const auto loaded = rasa::data::load_corpus(resolve(cfg.config.paths.data_dir));
  const fs::path run_dir = resolve(cfg.config.paths.run_dir);
  fs::create_directories(run_dir);
  write_run_manifest(run_dir, "train", cfg, loaded.fingerprint,
                     {{"run_dir", run_dir.string()},
                      {"log", (run_dir / "train_log.jsonl").string()},
                      {"checkpoint", (run_dir / "final.ckpt").string()}});
  rasa::train::TrainOptions options;
  options.config_echo = cfg.echo;
  options.run_dir = run_dir;
  if (!resume.empty()) options.resume = resolve(resume);
  const auto result = rasa::train::train(cfg.config.train, cfg.config.model, loaded.corpus, options);
  const auto& last = result.history.empty() ? rasa::objectives::LossReport{} : result.history.back();
  std::cout << json{{"checkpoint", result.final_checkpoint.string()},
                    {"steps", result.state.step},
                    {"final_loss", rasa::train::to_json(last)}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_eval(const Common& common, const std::string& split_name, bool dump_rankings) {
  const auto cfg = load_config(common);
  const auto split = parse_split_option(split_name);
  const auto loaded = rasa::data::load_corpus(resolve(cfg.config.paths.data_dir));
  const fs::path ckpt = checkpoint_path(cfg.config);
  const fs::path run_dir = resolve(cfg.config.paths.run_dir);
  fs::create_directories(run_dir);
  const fs::path metrics_path = run_dir / ("metrics_" + split_name + ".json");
  const fs::path rankings_path = run_dir / ("rankings_" + split_name + ".tsv");
  write_run_manifest(run_dir, "eval", cfg, loaded.fingerprint,
                     {{"checkpoint", ckpt.string()},
                      {"metrics", metrics_path.string()},
                      {"rankings", dump_rankings ? json(rankings_path.string()) : json(nullptr)}});
  const rasa::model::Network net = load_online(ckpt, loaded.corpus);
  const auto result = rasa::retrieval::evaluate(net, loaded.corpus, split, cfg.config.eval);
  json out = metrics_json(result.metrics);
  out["split"] = split_name;
  out["queries"] = result.rankings.size();
  out["random_r1"] = 100.0 / loaded.corpus.identity_count(split);
  write_json(metrics_path, out);
  if (dump_rankings) {
    std::ofstream os(rankings_path);
    if (!os) throw rasa::DataError("cannot write " + rankings_path.string());
    rasa::retrieval::write_rankings_tsv(os, result.rankings);
  }
  out.erase("per_query");
  std::cout << out.dump() << '\n';
  return 0;
}

int cmd_embed(const Common& common, const std::string& split_name) {
  const auto cfg = load_config(common);
  const auto split = parse_split_option(split_name);
  const auto loaded = rasa::data::load_corpus(resolve(cfg.config.paths.data_dir));
  const fs::path ckpt = checkpoint_path(cfg.config);
  const fs::path run_dir = resolve(cfg.config.paths.run_dir);
  fs::create_directories(run_dir);
  const fs::path out_path = run_dir / ("embeddings_" + split_name + ".jsonl");
  write_run_manifest(run_dir, "embed", cfg, loaded.fingerprint, {{"checkpoint", ckpt.string()}, {"embeddings", out_path.string()}});
  const rasa::model::Network net = load_online(ckpt, loaded.corpus);
  const auto& corpus = loaded.corpus;

  std::ofstream os(out_path);
  if (!os) throw rasa::DataError("cannot write " + out_path.string());
  auto row_vector = [](const rasa::Matrix& m, rasa::Index r) { return std::vector<double>(m.row(r).begin(), m.row(r).end()); };
  const auto index = rasa::retrieval::embed_gallery(net, corpus, split);
  for (rasa::Index i = 0; i < index.size(); ++i) {
    os << json{{"kind", "image"},
               {"id", index.image_ids[static_cast<std::size_t>(i)]},
               {"identity", index.identity_ids[static_cast<std::size_t>(i)]},
               {"vector", row_vector(index.vectors, i)}}
              .dump()
       << '\n';
  }
  const auto text_ids = corpus.text_ids(split);
  for (std::size_t start = 0; start < text_ids.size(); start += 64) {
    rasa::data::TokenBatch tokens;
    const std::size_t end = std::min(text_ids.size(), start + 64);
    for (std::size_t i = start; i < end; ++i) tokens.append(corpus.texts[static_cast<std::size_t>(text_ids[i])].text);
    const auto textual = rasa::model::encode_text(net, tokens);
    const auto proj = rasa::model::project(net, rasa::model::cls_rows(textual, tokens.length), rasa::model::Side::text).value();
    for (std::size_t i = start; i < end; ++i) {
      const auto& t = corpus.texts[static_cast<std::size_t>(text_ids[i])];
      os << json{{"kind", "text"}, {"id", t.text_id}, {"identity", t.identity_id}, {"vector", row_vector(proj, static_cast<rasa::Index>(i - start))}}
                .dump()
         << '\n';
    }
  }
  std::cout << json{{"embeddings", out_path.string()}, {"images", index.size()}, {"texts", text_ids.size()}}.dump() << '\n';
  return 0;
}

int cmd_ablate(const Common& common) {
  const auto cfg = load_config(common);
  for (const auto& name : cfg.config.ablate.rows) (void)rasa::ablation::preset(name);
  const auto loaded = rasa::data::load_corpus(resolve(cfg.config.paths.data_dir));
  const fs::path run_dir = resolve(cfg.config.paths.run_dir);
  fs::create_directories(run_dir);
  const fs::path table_path = run_dir / "ablation.tsv";
  write_run_manifest(run_dir, "ablate", cfg, loaded.fingerprint, {{"table", table_path.string()}});
  const auto rows = rasa::ablation::run(cfg.config, loaded.corpus, [](const rasa::ablation::Row& r) {
    std::cerr << "ablate: " << r.preset << " seed " << r.seed << " R@1 " << r.r1 << '\n';
  });
  std::ofstream os(table_path);
  if (!os) throw rasa::DataError("cannot write " + table_path.string());
  rasa::ablation::write_table(os, rows);
  json medians = json::object();
  for (const auto& [name, r1] : rasa::ablation::median_r1(rows)) medians[name] = r1;
  std::cout << json{{"table", table_path.string()}, {"rows", rows.size()}, {"median_r1", medians}}.dump() << '\n';
  return 0;
}

int report(std::string_view kind, int code, const std::string& message) {
  std::cerr << json{{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RaSa relation- and sensitivity-aware text-to-image retrieval at desk scale"};
  app.set_version_flag("--version", std::string(RASA_VERSION));
  app.require_subcommand(1);

  Common common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "INI configuration file")->check(CLI::ExistingFile);
    sub->add_option("--set", common.overrides, "Override one key: section.key=value (repeatable)");
  };

  bool force = false;
  std::string resume;
  std::string split = "test";
  bool dump_rankings = false;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus into paths.data_dir");
  add_common(gen);
  gen->add_flag("--force", force, "Overwrite an existing corpus");

  auto* tr = app.add_subcommand("train", "Train on the corpus; checkpoints and log go to paths.run_dir");
  add_common(tr);
  tr->add_option("--resume", resume, "Continue from this checkpoint");

  auto* ev = app.add_subcommand("eval", "Text-to-image retrieval metrics for a checkpoint");
  add_common(ev);
  ev->add_option("--split", split, "train or test");
  ev->add_flag("--rankings", dump_rankings, "Also write the full rankings as TSV");

  auto* em = app.add_subcommand("embed", "Export projected image and text embeddings as JSON lines");
  add_common(em);
  em->add_option("--split", split, "train or test");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate every ablate.rows preset for every ablate.seeds seed");
  add_common(ab);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("config", 2, e.what());
  }

  try {
    if (gen->parsed()) return cmd_gen_data(common, force);
    if (tr->parsed()) return cmd_train(common, resume);
    if (ev->parsed()) return cmd_eval(common, split, dump_rankings);
    if (em->parsed()) return cmd_embed(common, split);
    if (ab->parsed()) return cmd_ablate(common);
  } catch (const rasa::Error& e) {
    return report(rasa::to_string(e.kind()), rasa::exit_code(e.kind()), e.what());
  } catch (const fs::filesystem_error& e) {
    return report("data", 3, e.what());
  } catch (const nlohmann::json::exception& e) {
    return report("data", 3, e.what());
  } catch (const std::exception& e) {
    return report("internal", 1, e.what());
  }
  return 1;
}
