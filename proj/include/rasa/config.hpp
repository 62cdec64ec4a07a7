#pragma once

// Run configuration: one INI file with sections [corpus] [model] [train]
// [eval] [paths] [ablate]. Comments start with ';'. Every key is optional;
// unknown sections or keys are rejected with their dotted path.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "rasa/corpus.hpp"
#include "rasa/error.hpp"
#include "rasa/network.hpp"
#include "rasa/retrieval.hpp"
#include "rasa/trainer.hpp"

namespace rasa::config {

struct Paths {
  std::string data_dir = "data";
  std::string run_dir = "run";
  std::string checkpoint;  // empty: <run_dir>/final.ckpt
};

struct AblateConfig {
  std::vector<std::string> rows = {"cl", "cl_ra", "rasa"};
  std::vector<std::uint64_t> seeds = {0};
};

struct RunConfig {
  data::CorpusSpec corpus;
  model::ModelConfig model;
  train::TrainConfig train;
  retrieval::EvalOptions eval;
  Paths paths;
  AblateConfig ablate;

  void validate() const {
    corpus.validate();
    train.validate();
    model::ModelConfig shape = model;
    shape.image_side = corpus.image_side;
    shape.patch_side = corpus.patch_side;
    shape.max_len = corpus.max_len;
    shape.vocab_size = data::Vocab::build(corpus.n_attributes, corpus.attribute_vocab_size).size();
    shape.validate();
    if (eval.k < 0) throw ConfigError("eval.k: must be >= 0");
    if (ablate.rows.empty()) throw ConfigError("ablate.rows: at least one row required");
    if (ablate.seeds.empty()) throw ConfigError("ablate.seeds: at least one seed required");
  }
};

// ---------------------------------------------------------------------------
// Value codecs

namespace detail {

[[noreturn]] inline void bad_value(const std::string& path, std::string_view expected, std::string_view got) {
  throw ConfigError(path + ": expected " + std::string(expected) + ", got '" + std::string(got) + "'");
}

template <class T>
T parse_number(const std::string& path, std::string_view text, std::string_view expected) {
  T v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end || text.empty()) bad_value(path, expected, text);
  return v;
}

inline bool parse_bool(const std::string& path, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  bad_value(path, "true or false", text);
}

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  std::string item;
  for (char ch : text) {
    if (ch == ',') {
      if (!item.empty()) out.push_back(item);
      item.clear();
    } else if (ch != ' ' && ch != '\t') {
      item.push_back(ch);
    }
  }
  if (!item.empty()) out.push_back(item);
  return out;
}

inline std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

struct Field {
  std::string section;
  std::string key;
  std::function<void(const std::string& path, const std::string& text)> set;
  std::function<std::string()> get;

  [[nodiscard]] std::string path() const { return section + "." + key; }
};

template <class T>
Field integer(std::string section, std::string key, T& slot) {
  return {std::move(section), std::move(key),
          [&slot](const std::string& path, const std::string& text) { slot = parse_number<T>(path, text, "an integer"); },
          [&slot] { return std::to_string(slot); }};
}

inline Field real(std::string section, std::string key, double& slot) {
  return {std::move(section), std::move(key),
          [&slot](const std::string& path, const std::string& text) { slot = parse_number<double>(path, text, "a number"); },
          [&slot] { return format_double(slot); }};
}

inline Field boolean(std::string section, std::string key, bool& slot) {
  return {std::move(section), std::move(key),
          [&slot](const std::string& path, const std::string& text) { slot = parse_bool(path, text); },
          [&slot] { return std::string(slot ? "true" : "false"); }};
}

inline Field text(std::string section, std::string key, std::string& slot) {
  return {std::move(section), std::move(key), [&slot](const std::string&, const std::string& t) { slot = t; },
          [&slot] { return slot; }};
}

template <class E, class Parse, class Format>
Field enumeration(std::string section, std::string key, E& slot, Parse parse, Format format) {
  return {std::move(section), std::move(key),
          [&slot, parse](const std::string& path, const std::string& t) {
            try {
              slot = parse(t);
            } catch (const ConfigError& e) {
              throw ConfigError(path + ": " + e.what());
            }
          },
          [&slot, format] { return std::string(format(slot)); }};
}

inline retrieval::Similarity parse_similarity(std::string_view s) {
  if (s == "projected") return retrieval::Similarity::projected;
  if (s == "raw") return retrieval::Similarity::raw;
  throw ConfigError("unknown similarity '" + std::string(s) + "'");
}
inline std::string_view format_similarity(retrieval::Similarity s) {
  return s == retrieval::Similarity::projected ? "projected" : "raw";
}

/// Every configurable key, bound to its slot in `c`, in canonical order.
inline std::vector<Field> fields(RunConfig& c) {
  auto& k = c.corpus;
  auto& m = c.model;
  auto& t = c.train;
  std::vector<Field> f = {
      integer("corpus", "n_identities", k.n_identities),
      integer("corpus", "test_identities", k.test_identities),
      integer("corpus", "images_per_identity", k.images_per_identity),
      integer("corpus", "texts_per_image", k.texts_per_image),
      integer("corpus", "n_attributes", k.n_attributes),
      integer("corpus", "attribute_vocab_size", k.attribute_vocab_size),
      real("corpus", "occlusion_rate", k.occlusion_rate),
      integer("corpus", "image_side", k.image_side),
      integer("corpus", "patch_side", k.patch_side),
      real("corpus", "pixel_noise", k.pixel_noise),
      integer("corpus", "max_len", k.max_len),
      integer("corpus", "seed", k.seed),

      integer("model", "image_layers", m.image_layers),
      integer("model", "text_layers", m.text_layers),
      integer("model", "cross_layers", m.cross_layers),
      integer("model", "hidden_dim", m.hidden_dim),
      integer("model", "heads", m.heads),
      integer("model", "mlp_ratio", m.mlp_ratio),
      integer("model", "proj_dim", m.proj_dim),

      integer("train", "epochs", t.epochs),
      integer("train", "batch_size", t.batch_size),
      real("train", "lr_heads", t.lr_heads),
      real("train", "lr_backbone", t.lr_backbone),
      real("train", "weight_decay", t.weight_decay),
      real("train", "momentum", t.momentum),
      integer("train", "queue_size", t.queue_size),
      real("train", "temperature", t.temperature),
      real("train", "p_weak", t.p_weak),
      real("train", "p_mask", t.p_mask),
      real("train", "lambda_prd", t.lambda_prd),
      real("train", "lambda_rtd", t.lambda_rtd),
      real("train", "lambda_cl", t.lambda_cl),
      enumeration("train", "positive_mode", t.positive_mode, train::parse_positive_mode,
                  [](data::PositiveMode v) { return train::to_string(v); }),
      enumeration("train", "rtd_generator", t.rtd_generator, train::parse_rtd_generator,
                  [](train::RtdGenerator v) { return train::to_string(v); }),
      boolean("train", "enable_itm", t.enable_itm),
      boolean("train", "enable_prd", t.enable_prd),
      boolean("train", "enable_mlm", t.enable_mlm),
      enumeration("train", "negatives", t.negatives, train::parse_negatives,
                  [](objectives::NegativeSampling v) { return train::to_string(v); }),
      boolean("train", "exclude_same_identity", t.exclude_same_identity),
      integer("train", "frozen_generator_step", t.frozen_generator_step),
      integer("train", "seed", t.seed),
      integer("train", "checkpoint_every", t.checkpoint_every),

      integer("eval", "k", c.eval.k),
      enumeration("eval", "similarity", c.eval.similarity, parse_similarity, format_similarity),
      boolean("eval", "rerank", c.eval.rerank),

      text("paths", "data_dir", c.paths.data_dir),
      text("paths", "run_dir", c.paths.run_dir),
      text("paths", "checkpoint", c.paths.checkpoint),
  };
  f.push_back({"ablate", "rows",
               [&c](const std::string& path, const std::string& s) {
                 c.ablate.rows = split_list(s);
                 if (c.ablate.rows.empty()) bad_value(path, "a comma-separated list", s);
               },
               [&c] { return join(c.ablate.rows); }});
  f.push_back({"ablate", "seeds",
               [&c](const std::string& path, const std::string& s) {
                 c.ablate.seeds.clear();
                 for (const auto& item : split_list(s)) {
                   c.ablate.seeds.push_back(parse_number<std::uint64_t>(path, item, "a list of seeds"));
                 }
                 if (c.ablate.seeds.empty()) bad_value(path, "a list of seeds", s);
               },
               [&c] {
                 std::vector<std::string> items;
                 for (auto s : c.ablate.seeds) items.push_back(std::to_string(s));
                 return join(items);
               }});
  return f;
}

inline Field& find_field(std::vector<Field>& fields, const std::string& section, const std::string& key) {
  for (auto& f : fields) {
    if (f.section == section && f.key == key) return f;
  }
  throw ConfigError(section + "." + key + ": unknown key");
}

}  // namespace detail

/// Applies one "section.key=value" assignment.
inline void apply_override(RunConfig& c, std::string_view assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string_view::npos || dot == std::string_view::npos || dot > eq) {
    throw ConfigError("override '" + std::string(assignment) + "': expected section.key=value");
  }
  const std::string section(assignment.substr(0, dot));
  const std::string key(assignment.substr(dot + 1, eq - dot - 1));
  auto fields = detail::fields(c);
  auto& f = detail::find_field(fields, section, key);
  f.set(f.path(), std::string(assignment.substr(eq + 1)));
}

/// A parsed configuration plus the exact text it came from.
struct LoadedConfig {
  RunConfig config;
  std::string echo;
};

[[nodiscard]] inline LoadedConfig parse(const std::string& text, const std::vector<std::string>& overrides = {}) {
  LoadedConfig out;
  boost::property_tree::ptree tree;
  std::istringstream is(text);
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  auto fields = detail::fields(out.config);
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError(section + ": key outside any section");
    for (const auto& [key, value] : body) {
      auto& f = detail::find_field(fields, section, key);
      f.set(f.path(), value.get_value<std::string>());
    }
  }
  out.echo = text;
  for (const auto& o : overrides) {
    apply_override(out.config, o);
    out.echo += "\n; override " + o;
  }
  out.config.validate();
  return out;
}

[[nodiscard]] inline LoadedConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), overrides);
}

/// Canonical INI form: every key, fixed order, shortest round-trip numbers.
[[nodiscard]] inline std::string canonical(const RunConfig& c) {
  RunConfig copy = c;
  std::string out;
  std::string current;
  for (const auto& f : detail::fields(copy)) {
    if (f.section != current) {
      if (!current.empty()) out += '\n';
      out += "[" + f.section + "]\n";
      current = f.section;
    }
    out += f.key + " = " + f.get() + "\n";
  }
  return out;
}

}  // namespace rasa::config
