#pragma once

// Ablation grid: named objective presets trained and evaluated on one corpus
// with shared seeds, written as a self-describing TSV table.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "rasa/config.hpp"
#include "rasa/digest.hpp"
#include "rasa/retrieval.hpp"
#include "rasa/trainer.hpp"

namespace rasa::ablation {

struct Preset {
  std::string name;
  std::string label;
  std::function<void(config::RunConfig&)> apply;
};

namespace detail {

inline void objectives(config::RunConfig& c, bool itm, data::PositiveMode mode, bool prd, bool mlm,
                       train::RtdGenerator rtd) {
  c.train.enable_itm = itm;
  c.train.positive_mode = mode;
  c.train.enable_prd = prd;
  c.train.enable_mlm = mlm;
  c.train.rtd_generator = rtd;
  // Without a matching head there is nothing to rerank with.
  c.eval.rerank = itm && c.eval.rerank;
}

}  // namespace detail

/// The rows of the objective ablation, weakest first.
inline const std::vector<Preset>& presets() {
  using data::PositiveMode;
  using train::RtdGenerator;
  static const std::vector<Preset> all = {
      {"cl", "CL(ITC+IMC)",
       [](auto& c) { detail::objectives(c, false, PositiveMode::strong_only, false, false, RtdGenerator::off); }},
      {"cl_itm", "CL+ITM",
       [](auto& c) { detail::objectives(c, true, PositiveMode::uniform_all, false, false, RtdGenerator::off); }},
      {"cl_ra_s_itm", "CL+RA(s-ITM)",
       [](auto& c) { detail::objectives(c, true, PositiveMode::strong_only, false, false, RtdGenerator::off); }},
      {"cl_ra_p_itm", "CL+RA(p-ITM)",
       [](auto& c) { detail::objectives(c, true, PositiveMode::probabilistic, false, false, RtdGenerator::off); }},
      {"cl_ra_itm_prd", "CL+RA(ITM+PRD)",
       [](auto& c) { detail::objectives(c, true, PositiveMode::uniform_all, true, false, RtdGenerator::off); }},
      {"cl_ra", "CL+RA(p-ITM+PRD)",
       [](auto& c) { detail::objectives(c, true, PositiveMode::probabilistic, true, false, RtdGenerator::off); }},
      {"cl_ra_sa_mlm", "CL+RA+SA(MLM)",
       [](auto& c) { detail::objectives(c, true, PositiveMode::probabilistic, true, true, RtdGenerator::off); }},
      {"cl_ra_sa_f_rtd", "CL+RA+SA(MLM+f-RTD)",
       [](auto& c) { detail::objectives(c, true, PositiveMode::probabilistic, true, true, RtdGenerator::frozen); }},
      {"cl_ra_sa_o_rtd", "CL+RA+SA(MLM+o-RTD)",
       [](auto& c) { detail::objectives(c, true, PositiveMode::probabilistic, true, true, RtdGenerator::online); }},
      {"rasa", "CL+RA+SA(MLM+m-RTD)",
       [](auto& c) { detail::objectives(c, true, PositiveMode::probabilistic, true, true, RtdGenerator::momentum); }},
  };
  return all;
}

[[nodiscard]] inline const Preset& preset(const std::string& name) {
  for (const auto& p : presets()) {
    if (p.name == name) return p;
  }
  std::string known;
  for (const auto& p : presets()) known += (known.empty() ? "" : ", ") + p.name;
  throw ConfigError("ablate.rows: unknown preset '" + name + "' (known: " + known + ")");
}

/// The configuration one row runs with.
[[nodiscard]] inline config::RunConfig row_config(const config::RunConfig& base, const std::string& name, std::uint64_t seed) {
  config::RunConfig c = base;
  preset(name).apply(c);
  c.train.seed = seed;
  return c;
}

/// Short content hash of the canonical configuration a row trains and evaluates with.
[[nodiscard]] inline std::string fingerprint(const config::RunConfig& c) {
  config::RunConfig canonical = c;
  canonical.paths = {};
  canonical.ablate = {};
  return sha256_hex(config::canonical(canonical)).substr(0, 16);
}

struct Row {
  int index = 0;
  std::string preset;
  std::uint64_t seed = 0;
  std::string fingerprint;
  std::string settings;
  double r1 = 0, r5 = 0, r10 = 0, map = 0;

  friend bool operator==(const Row&, const Row&) = default;
};

[[nodiscard]] inline std::string settings_of(const config::RunConfig& c) {
  const auto& t = c.train;
  std::string s = "itm=" + std::string(t.enable_itm ? "on" : "off");
  s += ";positives=" + std::string(train::to_string(t.positive_mode));
  s += ";prd=" + std::string(t.enable_prd ? "on" : "off");
  s += ";mlm=" + std::string(t.enable_mlm ? "on" : "off");
  s += ";rtd=" + std::string(train::to_string(t.rtd_generator));
  s += ";rerank=" + std::string(c.eval.rerank ? "on" : "off");
  return s;
}

/// Trains and evaluates every (row, seed) combination on `corpus`.
[[nodiscard]] inline std::vector<Row> run(const config::RunConfig& base, const data::Corpus& corpus,
                                          const std::function<void(const Row&)>& on_row = {}) {
  for (const auto& name : base.ablate.rows) (void)preset(name);
  std::vector<Row> rows;
  int index = 0;
  for (const auto& name : base.ablate.rows) {
    for (std::uint64_t seed : base.ablate.seeds) {
      const config::RunConfig c = row_config(base, name, seed);
      const train::TrainResult trained = train::train(c.train, c.model, corpus);
      const auto eval = retrieval::evaluate(trained.state.online, corpus, data::Split::test, c.eval);
      Row r;
      r.index = index++;
      r.preset = name;
      r.seed = seed;
      r.fingerprint = fingerprint(c);
      r.settings = settings_of(c);
      r.r1 = eval.metrics.r1;
      r.r5 = eval.metrics.r5;
      r.r10 = eval.metrics.r10;
      r.map = eval.metrics.map;
      if (on_row) on_row(r);
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Table file: tab-separated, one header line, numbers in shortest
// round-trip form.

inline constexpr const char* kHeader = "row\tpreset\tseed\tfingerprint\tsettings\tr1\tr5\tr10\tmap";

inline void write_table(std::ostream& os, const std::vector<Row>& rows) {
  os << kHeader << '\n';
  for (const auto& r : rows) {
    os << r.index << '\t' << r.preset << '\t' << r.seed << '\t' << r.fingerprint << '\t' << r.settings << '\t'
       << config::detail::format_double(r.r1) << '\t' << config::detail::format_double(r.r5) << '\t'
       << config::detail::format_double(r.r10) << '\t' << config::detail::format_double(r.map) << '\n';
  }
}

[[nodiscard]] inline std::vector<Row> read_table(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kHeader) throw DataError("ablation table: bad header");
  std::vector<Row> rows;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, '\t')) cells.push_back(cell);
    if (cells.size() != 9) throw DataError("ablation table: line " + std::to_string(line_no) + " needs 9 columns");
    const std::string where = "ablation table line " + std::to_string(line_no);
    try {
      Row r;
      r.index = config::detail::parse_number<int>(where, cells[0], "an integer");
      r.preset = cells[1];
      r.seed = config::detail::parse_number<std::uint64_t>(where, cells[2], "an integer");
      r.fingerprint = cells[3];
      r.settings = cells[4];
      r.r1 = config::detail::parse_number<double>(where, cells[5], "a number");
      r.r5 = config::detail::parse_number<double>(where, cells[6], "a number");
      r.r10 = config::detail::parse_number<double>(where, cells[7], "a number");
      r.map = config::detail::parse_number<double>(where, cells[8], "a number");
      rows.push_back(std::move(r));
    } catch (const ConfigError& e) {
      throw DataError(e.what());
    }
  }
  return rows;
}

/// Median test R@1 of each preset, in first-appearance order.
[[nodiscard]] inline std::vector<std::pair<std::string, double>> median_r1(const std::vector<Row>& rows) {
  std::vector<std::pair<std::string, double>> out;
  std::vector<std::string> names;
  for (const auto& r : rows) {
    if (std::find(names.begin(), names.end(), r.preset) == names.end()) names.push_back(r.preset);
  }
  for (const auto& name : names) {
    std::vector<double> v;
    for (const auto& r : rows) {
      if (r.preset == name) v.push_back(r.r1);
    }
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    out.emplace_back(name, n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]));
  }
  return out;
}

}  // namespace rasa::ablation
