#pragma once

// The optimisation loop. One step, in order:
//   momentum forward -> contrastive losses -> ITM negatives + p-ITM -> PRD
//   -> masking + MLM -> replacement + m-RTD -> backward -> AdamW step
//   -> EMA update -> enqueue momentum projections.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rasa/checkpoint.hpp"
#include "rasa/corpus.hpp"
#include "rasa/error.hpp"
#include "rasa/momentum.hpp"
#include "rasa/network.hpp"
#include "rasa/objectives.hpp"
#include "rasa/optimizer.hpp"
#include "rasa/random.hpp"

namespace rasa::train {

using data::PositiveMode;
using model::Network;
using objectives::LossReport;
using objectives::NegativeSampling;

/// Source of replacement words for replaced-token detection.
enum class RtdGenerator : std::uint8_t {
  momentum,  // m-RTD
  online,    // o-RTD
  frozen,    // f-RTD: snapshot of the online model at a fixed step
  off,
};

inline constexpr double kTemperatureMin = 1e-3;
inline constexpr double kTemperatureMax = 0.5;

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double lr_heads = 1e-3;
  double lr_backbone = 1e-3;
  double weight_decay = 0.02;
  double momentum = 0.995;
  int queue_size = 1024;
  double temperature = 0.07;
  double p_weak = 0.1;
  double p_mask = 0.3;
  double lambda_prd = 0.5;
  double lambda_rtd = 0.5;
  double lambda_cl = 0.5;
  PositiveMode positive_mode = PositiveMode::probabilistic;
  RtdGenerator rtd_generator = RtdGenerator::momentum;
  bool enable_itm = true;
  bool enable_prd = true;
  bool enable_mlm = true;
  NegativeSampling negatives = NegativeSampling::hard;
  bool exclude_same_identity = true;
  int frozen_generator_step = 0;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs; 0 = final checkpoint only

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("train." + msg); };
    if (epochs < 0) fail("epochs must be >= 0");
    if (batch_size < 2) fail("batch_size must be >= 2");
    if (!(lr_heads > 0.0) || !(lr_backbone > 0.0)) fail("lr_heads and lr_backbone must be > 0");
    if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
    if (!(momentum >= 0.0 && momentum <= 1.0)) fail("momentum must be in [0, 1]");
    if (queue_size < 1) fail("queue_size must be >= 1");
    if (!(temperature >= kTemperatureMin && temperature <= kTemperatureMax)) fail("temperature must be in [0.001, 0.5]");
    if (!(p_weak >= 0.0 && p_weak <= 1.0)) fail("p_weak must be in [0, 1]");
    if (!(p_mask > 0.0 && p_mask < 1.0)) fail("p_mask must be in (0, 1)");
    if (!(lambda_prd >= 0.0 && lambda_rtd >= 0.0 && lambda_cl >= 0.0)) fail("lambda_prd, lambda_rtd and lambda_cl must be >= 0");
    if (frozen_generator_step < 0) fail("frozen_generator_step must be >= 0");
    if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
  }

  [[nodiscard]] objectives::LossWeights weights() const { return {lambda_prd, lambda_rtd, lambda_cl}; }
  [[nodiscard]] optim::AdamWOptions optimizer() const {
    optim::AdamWOptions o;
    o.lr_heads = lr_heads;
    o.lr_backbone = lr_backbone;
    o.weight_decay = weight_decay;
    return o;
  }
};

// ---------------------------------------------------------------------------
// Enum names used by configuration files and logs.

inline std::string_view to_string(PositiveMode m) {
  switch (m) {
    case PositiveMode::strong_only: return "strong_only";
    case PositiveMode::probabilistic: return "probabilistic";
    case PositiveMode::uniform_all: return "uniform_all";
  }
  return "?";
}
inline std::string_view to_string(RtdGenerator g) {
  switch (g) {
    case RtdGenerator::momentum: return "momentum";
    case RtdGenerator::online: return "online";
    case RtdGenerator::frozen: return "frozen";
    case RtdGenerator::off: return "off";
  }
  return "?";
}
inline std::string_view to_string(NegativeSampling n) { return n == NegativeSampling::hard ? "hard" : "uniform"; }

inline PositiveMode parse_positive_mode(std::string_view s) {
  if (s == "strong_only") return PositiveMode::strong_only;
  if (s == "probabilistic") return PositiveMode::probabilistic;
  if (s == "uniform_all") return PositiveMode::uniform_all;
  throw ConfigError("unknown positive_mode '" + std::string(s) + "'");
}
inline RtdGenerator parse_rtd_generator(std::string_view s) {
  if (s == "momentum") return RtdGenerator::momentum;
  if (s == "online") return RtdGenerator::online;
  if (s == "frozen") return RtdGenerator::frozen;
  if (s == "off") return RtdGenerator::off;
  throw ConfigError("unknown rtd_generator '" + std::string(s) + "'");
}
inline NegativeSampling parse_negatives(std::string_view s) {
  if (s == "hard") return NegativeSampling::hard;
  if (s == "uniform") return NegativeSampling::uniform;
  throw ConfigError("unknown negatives '" + std::string(s) + "'");
}

inline nlohmann::json to_json(const LossReport& r) {
  return {{"itc", r.itc}, {"imc", r.imc}, {"cl", r.cl},       {"p_itm", r.p_itm}, {"prd", r.prd},
          {"ra", r.ra},   {"mlm", r.mlm}, {"m_rtd", r.m_rtd}, {"sa", r.sa},       {"total", r.total}};
}

// ---------------------------------------------------------------------------
// State

enum class StepPhase : std::uint8_t {
  momentum_forward,
  contrastive,
  itm,
  prd,
  mlm,
  rtd,
  backward,
  optimizer,
  ema,
  enqueue,
};

struct TrainState {
  TrainConfig config;
  Network online;
  momentum::MomentumState momentum;
  momentum::RepQueue image_queue;
  momentum::RepQueue text_queue;
  optim::AdamW optimizer;
  std::optional<Network> frozen_generator;
  long step = 0;
  Rng rng;
  std::function<void(StepPhase)> on_phase;  // instrumentation hook

  void phase(StepPhase p) const {
    if (on_phase) on_phase(p);
  }
};

[[nodiscard]] inline TrainState make_state(const TrainConfig& config, const model::ModelConfig& model_config) {
  config.validate();
  TrainState s;
  s.config = config;
  s.rng = Rng(config.seed);
  s.online = model::initialize(model_config, s.rng, config.temperature);
  s.momentum.bootstrap(s.online, config.momentum);
  s.image_queue = momentum::RepQueue(config.queue_size, model_config.proj_dim);
  s.text_queue = momentum::RepQueue(config.queue_size, model_config.proj_dim);
  s.optimizer = optim::AdamW(s.online, config.optimizer());
  return s;
}

/// Per-step diagnostics besides the loss values.
struct StepOutput {
  LossReport report;
  int strong_pairs = 0;
  int masked_tokens = 0;
  int replaced_tokens = 0;
};

inline void clamp_temperature(Network& net) {
  double& t = net.temperature.mutable_value()(0, 0);
  t = std::clamp(t, kTemperatureMin, kTemperatureMax);
}

/// Random decisions and momentum-side results fixed before the online loss
/// is evaluated. Holding them fixed makes the loss a deterministic function
/// of the online parameters.
struct StepPlan {
  model::RepresentationBundle momentum;
  Matrix image_queue;
  std::vector<int> image_queue_ids;
  Matrix text_queue;
  std::vector<int> text_queue_ids;
  std::optional<objectives::ItmPlan> itm;
  std::vector<int> strong_rows;
  std::optional<objectives::MaskedBatch> masked;
  std::optional<objectives::ReplacedBatch> replaced;
};

/// Online-side loss terms for a batch under a fixed plan.
[[nodiscard]] inline objectives::LossTerms online_losses(const Network& net, const data::PairBatch& batch,
                                                         const StepPlan& plan, const TrainConfig& config,
                                                         const std::function<void(StepPhase)>& hook = {}) {
  auto phase = [&hook](StepPhase p) {
    if (hook) hook(p);
  };
  objectives::LossTerms terms;
  const Index m1 = net.config.num_patches() + 1;
  model::RepresentationBundle online = model::represent(net, batch.pixels, batch.tokens, false);

  phase(StepPhase::contrastive);
  objectives::ContrastiveInputs ci;
  ci.image_proj = online.image_proj;
  ci.text_proj = online.text_proj;
  ci.image_proj_m = plan.momentum.image_proj.value();
  ci.text_proj_m = plan.momentum.text_proj.value();
  ci.identity_ids = batch.identity_ids;
  ci.image_queue = plan.image_queue;
  ci.image_queue_ids = plan.image_queue_ids;
  ci.text_queue = plan.text_queue;
  ci.text_queue_ids = plan.text_queue_ids;
  ci.tau = net.temperature;
  ci.exclude_same_identity = config.exclude_same_identity;
  terms.itc = objectives::itc_loss(ci);
  terms.imc = objectives::imc_loss(ci);

  Var positive_cls;
  if (plan.itm) {
    phase(StepPhase::itm);
    objectives::ItmForward itm = objectives::itm_forward(net, online.visual, online.textual, batch.tokens, *plan.itm);
    terms.p_itm = objectives::p_itm_loss(net, itm.fused_cls, itm.labels);
    std::vector<Index> rows(static_cast<std::size_t>(itm.positives));
    for (Index i = 0; i < itm.positives; ++i) rows[static_cast<std::size_t>(i)] = i;
    positive_cls = ag::gather_rows(itm.fused_cls, std::move(rows));
  }
  if (config.enable_prd) {
    phase(StepPhase::prd);
    if (!positive_cls.defined()) {
      positive_cls = model::cls_rows(model::fuse(net, online.visual, online.textual, batch.tokens), batch.tokens.length);
    }
    terms.prd = objectives::prd_loss(net, positive_cls, batch.relations);
  }
  if (!plan.strong_rows.empty() && plan.masked) {
    std::vector<Index> rows(plan.strong_rows.begin(), plan.strong_rows.end());
    Var strong_visual = ag::gather_blocks(online.visual, m1, rows);
    if (config.enable_mlm) {
      phase(StepPhase::mlm);
      terms.mlm = objectives::mlm_loss(net, strong_visual, *plan.masked);
    }
    if (plan.replaced) {
      phase(StepPhase::rtd);
      terms.m_rtd = objectives::m_rtd_loss(net, strong_visual, *plan.replaced);
    }
  }
  return terms;
}

/// Draws every random decision of a step. Uses the online network only for
/// (detached) similarities and, for o-RTD, as the generator.
[[nodiscard]] inline StepPlan plan_step(TrainState& s, const data::PairBatch& batch) {
  const TrainConfig& c = s.config;
  StepPlan plan;
  s.phase(StepPhase::momentum_forward);
  plan.momentum = momentum::momentum_forward(s.momentum, batch.pixels, batch.tokens, false);
  plan.image_queue = s.image_queue.contents();
  plan.image_queue_ids = s.image_queue.identities();
  plan.text_queue = s.text_queue.contents();
  plan.text_queue_ids = s.text_queue.identities();

  const bool need_online_encoding = c.enable_itm || c.rtd_generator == RtdGenerator::online;
  std::optional<model::RepresentationBundle> detached;
  if (need_online_encoding) {
    Network frozen_view = s.online.clone(false);
    detached = model::represent(frozen_view, batch.pixels, batch.tokens, false);
  }
  if (c.enable_itm) {
    Matrix sim = detached->image_proj.value() * detached->text_proj.value().transpose() / s.online.tau();
    plan.itm = objectives::build_itm_batch(batch.identity_ids, sim, s.rng, c.negatives);
  }

  for (int i = 0; i < batch.size(); ++i) {
    if (batch.relations[static_cast<std::size_t>(i)] == data::Relation::strong) plan.strong_rows.push_back(i);
  }
  const bool rtd_active =
      c.rtd_generator != RtdGenerator::off && (c.rtd_generator != RtdGenerator::frozen || s.frozen_generator.has_value());
  if (!plan.strong_rows.empty() && (c.enable_mlm || rtd_active)) {
    data::TokenBatch strong_tokens = batch.tokens.select(plan.strong_rows);
    plan.masked = objectives::mask_batch(strong_tokens, c.p_mask, s.rng);
    if (rtd_active) {
      const Index m1 = s.online.config.num_patches() + 1;
      std::vector<Index> rows(plan.strong_rows.begin(), plan.strong_rows.end());
      Matrix dist;
      if (c.rtd_generator == RtdGenerator::momentum) {
        Var visual = ag::gather_blocks(plan.momentum.visual, m1, rows);
        dist = objectives::generator_distribution(s.momentum.params(), visual, *plan.masked);
      } else if (c.rtd_generator == RtdGenerator::online) {
        Network view = s.online.clone(false);
        Var visual = ag::gather_blocks(detached->visual, m1, rows);
        dist = objectives::generator_distribution(view, visual, *plan.masked);
      } else {
        const Network& gen = *s.frozen_generator;
        Var visual = model::encode_image(gen, batch.select(plan.strong_rows).pixels);
        dist = objectives::generator_distribution(gen, visual, *plan.masked);
      }
      plan.replaced = objectives::generate_replacement(dist, *plan.masked, strong_tokens, s.rng);
    }
  }
  return plan;
}

/// One optimisation step on `batch`.
inline StepOutput train_step(TrainState& s, const data::PairBatch& batch) {
  require<LifecycleError>(s.momentum.initialized(), "train_step: state not initialised");
  require<DataError>(batch.size() >= 2, "train_step: batch needs at least two pairs");
  if (s.config.enable_itm && batch.distinct_identities() < 2) {
    throw DataError("train_step: batch holds a single identity; negatives cannot be sampled");
  }
  if (s.config.rtd_generator == RtdGenerator::frozen && !s.frozen_generator &&
      s.step >= s.config.frozen_generator_step) {
    s.frozen_generator = s.online.clone(false);
  }

  const StepPlan plan = plan_step(s, batch);
  const objectives::LossTerms terms = online_losses(s.online, batch, plan, s.config, s.on_phase);
  const objectives::JointLoss joint = objectives::joint_loss(terms, s.config.weights());

  s.phase(StepPhase::backward);
  s.online.zero_grad();
  ag::backward(joint.total);

  s.phase(StepPhase::optimizer);
  s.optimizer.step(s.online);
  clamp_temperature(s.online);

  s.phase(StepPhase::ema);
  s.momentum.update(s.online);

  s.phase(StepPhase::enqueue);
  s.image_queue.enqueue(plan.momentum.image_proj.value(), batch.identity_ids);
  s.text_queue.enqueue(plan.momentum.text_proj.value(), batch.identity_ids);
  ++s.step;

  StepOutput out;
  out.report = joint.report;
  out.strong_pairs = static_cast<int>(plan.strong_rows.size());
  if (plan.masked) out.masked_tokens = static_cast<int>(plan.masked->positions.size());
  if (plan.replaced) {
    out.replaced_tokens = static_cast<int>(std::count(plan.replaced->replaced.begin(), plan.replaced->replaced.end(), 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints of the full training state

[[nodiscard]] inline checkpoint::Archive snapshot(const TrainState& s, const std::string& config_echo, int epoch) {
  checkpoint::Archive a;
  a.config_echo = config_echo;
  a.metadata["model"] = checkpoint::to_json(s.online.config);
  a.metadata["step"] = s.step;
  a.metadata["epoch"] = epoch;
  a.metadata["optimizer_steps"] = s.optimizer.steps();
  a.metadata["rng"] = s.rng.state();
  a.metadata["momentum"] = s.momentum.coefficient();
  a.metadata["has_frozen_generator"] = s.frozen_generator.has_value();
  checkpoint::add_network(a, s.online);
  checkpoint::add_network(a, s.momentum.params(), "momentum.");
  const auto& names = s.optimizer.names();
  for (std::size_t i = 0; i < names.size(); ++i) a.arrays.emplace_back("adamw.m." + names[i], s.optimizer.first_moments()[i]);
  for (std::size_t i = 0; i < names.size(); ++i) a.arrays.emplace_back("adamw.v." + names[i], s.optimizer.second_moments()[i]);
  if (s.frozen_generator) checkpoint::add_network(a, *s.frozen_generator, "frozen.");
  return a;
}

/// Rebuilds a training state from a checkpoint. Queues start empty.
[[nodiscard]] inline TrainState restore(const checkpoint::Archive& a, const TrainConfig& config) {
  config.validate();
  const model::ModelConfig mc = checkpoint::model_config_from_json(a.metadata.at("model"));
  TrainState s;
  s.config = config;
  s.online = checkpoint::load_network(a, mc, true);
  s.momentum.bootstrap(s.online, config.momentum);
  s.momentum.mutable_params() = checkpoint::load_network(a, mc, false, "momentum.");
  s.image_queue = momentum::RepQueue(config.queue_size, mc.proj_dim);
  s.text_queue = momentum::RepQueue(config.queue_size, mc.proj_dim);
  s.optimizer = optim::AdamW(s.online, config.optimizer());
  std::vector<Matrix> first, second;
  for (const auto& name : s.optimizer.names()) {
    first.push_back(a.array("adamw.m." + name));
    second.push_back(a.array("adamw.v." + name));
  }
  s.optimizer.restore(a.metadata.at("optimizer_steps").get<long>(), std::move(first), std::move(second));
  if (a.metadata.value("has_frozen_generator", false)) s.frozen_generator = checkpoint::load_network(a, mc, false, "frozen.");
  s.step = a.metadata.at("step").get<long>();
  s.rng.restore(a.metadata.at("rng").get<std::string>());
  return s;
}

// ---------------------------------------------------------------------------
// Training loop

/// Model shape implied by a corpus plus the architecture knobs in `arch`.
[[nodiscard]] inline model::ModelConfig model_config_for(const data::Corpus& corpus, model::ModelConfig arch) {
  arch.vocab_size = corpus.vocab.size();
  arch.max_len = corpus.spec.max_len;
  arch.image_side = corpus.spec.image_side;
  arch.patch_side = corpus.spec.patch_side;
  arch.validate();
  return arch;
}

[[nodiscard]] inline int steps_per_epoch(const data::Corpus& corpus, int batch_size) {
  const auto texts = static_cast<int>(corpus.text_ids(data::Split::train).size());
  return std::max(1, (texts + batch_size - 1) / batch_size);
}

struct TrainOptions {
  std::string config_echo;
  std::filesystem::path run_dir;                 // empty: no files written
  std::optional<std::filesystem::path> resume;   // continue from this checkpoint
  std::function<void(const TrainState&, const StepOutput&, int epoch)> on_step;
};

struct TrainResult {
  TrainState state;
  std::vector<LossReport> history;
  std::filesystem::path final_checkpoint;
};

inline data::PairBatch sample_training_batch(const data::Corpus& corpus, TrainState& s) {
  const TrainConfig& c = s.config;
  data::PairBatch batch = data::sample_pair_batch(corpus, data::Split::train, c.batch_size, c.p_weak, c.positive_mode, s.rng);
  if (c.enable_itm && batch.distinct_identities() < 2) {
    batch = data::sample_pair_batch(corpus, data::Split::train, c.batch_size, c.p_weak, c.positive_mode, s.rng);
    if (batch.distinct_identities() < 2) throw DataError("train: resampled batch still holds a single identity");
  }
  return batch;
}

/// Trains for config.epochs epochs of ceil(train texts / batch_size) steps.
[[nodiscard]] inline TrainResult train(const TrainConfig& config, const model::ModelConfig& arch,
                                       const data::Corpus& corpus, const TrainOptions& options = {}) {
  config.validate();
  require<DataError>(!corpus.text_ids(data::Split::train).empty(), "train: corpus has no training split");
  const model::ModelConfig mc = model_config_for(corpus, arch);

  TrainResult result;
  result.state = options.resume ? restore(checkpoint::read(*options.resume), config) : make_state(config, mc);
  TrainState& s = result.state;

  const int per_epoch = steps_per_epoch(corpus, config.batch_size);
  const long total = static_cast<long>(config.epochs) * per_epoch;

  std::ofstream log;
  if (!options.run_dir.empty()) {
    std::filesystem::create_directories(options.run_dir);
    log.open(options.run_dir / "train_log.jsonl", options.resume ? std::ios::app : std::ios::trunc);
    if (!log) throw DataError("train: cannot open training log in " + options.run_dir.string());
  }
  auto save = [&](const std::string& name, int epoch) {
    const auto path = options.run_dir / name;
    checkpoint::write(path, snapshot(s, options.config_echo, epoch));
    return path;
  };

  const auto started = std::chrono::steady_clock::now();
  while (s.step < total) {
    const int epoch = static_cast<int>(s.step / per_epoch);
    data::PairBatch batch = sample_training_batch(corpus, s);
    StepOutput out;
    try {
      out = train_step(s, batch);
    } catch (const NumericError& e) {
      if (!options.run_dir.empty()) {
        nlohmann::json dump = {{"step", s.step}, {"error", e.what()}, {"image_ids", batch.image_ids},
                               {"text_ids", batch.text_ids}};
        std::ofstream(options.run_dir / "numeric_failure.json") << dump.dump(2) << '\n';
      }
      throw;
    }
    result.history.push_back(out.report);
    if (log.is_open()) {
      const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      nlohmann::json line = {{"step", s.step},
                             {"epoch", epoch},
                             {"loss", to_json(out.report)},
                             {"lr", {{"heads", config.lr_heads}, {"backbone", config.lr_backbone}}},
                             {"temperature", s.online.tau()},
                             {"seconds", seconds}};
      log << line.dump() << '\n';
    }
    if (options.on_step) options.on_step(s, out, epoch);
    const bool epoch_end = s.step % per_epoch == 0;
    if (epoch_end && config.checkpoint_every > 0 && !options.run_dir.empty()) {
      const int done = static_cast<int>(s.step / per_epoch);
      if (done % config.checkpoint_every == 0) save("checkpoint_epoch" + std::to_string(done) + ".ckpt", done);
    }
  }
  if (!options.run_dir.empty()) result.final_checkpoint = save("final.ckpt", static_cast<int>(s.step / per_epoch));
  return result;
}

}  // namespace rasa::train
