#pragma once

// Small corpora and networks shared by the unit tests.

#include <cstdint>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "rasa/corpus.hpp"
#include "rasa/network.hpp"
#include "rasa/trainer.hpp"

namespace rasa::testing {

// 8x8 images cut into four 4x4 patches, one attribute per patch.
inline data::CorpusSpec tiny_spec(std::uint64_t seed = 0) {
  data::CorpusSpec s;
  s.n_identities = 6;
  s.test_identities = 2;
  s.images_per_identity = 2;
  s.texts_per_image = 1;
  s.n_attributes = 4;
  s.attribute_vocab_size = 4;
  s.occlusion_rate = 0.2;
  s.image_side = 8;
  s.patch_side = 4;
  s.pixel_noise = 0.02;
  s.max_len = 10;
  s.seed = seed;
  return s;
}

inline model::ModelConfig tiny_arch(int hidden = 8) {
  model::ModelConfig a;
  a.image_layers = 1;
  a.text_layers = 1;
  a.cross_layers = 1;
  a.hidden_dim = hidden;
  a.heads = 2;
  a.mlp_ratio = 2;
  a.proj_dim = hidden / 2;
  return a;
}

inline model::Network tiny_network(const data::Corpus& corpus, std::uint64_t seed = 0, int hidden = 8) {
  Rng rng(seed);
  return model::initialize(train::model_config_for(corpus, tiny_arch(hidden)), rng);
}

inline train::TrainConfig tiny_train(int batch = 4) {
  train::TrainConfig c;
  c.epochs = 1;
  c.batch_size = batch;
  c.queue_size = 16;
  return c;
}

/// Fresh per-process directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("rasa_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace rasa::testing
