#pragma once

// Held-out checks of the auxiliary heads.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "rasa/corpus.hpp"
#include "rasa/network.hpp"
#include "rasa/objectives.hpp"
#include "rasa/random.hpp"

namespace rasa::probes {

using model::Network;

struct PrdProbe {
  double accuracy = 0.0;
  double strong_accuracy = 0.0;
  double weak_accuracy = 0.0;
  int pairs = 0;
};

/// Every text of `split` with a second image of its identity contributes one
/// strong pair (its source image) and one weak pair (a random other image).
[[nodiscard]] inline PrdProbe prd_accuracy(const Network& net, const data::Corpus& corpus, data::Split split,
                                           std::uint64_t seed = 0) {
  Rng rng(seed);
  std::vector<int> images, texts;
  std::vector<data::Relation> truth;
  for (int text_id : corpus.text_ids(split)) {
    const auto& t = corpus.texts[static_cast<std::size_t>(text_id)];
    std::vector<int> others;
    for (int im : corpus.images_of_identity(t.identity_id)) {
      if (im != t.source_image_id) others.push_back(im);
    }
    if (others.empty()) continue;
    images.push_back(t.source_image_id);
    texts.push_back(text_id);
    truth.push_back(data::Relation::strong);
    images.push_back(others[rng.index(others.size())]);
    texts.push_back(text_id);
    truth.push_back(data::Relation::weak);
  }
  require<DataError>(!truth.empty(), "prd_accuracy: no identity has two images");

  PrdProbe out;
  int correct[2] = {0, 0};
  int total[2] = {0, 0};
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < truth.size(); start += kChunk) {
    const std::size_t end = std::min(truth.size(), start + kChunk);
    const data::PairBatch batch = data::make_pair_batch(corpus, {images.begin() + static_cast<std::ptrdiff_t>(start),
                                                                 images.begin() + static_cast<std::ptrdiff_t>(end)},
                                                        {texts.begin() + static_cast<std::ptrdiff_t>(start),
                                                         texts.begin() + static_cast<std::ptrdiff_t>(end)});
    const model::RepresentationBundle rep = model::represent(net, batch.pixels, batch.tokens, true);
    const Matrix probs = model::probabilities(model::prd_logits(net, model::cls_rows(rep.fused, batch.tokens.length)));
    for (std::size_t i = start; i < end; ++i) {
      const auto row = static_cast<Index>(i - start);
      const int predicted = probs(row, objectives::prd_weak) > probs(row, objectives::prd_strong) ? objectives::prd_weak
                                                                                                  : objectives::prd_strong;
      const int label = truth[i] == data::Relation::strong ? objectives::prd_strong : objectives::prd_weak;
      ++total[label];
      if (predicted == label) ++correct[label];
    }
  }
  out.pairs = total[0] + total[1];
  out.accuracy = static_cast<double>(correct[0] + correct[1]) / out.pairs;
  out.strong_accuracy = static_cast<double>(correct[objectives::prd_strong]) / total[objectives::prd_strong];
  out.weak_accuracy = static_cast<double>(correct[objectives::prd_weak]) / total[objectives::prd_weak];
  return out;
}

struct RtdProbe {
  double replaced_recall = 0.0;   // replaced positions flagged as replaced
  double original_accuracy = 0.0; // unreplaced scored positions flagged as original
  int replaced = 0;
  int scored = 0;
};

/// Masks strong pairs of `split`, fills the masks from `generator` and
/// scores `detector`'s RTD head on the resulting texts.
[[nodiscard]] inline RtdProbe rtd_detection(const Network& detector, const Network& generator, const data::Corpus& corpus,
                                            data::Split split, double p_mask, std::uint64_t seed = 0) {
  Rng rng(seed);
  const std::vector<int> texts = corpus.text_ids(split);
  require<DataError>(!texts.empty(), "rtd_detection: split has no texts");
  RtdProbe out;
  int hit_replaced = 0;
  int hit_original = 0;
  int originals = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < texts.size(); start += kChunk) {
    const std::size_t end = std::min(texts.size(), start + kChunk);
    std::vector<int> text_ids(texts.begin() + static_cast<std::ptrdiff_t>(start), texts.begin() + static_cast<std::ptrdiff_t>(end));
    std::vector<int> image_ids;
    for (int t : text_ids) image_ids.push_back(corpus.texts[static_cast<std::size_t>(t)].source_image_id);
    const data::PairBatch batch = data::make_pair_batch(corpus, image_ids, text_ids);

    const objectives::MaskedBatch masked = objectives::mask_batch(batch.tokens, p_mask, rng);
    const Var gen_visual = model::encode_image(generator, batch.pixels);
    const Matrix dist = objectives::generator_distribution(generator, gen_visual, masked);
    const objectives::ReplacedBatch rep = objectives::generate_replacement(dist, masked, batch.tokens, rng);

    const Var visual = model::encode_image(detector, batch.pixels);
    const Var textual = model::encode_text(detector, rep.tokens);
    const Var fused = model::fuse(detector, visual, textual, rep.tokens);
    const Matrix probs = model::probabilities(model::rtd_logits(detector, fused));
    for (std::size_t i = 0; i < rep.scored.size(); ++i) {
      if (rep.scored[i] == 0) continue;
      ++out.scored;
      const auto row = static_cast<Index>(i);
      const bool flagged = probs(row, objectives::rtd_replaced) > probs(row, objectives::rtd_original);
      if (rep.replaced[i] != 0) {
        ++out.replaced;
        if (flagged) ++hit_replaced;
      } else {
        ++originals;
        if (!flagged) ++hit_original;
      }
    }
  }
  require<DataError>(out.replaced > 0, "rtd_detection: the generator replaced no token");
  out.replaced_recall = static_cast<double>(hit_replaced) / out.replaced;
  out.original_accuracy = originals > 0 ? static_cast<double>(hit_original) / originals : 0.0;
  return out;
}

}  // namespace rasa::probes
