#pragma once

// Training objectives: momentum-queue contrastive losses (ITC, IMC),
// probabilistic image-text matching with in-batch negatives (p-ITM),
// positive relation detection (PRD), masked language modelling (MLM),
// momentum-generated replaced-token detection (m-RTD) and their weighted sum.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rasa/corpus.hpp"
#include "rasa/error.hpp"
#include "rasa/momentum.hpp"
#include "rasa/network.hpp"
#include "rasa/ops.hpp"
#include "rasa/random.hpp"

namespace rasa::objectives {

using data::PairBatch;
using data::TokenBatch;
using model::Network;

/// Class indices of the 2-way heads. ITM: [0,1] marks a matching pair.
/// PRD: [1,0] marks a strong positive, [0,1] a weak one.
inline constexpr int itm_negative = 0;
inline constexpr int itm_positive = 1;
inline constexpr int prd_strong = 0;
inline constexpr int prd_weak = 1;
inline constexpr int rtd_original = 0;
inline constexpr int rtd_replaced = 1;

// ---------------------------------------------------------------------------
// Contrastive learning

/// InfoNCE where the candidate set of anchor row i is {positives_i} together
/// with every other positive row and every queue row. With
/// `exclude_same_identity`, candidates sharing the anchor's identity are
/// dropped from the denominator, except the anchor's own positive.
[[nodiscard]] inline Var info_nce(const Var& anchors, const Matrix& positives, std::span<const int> anchor_ids,
                                  const Matrix& queue, std::span<const int> queue_ids, const Var& tau,
                                  bool exclude_same_identity) {
  const Index b = anchors.rows();
  require<ConfigError>(tau.item() > 0.0, "info_nce: temperature must be positive");
  require<DimensionError>(positives.rows() == b && positives.cols() == anchors.cols(), "info_nce: positives shape");
  require<DimensionError>(static_cast<Index>(anchor_ids.size()) == b, "info_nce: one id per anchor");
  require<DimensionError>(queue.rows() == static_cast<Index>(queue_ids.size()), "info_nce: one id per queue row");
  require<DimensionError>(queue.rows() == 0 || queue.cols() == anchors.cols(), "info_nce: queue width");

  Matrix keys(b + queue.rows(), anchors.cols());
  keys.topRows(b) = positives;
  if (queue.rows() > 0) keys.bottomRows(queue.rows()) = queue;

  Var logits = ag::divide(ag::matmul_transposed(anchors, ag::constant(std::move(keys))), tau);

  std::vector<int> targets(static_cast<std::size_t>(b));
  for (Index i = 0; i < b; ++i) targets[static_cast<std::size_t>(i)] = static_cast<int>(i);
  if (!exclude_same_identity) return ag::cross_entropy(logits, targets);

  Matrix mask = Matrix::Zero(logits.rows(), logits.cols());
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (Index i = 0; i < b; ++i) {
    const int id = anchor_ids[static_cast<std::size_t>(i)];
    for (Index j = 0; j < b; ++j) {
      if (j != i && anchor_ids[static_cast<std::size_t>(j)] == id) mask(i, j) = neg_inf;
    }
    for (Index j = 0; j < queue.rows(); ++j) {
      if (queue_ids[static_cast<std::size_t>(j)] == id) mask(i, b + j) = neg_inf;
    }
  }
  return ag::cross_entropy(logits, targets, &mask);
}

/// Online and momentum projections of one batch plus the queues they are contrasted against.
struct ContrastiveInputs {
  Var image_proj;          // v'_cls, online
  Var text_proj;           // t'_cls, online
  Matrix image_proj_m;     // v-hat'_cls, momentum
  Matrix text_proj_m;      // t-hat'_cls, momentum
  std::vector<int> identity_ids;
  Matrix image_queue;      // Q-hat_v contents
  std::vector<int> image_queue_ids;
  Matrix text_queue;       // Q-hat_t contents
  std::vector<int> text_queue_ids;
  Var tau;
  bool exclude_same_identity = true;
};

[[nodiscard]] inline ContrastiveInputs contrastive_inputs(const model::RepresentationBundle& online,
                                                          const model::RepresentationBundle& momentum,
                                                          const std::vector<int>& identity_ids,
                                                          const momentum::RepQueue& image_queue,
                                                          const momentum::RepQueue& text_queue, const Var& tau,
                                                          bool exclude_same_identity) {
  ContrastiveInputs in;
  in.image_proj = online.image_proj;
  in.text_proj = online.text_proj;
  in.image_proj_m = momentum.image_proj.value();
  in.text_proj_m = momentum.text_proj.value();
  in.identity_ids = identity_ids;
  in.image_queue = image_queue.contents();
  in.image_queue_ids = image_queue.identities();
  in.text_queue = text_queue.contents();
  in.text_queue_ids = text_queue.identities();
  in.tau = tau;
  in.exclude_same_identity = exclude_same_identity;
  return in;
}

/// Cross-modal contrastive loss: image against momentum texts and text against momentum images, halved.
[[nodiscard]] inline Var itc_loss(const ContrastiveInputs& in) {
  Var i2t = info_nce(in.image_proj, in.text_proj_m, in.identity_ids, in.text_queue, in.text_queue_ids, in.tau,
                     in.exclude_same_identity);
  Var t2i = info_nce(in.text_proj, in.image_proj_m, in.identity_ids, in.image_queue, in.image_queue_ids, in.tau,
                     in.exclude_same_identity);
  return ag::weighted_sum({i2t, t2i}, {0.5, 0.5});
}

/// Intra-modal contrastive loss: each modality against its own momentum counterpart, halved.
[[nodiscard]] inline Var imc_loss(const ContrastiveInputs& in) {
  Var i2i = info_nce(in.image_proj, in.image_proj_m, in.identity_ids, in.image_queue, in.image_queue_ids, in.tau,
                     in.exclude_same_identity);
  Var t2t = info_nce(in.text_proj, in.text_proj_m, in.identity_ids, in.text_queue, in.text_queue_ids, in.tau,
                     in.exclude_same_identity);
  return ag::weighted_sum({i2i, t2t}, {0.5, 0.5});
}

// ---------------------------------------------------------------------------
// Image-text matching and positive relation detection

enum class NegativeSampling : std::uint8_t { hard, uniform };

/// In-batch negatives: one text per image and one image per text.
struct ItmPlan {
  std::vector<Index> negative_text_for_image;
  std::vector<Index> negative_image_for_text;
};

/// Samples one negative per anchor among batch elements of a different
/// identity, with probability proportional to softmax(similarity) (hard) or
/// uniformly. `similarity(i, j)` scores image i against text j.
[[nodiscard]] inline ItmPlan build_itm_batch(std::span<const int> identity_ids, const Matrix& similarity, Rng& rng,
                                             NegativeSampling mode = NegativeSampling::hard) {
  const Index b = static_cast<Index>(identity_ids.size());
  require<DimensionError>(similarity.rows() == b && similarity.cols() == b, "build_itm_batch: similarity shape");
  ItmPlan plan;
  auto draw = [&](Index anchor, bool row_wise) -> Index {
    std::vector<Index> candidates;
    for (Index j = 0; j < b; ++j) {
      if (identity_ids[static_cast<std::size_t>(j)] != identity_ids[static_cast<std::size_t>(anchor)]) candidates.push_back(j);
    }
    if (candidates.empty()) {
      throw DataError("build_itm_batch: no negative candidate (batch holds a single identity)");
    }
    std::vector<double> w(candidates.size(), 1.0);
    if (mode == NegativeSampling::hard) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < candidates.size(); ++c) {
        w[c] = row_wise ? similarity(anchor, candidates[c]) : similarity(candidates[c], anchor);
        mx = std::max(mx, w[c]);
      }
      for (double& x : w) x = std::exp(x - mx);
    }
    return candidates[rng.categorical(w)];
  };
  for (Index i = 0; i < b; ++i) plan.negative_text_for_image.push_back(draw(i, true));
  for (Index j = 0; j < b; ++j) plan.negative_image_for_text.push_back(draw(j, false));
  return plan;
}

/// Fused [CLS] rows for positives (rows 0..B-1), then (negative image, text)
/// pairs, then (image, negative text) pairs, with their ITM labels.
struct ItmForward {
  Var fused_cls;
  std::vector<int> labels;
  Index positives = 0;
};

[[nodiscard]] inline ItmForward itm_forward(const Network& net, const Var& visual, const Var& textual,
                                            const TokenBatch& tokens, const ItmPlan& plan) {
  const Index b = tokens.batch;
  const Index m1 = net.config.num_patches() + 1;
  const Index l = tokens.length;
  Var visual_all = ag::concat_rows({visual, ag::gather_blocks(visual, m1, plan.negative_image_for_text), visual});
  Var textual_all = ag::concat_rows({textual, textual, ag::gather_blocks(textual, l, plan.negative_text_for_image)});
  TokenBatch tokens_all = tokens;
  for (Index i = 0; i < b; ++i) tokens_all.append(tokens.row(static_cast<int>(i)));
  for (Index i = 0; i < b; ++i) tokens_all.append(tokens.row(static_cast<int>(plan.negative_text_for_image[static_cast<std::size_t>(i)])));
  Var fused = model::fuse(net, visual_all, textual_all, tokens_all);
  ItmForward out;
  out.fused_cls = model::cls_rows(fused, l);
  out.labels.assign(static_cast<std::size_t>(b), itm_positive);
  out.labels.resize(static_cast<std::size_t>(3 * b), itm_negative);
  out.positives = b;
  return out;
}

/// Mean two-class cross-entropy of the ITM head.
[[nodiscard]] inline Var p_itm_loss(const Network& net, const Var& fused_cls, std::span<const int> labels) {
  return ag::cross_entropy(model::itm_logits(net, fused_cls), labels);
}

[[nodiscard]] inline std::vector<int> prd_labels(std::span<const data::Relation> relations) {
  std::vector<int> out;
  for (auto r : relations) out.push_back(r == data::Relation::strong ? prd_strong : prd_weak);
  return out;
}

/// Mean two-class cross-entropy of the PRD head over positive pairs only.
[[nodiscard]] inline Var prd_loss(const Network& net, const Var& positive_fused_cls,
                                  std::span<const data::Relation> relations) {
  require<ContractError>(positive_fused_cls.rows() > 0, "prd_loss: no positive pairs");
  require<DimensionError>(static_cast<Index>(relations.size()) == positive_fused_cls.rows(), "prd_loss: one label per pair");
  const std::vector<int> labels = prd_labels(relations);
  return ag::cross_entropy(model::prd_logits(net, positive_fused_cls), labels);
}

// ---------------------------------------------------------------------------
// Masked language modelling and replaced-token detection

/// Masked texts for a batch; positions are flat row indices (b * length + i).
struct MaskedBatch {
  TokenBatch tokens;
  std::vector<Index> positions;
  std::vector<int> originals;
};

[[nodiscard]] inline MaskedBatch mask_batch(const TokenBatch& tokens, double p_mask, Rng& rng) {
  MaskedBatch out;
  out.tokens.length = tokens.length;
  for (int b = 0; b < tokens.batch; ++b) {
    data::MaskedText m = data::mask_tokens(tokens.row(b), p_mask, rng);
    for (std::size_t k = 0; k < m.positions.size(); ++k) {
      out.positions.push_back(static_cast<Index>(b) * tokens.length + m.positions[k]);
      out.originals.push_back(m.originals[k]);
    }
    out.tokens.append(m.text);
  }
  return out;
}

/// Mean cross-entropy of the MLM head at masked positions of fuse(image, masked text).
[[nodiscard]] inline Var mlm_loss(const Network& net, const Var& visual, const MaskedBatch& masked) {
  require<ContractError>(!masked.positions.empty(), "mlm_loss: no masked positions");
  Var textual = model::encode_text(net, masked.tokens);
  Var fused = model::fuse(net, visual, textual, masked.tokens);
  Var at_masks = ag::gather_rows(fused, masked.positions);
  return ag::cross_entropy(model::mlm_logits(net, at_masks), masked.originals);
}

/// The generator's predictive distribution at masked positions (one row per
/// masked position). Special tokens get zero probability.
[[nodiscard]] inline Matrix generator_distribution(const Network& generator, const Var& visual,
                                                   const MaskedBatch& masked) {
  Var textual = model::encode_text(generator, masked.tokens);
  Var fused = model::fuse(generator, visual.detach(), textual, masked.tokens);
  Matrix logits = model::mlm_logits(generator, ag::gather_rows(fused, masked.positions)).value();
  Matrix mask = Matrix::Zero(logits.rows(), logits.cols());
  const double neg_inf = -std::numeric_limits<double>::infinity();
  mask.col(data::Vocab::pad_id).setConstant(neg_inf);
  mask.col(data::Vocab::cls_id).setConstant(neg_inf);
  mask.col(data::Vocab::mask_id).setConstant(neg_inf);
  return ag::softmax_rows(logits, &mask);
}

/// Texts with generated words at masked positions and the per-position
/// "differs from the original" flags.
struct ReplacedBatch {
  TokenBatch tokens;
  std::vector<std::uint8_t> replaced;  // b * length + i
  std::vector<std::uint8_t> scored;    // positions the RTD head is trained on
};

/// Samples (temperature 1) one token per masked position from `distribution`.
[[nodiscard]] inline ReplacedBatch generate_replacement(const Matrix& distribution, const MaskedBatch& masked,
                                                        const TokenBatch& original, Rng& rng) {
  require<DimensionError>(distribution.rows() == static_cast<Index>(masked.positions.size()),
                          "generate_replacement: one distribution row per masked position");
  ReplacedBatch out;
  out.tokens = original;
  out.replaced.assign(original.ids.size(), 0);
  out.scored.assign(original.ids.size(), 0);
  for (std::size_t i = 0; i < original.ids.size(); ++i) {
    out.scored[i] = (original.valid[i] != 0 && !data::Vocab::is_special(original.ids[i])) ? 1 : 0;
  }
  std::vector<double> w(static_cast<std::size_t>(distribution.cols()));
  for (std::size_t k = 0; k < masked.positions.size(); ++k) {
    for (Index c = 0; c < distribution.cols(); ++c) w[static_cast<std::size_t>(c)] = distribution(static_cast<Index>(k), c);
    const int token = static_cast<int>(rng.categorical(w));
    const auto pos = static_cast<std::size_t>(masked.positions[k]);
    out.tokens.ids[pos] = token;
    out.replaced[pos] = token != original.ids[pos] ? 1 : 0;
  }
  return out;
}

/// Mean two-class cross-entropy of the RTD head over all scored positions of fuse(image, replaced text).
[[nodiscard]] inline Var m_rtd_loss(const Network& net, const Var& visual, const ReplacedBatch& replaced) {
  std::vector<Index> rows;
  std::vector<int> labels;
  for (std::size_t i = 0; i < replaced.scored.size(); ++i) {
    if (replaced.scored[i] == 0) continue;
    rows.push_back(static_cast<Index>(i));
    labels.push_back(replaced.replaced[i] != 0 ? rtd_replaced : rtd_original);
  }
  require<ContractError>(!rows.empty(), "m_rtd_loss: no scored positions");
  Var textual = model::encode_text(net, replaced.tokens);
  Var fused = model::fuse(net, visual, textual, replaced.tokens);
  return ag::cross_entropy(model::rtd_logits(net, ag::gather_rows(fused, std::move(rows))), labels);
}

// ---------------------------------------------------------------------------
// Joint objective

struct LossWeights {
  double prd = 0.5;  // lambda_1
  double rtd = 0.5;  // lambda_2
  double cl = 0.5;   // lambda_3
};

/// Scalar values of every term. Disabled terms are 0.
struct LossReport {
  double itc = 0, imc = 0, cl = 0, p_itm = 0, prd = 0, ra = 0, mlm = 0, m_rtd = 0, sa = 0, total = 0;
};

/// Loss terms as graph nodes; undefined entries are treated as disabled.
struct LossTerms {
  Var itc, imc, p_itm, prd, mlm, m_rtd;
};

struct JointLoss {
  Var total;
  LossReport report;
};

/// L = (p_itm + l1 prd) + (mlm + l2 m_rtd) + l3 (itc + imc) / 2.
[[nodiscard]] inline JointLoss joint_loss(const LossTerms& terms, const LossWeights& w) {
  auto value = [](const Var& v, const char* name) {
    if (!v.defined()) return 0.0;
    const double x = v.item();
    if (!std::isfinite(x)) throw NumericError(std::string("joint_loss: component ") + name + " is not finite");
    return x;
  };
  JointLoss out;
  LossReport& r = out.report;
  r.itc = value(terms.itc, "itc");
  r.imc = value(terms.imc, "imc");
  r.p_itm = value(terms.p_itm, "p_itm");
  r.prd = value(terms.prd, "prd");
  r.mlm = value(terms.mlm, "mlm");
  r.m_rtd = value(terms.m_rtd, "m_rtd");
  r.cl = (r.itc + r.imc) / 2.0;
  r.ra = r.p_itm + w.prd * r.prd;
  r.sa = r.mlm + w.rtd * r.m_rtd;
  r.total = r.ra + r.sa + w.cl * r.cl;

  std::vector<Var> parts;
  std::vector<double> weights;
  auto push = [&](const Var& v, double weight) {
    if (v.defined()) {
      parts.push_back(v);
      weights.push_back(weight);
    }
  };
  push(terms.p_itm, 1.0);
  push(terms.prd, w.prd);
  push(terms.mlm, 1.0);
  push(terms.m_rtd, w.rtd);
  push(terms.itc, w.cl / 2.0);
  push(terms.imc, w.cl / 2.0);
  out.total = parts.empty() ? ag::scalar(0.0) : ag::weighted_sum(parts, weights);
  return out;
}

}  // namespace rasa::objectives
