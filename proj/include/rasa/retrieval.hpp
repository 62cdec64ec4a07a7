#pragma once

// Text-to-image retrieval: a cosine shortlist over unimodal embeddings,
// reranked by the cross-encoder's matching probability, plus R@K and mAP.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "rasa/corpus.hpp"
#include "rasa/error.hpp"
#include "rasa/network.hpp"
#include "rasa/objectives.hpp"

namespace rasa::retrieval {

using model::Network;

enum class Similarity : std::uint8_t {
  projected,  // cosine of the unit-norm projections (trained space)
  raw,        // cosine of the raw [CLS] vectors
};

struct GalleryIndex {
  std::vector<int> image_ids;
  std::vector<int> identity_ids;
  Matrix vectors;      // unit-norm projected v'_cls, one row per image
  Matrix raw_vectors;  // unit-norm raw v_cls
  Matrix visual;       // encoder output sequences, (n * (M+1)) x D
  Index sequence_length = 0;

  [[nodiscard]] Index size() const { return static_cast<Index>(image_ids.size()); }
};

inline Matrix normalize_rows(Matrix m) {
  for (Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (!(n > 0.0)) throw NumericError("normalize_rows: zero vector");
    m.row(i) /= n;
  }
  return m;
}

/// Encodes every gallery image once. Rows of `pixels` are flattened images.
[[nodiscard]] inline GalleryIndex embed_gallery(const Network& net, const Matrix& pixels, const std::vector<int>& image_ids,
                                                const std::vector<int>& identity_ids, Index batch_size = 64) {
  require<ContractError>(pixels.rows() > 0, "embed_gallery: empty gallery");
  require<DimensionError>(static_cast<Index>(image_ids.size()) == pixels.rows() &&
                              identity_ids.size() == image_ids.size(),
                          "embed_gallery: one id per image");
  GalleryIndex index;
  index.image_ids = image_ids;
  index.identity_ids = identity_ids;
  index.sequence_length = net.config.num_patches() + 1;
  const Index n = pixels.rows();
  index.vectors.resize(n, net.config.proj_dim);
  index.raw_vectors.resize(n, net.config.hidden_dim);
  index.visual.resize(n * index.sequence_length, net.config.hidden_dim);
  for (Index start = 0; start < n; start += batch_size) {
    const Index count = std::min(batch_size, n - start);
    Var visual = model::encode_image(net, pixels.middleRows(start, count));
    Var cls = model::cls_rows(visual, index.sequence_length);
    index.vectors.middleRows(start, count) = model::project(net, cls, model::Side::image).value();
    index.raw_vectors.middleRows(start, count) = normalize_rows(cls.value());
    index.visual.middleRows(start * index.sequence_length, count * index.sequence_length) = visual.value();
  }
  return index;
}

[[nodiscard]] inline GalleryIndex embed_gallery(const Network& net, const data::Corpus& corpus, data::Split split) {
  std::vector<int> ids = corpus.image_ids(split);
  std::vector<int> identities;
  Matrix pixels(static_cast<Index>(ids.size()), static_cast<Index>(corpus.spec.image_side) * corpus.spec.image_side);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& im = corpus.images[static_cast<std::size_t>(ids[i])];
    pixels.row(static_cast<Index>(i)) = data::flatten(im.pixels);
    identities.push_back(im.identity_id);
  }
  return embed_gallery(net, pixels, ids, identities);
}

struct RankingResult {
  int query_text_id = 0;
  std::vector<int> image_ids;       // best first
  std::vector<double> scores;       // matching probability for reranked entries, cosine otherwise
  std::vector<std::uint8_t> stage;  // 2 = reranked by the cross-encoder, 1 = shortlist remainder
  int k = 0;
};

/// Orders positions by descending score; equal scores go to the smaller image id.
inline std::vector<Index> order_by_score(const std::vector<double>& scores, const std::vector<int>& ids) {
  std::vector<Index> order(scores.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(), [&](Index a, Index b) {
    const auto ua = static_cast<std::size_t>(a);
    const auto ub = static_cast<std::size_t>(b);
    if (scores[ua] != scores[ub]) return scores[ua] > scores[ub];
    return ids[ua] < ids[ub];
  });
  return order;
}

/// Stage 1: cosine similarity of the query against every gallery entry.
[[nodiscard]] inline std::vector<double> stage_one_scores(const Network& net, const Var& textual, const GalleryIndex& index,
                                                          Index text_length, Similarity similarity) {
  Var cls = model::cls_rows(textual, text_length);
  RowVector q;
  Matrix const* gallery = nullptr;
  if (similarity == Similarity::projected) {
    q = model::project(net, cls, model::Side::text).value().row(0);
    gallery = &index.vectors;
  } else {
    q = normalize_rows(cls.value()).row(0);
    gallery = &index.raw_vectors;
  }
  Eigen::VectorXd s = (*gallery) * q.transpose();
  return {s.data(), s.data() + s.size()};
}

/// Cross-encoder matching probability of the query with the given gallery rows.
[[nodiscard]] inline std::vector<double> matching_probabilities(const Network& net, const Var& textual,
                                                                const data::TokenizedText& query, const GalleryIndex& index,
                                                                const std::vector<Index>& rows) {
  if (rows.empty()) return {};
  data::TokenBatch tokens;
  std::vector<Index> repeat(rows.size(), 0);
  for (std::size_t i = 0; i < rows.size(); ++i) tokens.append(query);
  Var text_rep = ag::gather_blocks(textual, static_cast<Index>(query.ids.size()), repeat);
  Var visual = ag::gather_blocks(ag::constant(index.visual), index.sequence_length, rows);
  Var fused = model::fuse(net, visual, text_rep, tokens);
  Matrix probs = model::probabilities(model::itm_logits(net, model::cls_rows(fused, tokens.length)));
  std::vector<double> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = probs(static_cast<Index>(i), objectives::itm_positive);
  return out;
}

/// Shortlists the top-k gallery entries by cosine similarity, reranks them
/// by matching probability and appends the rest in shortlist order.
/// k is clipped to the gallery size; k = 0 skips the rerank.
[[nodiscard]] inline RankingResult rank_two_stage(const Network& net, const data::TokenizedText& query, int query_text_id,
                                                  const GalleryIndex& index, int k,
                                                  Similarity similarity = Similarity::projected) {
  require<ContractError>(index.size() > 0, "rank_two_stage: empty gallery");
  require<ContractError>(k >= 0, "rank_two_stage: k must be >= 0");
  data::TokenBatch tokens;
  tokens.append(query);
  Var textual = model::encode_text(net, tokens);

  const std::vector<double> cosine = stage_one_scores(net, textual, index, tokens.length, similarity);
  const std::vector<Index> first = order_by_score(cosine, index.image_ids);
  const auto shortlist = static_cast<std::size_t>(std::min<Index>(k, index.size()));

  RankingResult result;
  result.query_text_id = query_text_id;
  result.k = static_cast<int>(shortlist);

  std::vector<Index> top(first.begin(), first.begin() + static_cast<std::ptrdiff_t>(shortlist));
  const std::vector<double> probs = matching_probabilities(net, textual, query, index, top);
  std::vector<int> top_ids;
  for (Index r : top) top_ids.push_back(index.image_ids[static_cast<std::size_t>(r)]);
  for (Index o : order_by_score(probs, top_ids)) {
    result.image_ids.push_back(top_ids[static_cast<std::size_t>(o)]);
    result.scores.push_back(probs[static_cast<std::size_t>(o)]);
    result.stage.push_back(2);
  }
  for (std::size_t i = shortlist; i < first.size(); ++i) {
    const auto r = static_cast<std::size_t>(first[i]);
    result.image_ids.push_back(index.image_ids[r]);
    result.scores.push_back(cosine[r]);
    result.stage.push_back(1);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Metrics

/// Identity lookup for queries and gallery images.
struct Relevance {
  std::unordered_map<int, int> query_identity;
  std::unordered_map<int, int> image_identity;

  [[nodiscard]] bool relevant(int query_id, int image_id) const {
    return query_identity.at(query_id) == image_identity.at(image_id);
  }
};

[[nodiscard]] inline Relevance relevance_from(const data::Corpus& corpus) {
  Relevance r;
  for (const auto& t : corpus.texts) r.query_identity.emplace(t.text_id, t.identity_id);
  for (const auto& im : corpus.images) r.image_identity.emplace(im.image_id, im.identity_id);
  return r;
}

namespace detail {

inline void require_some_relevant(const RankingResult& r, const Relevance& rel) {
  for (int id : r.image_ids) {
    if (rel.relevant(r.query_text_id, id)) return;
  }
  throw DataError("query " + std::to_string(r.query_text_id) + " has no relevant gallery image");
}

}  // namespace detail

/// Percentage of queries with a same-identity image among the top K.
[[nodiscard]] inline double recall_at_k(const std::vector<RankingResult>& rankings, const Relevance& rel, int k) {
  require<ContractError>(!rankings.empty(), "recall_at_k: no queries");
  require<ContractError>(k >= 1, "recall_at_k: K must be >= 1");
  int hits = 0;
  for (const auto& r : rankings) {
    detail::require_some_relevant(r, rel);
    const auto limit = std::min(static_cast<std::size_t>(k), r.image_ids.size());
    for (std::size_t i = 0; i < limit; ++i) {
      if (rel.relevant(r.query_text_id, r.image_ids[i])) {
        ++hits;
        break;
      }
    }
  }
  return 100.0 * hits / static_cast<double>(rankings.size());
}

/// Mean of precision@rank over the ranks of relevant images.
[[nodiscard]] inline double average_precision(const RankingResult& r, const Relevance& rel) {
  detail::require_some_relevant(r, rel);
  int found = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < r.image_ids.size(); ++i) {
    if (rel.relevant(r.query_text_id, r.image_ids[i])) {
      ++found;
      sum += static_cast<double>(found) / static_cast<double>(i + 1);
    }
  }
  return sum / found;
}

[[nodiscard]] inline double mean_average_precision(const std::vector<RankingResult>& rankings, const Relevance& rel) {
  require<ContractError>(!rankings.empty(), "mean_average_precision: no queries");
  double total = 0.0;
  for (const auto& r : rankings) total += average_precision(r, rel);
  return total / static_cast<double>(rankings.size());
}

struct MetricsReport {
  double r1 = 0, r5 = 0, r10 = 0, map = 0;
  std::vector<int> query_ids;
  std::vector<double> average_precisions;
};

[[nodiscard]] inline MetricsReport compute_metrics(const std::vector<RankingResult>& rankings, const Relevance& rel) {
  MetricsReport m;
  m.r1 = recall_at_k(rankings, rel, 1);
  m.r5 = recall_at_k(rankings, rel, 5);
  m.r10 = recall_at_k(rankings, rel, 10);
  m.map = mean_average_precision(rankings, rel);
  for (const auto& r : rankings) {
    m.query_ids.push_back(r.query_text_id);
    m.average_precisions.push_back(average_precision(r, rel));
  }
  return m;
}

inline nlohmann::json to_json(const MetricsReport& m) {
  return {{"R@1", m.r1},          {"R@5", m.r5},
          {"R@10", m.r10},        {"mAP", m.map},
          {"queries", m.query_ids.size()},
          {"per_query", [&] {
             nlohmann::json a = nlohmann::json::array();
             for (std::size_t i = 0; i < m.query_ids.size(); ++i) {
               a.push_back({{"query_id", m.query_ids[i]}, {"ap", m.average_precisions[i]}});
             }
             return a;
           }()}};
}

/// query_id, rank, image_id, score, stage (tab separated, rank from 1).
inline void write_rankings_tsv(std::ostream& os, const std::vector<RankingResult>& rankings) {
  os << "query_id\trank\timage_id\tscore\tstage\n";
  os.precision(17);
  for (const auto& r : rankings) {
    for (std::size_t i = 0; i < r.image_ids.size(); ++i) {
      os << r.query_text_id << '\t' << (i + 1) << '\t' << r.image_ids[i] << '\t' << r.scores[i] << '\t'
         << static_cast<int>(r.stage[i]) << '\n';
    }
  }
}

struct EvalOptions {
  int k = 128;
  Similarity similarity = Similarity::projected;
  bool rerank = true;
};

struct EvalResult {
  MetricsReport metrics;
  std::vector<RankingResult> rankings;
};

/// Every text of the split queries the split's image gallery.
[[nodiscard]] inline EvalResult evaluate(const Network& net, const data::Corpus& corpus, data::Split split,
                                         const EvalOptions& options = {}) {
  const GalleryIndex index = embed_gallery(net, corpus, split);
  const int k = options.rerank ? std::min<int>(options.k, static_cast<int>(index.size())) : 0;
  EvalResult out;
  for (int text_id : corpus.text_ids(split)) {
    const auto& t = corpus.texts[static_cast<std::size_t>(text_id)];
    out.rankings.push_back(rank_two_stage(net, t.text, text_id, index, k, options.similarity));
  }
  out.metrics = compute_metrics(out.rankings, relevance_from(corpus));
  return out;
}

}  // namespace rasa::retrieval
