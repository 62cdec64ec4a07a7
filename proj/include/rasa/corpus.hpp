#pragma once

// Synthetic identity corpus: every identity is a vector of categorical
// attributes rendered as glyph cells on a small grid. Occluded attributes
// are blank in the image and absent from the texts annotating that image,
// so pairing a text with another image of the same identity can produce a
// genuine mismatch (a weak positive pair).

#include <algorithm>
#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rasa/error.hpp"
#include "rasa/random.hpp"
#include "rasa/tensor.hpp"

namespace rasa::data {

enum class Split : std::uint8_t { train, test };

[[nodiscard]] inline std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct CorpusSpec {
  int n_identities = 32;
  int test_identities = 0;  // how many identities go to the held-out split
  int images_per_identity = 4;
  int texts_per_image = 2;
  int n_attributes = 6;
  int attribute_vocab_size = 5;
  double occlusion_rate = 0.3;
  int image_side = 24;
  int patch_side = 8;
  double pixel_noise = 0.05;
  int max_len = 16;
  std::uint64_t seed = 0;

  [[nodiscard]] int grid_side() const { return image_side / patch_side; }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("corpus." + msg); };
    if (n_identities < 2) fail("n_identities must be >= 2");
    if (test_identities < 0 || test_identities >= n_identities) {
      fail("test_identities must be in [0, n_identities)");
    }
    if (images_per_identity < 2) fail("images_per_identity must be >= 2");
    if (texts_per_image < 1) fail("texts_per_image must be >= 1");
    if (n_attributes < 1) fail("n_attributes must be >= 1");
    if (attribute_vocab_size < 2) fail("attribute_vocab_size must be >= 2");
    if (!(occlusion_rate >= 0.0 && occlusion_rate < 1.0)) fail("occlusion_rate must be in [0, 1)");
    if (patch_side < 1 || image_side < patch_side) fail("patch_side must be in [1, image_side]");
    if (image_side % patch_side != 0) fail("image_side must be divisible by patch_side");
    if (n_attributes > grid_side() * grid_side()) fail("n_attributes exceeds the number of grid cells");
    if (!(pixel_noise >= 0.0)) fail("pixel_noise must be >= 0");
    if (max_len < 2) fail("max_len must be >= 2");
    double combos = 1.0;
    for (int i = 0; i < n_attributes; ++i) combos *= attribute_vocab_size;
    if (combos < n_identities) fail("n_identities exceeds the number of distinct attribute vectors");
  }
};

// ---------------------------------------------------------------------------
// Vocabulary

class Vocab {
 public:
  static constexpr int pad_id = 0;
  static constexpr int cls_id = 1;
  static constexpr int mask_id = 2;

  Vocab() { reset_specials(); }

  /// Value words (shared across attributes) followed by one noun per attribute.
  static Vocab build(int n_attributes, int attribute_vocab_size) {
    Vocab v;
    for (int i = 0; i < attribute_vocab_size; ++i) v.add(value_word(i));
    for (int a = 0; a < n_attributes; ++a) v.add(attribute_word(a));
    return v;
  }

  static std::string value_word(int value) {
    static constexpr std::array<std::string_view, 12> words = {
        "red", "blue", "green", "black", "white", "yellow", "gray", "brown", "pink", "purple", "orange", "navy"};
    if (value < static_cast<int>(words.size())) return std::string(words[static_cast<std::size_t>(value)]);
    return "color" + std::to_string(value);
  }

  static std::string attribute_word(int attribute) {
    static constexpr std::array<std::string_view, 9> words = {"hat", "hair", "shirt", "jacket", "pants",
                                                              "shoes", "bag", "scarf", "gloves"};
    if (attribute < static_cast<int>(words.size())) return std::string(words[static_cast<std::size_t>(attribute)]);
    return "item" + std::to_string(attribute);
  }

  int add(const std::string& word) {
    if (auto it = index_.find(word); it != index_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(word);
    index_.emplace(word, id);
    return id;
  }

  [[nodiscard]] int id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) throw VocabError("unknown word '" + std::string(word) + "'");
    return it->second;
  }

  [[nodiscard]] const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw VocabError("token id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  [[nodiscard]] int size() const { return static_cast<int>(tokens_.size()); }
  [[nodiscard]] static bool is_special(int id) { return id == pad_id || id == cls_id || id == mask_id; }
  [[nodiscard]] const std::vector<std::string>& tokens() const { return tokens_; }

  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < 3 || tokens[pad_id] != "[PAD]" || tokens[cls_id] != "[CLS]" || tokens[mask_id] != "[MASK]") {
      throw VocabError("vocabulary table does not start with [PAD], [CLS], [MASK]");
    }
    Vocab v;
    for (std::size_t i = 3; i < tokens.size(); ++i) {
      if (v.index_.count(tokens[i]) != 0) throw VocabError("duplicate vocabulary entry '" + tokens[i] + "'");
      v.add(tokens[i]);
    }
    return v;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void reset_specials() {
    tokens_.clear();
    index_.clear();
    add("[PAD]");
    add("[CLS]");
    add("[MASK]");
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// A token sequence of fixed length with its padding flags (1 = real token).
struct TokenizedText {
  std::vector<int> ids;
  std::vector<std::uint8_t> valid;
};

/// [CLS] + words, truncated or padded to max_len.
[[nodiscard]] inline TokenizedText encode_text(const Vocab& vocab, const std::vector<std::string>& words, int max_len) {
  require<ContractError>(max_len >= 1, "encode_text: max_len must be >= 1");
  TokenizedText out;
  out.ids.assign(static_cast<std::size_t>(max_len), Vocab::pad_id);
  out.valid.assign(static_cast<std::size_t>(max_len), 0);
  out.ids[0] = Vocab::cls_id;
  out.valid[0] = 1;
  std::size_t at = 1;
  for (const auto& w : words) {
    const int id = vocab.id(w);  // validate every word even if it gets truncated
    if (at < out.ids.size()) {
      out.ids[at] = id;
      out.valid[at] = 1;
      ++at;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus

struct Identity {
  int id = 0;
  std::vector<int> attributes;
  Split split = Split::train;
  friend bool operator==(const Identity&, const Identity&) = default;
};

struct ImageSample {
  int image_id = 0;
  int identity_id = 0;
  Matrix pixels;                       // image_side x image_side, values in [0,1]
  std::vector<std::uint8_t> visible;   // one flag per attribute
};

struct TextSample {
  int text_id = 0;
  int identity_id = 0;
  int source_image_id = 0;
  TokenizedText text;
};

struct Corpus {
  CorpusSpec spec;
  Vocab vocab;
  std::vector<Identity> identities;
  std::vector<ImageSample> images;
  std::vector<TextSample> texts;

  [[nodiscard]] Split split_of_identity(int identity_id) const {
    return identities.at(static_cast<std::size_t>(identity_id)).split;
  }
  [[nodiscard]] std::vector<int> image_ids(Split split) const {
    std::vector<int> out;
    for (const auto& im : images) {
      if (split_of_identity(im.identity_id) == split) out.push_back(im.image_id);
    }
    return out;
  }
  [[nodiscard]] std::vector<int> text_ids(Split split) const {
    std::vector<int> out;
    for (const auto& t : texts) {
      if (split_of_identity(t.identity_id) == split) out.push_back(t.text_id);
    }
    return out;
  }
  [[nodiscard]] std::vector<int> images_of_identity(int identity_id) const {
    std::vector<int> out;
    for (const auto& im : images) {
      if (im.identity_id == identity_id) out.push_back(im.image_id);
    }
    return out;
  }
  [[nodiscard]] int identity_count(Split split) const {
    return static_cast<int>(std::count_if(identities.begin(), identities.end(),
                                          [split](const Identity& i) { return i.split == split; }));
  }
};

/// Words of a text mentioning the given attributes in the given order.
[[nodiscard]] inline std::vector<std::string> describe(const std::vector<int>& attribute_values,
                                                       const std::vector<int>& attribute_order) {
  std::vector<std::string> words;
  for (int a : attribute_order) {
    words.push_back(Vocab::value_word(attribute_values[static_cast<std::size_t>(a)]));
    words.push_back(Vocab::attribute_word(a));
  }
  return words;
}

/// Attribute indices named by a token sequence (each attribute has one noun).
[[nodiscard]] inline std::set<int> mentioned_attributes(const Vocab& vocab, int n_attributes,
                                                        const TokenizedText& text) {
  std::unordered_map<int, int> noun_to_attribute;
  for (int a = 0; a < n_attributes; ++a) noun_to_attribute.emplace(vocab.id(Vocab::attribute_word(a)), a);
  std::set<int> out;
  for (std::size_t i = 0; i < text.ids.size(); ++i) {
    if (text.valid[i] == 0) continue;
    if (auto it = noun_to_attribute.find(text.ids[i]); it != noun_to_attribute.end()) out.insert(it->second);
  }
  return out;
}

namespace detail {

inline std::vector<std::uint8_t> sample_visibility(const CorpusSpec& spec, Rng& rng) {
  std::vector<std::uint8_t> visible(static_cast<std::size_t>(spec.n_attributes));
  for (;;) {
    bool any = false;
    for (auto& v : visible) {
      v = rng.bernoulli(spec.occlusion_rate) ? 0 : 1;
      any = any || v != 0;
    }
    if (any) return visible;  // at least one attribute stays visible
  }
}

}  // namespace detail

[[nodiscard]] inline Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Corpus corpus;
  corpus.spec = spec;
  corpus.vocab = Vocab::build(spec.n_attributes, spec.attribute_vocab_size);

  const int p = spec.patch_side;
  std::vector<Matrix> glyphs;
  for (int v = 0; v < spec.attribute_vocab_size; ++v) {
    Matrix g(p, p);
    for (Index r = 0; r < p; ++r) {
      for (Index c = 0; c < p; ++c) g(r, c) = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }
    glyphs.push_back(std::move(g));
  }

  std::set<std::vector<int>> seen;
  for (int id = 0; id < spec.n_identities; ++id) {
    std::vector<int> attrs(static_cast<std::size_t>(spec.n_attributes));
    do {
      for (auto& a : attrs) a = static_cast<int>(rng.index(static_cast<std::size_t>(spec.attribute_vocab_size)));
    } while (!seen.insert(attrs).second);
    corpus.identities.push_back(Identity{id, attrs, Split::train});
  }
  std::vector<int> order(static_cast<std::size_t>(spec.n_identities));
  for (int i = 0; i < spec.n_identities; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  for (int i = 0; i < spec.test_identities; ++i) {
    corpus.identities[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])].split = Split::test;
  }

  const int grid = spec.grid_side();
  for (const auto& identity : corpus.identities) {
    for (int k = 0; k < spec.images_per_identity; ++k) {
      ImageSample im;
      im.image_id = static_cast<int>(corpus.images.size());
      im.identity_id = identity.id;
      im.visible = detail::sample_visibility(spec, rng);
      im.pixels = Matrix::Zero(spec.image_side, spec.image_side);
      for (int a = 0; a < spec.n_attributes; ++a) {
        if (im.visible[static_cast<std::size_t>(a)] == 0) continue;
        const int row = a / grid;
        const int col = a % grid;
        im.pixels.block(row * p, col * p, p, p) = glyphs[static_cast<std::size_t>(identity.attributes[static_cast<std::size_t>(a)])];
      }
      if (spec.pixel_noise > 0.0) {
        for (Index r = 0; r < im.pixels.rows(); ++r) {
          for (Index c = 0; c < im.pixels.cols(); ++c) {
            im.pixels(r, c) = std::clamp(im.pixels(r, c) + rng.normal(0.0, spec.pixel_noise), 0.0, 1.0);
          }
        }
      }

      std::vector<int> shown;
      for (int a = 0; a < spec.n_attributes; ++a) {
        if (im.visible[static_cast<std::size_t>(a)] != 0) shown.push_back(a);
      }
      for (int t = 0; t < spec.texts_per_image; ++t) {
        std::vector<int> order_words = shown;
        rng.shuffle(order_words);
        TextSample ts;
        ts.text_id = static_cast<int>(corpus.texts.size());
        ts.identity_id = identity.id;
        ts.source_image_id = im.image_id;
        ts.text = encode_text(corpus.vocab, describe(identity.attributes, order_words), spec.max_len);
        corpus.texts.push_back(std::move(ts));
      }
      corpus.images.push_back(std::move(im));
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Batches

enum class Relation : std::uint8_t { strong, weak };

enum class PositiveMode : std::uint8_t {
  strong_only,    // every text with its source image
  probabilistic,  // weak partner with probability p_w
  uniform_all,    // any image of the identity, uniformly
};

/// Row-major (batch x length) token ids with padding flags.
struct TokenBatch {
  int batch = 0;
  int length = 0;
  std::vector<int> ids;
  std::vector<std::uint8_t> valid;

  [[nodiscard]] int at(int b, int i) const { return ids[static_cast<std::size_t>(b * length + i)]; }
  [[nodiscard]] bool is_valid(int b, int i) const { return valid[static_cast<std::size_t>(b * length + i)] != 0; }

  void append(const TokenizedText& t) {
    if (batch == 0 && length == 0) length = static_cast<int>(t.ids.size());
    require<DimensionError>(static_cast<int>(t.ids.size()) == length, "TokenBatch: inconsistent text length");
    ids.insert(ids.end(), t.ids.begin(), t.ids.end());
    valid.insert(valid.end(), t.valid.begin(), t.valid.end());
    ++batch;
  }

  [[nodiscard]] TokenizedText row(int b) const {
    TokenizedText t;
    t.ids.assign(ids.begin() + b * length, ids.begin() + (b + 1) * length);
    t.valid.assign(valid.begin() + b * length, valid.begin() + (b + 1) * length);
    return t;
  }

  [[nodiscard]] TokenBatch select(const std::vector<int>& rows) const {
    TokenBatch out;
    out.length = length;
    for (int r : rows) out.append(row(r));
    return out;
  }
};

struct PairBatch {
  Matrix pixels;  // one flattened image per row
  TokenBatch tokens;
  std::vector<int> image_ids;
  std::vector<int> text_ids;
  std::vector<int> identity_ids;
  std::vector<Relation> relations;
  int weak_fallbacks = 0;  // weak draws that fell back to strong (single-image identity)

  [[nodiscard]] int size() const { return static_cast<int>(identity_ids.size()); }
  [[nodiscard]] int distinct_identities() const {
    return static_cast<int>(std::set<int>(identity_ids.begin(), identity_ids.end()).size());
  }

  /// Rows in `rows`, in that order.
  [[nodiscard]] PairBatch select(const std::vector<int>& rows) const {
    PairBatch out;
    out.pixels.resize(static_cast<Index>(rows.size()), pixels.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto r = static_cast<std::size_t>(rows[i]);
      out.pixels.row(static_cast<Index>(i)) = pixels.row(rows[i]);
      out.image_ids.push_back(image_ids[r]);
      out.text_ids.push_back(text_ids[r]);
      out.identity_ids.push_back(identity_ids[r]);
      out.relations.push_back(relations[r]);
    }
    out.tokens = tokens.select(rows);
    return out;
  }
};

[[nodiscard]] inline RowVector flatten(const Matrix& pixels) {
  return Eigen::Map<const RowVector>(pixels.data(), pixels.size());
}

/// Builds a batch from explicit (image, text) choices.
[[nodiscard]] inline PairBatch make_pair_batch(const Corpus& corpus, const std::vector<int>& image_ids,
                                               const std::vector<int>& text_ids) {
  require<DimensionError>(image_ids.size() == text_ids.size() && !image_ids.empty(),
                          "make_pair_batch: need equally many images and texts");
  PairBatch batch;
  const Index n_pixels = static_cast<Index>(corpus.spec.image_side) * corpus.spec.image_side;
  batch.pixels.resize(static_cast<Index>(image_ids.size()), n_pixels);
  batch.tokens.length = corpus.spec.max_len;
  for (std::size_t i = 0; i < image_ids.size(); ++i) {
    const auto& im = corpus.images.at(static_cast<std::size_t>(image_ids[i]));
    const auto& tx = corpus.texts.at(static_cast<std::size_t>(text_ids[i]));
    require<DataError>(im.identity_id == tx.identity_id, "make_pair_batch: image and text identities differ");
    batch.pixels.row(static_cast<Index>(i)) = flatten(im.pixels);
    batch.tokens.append(tx.text);
    batch.image_ids.push_back(im.image_id);
    batch.text_ids.push_back(tx.text_id);
    batch.identity_ids.push_back(im.identity_id);
    batch.relations.push_back(tx.source_image_id == im.image_id ? Relation::strong : Relation::weak);
  }
  return batch;
}

/// Texts are drawn first (without replacement inside the batch), then each
/// text is paired with an image of its identity according to `mode`.
[[nodiscard]] inline PairBatch sample_pair_batch(const Corpus& corpus, Split split, int batch_size, double p_weak,
                                                 PositiveMode mode, Rng& rng) {
  require<ConfigError>(p_weak >= 0.0 && p_weak <= 1.0, "sample_pair_batch: p_w must be in [0, 1]");
  require<ConfigError>(batch_size >= 1, "sample_pair_batch: batch_size must be >= 1");
  std::vector<int> pool = corpus.text_ids(split);
  require<DataError>(!pool.empty(), "sample_pair_batch: split has no texts");

  std::vector<int> chosen;
  chosen.reserve(static_cast<std::size_t>(batch_size));
  if (batch_size <= static_cast<int>(pool.size())) {
    // partial Fisher-Yates
    for (int i = 0; i < batch_size; ++i) {
      const std::size_t j = static_cast<std::size_t>(i) + rng.index(pool.size() - static_cast<std::size_t>(i));
      std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
      chosen.push_back(pool[static_cast<std::size_t>(i)]);
    }
  } else {
    for (int i = 0; i < batch_size; ++i) chosen.push_back(pool[rng.index(pool.size())]);
  }

  std::vector<int> images;
  int fallbacks = 0;
  for (int text_id : chosen) {
    const auto& tx = corpus.texts[static_cast<std::size_t>(text_id)];
    const std::vector<int> candidates = corpus.images_of_identity(tx.identity_id);
    std::vector<int> others;
    for (int c : candidates) {
      if (c != tx.source_image_id) others.push_back(c);
    }
    int image = tx.source_image_id;
    switch (mode) {
      case PositiveMode::strong_only:
        break;
      case PositiveMode::probabilistic:
        if (rng.bernoulli(p_weak)) {
          if (others.empty()) {
            ++fallbacks;
          } else {
            image = others[rng.index(others.size())];
          }
        }
        break;
      case PositiveMode::uniform_all:
        image = candidates[rng.index(candidates.size())];
        break;
    }
    images.push_back(image);
  }
  PairBatch batch = make_pair_batch(corpus, images, chosen);
  batch.weak_fallbacks = fallbacks;
  return batch;
}

// ---------------------------------------------------------------------------
// Masking

struct MaskedText {
  TokenizedText text;           // with [MASK] at masked positions
  std::vector<int> positions;   // masked indices, ascending
  std::vector<int> originals;   // original ids at those positions
};

[[nodiscard]] inline bool maskable(const TokenizedText& t, std::size_t i) {
  return t.valid[i] != 0 && !Vocab::is_special(t.ids[i]);
}

/// Independently masks each eligible token with probability p_m. At least
/// one token is always masked.
[[nodiscard]] inline MaskedText mask_tokens(const TokenizedText& tokens, double p_mask, Rng& rng) {
  require<ConfigError>(p_mask > 0.0 && p_mask < 1.0, "mask_tokens: p_m must be in (0, 1)");
  std::vector<int> eligible;
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
    if (maskable(tokens, i)) eligible.push_back(static_cast<int>(i));
  }
  if (eligible.empty()) throw DataError("mask_tokens: text has no maskable token");

  MaskedText out;
  out.text = tokens;
  for (int i : eligible) {
    if (rng.bernoulli(p_mask)) out.positions.push_back(i);
  }
  if (out.positions.empty()) out.positions.push_back(eligible[rng.index(eligible.size())]);
  for (int i : out.positions) {
    out.originals.push_back(tokens.ids[static_cast<std::size_t>(i)]);
    out.text.ids[static_cast<std::size_t>(i)] = Vocab::mask_id;
  }
  return out;
}

}  // namespace rasa::data
