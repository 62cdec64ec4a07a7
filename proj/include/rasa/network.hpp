#pragma once

// The online network: patch-based image encoder, text encoder, a
// text-guided cross-modal encoder (text queries, image keys/values),
// low-dimensional projection heads and the four task classifiers.
// Blocks are pre-norm transformer blocks; the cross-modal block inserts a
// cross-attention sub-layer between self-attention and the MLP.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rasa/corpus.hpp"
#include "rasa/error.hpp"
#include "rasa/ops.hpp"
#include "rasa/random.hpp"
#include "rasa/tensor.hpp"

namespace rasa::model {

using data::TokenBatch;

struct ModelConfig {
  int image_layers = 4;
  int text_layers = 2;
  int cross_layers = 2;
  int hidden_dim = 64;
  int heads = 4;
  int mlp_ratio = 4;
  int image_side = 24;
  int patch_side = 8;
  int proj_dim = 32;
  int vocab_size = 0;
  int max_len = 16;

  [[nodiscard]] int num_patches() const {
    const int g = image_side / patch_side;
    return g * g;
  }
  [[nodiscard]] int patch_pixels() const { return patch_side * patch_side; }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model." + msg); };
    if (hidden_dim < 1 || heads < 1 || hidden_dim % heads != 0) fail("hidden_dim must be divisible by heads");
    if (image_layers < 0 || text_layers < 0) fail("image_layers and text_layers must be >= 0");
    if (cross_layers < 1) fail("cross_layers must be >= 1");
    if (proj_dim < 1 || proj_dim > hidden_dim) fail("proj_dim must be in [1, hidden_dim]");
    if (patch_side < 1 || image_side % patch_side != 0) fail("image_side must be divisible by patch_side");
    if (vocab_size < 4) fail("vocab_size must cover the special tokens and at least one word");
    if (max_len < 2) fail("max_len must be >= 2");
    if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Learning-rate group a parameter belongs to.
enum class ParamGroup : std::uint8_t { backbone, head };

/// Visitor signature: (name, parameter, group, weight decay applies).
using ParamVisitor = std::function<void(const std::string&, Var&, ParamGroup, bool)>;

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out

  void visit(const std::string& prefix, ParamGroup group, const ParamVisitor& f) {
    f(prefix + ".weight", weight, group, true);
    f(prefix + ".bias", bias, group, false);
  }
};

struct LayerNorm {
  Var gain;
  Var bias;

  void visit(const std::string& prefix, ParamGroup group, const ParamVisitor& f) {
    f(prefix + ".gain", gain, group, false);
    f(prefix + ".bias", bias, group, false);
  }
};

struct Attention {
  Linear query, key, value, output;

  void visit(const std::string& prefix, ParamGroup group, const ParamVisitor& f) {
    query.visit(prefix + ".query", group, f);
    key.visit(prefix + ".key", group, f);
    value.visit(prefix + ".value", group, f);
    output.visit(prefix + ".output", group, f);
  }
};

struct Block {
  LayerNorm norm_self;
  Attention self_attention;
  bool has_cross = false;
  LayerNorm norm_cross;
  Attention cross_attention;
  LayerNorm norm_mlp;
  Linear fc1, fc2;

  void visit(const std::string& prefix, ParamGroup group, const ParamVisitor& f) {
    norm_self.visit(prefix + ".norm_self", group, f);
    self_attention.visit(prefix + ".self_attention", group, f);
    if (has_cross) {
      norm_cross.visit(prefix + ".norm_cross", group, f);
      cross_attention.visit(prefix + ".cross_attention", group, f);
    }
    norm_mlp.visit(prefix + ".norm_mlp", group, f);
    fc1.visit(prefix + ".fc1", group, f);
    fc2.visit(prefix + ".fc2", group, f);
  }
};

struct Network {
  ModelConfig config;

  // image encoder
  Linear patch_embed;
  Var image_cls;
  Var image_position;  // (M+1) x D
  std::vector<Block> image_blocks;
  LayerNorm image_norm;

  // text encoder
  Var token_embed;     // V x D
  Var text_position;   // L x D
  std::vector<Block> text_blocks;
  LayerNorm text_norm;

  // cross-modal encoder
  std::vector<Block> cross_blocks;
  LayerNorm cross_norm;

  // contrastive projections and temperature
  Linear image_proj, text_proj;
  Var temperature;

  // task classifiers
  Linear itm_head, prd_head, mlm_head, rtd_head;

  /// Visits every parameter in a fixed order.
  void visit(const ParamVisitor& f) {
    const auto bb = ParamGroup::backbone;
    patch_embed.visit("image.patch_embed", bb, f);
    f("image.cls", image_cls, bb, false);
    f("image.position", image_position, bb, false);
    for (std::size_t i = 0; i < image_blocks.size(); ++i) image_blocks[i].visit("image.blocks." + std::to_string(i), bb, f);
    image_norm.visit("image.norm", bb, f);
    f("text.token_embed", token_embed, bb, false);
    f("text.position", text_position, bb, false);
    for (std::size_t i = 0; i < text_blocks.size(); ++i) text_blocks[i].visit("text.blocks." + std::to_string(i), bb, f);
    text_norm.visit("text.norm", bb, f);
    for (std::size_t i = 0; i < cross_blocks.size(); ++i) cross_blocks[i].visit("cross.blocks." + std::to_string(i), bb, f);
    cross_norm.visit("cross.norm", bb, f);
    image_proj.visit("proj.image", bb, f);
    text_proj.visit("proj.text", bb, f);
    f("temperature", temperature, bb, false);
    const auto hd = ParamGroup::head;
    itm_head.visit("head.itm", hd, f);
    prd_head.visit("head.prd", hd, f);
    mlm_head.visit("head.mlm", hd, f);
    rtd_head.visit("head.rtd", hd, f);
  }

  void visit(const std::function<void(const std::string&, const Var&)>& f) const {
    const_cast<Network*>(this)->visit([&f](const std::string& name, Var& v, ParamGroup, bool) { f(name, v); });
  }

  [[nodiscard]] std::vector<std::pair<std::string, Var>> named_parameters() const {
    std::vector<std::pair<std::string, Var>> out;
    visit([&out](const std::string& name, const Var& v) { out.emplace_back(name, v); });
    return out;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&n](const std::string&, const Var& v) { n += static_cast<std::size_t>(v.value().size()); });
    return n;
  }

  /// Deep copy of every parameter value. Copies made with
  /// `trainable = false` never take part in gradient computation.
  [[nodiscard]] Network clone(bool trainable) const {
    Network copy = *this;
    copy.visit([trainable](const std::string&, Var& v, ParamGroup, bool) { v = Var(v.value(), trainable); });
    return copy;
  }

  void zero_grad() {
    visit([](const std::string&, Var& v, ParamGroup, bool) { v.zero_grad(); });
  }

  [[nodiscard]] double tau() const { return temperature.value()(0, 0); }
};

namespace detail {

inline Var xavier(int in, int out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  Matrix w(in, out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = (2.0 * rng.uniform() - 1.0) * bound;
  return Var(std::move(w), true);
}

inline Var normal(int rows, int cols, double stddev, Rng& rng) {
  Matrix w(rows, cols);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal(0.0, stddev);
  return Var(std::move(w), true);
}

inline Linear make_linear(int in, int out, Rng& rng) {
  return Linear{xavier(in, out, rng), Var(Matrix::Zero(1, out), true)};
}

inline LayerNorm make_norm(int d) { return LayerNorm{Var(Matrix::Ones(1, d), true), Var(Matrix::Zero(1, d), true)}; }

inline Attention make_attention(int d, Rng& rng) {
  return Attention{make_linear(d, d, rng), make_linear(d, d, rng), make_linear(d, d, rng), make_linear(d, d, rng)};
}

inline Block make_block(const ModelConfig& c, bool cross, Rng& rng) {
  const int d = c.hidden_dim;
  Block b;
  b.norm_self = make_norm(d);
  b.self_attention = make_attention(d, rng);
  b.has_cross = cross;
  if (cross) {
    b.norm_cross = make_norm(d);
    b.cross_attention = make_attention(d, rng);
  }
  b.norm_mlp = make_norm(d);
  b.fc1 = make_linear(d, d * c.mlp_ratio, rng);
  b.fc2 = make_linear(d * c.mlp_ratio, d, rng);
  return b;
}

}  // namespace detail

/// Random initialisation: Xavier-uniform linear weights, zero biases, unit
/// layer-norm gains, N(0, 0.02) embeddings, temperature set to `tau_init`.
[[nodiscard]] inline Network initialize(const ModelConfig& config, Rng& rng, double tau_init = 0.07) {
  config.validate();
  require<ConfigError>(tau_init > 0.0, "initialize: temperature must be positive");
  const int d = config.hidden_dim;
  Network n;
  n.config = config;
  n.patch_embed = detail::make_linear(config.patch_pixels(), d, rng);
  n.image_cls = detail::normal(1, d, 0.02, rng);
  n.image_position = detail::normal(config.num_patches() + 1, d, 0.02, rng);
  for (int i = 0; i < config.image_layers; ++i) n.image_blocks.push_back(detail::make_block(config, false, rng));
  n.image_norm = detail::make_norm(d);
  n.token_embed = detail::normal(config.vocab_size, d, 0.02, rng);
  n.text_position = detail::normal(config.max_len, d, 0.02, rng);
  for (int i = 0; i < config.text_layers; ++i) n.text_blocks.push_back(detail::make_block(config, false, rng));
  n.text_norm = detail::make_norm(d);
  for (int i = 0; i < config.cross_layers; ++i) n.cross_blocks.push_back(detail::make_block(config, true, rng));
  n.cross_norm = detail::make_norm(d);
  n.image_proj = detail::make_linear(d, config.proj_dim, rng);
  n.text_proj = detail::make_linear(d, config.proj_dim, rng);
  n.temperature = ag::scalar(tau_init, true);
  n.itm_head = detail::make_linear(d, 2, rng);
  n.prd_head = detail::make_linear(d, 2, rng);
  n.mlm_head = detail::make_linear(d, config.vocab_size, rng);
  n.rtd_head = detail::make_linear(d, 2, rng);
  return n;
}

// ---------------------------------------------------------------------------
// Forward pass

namespace detail {

inline Var apply(const Linear& l, const Var& x) { return ag::linear(x, l.weight, l.bias); }
inline Var apply(const LayerNorm& n, const Var& x) { return ag::layer_norm(x, n.gain, n.bias); }

inline Var attend(const Attention& a, const Var& queries, const Var& keys_values, Index batch, Index heads,
                  std::span<const std::uint8_t> key_valid) {
  Var q = apply(a.query, queries);
  Var k = apply(a.key, keys_values);
  Var v = apply(a.value, keys_values);
  return apply(a.output, ag::attention(q, k, v, batch, heads, key_valid));
}

/// One pre-norm block. `image` is non-null for cross-modal blocks.
inline Var run_block(const Block& b, const Var& x, Index batch, Index heads, std::span<const std::uint8_t> valid,
                     const Var* image) {
  Var h = apply(b.norm_self, x);
  Var out = ag::add(x, attend(b.self_attention, h, h, batch, heads, valid));
  if (b.has_cross) {
    require<ContractError>(image != nullptr, "cross-modal block needs an image sequence");
    out = ag::add(out, attend(b.cross_attention, apply(b.norm_cross, out), *image, batch, heads, {}));
  }
  Var m = apply(b.fc2, ag::gelu(apply(b.fc1, apply(b.norm_mlp, out))));
  return ag::add(out, m);
}

}  // namespace detail

/// Splits flattened images (one per row) into row-major patches:
/// result is (batch * M) x (patch_side^2).
[[nodiscard]] inline Matrix patchify(const ModelConfig& c, const Matrix& pixels) {
  const Index side = c.image_side;
  const Index p = c.patch_side;
  require<DimensionError>(pixels.cols() == side * side, "encode_image: pixel row has wrong size");
  if (!pixels.allFinite()) throw NumericError("encode_image: non-finite pixel value");
  const Index grid = side / p;
  const Index batch = pixels.rows();
  Matrix out(batch * grid * grid, p * p);
  for (Index b = 0; b < batch; ++b) {
    for (Index gy = 0; gy < grid; ++gy) {
      for (Index gx = 0; gx < grid; ++gx) {
        const Index row = b * grid * grid + gy * grid + gx;
        for (Index y = 0; y < p; ++y) {
          for (Index x = 0; x < p; ++x) out(row, y * p + x) = pixels(b, (gy * p + y) * side + gx * p + x);
        }
      }
    }
  }
  return out;
}

/// Patch embeddings before the [CLS] token and position information are added.
[[nodiscard]] inline Var embed_patches(const Network& net, const Matrix& pixels) {
  return detail::apply(net.patch_embed, ag::constant(patchify(net.config, pixels)));
}

/// Visual sequence {v_cls, v_1..v_M} per image: (batch*(M+1)) x D.
[[nodiscard]] inline Var encode_image(const Network& net, const Matrix& pixels) {
  const Index batch = pixels.rows();
  require<DimensionError>(batch > 0, "encode_image: empty batch");
  const Index m = net.config.num_patches();
  Var patches = embed_patches(net, pixels);
  // interleave [CLS] in front of every image's patches
  std::vector<Index> order;
  order.reserve(static_cast<std::size_t>(batch * (m + 1)));
  for (Index b = 0; b < batch; ++b) {
    order.push_back(0);
    for (Index j = 0; j < m; ++j) order.push_back(1 + b * m + j);
  }
  Var x = ag::gather_rows(ag::concat_rows({net.image_cls, patches}), std::move(order));
  x = ag::add_tiled(x, net.image_position);
  for (const auto& b : net.image_blocks) x = detail::run_block(b, x, batch, net.config.heads, {}, nullptr);
  return detail::apply(net.image_norm, x);
}

/// Textual sequence {t_cls, t_1..} per text: (batch*max_len) x D. Padding
/// positions are excluded as attention keys.
[[nodiscard]] inline Var encode_text(const Network& net, const TokenBatch& tokens) {
  require<DimensionError>(tokens.batch > 0, "encode_text: empty batch");
  require<DimensionError>(tokens.length == net.config.max_len, "encode_text: token length must equal max_len");
  std::vector<Index> ids;
  ids.reserve(tokens.ids.size());
  for (int id : tokens.ids) {
    if (id < 0 || id >= net.config.vocab_size) throw VocabError("encode_text: token id " + std::to_string(id) + " out of range");
    ids.push_back(id);
  }
  Var x = ag::gather_rows(net.token_embed, std::move(ids));
  x = ag::add_tiled(x, net.text_position);
  for (const auto& b : net.text_blocks) x = detail::run_block(b, x, tokens.batch, net.config.heads, tokens.valid, nullptr);
  return detail::apply(net.text_norm, x);
}

/// Multimodal sequence {f_cls, f_1..} aligned with text positions.
[[nodiscard]] inline Var fuse(const Network& net, const Var& visual, const Var& textual, const TokenBatch& tokens) {
  const Index batch = tokens.batch;
  const Index m1 = net.config.num_patches() + 1;
  require<DimensionError>(textual.rows() == batch * tokens.length, "fuse: text sequence does not match the token batch");
  require<DimensionError>(visual.rows() == batch * m1, "fuse: image sequence does not match the batch size");
  Var x = textual;
  for (const auto& b : net.cross_blocks) x = detail::run_block(b, x, batch, net.config.heads, tokens.valid, &visual);
  return detail::apply(net.cross_norm, x);
}

/// First row of every length-`length` block.
[[nodiscard]] inline Var cls_rows(const Var& sequence, Index length) {
  require<DimensionError>(length > 0 && sequence.rows() % length == 0, "cls_rows: bad sequence length");
  std::vector<Index> rows;
  for (Index r = 0; r < sequence.rows(); r += length) rows.push_back(r);
  return ag::gather_rows(sequence, std::move(rows));
}

enum class Side : std::uint8_t { image, text };

/// Linear projection followed by L2 normalisation.
[[nodiscard]] inline Var project(const Network& net, const Var& cls, Side side) {
  require<DimensionError>(cls.cols() == net.config.hidden_dim, "project: input must have hidden_dim columns");
  const Linear& l = side == Side::image ? net.image_proj : net.text_proj;
  return ag::l2_normalize_rows(detail::apply(l, cls));
}

[[nodiscard]] inline Var itm_logits(const Network& net, const Var& fused_cls) { return detail::apply(net.itm_head, fused_cls); }
[[nodiscard]] inline Var prd_logits(const Network& net, const Var& fused_cls) { return detail::apply(net.prd_head, fused_cls); }
[[nodiscard]] inline Var mlm_logits(const Network& net, const Var& fused_tokens) { return detail::apply(net.mlm_head, fused_tokens); }
[[nodiscard]] inline Var rtd_logits(const Network& net, const Var& fused_tokens) { return detail::apply(net.rtd_head, fused_tokens); }

[[nodiscard]] inline Matrix probabilities(const Var& logits) { return ag::softmax_rows(logits.value()); }

/// Everything the objectives need from one (image, text) batch.
struct RepresentationBundle {
  Var visual;      // batch*(M+1) x D
  Var textual;     // batch*L x D
  Var fused;       // batch*L x D
  Var image_proj;  // batch x proj_dim, unit rows
  Var text_proj;   // batch x proj_dim, unit rows
};

[[nodiscard]] inline RepresentationBundle represent(const Network& net, const Matrix& pixels, const TokenBatch& tokens,
                                                    bool with_fusion = true) {
  RepresentationBundle r;
  r.visual = encode_image(net, pixels);
  r.textual = encode_text(net, tokens);
  if (with_fusion) r.fused = fuse(net, r.visual, r.textual, tokens);
  r.image_proj = project(net, cls_rows(r.visual, net.config.num_patches() + 1), Side::image);
  r.text_proj = project(net, cls_rows(r.textual, tokens.length), Side::text);
  return r;
}

}  // namespace rasa::model
