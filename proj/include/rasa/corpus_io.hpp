#pragma once

// On-disk corpus: a directory holding
//
//   manifest.jsonl  first line {"record":"corpus", spec...}; then one line per
//                   identity, image and text (ids, identity, split,
//                   source_image, token ids, visibility flags)
//   pixels.bin      "RASAPIX\0", u32 version = 1, u32 dtype (1 = f64 LE),
//                   u64 count, u64 height, u64 width, then count*height*width
//                   f64 values, image-major, row-major within an image
//   vocab.json      {"tokens": [...]} with id = array position
//   FINGERPRINT     sha256 hex of manifest.jsonl + pixels.bin + vocab.json
//                   concatenated in that order

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "rasa/corpus.hpp"
#include "rasa/digest.hpp"
#include "rasa/error.hpp"

namespace rasa::data {

inline constexpr char kPixelMagic[8] = {'R', 'A', 'S', 'A', 'P', 'I', 'X', '\0'};
inline constexpr std::uint32_t kPixelVersion = 1;
inline constexpr std::uint32_t kDtypeF64 = 1;

inline constexpr const char* kCorpusFiles[3] = {"manifest.jsonl", "pixels.bin", "vocab.json"};

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + std::string(s) + "'");
}

inline nlohmann::json to_json(const CorpusSpec& s) {
  return {{"n_identities", s.n_identities},
          {"test_identities", s.test_identities},
          {"images_per_identity", s.images_per_identity},
          {"texts_per_image", s.texts_per_image},
          {"n_attributes", s.n_attributes},
          {"attribute_vocab_size", s.attribute_vocab_size},
          {"occlusion_rate", s.occlusion_rate},
          {"image_side", s.image_side},
          {"patch_side", s.patch_side},
          {"pixel_noise", s.pixel_noise},
          {"max_len", s.max_len},
          {"seed", s.seed}};
}

inline CorpusSpec spec_from_json(const nlohmann::json& j) {
  CorpusSpec s;
  s.n_identities = j.at("n_identities");
  s.test_identities = j.at("test_identities");
  s.images_per_identity = j.at("images_per_identity");
  s.texts_per_image = j.at("texts_per_image");
  s.n_attributes = j.at("n_attributes");
  s.attribute_vocab_size = j.at("attribute_vocab_size");
  s.occlusion_rate = j.at("occlusion_rate");
  s.image_side = j.at("image_side");
  s.patch_side = j.at("patch_side");
  s.pixel_noise = j.at("pixel_noise");
  s.max_len = j.at("max_len");
  s.seed = j.at("seed");
  return s;
}

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("write failed for " + path.string());
}

template <class T>
void append_raw(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take_raw(const std::string& in, std::size_t& at) {
  if (at + sizeof(T) > in.size()) throw DataError("pixels.bin: truncated header");
  T v;
  std::memcpy(&v, in.data() + at, sizeof(T));
  at += sizeof(T);
  return v;
}

inline std::string manifest_text(const Corpus& c) {
  std::string out;
  nlohmann::json head = to_json(c.spec);
  head["record"] = "corpus";
  out += head.dump() + '\n';
  for (const auto& i : c.identities) {
    out += nlohmann::json{{"record", "identity"}, {"id", i.id}, {"split", to_string(i.split)}, {"attributes", i.attributes}}
               .dump() +
           '\n';
  }
  for (const auto& im : c.images) {
    out += nlohmann::json{{"record", "image"},
                          {"id", im.image_id},
                          {"identity", im.identity_id},
                          {"split", to_string(c.split_of_identity(im.identity_id))},
                          {"visible", im.visible}}
               .dump() +
           '\n';
  }
  for (const auto& t : c.texts) {
    out += nlohmann::json{{"record", "text"},
                          {"id", t.text_id},
                          {"identity", t.identity_id},
                          {"split", to_string(c.split_of_identity(t.identity_id))},
                          {"source_image", t.source_image_id},
                          {"tokens", t.text.ids},
                          {"valid", t.text.valid}}
               .dump() +
           '\n';
  }
  return out;
}

inline std::string pixel_bytes(const Corpus& c) {
  std::string out(kPixelMagic, sizeof(kPixelMagic));
  append_raw<std::uint32_t>(out, kPixelVersion);
  append_raw<std::uint32_t>(out, kDtypeF64);
  append_raw<std::uint64_t>(out, c.images.size());
  append_raw<std::uint64_t>(out, static_cast<std::uint64_t>(c.spec.image_side));
  append_raw<std::uint64_t>(out, static_cast<std::uint64_t>(c.spec.image_side));
  for (const auto& im : c.images) {
    out.append(reinterpret_cast<const char*>(im.pixels.data()), static_cast<std::size_t>(im.pixels.size()) * sizeof(double));
  }
  return out;
}

inline std::string vocab_text(const Vocab& v) { return nlohmann::json{{"tokens", v.tokens()}}.dump(2) + '\n'; }

}  // namespace detail

/// Content hash over the serialised corpus files.
[[nodiscard]] inline std::string fingerprint(const std::string& manifest, const std::string& pixels, const std::string& vocab) {
  return Sha256().update(manifest).update(pixels).update(vocab).hex();
}

[[nodiscard]] inline std::string fingerprint(const Corpus& c) {
  return fingerprint(detail::manifest_text(c), detail::pixel_bytes(c), detail::vocab_text(c.vocab));
}

[[nodiscard]] inline bool corpus_exists(const std::filesystem::path& dir) {
  for (const char* f : kCorpusFiles) {
    if (std::filesystem::exists(dir / f)) return true;
  }
  return std::filesystem::exists(dir / "FINGERPRINT");
}

/// Writes the corpus files into `dir` (created if missing) and returns the fingerprint.
inline std::string save_corpus(const std::filesystem::path& dir, const Corpus& c) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  const std::string manifest = detail::manifest_text(c);
  const std::string pixels = detail::pixel_bytes(c);
  const std::string vocab = detail::vocab_text(c.vocab);
  detail::write_file(dir / kCorpusFiles[0], manifest);
  detail::write_file(dir / kCorpusFiles[1], pixels);
  detail::write_file(dir / kCorpusFiles[2], vocab);
  const std::string fp = fingerprint(manifest, pixels, vocab);
  detail::write_file(dir / "FINGERPRINT", fp + '\n');
  return fp;
}

struct LoadedCorpus {
  Corpus corpus;
  std::string fingerprint;
};

/// Reads a corpus directory; the stored fingerprint must match the content.
[[nodiscard]] inline LoadedCorpus load_corpus(const std::filesystem::path& dir) {
  const std::string manifest = detail::read_file(dir / kCorpusFiles[0]);
  const std::string pixels = detail::read_file(dir / kCorpusFiles[1]);
  const std::string vocab_json = detail::read_file(dir / kCorpusFiles[2]);
  LoadedCorpus out;
  out.fingerprint = fingerprint(manifest, pixels, vocab_json);
  if (std::filesystem::exists(dir / "FINGERPRINT")) {
    std::string stored = detail::read_file(dir / "FINGERPRINT");
    while (!stored.empty() && (stored.back() == '\n' || stored.back() == '\r')) stored.pop_back();
    if (stored != out.fingerprint) throw DataError("corpus in " + dir.string() + " does not match its FINGERPRINT");
  }

  Corpus& c = out.corpus;
  try {
    c.vocab = Vocab::from_tokens(nlohmann::json::parse(vocab_json).at("tokens").get<std::vector<std::string>>());
    std::istringstream lines(manifest);
    std::string line;
    bool have_head = false;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      const std::string kind = j.at("record");
      if (kind == "corpus") {
        c.spec = spec_from_json(j);
        have_head = true;
      } else if (kind == "identity") {
        c.identities.push_back(Identity{j.at("id"), j.at("attributes").get<std::vector<int>>(),
                                        parse_split(j.at("split").get<std::string>())});
      } else if (kind == "image") {
        ImageSample im;
        im.image_id = j.at("id");
        im.identity_id = j.at("identity");
        im.visible = j.at("visible").get<std::vector<std::uint8_t>>();
        c.images.push_back(std::move(im));
      } else if (kind == "text") {
        TextSample t;
        t.text_id = j.at("id");
        t.identity_id = j.at("identity");
        t.source_image_id = j.at("source_image");
        t.text.ids = j.at("tokens").get<std::vector<int>>();
        t.text.valid = j.at("valid").get<std::vector<std::uint8_t>>();
        c.texts.push_back(std::move(t));
      } else {
        throw DataError("manifest: unknown record '" + kind + "'");
      }
    }
    if (!have_head) throw DataError("manifest: missing corpus record");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }

  for (std::size_t i = 0; i < c.identities.size(); ++i) {
    if (c.identities[i].id != static_cast<int>(i)) throw DataError("manifest: identity ids must be dense and ordered");
  }
  for (std::size_t i = 0; i < c.images.size(); ++i) {
    if (c.images[i].image_id != static_cast<int>(i)) throw DataError("manifest: image ids must be dense and ordered");
  }
  for (std::size_t i = 0; i < c.texts.size(); ++i) {
    const auto& t = c.texts[i];
    if (t.text_id != static_cast<int>(i)) throw DataError("manifest: text ids must be dense and ordered");
    if (t.identity_id < 0 || t.identity_id >= static_cast<int>(c.identities.size())) {
      throw DataError("manifest: text " + std::to_string(i) + " names an unknown identity");
    }
    for (int id : t.text.ids) {
      if (id < 0 || id >= c.vocab.size()) throw VocabError("manifest: text " + std::to_string(i) + " has an unknown token id");
    }
  }

  std::size_t at = 0;
  if (pixels.size() < sizeof(kPixelMagic) || std::memcmp(pixels.data(), kPixelMagic, sizeof(kPixelMagic)) != 0) {
    throw DataError("pixels.bin: bad magic");
  }
  at = sizeof(kPixelMagic);
  if (detail::take_raw<std::uint32_t>(pixels, at) != kPixelVersion) throw DataError("pixels.bin: unsupported version");
  if (detail::take_raw<std::uint32_t>(pixels, at) != kDtypeF64) throw DataError("pixels.bin: unsupported dtype");
  const auto n = detail::take_raw<std::uint64_t>(pixels, at);
  const auto h = detail::take_raw<std::uint64_t>(pixels, at);
  const auto w = detail::take_raw<std::uint64_t>(pixels, at);
  if (n != c.images.size() || h != static_cast<std::uint64_t>(c.spec.image_side) || w != h) {
    throw DataError("pixels.bin: shape does not match the manifest");
  }
  if (pixels.size() - at != n * h * w * sizeof(double)) throw DataError("pixels.bin: payload size mismatch");
  for (auto& im : c.images) {
    im.pixels.resize(static_cast<Index>(h), static_cast<Index>(w));
    std::memcpy(im.pixels.data(), pixels.data() + at, h * w * sizeof(double));
    at += h * w * sizeof(double);
  }
  return out;
}

}  // namespace rasa::data
