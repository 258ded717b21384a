#include "dx/embedding_store.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "dx/errors.hpp"

namespace dx {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 8> kMagic = {'D', 'X', 'E', 'M', 'B', '\0', '\0', '\1'};
constexpr std::uint32_t kFlagCoords = 1u;

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.append(bytes.data(), bytes.size());
}

template <typename T>
T get_le(const char* p) {
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string block_file_name(std::string_view slide, Level level) {
  return std::string(slide) + "_" + std::string(to_string(level)) + ".emb";
}

void sort_block(EmbeddingBlock& b) {
  std::vector<std::size_t> order(b.coords.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) {
    const auto& ca = b.coords[a];
    const auto& cc = b.coords[c];
    return ca.y != cc.y ? ca.y < cc.y : ca.x < cc.x;
  });
  b.sorted_coords.resize(order.size());
  b.sorted_values.resize(b.values.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    b.sorted_coords[i] = b.coords[order[i]];
    std::copy_n(b.values.begin() + static_cast<std::ptrdiff_t>(order[i] * b.dim), b.dim,
                b.sorted_values.begin() + static_cast<std::ptrdiff_t>(i * b.dim));
  }
}

void validate_block(const EmbeddingBlock& b, std::string_view slide, Level level) {
  for (std::size_t r = 0; r < b.rows(); ++r) {
    for (std::size_t k = 0; k < b.dim; ++k) {
      if (!std::isfinite(b.values[r * b.dim + k])) {
        throw DataError("non-finite embedding value in record " +
                        patch_ref(slide, level, b.coords[r]) + " (row " + std::to_string(r) +
                        ", component " + std::to_string(k) + ")");
      }
    }
  }
  for (std::size_t i = 1; i < b.sorted_coords.size(); ++i) {
    if (b.sorted_coords[i] == b.sorted_coords[i - 1]) {
      throw DataError("duplicate patch " + patch_ref(slide, level, b.sorted_coords[i]));
    }
  }
}

}  // namespace

std::string_view to_string(Level level) {
  switch (level) {
    case Level::k5x: return "5x";
    case Level::k10x: return "10x";
    case Level::k20x: return "20x";
  }
  return "?";
}

std::optional<Level> try_parse_level(std::string_view text) {
  if (text == "5x") return Level::k5x;
  if (text == "10x") return Level::k10x;
  if (text == "20x") return Level::k20x;
  return std::nullopt;
}

Level parse_level(std::string_view text) {
  if (auto l = try_parse_level(text)) return *l;
  throw NotFoundError("unknown magnification level '" + std::string(text) + "'");
}

std::string patch_ref(std::string_view slide_id, Level level, GridCoord c) {
  return std::string(slide_id) + "@" + std::string(to_string(level)) + ":" +
         std::to_string(c.x) + "," + std::to_string(c.y);
}

RawBlock read_block(const fs::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < kBlockHeaderSize || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw FormatError("malformed block header in " + path.string());
  }
  const char* p = bytes.data();
  const auto version = get_le<std::uint32_t>(p + 8);
  const auto dim = get_le<std::uint32_t>(p + 12);
  const auto rows = get_le<std::uint64_t>(p + 16);
  const auto flags = get_le<std::uint32_t>(p + 24);
  if (version != kBlockVersion) {
    throw FormatError("unsupported block version " + std::to_string(version) + " in " + path.string());
  }
  if (dim == 0) throw FormatError("block declares zero dimension: " + path.string());
  const bool has_coords = (flags & kFlagCoords) != 0;
  const std::uint64_t coord_bytes = has_coords ? rows * 8 : 0;
  const std::uint64_t expect = kBlockHeaderSize + coord_bytes + rows * dim * 4;
  if (bytes.size() != expect) {
    throw FormatError("block size mismatch in " + path.string() + ": expected " +
                      std::to_string(expect) + " bytes, found " + std::to_string(bytes.size()));
  }
  RawBlock out;
  out.dim = dim;
  p += kBlockHeaderSize;
  if (has_coords) {
    out.coords.resize(rows);
    for (std::uint64_t r = 0; r < rows; ++r, p += 8) {
      out.coords[r] = {get_le<std::int32_t>(p), get_le<std::int32_t>(p + 4)};
    }
  }
  out.values.resize(rows * dim);
  for (auto& v : out.values) {
    v = get_le<float>(p);
    p += 4;
  }
  return out;
}

void write_block(const fs::path& path, const RawBlock& block) {
  const std::uint64_t rows = block.dim == 0 ? 0 : block.values.size() / block.dim;
  if (!block.coords.empty() && block.coords.size() != rows) {
    throw DimensionError("coordinate count does not match row count for " + path.string());
  }
  std::string out;
  out.reserve(kBlockHeaderSize + rows * (8 + block.dim * 4));
  out.append(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, kBlockVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(block.dim));
  put_le<std::uint64_t>(out, rows);
  put_le<std::uint32_t>(out, block.coords.empty() ? 0u : kFlagCoords);
  put_le<std::uint32_t>(out, 0u);
  for (const auto& c : block.coords) {
    put_le<std::int32_t>(out, c.x);
    put_le<std::int32_t>(out, c.y);
  }
  for (float v : block.values) put_le<float>(out, v);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

const SlideManifest& Corpus::manifest(std::string_view slide_id) const {
  for (const auto& s : slides_) {
    if (s.slide_id == slide_id) return s;
  }
  throw NotFoundError("unknown slide '" + std::string(slide_id) + "'");
}

bool Corpus::has(std::string_view slide_id, Level level) const {
  return blocks_.find(std::make_pair(std::string(slide_id), level)) != blocks_.end();
}

const EmbeddingBlock& Corpus::block(std::string_view slide_id, Level level) const {
  auto it = blocks_.find(std::make_pair(std::string(slide_id), level));
  if (it == blocks_.end()) {
    throw NotFoundError("no patches for slide '" + std::string(slide_id) + "' at level " +
                        std::string(to_string(level)));
  }
  return it->second;
}

EmbeddingView Corpus::view(std::string_view slide_id, Level level) const {
  return block(slide_id, level).view();
}

std::vector<PatchRecord> Corpus::fetch_patches(std::string_view slide_id, Level level) const {
  const auto v = view(slide_id, level);
  std::vector<PatchRecord> out;
  out.reserve(v.rows);
  for (std::size_t i = 0; i < v.rows; ++i) {
    auto r = v.row(i);
    out.push_back({std::string(slide_id), v.coords[i].x, v.coords[i].y, level, {r.begin(), r.end()}});
  }
  return out;
}

std::size_t Corpus::total_records() const {
  std::size_t n = 0;
  for (const auto& [key, b] : blocks_) n += b.rows();
  return n;
}

void Corpus::write(const fs::path& dir) const {
  fs::create_directories(dir);
  json slides = json::array();
  for (const auto& s : slides_) {
    json levels = json::object();
    for (const auto& [level, info] : s.levels) {
      const auto& b = block(s.slide_id, level);
      write_block(dir / info.file, RawBlock{b.dim, b.coords, b.values});
      levels[std::string(to_string(level))] = {
          {"count", info.count}, {"pitch_px", info.pitch_px}, {"file", info.file}};
    }
    slides.push_back({{"slide_id", s.slide_id}, {"provenance", s.provenance}, {"levels", levels}});
  }
  json manifest = {{"format", "dx-corpus"}, {"version", 1}, {"dimension", dim_},
                   {"note", note_},      {"slides", slides}};
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  f << manifest.dump(2) << '\n';
}

Corpus ingest_corpus(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw FormatError("missing manifest.json in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw FormatError("malformed manifest: " + std::string(e.what()));
  }
  Corpus corpus;
  try {
    corpus.dim_ = manifest.at("dimension").get<std::size_t>();
    corpus.note_ = manifest.value("note", std::string{});
    if (corpus.dim_ == 0) throw FormatError("manifest declares zero embedding dimension");
    std::set<std::string> seen;
    for (const auto& js : manifest.at("slides")) {
      SlideManifest s;
      s.slide_id = js.at("slide_id").get<std::string>();
      s.provenance = js.value("provenance", std::string{});
      s.dimension = corpus.dim_;
      if (!seen.insert(s.slide_id).second) throw FormatError("duplicate slide id " + s.slide_id);
      for (const auto& [name, jl] : js.at("levels").items()) {
        const auto level = try_parse_level(name);
        if (!level) throw FormatError("unknown level '" + name + "' for slide " + s.slide_id);
        LevelInfo info;
        info.count = jl.at("count").get<std::size_t>();
        info.pitch_px = jl.value("pitch_px", 0.0);
        info.file = jl.value("file", block_file_name(s.slide_id, *level));
        RawBlock raw = read_block(dir / info.file);
        if (raw.dim != corpus.dim_) {
          throw DimensionError("block " + info.file + " declares d=" + std::to_string(raw.dim) +
                               " but manifest says d=" + std::to_string(corpus.dim_));
        }
        const std::size_t rows = raw.values.size() / raw.dim;
        if (raw.coords.size() != rows) throw FormatError("block " + info.file + " carries no coordinates");
        if (rows != info.count) {
          throw FormatError("manifest declares " + std::to_string(info.count) + " patches for " +
                            s.slide_id + "@" + name + " but block holds " + std::to_string(rows));
        }
        EmbeddingBlock b{raw.dim, std::move(raw.coords), std::move(raw.values), {}, {}};
        sort_block(b);
        validate_block(b, s.slide_id, *level);
        corpus.blocks_.emplace(std::make_pair(s.slide_id, *level), std::move(b));
        s.levels.emplace(*level, std::move(info));
      }
      corpus.slides_.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest: " + std::string(e.what()));
  }
  return corpus;
}

CorpusBuilder::CorpusBuilder(std::size_t dim, std::string note) : dim_(dim), note_(std::move(note)) {
  if (dim_ == 0) throw DimensionError("embedding dimension must be positive");
}

CorpusBuilder& CorpusBuilder::add(std::string_view slide_id, Level level, GridCoord coord,
                                  std::span<const float> embedding, double pitch_px) {
  if (embedding.size() != dim_) {
    throw DimensionError("embedding of length " + std::to_string(embedding.size()) +
                         " added to corpus with d=" + std::to_string(dim_));
  }
  auto key = std::make_pair(std::string(slide_id), level);
  auto& raw = raw_[key];
  raw.dim = dim_;
  raw.coords.push_back(coord);
  raw.values.insert(raw.values.end(), embedding.begin(), embedding.end());
  pitch_[key] = pitch_px;
  return *this;
}

CorpusBuilder& CorpusBuilder::set_provenance(std::string_view slide_id, std::string provenance) {
  provenance_[std::string(slide_id)] = std::move(provenance);
  return *this;
}

Corpus CorpusBuilder::build() && {
  Corpus corpus;
  corpus.dim_ = dim_;
  corpus.note_ = note_;
  std::map<std::string, SlideManifest> slides;
  for (auto& [key, raw] : raw_) {
    auto& s = slides[key.first];
    s.slide_id = key.first;
    s.dimension = dim_;
    s.levels[key.second] = {raw.coords.size(), pitch_[key], block_file_name(key.first, key.second)};
    EmbeddingBlock b{dim_, std::move(raw.coords), std::move(raw.values), {}, {}};
    sort_block(b);
    validate_block(b, key.first, key.second);
    corpus.blocks_.emplace(key, std::move(b));
  }
  for (auto& [id, s] : slides) {
    if (auto it = provenance_.find(id); it != provenance_.end()) s.provenance = it->second;
    corpus.slides_.push_back(std::move(s));
  }
  return corpus;
}

}  // namespace dx
