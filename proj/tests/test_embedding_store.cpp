#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>

#include "dx/embedding_store.hpp"
#include "dx/errors.hpp"
#include "dx/random.hpp"
#include "test_util.hpp"

using namespace dx;
namespace fs = std::filesystem;

namespace {

Corpus small_corpus(std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  CorpusBuilder b(dim, "unit");
  const std::vector<std::pair<std::string, Level>> blocks{
      {"s1", Level::k10x}, {"s1", Level::k20x}, {"s2", Level::k5x}, {"s3", Level::k10x}};
  for (const auto& [slide, level] : blocks) {
    const int side = 2 + static_cast<int>(rng.below(4));
    // Insert in scrambled order so sorting is exercised.
    for (int i = side * side - 1; i >= 0; --i) {
      std::vector<float> e(dim);
      for (auto& v : e) v = static_cast<float>(rng.normal());
      b.add(slide, level, {i % side, i / side}, e, 224.0);
    }
  }
  return std::move(b).build();
}

// Independent reader: parses the block bytes by hand.
std::size_t count_rows_by_hand(const fs::path& p, std::size_t& dim) {
  std::ifstream in(p, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::uint32_t d = 0, flags = 0;
  std::uint64_t rows = 0;
  std::memcpy(&d, bytes.data() + 12, 4);
  std::memcpy(&rows, bytes.data() + 16, 8);
  std::memcpy(&flags, bytes.data() + 24, 4);
  dim = d;
  const std::size_t expect = 32 + ((flags & 1) ? rows * 8 : 0) + rows * d * 4;
  EXPECT_EQ(bytes.size(), expect);
  return rows;
}

}  // namespace

TEST(EmbeddingStore, SingleSlideCounts) {
  CorpusBuilder b(8);
  for (int i = 0; i < 4; ++i) {
    std::vector<float> e(8, 1.0f);
    e[0] = static_cast<float>(i);
    b.add("only", Level::k10x, {i % 2, i / 2}, e);
  }
  const auto c = std::move(b).build();
  TempDir dir;
  c.write(dir.path());
  const auto back = ingest_corpus(dir.path());
  ASSERT_EQ(back.slides().size(), 1u);
  EXPECT_EQ(back.manifest("only").levels.at(Level::k10x).count, 4u);
  EXPECT_EQ(back.manifest("only").levels.size(), 1u);
  EXPECT_EQ(back.dimension(), 8u);
}

TEST(EmbeddingStore, DimensionMismatchBetweenManifestAndBlock) {
  const auto c = small_corpus(8, 1);
  TempDir dir;
  c.write(dir.path());
  auto manifest = nlohmann::json::parse(read_text(dir.path() / "manifest.json"));
  manifest["dimension"] = 16;
  std::ofstream(dir.path() / "manifest.json") << manifest.dump();
  EXPECT_THROW(ingest_corpus(dir.path()), DimensionError);
}

TEST(EmbeddingStore, MalformedHeaderIsFormatError) {
  const auto c = small_corpus(8, 2);
  TempDir dir;
  c.write(dir.path());
  const auto file = dir.path() / c.manifest("s1").levels.at(Level::k10x).file;
  {
    std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("JUNKJUNK", 8);
  }
  EXPECT_THROW(ingest_corpus(dir.path()), FormatError);
  std::ofstream(dir.path() / "manifest.json") << "{ not json";
  EXPECT_THROW(ingest_corpus(dir.path()), FormatError);
}

TEST(EmbeddingStore, NonFiniteValueIsDataErrorNamingRecord) {
  auto raw = RawBlock{4, {{0, 0}, {1, 0}}, {1, 2, 3, 4, 5, std::numeric_limits<float>::quiet_NaN(), 7, 8}};
  TempDir dir;
  write_block(dir.path() / "bad_10x.emb", raw);
  nlohmann::json manifest = {
      {"format", "dx-corpus"},
      {"version", 1},
      {"dimension", 4},
      {"slides", {{{"slide_id", "bad"}, {"levels", {{"10x", {{"count", 2}, {"file", "bad_10x.emb"}}}}}}}}};
  std::ofstream(dir.path() / "manifest.json") << manifest.dump();
  try {
    ingest_corpus(dir.path());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bad@10x:1,0"), std::string::npos) << e.what();
  }
}

TEST(EmbeddingStore, IterationMatchesIndependentReader) {
  const auto c = small_corpus(8, 3);
  TempDir dir;
  c.write(dir.path());
  const auto manifest = nlohmann::json::parse(read_text(dir.path() / "manifest.json"));
  std::size_t by_hand = 0;
  for (const auto& s : manifest["slides"]) {
    for (const auto& [lv, info] : s["levels"].items()) {
      std::size_t d = 0;
      by_hand += count_rows_by_hand(dir.path() / info["file"].get<std::string>(), d);
      EXPECT_EQ(d, 8u);
    }
  }
  const auto back = ingest_corpus(dir.path());
  std::size_t iterated = 0;
  for (const auto& s : back.slides()) {
    for (const auto& [lv, info] : s.levels) iterated += back.fetch_patches(s.slide_id, lv).size();
  }
  EXPECT_EQ(iterated, by_hand);
  EXPECT_EQ(back.total_records(), by_hand);
  EXPECT_EQ(back.slides().size(), 3u);
}

TEST(EmbeddingStore, FetchIsSortedDeterministicAndRejectsUnknown) {
  const auto c = small_corpus(8, 4);
  const auto a = c.fetch_patches("s1", Level::k10x);
  const auto b = c.fetch_patches("s1", Level::k10x);
  ASSERT_EQ(a.size(), c.manifest("s1").levels.at(Level::k10x).count);
  for (std::size_t i = 1; i < a.size(); ++i) {
    EXPECT_TRUE(std::make_pair(a[i - 1].y, a[i - 1].x) < std::make_pair(a[i].y, a[i].x));
  }
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].x, b[i].x);
    EXPECT_EQ(a[i].y, b[i].y);
    EXPECT_EQ(0, std::memcmp(a[i].embedding.data(), b[i].embedding.data(), a[i].embedding.size() * 4));
  }
  EXPECT_THROW(c.fetch_patches("s1", Level::k5x), NotFoundError);
  EXPECT_THROW(c.fetch_patches("nope", Level::k10x), NotFoundError);
  EXPECT_THROW(parse_level("40x"), NotFoundError);
}

TEST(EmbeddingStore, RoundTripIsBitIdentical) {
  const auto c = small_corpus(8, 5);
  TempDir one, two;
  c.write(one.path());
  ingest_corpus(one.path()).write(two.path());
  for (const auto& s : c.slides()) {
    for (const auto& [lv, info] : s.levels) {
      EXPECT_EQ(read_text(one.path() / info.file), read_text(two.path() / info.file)) << info.file;
    }
  }
}

TEST(EmbeddingStore, BuilderRejectsBadRecords) {
  CorpusBuilder b(4);
  std::vector<float> short_e(3, 1.0f);
  EXPECT_THROW(b.add("s", Level::k10x, {0, 0}, short_e), DimensionError);
  std::vector<float> e(4, 1.0f);
  b.add("s", Level::k10x, {0, 0}, e);
  b.add("s", Level::k10x, {0, 0}, e);
  EXPECT_ANY_THROW(std::move(b).build());
  EXPECT_THROW(CorpusBuilder(0), DimensionError);
}

TEST(EmbeddingStore, PatchRefFormat) {
  EXPECT_EQ(patch_ref("tcga-1", Level::k20x, {3, 7}), "tcga-1@20x:3,7");
}
