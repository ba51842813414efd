#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "testdrive/complement.hpp"
#include "testdrive/error.hpp"

using namespace testdrive;
namespace fs = std::filesystem;

namespace {

DatasetManifest manifest(std::vector<ManifestEntry> entries) { return make_manifest("/nowhere", std::move(entries)); }

}  // namespace

TEST_CASE("one detection removes its tile") {
  const DatasetManifest m = manifest({{"a", "a.png", 100, 100}});
  const std::vector<Detection> d = {{"a", {0, 0, 50, 50}, 0.9}};
  const std::vector<std::size_t> members = {0};
  const ComplementSet c = build_complement(m, d, members, {50, 50}, 0.2);
  REQUIRE(c.size() == 3);
  CHECK(c.patches[0].box == BoundingBox{50, 0, 50, 50});
  CHECK(c.patches[1].box == BoundingBox{0, 50, 50, 50});
  CHECK(c.patches[2].box == BoundingBox{50, 50, 50, 50});
  CHECK(build_complement(m, d, {}, {50, 50}, 0.2).size() == 4);
}

TEST_CASE("exclusion threshold is a strict overlap fraction") {
  const DatasetManifest m = manifest({{"a", "a.png", 100, 100}});
  // The box covers exactly 20% of tile (0,0) and nothing else.
  const std::vector<Detection> d = {{"a", {40, 0, 10, 50}, 0.9}};
  const std::vector<std::size_t> members = {0};
  CHECK(build_complement(m, d, members, {50, 50}, 0.2).size() == 4);
  CHECK(build_complement(m, d, members, {50, 50}, 0.19).size() == 3);
  CHECK(build_complement(m, d, members, {50, 50}, 0.0).size() == 3);
}

TEST_CASE("partial strips are dropped and small images skipped") {
  const DatasetManifest m = manifest({{"a", "a.png", 130, 70}, {"b", "b.png", 20, 20}});
  const ComplementSet c = build_complement(m, {}, {}, {50, 50}, 0.2);
  CHECK(c.size() == 2);
  CHECK(c.warnings.size() == 1);
  CHECK(c.tile == TileSize{50, 50});
  CHECK_THROWS_AS(build_complement(m, {}, {}, {0, 50}, 0.2), Error);
  CHECK_THROWS_AS(build_complement(m, {}, {}, {50, 50}, 1.5), Error);
}

TEST_CASE("average box") {
  const std::vector<Detection> d = {{"a", {0, 0, 10, 30}, 0.9}, {"a", {0, 0, 21, 41}, 0.9}, {"a", {0, 0, 2, 3}, 0.9}};
  CHECK(average_box(d, std::vector<std::size_t>{0, 1}) == TileSize{16, 36});
  CHECK(average_box(d, std::vector<std::size_t>{2}) == TileSize{8, 8});
  CHECK_THROWS_AS(average_box(d, std::vector<std::size_t>{}), Error);
}

TEST_CASE("complement dump") {
  const fs::path p = fs::temp_directory_path() / "testdrive_complement.csv";
  const ComplementSet c = build_complement(manifest({{"a", "a.png", 100, 50}}), {}, {}, {50, 50}, 0.2);
  write_complement(p, c);
  std::ifstream in(p);
  std::string all((std::istreambuf_iterator<char>(in)), {});
  CHECK(all.find("a,50,0,50,50") != std::string::npos);
}
