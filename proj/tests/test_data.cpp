#include <doctest.h>

#include <algorithm>
#include <bit>
#include <fstream>
#include <set>

#include "diffdenoise/array_io.hpp"
#include "diffdenoise/data.hpp"
#include "diffdenoise/error.hpp"
#include "test_support.hpp"

using namespace diffdenoise;

TEST_SUITE("data") {
  TEST_CASE("image patches enforce the minimum side and shape agreement") {
    CHECK_THROWS_AS(ImagePatch(15, 32), ShapeError);
    CHECK_THROWS_AS(ImagePatch(16, 16, std::vector<float>(10)), ShapeError);
    CHECK_THROWS_AS(ImagePatch(16, 16) - ImagePatch(16, 20), ShapeError);
    const auto img = test_support::ramp(20, 24);
    const auto window = crop(img, 2, 3, 16, 16);
    CHECK(window(0, 0) == img(2, 3));
    CHECK(window(15, 15) == img(17, 18));
    CHECK_THROWS_AS(crop(img, 5, 0, 16, 16), ShapeError);
  }

  TEST_CASE("phantoms are deterministic and inside [0.05, 0.95]") {
    const auto a = generate_phantoms(6, 64, 11);
    const auto b = generate_phantoms(6, 64, 11);
    const auto c = generate_phantoms(6, 64, 12);
    REQUIRE(a.size() == 6);
    CHECK(a == b);
    CHECK_FALSE(a == c);
    std::set<std::vector<float>> distinct;
    for (const auto& p : a) {
      CHECK(p.height() == 64);
      CHECK(p.min_value() >= 0.05F);
      CHECK(p.max_value() <= 0.95F);
      CHECK(p.max_value() - p.min_value() > 0.3F);
      distinct.insert(p.storage());
    }
    CHECK(distinct.size() == 6);
    CHECK_THROWS_AS(generate_phantoms(0, 64, 1), ConfigError);
  }

  TEST_CASE("normalization maps min and max onto 0 and 1") {
    const auto img = test_support::random_image(32, 32, 4, 3.0F, 7.0F);
    const auto n = normalize_unit_range(img);
    CHECK(n.min_value() == 0.0F);
    CHECK(n.max_value() == doctest::Approx(1.0).epsilon(1e-6));
    CHECK_THROWS_AS(normalize_unit_range(ImagePatch(16, 16, 2.0F)), DomainError);
  }

  TEST_CASE("patchify tiles row-major and drops partial edges") {
    const auto img = test_support::ramp(70, 50);
    const auto patches = patchify(img, 32, 16);
    // Rows: tops 0,16,32 fit in 70; cols: lefts 0,16 fit in 50.
    REQUIRE(patches.size() == 6);
    CHECK(patches[1] == crop(img, 0, 16, 32, 32));
    CHECK(patches[5] == crop(img, 32, 16, 32, 32));
    const auto normalized = normalize_and_patchify(img, 16, 16);
    CHECK(normalized.size() == 4 * 3);
    CHECK(normalized.front().min_value() == 0.0F);
    CHECK_THROWS_AS(patchify(img, 8, 8), ConfigError);
  }

  TEST_CASE("splits are disjoint, complete and seeded") {
    std::vector<std::string> ids;
    for (int i = 0; i < 40; ++i) ids.push_back(patch_id(i));
    const auto s = assign_splits(ids, {25, 5, 10}, 3);
    CHECK(s.train.size() == 25);
    CHECK(s.val.size() == 5);
    CHECK(s.test.size() == 10);
    std::set<std::string> all;
    for (auto split : {Split::train, Split::val, Split::test}) all.insert(s.of(split).begin(), s.of(split).end());
    CHECK(all.size() == 40);
    CHECK(assign_splits(ids, {25, 5, 10}, 3).test == s.test);
    CHECK(assign_splits(ids, {25, 5, 10}, 4).test != s.test);
    CHECK(std::is_sorted(s.train.begin(), s.train.end()));
    CHECK_THROWS_AS(assign_splits(ids, {30, 5, 10}, 3), ConfigError);
    CHECK(patch_id(7) == "p00007");
  }

  TEST_CASE("array files round-trip bit-exactly") {
    const auto dir = test_support::scratch_dir("array_io");
    auto img = test_support::random_image(17, 23, 9, -2.0F, 3.0F);
    img(0, 0) = -0.0F;
    const auto path = dir / "a.ddn";
    save_array(path, img);
    const auto back = load_array(path);
    CHECK(back.height() == 17);
    CHECK(back.width() == 23);
    CHECK(std::equal(back.values().begin(), back.values().end(), img.values().begin(),
                     [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); }));
    CHECK(std::filesystem::file_size(path) == array_format::kHeaderBytes + 17 * 23 * 4);
  }

  TEST_CASE("malformed arrays are rejected") {
    const auto bytes = encode_array(test_support::ramp(16, 16));
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_array(bad_magic), FormatError);
    auto bad_version = bytes;
    bad_version[8] = 9;
    CHECK_THROWS_AS(decode_array(bad_version), FormatError);
    CHECK_THROWS_AS(decode_array(bytes.substr(0, bytes.size() - 1)), TruncatedError);
    CHECK_THROWS_AS(decode_array(bytes.substr(0, 10)), TruncatedError);
    CHECK_THROWS_AS(decode_array(bytes + "x"), FormatError);
    CHECK_THROWS_AS(load_array("/nonexistent/file.ddn"), FormatError);
  }

  TEST_CASE("png round trip through 16 bits") {
    const auto dir = test_support::scratch_dir("png");
    const auto img = test_support::ramp(20, 30);
    save_png16(dir / "x.png", img);
    const auto back = load_png(dir / "x.png");
    REQUIRE(back.same_shape(img));
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(back.values()[i] == doctest::Approx(img.values()[i]).epsilon(1e-4));
  }

  TEST_CASE("manifests round-trip and verify their files") {
    const auto dir = test_support::scratch_dir("manifest");
    DatasetManifest m;
    m.split = Split::test;
    m.source_fingerprint = "abc";
    NoiseSpec spec;
    spec.family = NoiseFamily::gamma;
    spec.seed = 12;
    m.entries.push_back({"p00001", "clean/p00001.ddn", "noisy/p00001.ddn", spec});
    m.save(dir / "manifest.json");
    const auto back = DatasetManifest::load(dir / "manifest.json");
    CHECK(back.split == Split::test);
    CHECK(back.source_fingerprint == "abc");
    REQUIRE(back.entries.size() == 1);
    CHECK(back.entries[0].spec == spec);
    CHECK_THROWS_AS(back.verify_files(dir), FormatError);
    save_array(dir / "clean/p00001.ddn", test_support::ramp(16, 16));
    save_array(dir / "noisy/p00001.ddn", test_support::ramp(16, 16));
    CHECK_NOTHROW(back.verify_files(dir));

    std::ofstream(dir / "broken.json") << "{\"split\": \"test\"}";
    CHECK_THROWS_AS(DatasetManifest::load(dir / "broken.json"), FormatError);
    CHECK_THROWS_AS(parse_split("holdout"), FormatError);
  }
}
