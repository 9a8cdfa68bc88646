#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "splitnn/data.hpp"
#include "splitnn/error.hpp"

using namespace splitnn;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto p = fs::temp_directory_path() / "splitnn_data_test";
  fs::create_directories(p);
  return p;
}

std::vector<uint8_t> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("synthetic pair: sizes, labels, determinism") {
  auto [train, test] = synthetic_pair(4, 500, 100, 42);
  CHECK(train.size() == 2000);
  CHECK(test.size() == 400);
  CHECK(train.class_count == 4);
  CHECK(train.pixels.size() == 2000u * 3072u);
  for (int l : train.labels) {
    CHECK(l >= 0);
    CHECK(l < 4);
  }
  // Per-class counts are exact, not sampled.
  std::vector<int> counts(4, 0);
  for (int l : train.labels) ++counts[static_cast<size_t>(l)];
  for (int c : counts) CHECK(c == 500);

  auto [train2, test2] = synthetic_pair(4, 500, 100, 42);
  CHECK(train2.pixels == train.pixels);
  CHECK(test2.pixels == test.pixels);
  CHECK(train2.labels == train.labels);

  auto [train3, test3] = synthetic_pair(4, 500, 100, 43);
  CHECK(train3.pixels != train.pixels);

  // Same templates, different noise: train and test images differ even at
  // matching positions.
  CHECK(train.pixels != test.pixels);
}

TEST_CASE("synthetic classes are linearly separable enough") {
  auto [train, test] = synthetic_pair(4, 500, 100, 7);
  const double acc = nearest_centroid_accuracy(train, test);
  CHECK(acc > 0.60);
}

TEST_CASE("gather scales bytes into [0,1] floats") {
  auto [train, test] = synthetic_pair(2, 3, 1, 1);
  Tensor x = train.gather({0, 5});
  CHECK(x.shape() == Shape{2, 3, 32, 32});
  for (double v : x.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  // Spot-check an exact byte conversion.
  CHECK(x.values()[0] == train.pixels[0] / 255.0);
  CHECK(train.gather_labels({0, 5}) ==
        std::vector<int>{train.labels[0], train.labels[5]});
  CHECK_THROWS_AS(train.gather({99}), ConfigError);
}

TEST_CASE("normalization centers the training split") {
  auto [train, test] = synthetic_pair(4, 200, 50, 11);
  std::vector<int> all(static_cast<size_t>(train.size()));
  for (int i = 0; i < train.size(); ++i) all[static_cast<size_t>(i)] = i;
  Tensor x = normalize_batch(train.gather(all), train.stats);
  const int n = x.dim(0);
  for (int c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i)
      for (int p = 0; p < 1024; ++p) {
        const double v =
            x.values()[static_cast<size_t>((i * 3 + c) * 1024 + p)];
        sum += v;
        sq += v * v;
      }
    const double cnt = double(n) * 1024.0;
    const double mean = sum / cnt;
    const double var = sq / cnt - mean * mean;
    CHECK(mean == doctest::Approx(0.0).epsilon(0.02));
    CHECK(std::sqrt(var) == doctest::Approx(1.0).epsilon(0.01));
  }
}

TEST_CASE("crop_flip identity offsets and involutive flip") {
  Rng rng(3);
  Tensor x = Tensor::zeros({2, 3, 32, 32});
  for (auto& v : x.values()) v = rng.uniform();

  // Offset equal to the pad recovers the original image exactly.
  Tensor same = crop_flip(x, 4, 32, {4, 4}, {4, 4}, {0, 0});
  CHECK(same.values() == x.values());

  // Flipping twice is the identity.
  Tensor f1 = crop_flip(x, 4, 32, {4, 4}, {4, 4}, {1, 1});
  CHECK(f1.values() != x.values());
  Tensor f2 = crop_flip(f1, 4, 32, {4, 4}, {4, 4}, {1, 1});
  CHECK(f2.values() == x.values());

  // Offset 0 shifts content into the zero padding.
  Tensor shifted = crop_flip(x, 4, 32, {0, 0}, {0, 0}, {0, 0});
  CHECK(shifted.values()[0] == 0.0);

  CHECK_THROWS_AS(crop_flip(x, 4, 32, {4}, {4, 4}, {0, 0}), ConfigError);
}

TEST_CASE("augment draws per-image randomness and normalizes") {
  auto [train, test] = synthetic_pair(2, 8, 2, 5);
  Tensor x = train.gather({0, 1, 2, 3});
  AugmentConfig cfg;
  Rng r1(9), r2(9), r3(10);
  Tensor a = augment(x, cfg, train.stats, r1);
  Tensor b = augment(x, cfg, train.stats, r2);
  Tensor c = augment(x, cfg, train.stats, r3);
  CHECK(a.shape() == Shape{4, 3, 32, 32});
  CHECK(a.values() == b.values());
  CHECK(a.values() != c.values());

  AugmentConfig plain;
  plain.normalize = false;
  Rng r4(9);
  Tensor d = augment(x, plain, train.stats, r4);
  for (double v : d.values()) CHECK(v >= 0.0);
}

TEST_CASE("epoch batches partition a permutation") {
  Rng rng(1);
  auto batches = epoch_batches(10, 4, rng);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size() == 4);
  CHECK(batches[1].size() == 4);
  CHECK(batches[2].size() == 2);
  std::vector<char> seen(10, 0);
  for (const auto& b : batches)
    for (int i : b) {
      CHECK(i >= 0);
      CHECK(i < 10);
      CHECK(!seen[static_cast<size_t>(i)]);
      seen[static_cast<size_t>(i)] = 1;
    }
  Rng rng2(1);
  CHECK(epoch_batches(10, 4, rng2) == batches);
  Rng rng3(1);
  CHECK_THROWS_AS(epoch_batches(10, 0, rng3), ConfigError);
}

TEST_CASE("record-format files parse and survive byte round trips") {
  auto dir = temp_dir();
  // Two records in the on-disk layout: coarse byte, fine byte, 3072 pixels.
  std::vector<uint8_t> blob;
  for (int rec = 0; rec < 2; ++rec) {
    blob.push_back(static_cast<uint8_t>(rec));       // coarse
    blob.push_back(static_cast<uint8_t>(10 + rec));  // fine
    for (int p = 0; p < 3072; ++p)
      blob.push_back(static_cast<uint8_t>((rec * 31 + p) % 256));
  }
  for (const char* name : {"train.bin", "test.bin"}) {
    std::ofstream f(dir / name, std::ios::binary);
    f.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size()));
  }

  auto [train, test] = load_cifar100(dir.string());
  CHECK(train.size() == 2);
  CHECK(test.size() == 2);
  CHECK(train.class_count == 100);
  CHECK(train.labels == std::vector<int>{10, 11});
  CHECK(train.coarse == std::vector<uint8_t>{0, 1});
  CHECK(train.pixels[0] == blob[2]);
  CHECK(train.pixels[3072] == blob[3074 + 2]);
  CHECK(train.stats.mean[0] > 0.0);

  SUBCASE("truncated file names the offending byte offset") {
    std::vector<uint8_t> cut(blob.begin(), blob.begin() + 3074 + 100);
    std::ofstream f(dir / "train.bin", std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(cut.data()),
            static_cast<std::streamsize>(cut.size()));
    f.close();
    try {
      load_cifar100(dir.string());
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("3074") != std::string::npos);
    }
    // Restore for later subcases.
    std::ofstream g(dir / "train.bin", std::ios::binary | std::ios::trunc);
    g.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size()));
  }

  SUBCASE("missing directory") {
    CHECK_THROWS_AS(load_cifar100((dir / "nope").string()), IoError);
  }
}

TEST_CASE("dataset cache round trip and tamper detection") {
  auto dir = temp_dir();
  auto path = (dir / "cache.spwd").string();
  auto [train, test] = synthetic_pair(4, 20, 5, 77);
  save_dataset_cache(train, path);

  Dataset back = load_dataset_cache(path, "train");
  CHECK(back.pixels == train.pixels);
  CHECK(back.labels == train.labels);
  CHECK(back.class_count == train.class_count);
  CHECK(back.stats.mean == train.stats.mean);

  auto bytes = slurp(path);
  CHECK(bytes.size() == 13 + train.pixels.size() + train.labels.size());
  CHECK(std::memcmp(bytes.data(), "SPWD1", 5) == 0);

  SUBCASE("bad magic") {
    bytes[0] = 'X';
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    f.close();
    CHECK_THROWS_AS(load_dataset_cache(path), IoError);
  }
  SUBCASE("truncation") {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size() - 7));
    f.close();
    CHECK_THROWS_AS(load_dataset_cache(path), IoError);
  }
  SUBCASE("label out of range") {
    bytes[13] = 200;  // first record's label byte; class_count is 4
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    f.close();
    CHECK_THROWS_AS(load_dataset_cache(path), IoError);
  }
}

TEST_CASE("single-rng synthetic dataset is reproducible") {
  Rng a(5), b(5);
  Dataset d1 = synthetic_dataset(3, 10, a, "train");
  Dataset d2 = synthetic_dataset(3, 10, b, "train");
  CHECK(d1.pixels == d2.pixels);
  CHECK(d1.size() == 30);
  CHECK_THROWS_AS(synthetic_dataset(1, 10, a), ConfigError);
}
