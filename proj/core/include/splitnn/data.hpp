#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "splitnn/rng.hpp"
#include "splitnn/tensor.hpp"

namespace splitnn {

// Per-channel statistics of the training split, applied unchanged to both
// splits when normalizing.
struct ChannelStats {
  std::array<double, 3> mean{0, 0, 0};
  std::array<double, 3> stddev{1, 1, 1};
};

// Images are stored as raw bytes in plane order (R plane, G plane, B plane,
// each 32x32 row-major) and only widened to floats in [0,1] when a batch is
// gathered; this keeps datasets compact and makes byte-level round trips
// trivial.
struct Dataset {
  std::vector<uint8_t> pixels;  // size() * 3072
  std::vector<uint8_t> coarse;  // superclass byte per record (loader files)
  std::vector<int> labels;      // fine labels, < class_count
  int class_count = 0;
  std::string split_tag = "train";
  ChannelStats stats;

  int size() const { return static_cast<int>(labels.size()); }
  Tensor gather(const std::vector<int>& idx) const;  // (n,3,32,32) in [0,1]
  std::vector<int> gather_labels(const std::vector<int>& idx) const;
};

// Reads train.bin/test.bin from dir in the 3074-byte record layout (coarse
// label, fine label, 3072 pixel bytes). Fine labels are used; normalization
// stats come from the train split.
std::pair<Dataset, Dataset> load_cifar100(const std::string& dir);

// Class-conditional blob images: a smooth per-class template plus pixel
// noise, quantized to bytes. All randomness comes from rng, so equal states
// reproduce equal bytes.
Dataset synthetic_dataset(int class_count, int n_per_class, Rng& rng,
                          const std::string& split_tag = "train",
                          double pixel_noise = 0.08);

// Train/test pair sharing one set of class templates but disjoint noise
// streams; stats are computed on the train split and copied to test.
std::pair<Dataset, Dataset> synthetic_pair(int class_count, int train_per_class,
                                           int test_per_class, uint64_t seed,
                                           double pixel_noise = 0.08);

// Flat binary cache: "SPWD1" magic, class_count and record count as 32-bit
// little-endian, then per record one label byte and 3072 pixel bytes.
void save_dataset_cache(const Dataset& ds, const std::string& path);
Dataset load_dataset_cache(const std::string& path,
                           const std::string& split_tag = "train");

ChannelStats compute_channel_stats(const Dataset& train);

struct AugmentConfig {
  int pad = 4;
  int crop = 32;
  double hflip_prob = 0.5;
  bool normalize = true;
};

// Deterministic core of the augmentation: per-image crop offsets into the
// zero-padded image and optional horizontal flip.
Tensor crop_flip(const Tensor& batch, int pad, int crop,
                 const std::vector<int>& oy, const std::vector<int>& ox,
                 const std::vector<char>& flip);

// pad -> random crop -> random hflip -> normalize; training batches only.
Tensor augment(const Tensor& batch, const AugmentConfig& cfg,
               const ChannelStats& stats, Rng& rng);

// The evaluation path: normalization only.
Tensor normalize_batch(const Tensor& batch, const ChannelStats& stats);

// Seeded permutation chunked into batches; the final partial batch is kept.
std::vector<std::vector<int>> epoch_batches(int n, int batch_size, Rng& rng);

// Nearest-centroid classification accuracy on raw pixels; cheap separability
// probe for synthetic data.
double nearest_centroid_accuracy(const Dataset& train, const Dataset& test);

}  // namespace splitnn
