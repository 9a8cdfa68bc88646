#include "splitnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "splitnn/error.hpp"

namespace splitnn {

namespace {

constexpr int kImageBytes = 3 * 32 * 32;
constexpr int kRecordBytes = 2 + kImageBytes;

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  f.seekg(0, std::ios::end);
  const auto len = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(len));
  f.read(reinterpret_cast<char*>(bytes.data()),
         static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short read from " + path);
  return bytes;
}

Dataset parse_cifar(const std::string& path, const std::string& tag) {
  const std::vector<uint8_t> bytes = read_file(path);
  if (bytes.empty()) throw IoError(path + " is empty");
  if (bytes.size() % kRecordBytes != 0) {
    const size_t offset = bytes.size() - bytes.size() % kRecordBytes;
    throw IoError(path + " is truncated: trailing partial record at byte offset " +
                  std::to_string(offset));
  }
  Dataset ds;
  ds.split_tag = tag;
  ds.class_count = 100;
  const size_t n = bytes.size() / kRecordBytes;
  ds.pixels.reserve(n * kImageBytes);
  for (size_t i = 0; i < n; ++i) {
    const uint8_t* rec = bytes.data() + i * kRecordBytes;
    ds.coarse.push_back(rec[0]);
    if (rec[1] >= 100)
      throw IoError(path + ": fine label " + std::to_string(rec[1]) +
                    " out of range at record " + std::to_string(i));
    ds.labels.push_back(rec[1]);
    ds.pixels.insert(ds.pixels.end(), rec + 2, rec + kRecordBytes);
  }
  return ds;
}

void write_u32le(std::ofstream& f, uint32_t v) {
  const uint8_t b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16),
                        uint8_t(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32le(const uint8_t* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 |
         uint32_t(p[3]) << 24;
}

// Smooth per-class spatial pattern: a coarse 4x4 grid per channel, blown up
// 8x. Amplitudes are large relative to the pixel noise so classes separate
// linearly.
std::vector<double> make_template(Rng& rng) {
  std::vector<double> grid(3 * 4 * 4);
  for (auto& v : grid) v = rng.uniform(-0.22, 0.22);
  std::vector<double> t(kImageBytes);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        t[size_t(c * 1024 + y * 32 + x)] =
            grid[size_t(c * 16 + (y / 8) * 4 + (x / 8))];
  return t;
}

void append_images(Dataset& ds, const std::vector<std::vector<double>>& tpl,
                   int n_per_class, Rng& rng, double pixel_noise) {
  for (size_t k = 0; k < tpl.size(); ++k) {
    for (int i = 0; i < n_per_class; ++i) {
      ds.labels.push_back(static_cast<int>(k));
      for (int p = 0; p < kImageBytes; ++p) {
        const double v = 0.5 + tpl[k][size_t(p)] + rng.normal(0.0, pixel_noise);
        const double c = std::clamp(v, 0.0, 1.0);
        ds.pixels.push_back(static_cast<uint8_t>(std::lround(c * 255.0)));
      }
    }
  }
}

}  // namespace

Tensor Dataset::gather(const std::vector<int>& idx) const {
  Tensor out = Tensor::zeros({static_cast<int>(idx.size()), 3, 32, 32});
  auto& v = out.values();
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= size())
      throw ConfigError("dataset index out of range");
    const uint8_t* src = pixels.data() + size_t(idx[i]) * kImageBytes;
    for (int p = 0; p < kImageBytes; ++p)
      v[i * kImageBytes + size_t(p)] = src[p] / 255.0;
  }
  return out;
}

std::vector<int> Dataset::gather_labels(const std::vector<int>& idx) const {
  std::vector<int> out;
  out.reserve(idx.size());
  for (int i : idx) {
    if (i < 0 || i >= size()) throw ConfigError("dataset index out of range");
    out.push_back(labels[size_t(i)]);
  }
  return out;
}

std::pair<Dataset, Dataset> load_cifar100(const std::string& dir) {
  Dataset train = parse_cifar(dir + "/train.bin", "train");
  Dataset test = parse_cifar(dir + "/test.bin", "test");
  train.stats = compute_channel_stats(train);
  test.stats = train.stats;
  return {std::move(train), std::move(test)};
}

Dataset synthetic_dataset(int class_count, int n_per_class, Rng& rng,
                          const std::string& split_tag, double pixel_noise) {
  if (class_count < 2) throw ConfigError("need at least 2 classes");
  std::vector<std::vector<double>> tpl;
  for (int k = 0; k < class_count; ++k) tpl.push_back(make_template(rng));
  Dataset ds;
  ds.class_count = class_count;
  ds.split_tag = split_tag;
  append_images(ds, tpl, n_per_class, rng, pixel_noise);
  ds.stats = compute_channel_stats(ds);
  return ds;
}

std::pair<Dataset, Dataset> synthetic_pair(int class_count, int train_per_class,
                                           int test_per_class, uint64_t seed,
                                           double pixel_noise) {
  if (class_count < 2) throw ConfigError("need at least 2 classes");
  Rng tpl_rng = Rng::derive(seed, 0);
  std::vector<std::vector<double>> tpl;
  for (int k = 0; k < class_count; ++k) tpl.push_back(make_template(tpl_rng));

  Dataset train, test;
  train.class_count = test.class_count = class_count;
  train.split_tag = "train";
  test.split_tag = "test";
  Rng train_rng = Rng::derive(seed, 1);
  Rng test_rng = Rng::derive(seed, 2);
  append_images(train, tpl, train_per_class, train_rng, pixel_noise);
  append_images(test, tpl, test_per_class, test_rng, pixel_noise);
  train.stats = compute_channel_stats(train);
  test.stats = train.stats;
  return {std::move(train), std::move(test)};
}

void save_dataset_cache(const Dataset& ds, const std::string& path) {
  if (ds.class_count > 255)
    throw ConfigError("cache format stores labels as single bytes");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f.write("SPWD1", 5);
  write_u32le(f, static_cast<uint32_t>(ds.class_count));
  write_u32le(f, static_cast<uint32_t>(ds.size()));
  for (int i = 0; i < ds.size(); ++i) {
    const uint8_t label = static_cast<uint8_t>(ds.labels[size_t(i)]);
    f.write(reinterpret_cast<const char*>(&label), 1);
    f.write(reinterpret_cast<const char*>(ds.pixels.data() +
                                          size_t(i) * kImageBytes),
            kImageBytes);
  }
  if (!f) throw IoError("short write to " + path);
}

Dataset load_dataset_cache(const std::string& path,
                           const std::string& split_tag) {
  const std::vector<uint8_t> bytes = read_file(path);
  if (bytes.size() < 13 || std::memcmp(bytes.data(), "SPWD1", 5) != 0)
    throw IoError(path + " is not a dataset cache (bad magic)");
  const uint32_t classes = read_u32le(bytes.data() + 5);
  const uint32_t n = read_u32le(bytes.data() + 9);
  const size_t expect = 13 + size_t(n) * (1 + kImageBytes);
  if (bytes.size() != expect)
    throw IoError(path + " is truncated: expected " + std::to_string(expect) +
                  " bytes, got " + std::to_string(bytes.size()));
  Dataset ds;
  ds.class_count = static_cast<int>(classes);
  ds.split_tag = split_tag;
  for (uint32_t i = 0; i < n; ++i) {
    const uint8_t* rec = bytes.data() + 13 + size_t(i) * (1 + kImageBytes);
    if (rec[0] >= classes)
      throw IoError(path + ": label out of range at record " +
                    std::to_string(i));
    ds.labels.push_back(rec[0]);
    ds.pixels.insert(ds.pixels.end(), rec + 1, rec + 1 + kImageBytes);
  }
  ds.stats = compute_channel_stats(ds);
  return ds;
}

ChannelStats compute_channel_stats(const Dataset& train) {
  if (train.size() == 0) throw ConfigError("empty dataset");
  ChannelStats st;
  for (int c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    const size_t per = 1024;
    for (int i = 0; i < train.size(); ++i) {
      const uint8_t* img = train.pixels.data() + size_t(i) * kImageBytes;
      for (size_t p = 0; p < per; ++p) {
        const double v = img[size_t(c) * per + p] / 255.0;
        sum += v;
        sq += v * v;
      }
    }
    const double n = double(train.size()) * double(per);
    st.mean[size_t(c)] = sum / n;
    const double var = std::max(sq / n - st.mean[size_t(c)] * st.mean[size_t(c)], 1e-12);
    st.stddev[size_t(c)] = std::sqrt(var);
  }
  return st;
}

Tensor crop_flip(const Tensor& batch, int pad, int crop,
                 const std::vector<int>& oy, const std::vector<int>& ox,
                 const std::vector<char>& flip) {
  const int n = batch.dim(0), ch = batch.dim(1), h = batch.dim(2),
            w = batch.dim(3);
  if (int(oy.size()) != n || int(ox.size()) != n || int(flip.size()) != n)
    throw ConfigError("crop_flip: per-image draw count mismatch");
  Tensor out = Tensor::zeros({n, ch, crop, crop});
  const auto& src = batch.values();
  auto& dst = out.values();
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < ch; ++c) {
      for (int y = 0; y < crop; ++y) {
        const int sy = y + oy[size_t(i)] - pad;
        for (int x = 0; x < crop; ++x) {
          const int tx = flip[size_t(i)] ? crop - 1 - x : x;
          const int sx = x + ox[size_t(i)] - pad;
          double v = 0.0;
          if (sy >= 0 && sy < h && sx >= 0 && sx < w)
            v = src[size_t(((i * ch + c) * h + sy) * w + sx)];
          dst[size_t(((i * ch + c) * crop + y) * crop + tx)] = v;
        }
      }
    }
  }
  return out;
}

Tensor augment(const Tensor& batch, const AugmentConfig& cfg,
               const ChannelStats& stats, Rng& rng) {
  const int n = batch.dim(0), h = batch.dim(2);
  if (cfg.crop > h + 2 * cfg.pad)
    throw ConfigError("crop larger than the padded image");
  const int range = h + 2 * cfg.pad - cfg.crop + 1;
  std::vector<int> oy(static_cast<size_t>(n)), ox(static_cast<size_t>(n));
  std::vector<char> fl(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    oy[size_t(i)] = rng.uniform_int(range);
    ox[size_t(i)] = rng.uniform_int(range);
    fl[size_t(i)] = rng.bernoulli(cfg.hflip_prob) ? 1 : 0;
  }
  Tensor out = crop_flip(batch, cfg.pad, cfg.crop, oy, ox, fl);
  return cfg.normalize ? normalize_batch(out, stats) : out;
}

Tensor normalize_batch(const Tensor& batch, const ChannelStats& stats) {
  const int n = batch.dim(0), ch = batch.dim(1);
  const int hw = batch.dim(2) * batch.dim(3);
  Tensor out = Tensor::zeros(batch.shape());
  const auto& src = batch.values();
  auto& dst = out.values();
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < ch; ++c) {
      const double m = stats.mean[size_t(c)], s = stats.stddev[size_t(c)];
      const size_t base = size_t(i * ch + c) * size_t(hw);
      for (int p = 0; p < hw; ++p)
        dst[base + size_t(p)] = (src[base + size_t(p)] - m) / s;
    }
  return out;
}

std::vector<std::vector<int>> epoch_batches(int n, int batch_size, Rng& rng) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const std::vector<int> perm = rng.permutation(n);
  std::vector<std::vector<int>> out;
  for (int start = 0; start < n; start += batch_size) {
    const int end = std::min(n, start + batch_size);
    out.emplace_back(perm.begin() + start, perm.begin() + end);
  }
  return out;
}

double nearest_centroid_accuracy(const Dataset& train, const Dataset& test) {
  const int k = train.class_count;
  std::vector<std::vector<double>> centroid(size_t(k),
                                            std::vector<double>(kImageBytes, 0));
  std::vector<int> count(size_t(k), 0);
  for (int i = 0; i < train.size(); ++i) {
    auto& c = centroid[size_t(train.labels[size_t(i)])];
    const uint8_t* img = train.pixels.data() + size_t(i) * kImageBytes;
    for (int p = 0; p < kImageBytes; ++p) c[size_t(p)] += img[p] / 255.0;
    ++count[size_t(train.labels[size_t(i)])];
  }
  for (int j = 0; j < k; ++j) {
    if (count[size_t(j)] == 0) continue;
    for (auto& v : centroid[size_t(j)]) v /= count[size_t(j)];
  }
  int hits = 0;
  for (int i = 0; i < test.size(); ++i) {
    const uint8_t* img = test.pixels.data() + size_t(i) * kImageBytes;
    double best = std::numeric_limits<double>::max();
    int arg = 0;
    for (int j = 0; j < k; ++j) {
      double d = 0;
      for (int p = 0; p < kImageBytes; ++p) {
        const double diff = img[p] / 255.0 - centroid[size_t(j)][size_t(p)];
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        arg = j;
      }
    }
    hits += (arg == test.labels[size_t(i)]) ? 1 : 0;
  }
  return double(hits) / double(test.size());
}

}  // namespace splitnn
