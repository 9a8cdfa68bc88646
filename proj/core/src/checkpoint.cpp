#include "splitnn/checkpoint.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

#include "json.hpp"
#include "splitnn/error.hpp"

namespace splitnn {
namespace {

using nlohmann::json;

constexpr char kMagic[6] = {'S', 'P', 'C', 'K', '1', '\0'};

uint32_t block_crc(const std::vector<double>& data) {
  return static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const unsigned char*>(data.data()),
            static_cast<uInt>(data.size() * sizeof(double))));
}

// Doubles are stored as their in-memory little-endian byte pattern; this
// codebase targets little-endian hosts only.
void append_doubles(std::string& out, const std::vector<double>& v) {
  const size_t start = out.size();
  out.resize(start + v.size() * sizeof(double));
  std::memcpy(out.data() + start, v.data(), v.size() * sizeof(double));
}

double num_or_nan(const json& j) {
  return j.is_number() ? j.get<double>()
                       : std::numeric_limits<double>::quiet_NaN();
}

json metrics_to_json(const std::vector<EpochMetric>& metrics) {
  json arr = json::array();
  for (const auto& m : metrics) {
    arr.push_back({{"phase", m.phase},
                   {"epoch", m.epoch},
                   {"lr", m.lr},
                   {"loss", m.loss},
                   {"accuracy", m.accuracy},
                   {"flops", m.flops}});
  }
  return arr;
}

std::vector<EpochMetric> metrics_from_json(const json& arr) {
  std::vector<EpochMetric> out;
  for (const auto& j : arr) {
    EpochMetric m;
    m.phase = j.at("phase").get<std::string>();
    m.epoch = j.at("epoch").get<int>();
    m.lr = num_or_nan(j.at("lr"));
    m.loss = num_or_nan(j.at("loss"));
    m.accuracy = num_or_nan(j.at("accuracy"));
    m.flops = j.at("flops").get<long long>();
    out.push_back(std::move(m));
  }
  return out;
}

std::string keep_to_string(const std::vector<char>& keep) {
  std::string s;
  s.reserve(keep.size());
  for (char k : keep) s.push_back(k ? '1' : '0');
  return s;
}

std::vector<char> keep_from_string(const std::string& s) {
  std::vector<char> keep;
  keep.reserve(s.size());
  for (char c : s) keep.push_back(c == '1' ? 1 : 0);
  return keep;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  json m;
  m["version"] = ck.version;
  m["phase"] = ck.phase;
  m["config"] = ck.config_json;

  json mask;
  mask["layers"] = ck.mask.layer_names;
  json keeps = json::array();
  for (const auto& k : ck.mask.keep) keeps.push_back(keep_to_string(k));
  mask["keep"] = std::move(keeps);
  m["mask"] = std::move(mask);

  m["metrics"] = metrics_to_json(ck.metrics);
  m["rng"] = ck.rng_states;

  // Data section: tensors first, then optimizer buffers, both in map order
  // so identical checkpoints serialize to identical bytes.
  std::string data;
  json tensors = json::array();
  for (const auto& [name, entry] : ck.tensors) {
    int64_t numel = 1;
    for (int d : entry.shape) numel *= d;
    if (numel != static_cast<int64_t>(entry.data.size()))
      throw StateError("checkpoint tensor '" + name +
                       "' data does not match its shape");
    tensors.push_back({{"name", name},
                       {"shape", entry.shape},
                       {"offset", data.size()},
                       {"crc", block_crc(entry.data)}});
    append_doubles(data, entry.data);
  }
  m["tensors"] = std::move(tensors);

  json vels = json::array();
  for (const auto& [name, buf] : ck.velocities) {
    vels.push_back({{"name", name},
                    {"count", buf.size()},
                    {"offset", data.size()},
                    {"crc", block_crc(buf)}});
    append_doubles(data, buf);
  }
  m["velocities"] = std::move(vels);

  const std::string manifest = m.dump();
  if (manifest.size() > std::numeric_limits<uint32_t>::max())
    throw StateError("checkpoint manifest too large");

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint file " + tmp);
    f.write(kMagic, sizeof(kMagic));
    const uint32_t len = static_cast<uint32_t>(manifest.size());
    const unsigned char lb[4] = {
        static_cast<unsigned char>(len & 0xff),
        static_cast<unsigned char>((len >> 8) & 0xff),
        static_cast<unsigned char>((len >> 16) & 0xff),
        static_cast<unsigned char>((len >> 24) & 0xff)};
    f.write(reinterpret_cast<const char*>(lb), 4);
    f.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!f) throw IoError("short write to checkpoint file " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("cannot move checkpoint into place at " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint file " + path);
  std::string raw((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());

  if (raw.size() < sizeof(kMagic) + 4 ||
      std::memcmp(raw.data(), kMagic, sizeof(kMagic)) != 0)
    throw IoError("not a checkpoint file: " + path);
  const unsigned char* lb =
      reinterpret_cast<const unsigned char*>(raw.data() + sizeof(kMagic));
  const uint32_t mlen = uint32_t(lb[0]) | uint32_t(lb[1]) << 8 |
                        uint32_t(lb[2]) << 16 | uint32_t(lb[3]) << 24;
  const size_t data_start = sizeof(kMagic) + 4 + mlen;
  if (raw.size() < data_start)
    throw IoError("truncated checkpoint manifest in " + path);

  json m;
  try {
    m = json::parse(raw.begin() + sizeof(kMagic) + 4,
                    raw.begin() + static_cast<std::ptrdiff_t>(data_start));
  } catch (const json::exception& e) {
    throw IoError("corrupt checkpoint manifest in " + path + ": " + e.what());
  }

  Checkpoint ck;
  try {
    ck.version = m.at("version").get<int>();
    if (ck.version != kCheckpointVersion)
      throw IoError("unsupported checkpoint version " +
                    std::to_string(ck.version) + " in " + path);
    ck.phase = m.at("phase").get<std::string>();
    ck.config_json = m.at("config").get<std::string>();
    ck.mask.layer_names =
        m.at("mask").at("layers").get<std::vector<std::string>>();
    for (const auto& s : m.at("mask").at("keep"))
      ck.mask.keep.push_back(keep_from_string(s.get<std::string>()));
    ck.metrics = metrics_from_json(m.at("metrics"));
    ck.rng_states =
        m.at("rng").get<std::map<std::string, std::string>>();

    const size_t avail = raw.size() - data_start;
    auto read_block = [&](const std::string& name, size_t offset, size_t count,
                          uint32_t crc) {
      const size_t bytes = count * sizeof(double);
      if (offset > avail || bytes > avail - offset)
        throw IoError("truncated checkpoint block '" + name + "' in " + path);
      std::vector<double> v(count);
      std::memcpy(v.data(), raw.data() + data_start + offset, bytes);
      if (block_crc(v) != crc)
        throw IoError("checksum mismatch in checkpoint block '" + name +
                      "' in " + path);
      return v;
    };

    for (const auto& t : m.at("tensors")) {
      const std::string name = t.at("name").get<std::string>();
      TensorEntry e;
      e.shape = t.at("shape").get<Shape>();
      int64_t numel = 1;
      for (int d : e.shape) numel *= d;
      e.data = read_block(name, t.at("offset").get<size_t>(),
                          static_cast<size_t>(numel),
                          t.at("crc").get<uint32_t>());
      ck.tensors[name] = std::move(e);
    }
    for (const auto& t : m.at("velocities")) {
      const std::string name = t.at("name").get<std::string>();
      ck.velocities[name] =
          read_block(name, t.at("offset").get<size_t>(),
                     t.at("count").get<size_t>(), t.at("crc").get<uint32_t>());
    }
  } catch (const json::exception& e) {
    throw IoError("corrupt checkpoint manifest in " + path + ": " + e.what());
  }
  return ck;
}

void capture_sequential(const Sequential& net, Checkpoint& ck) {
  for (const auto& p : net.params())
    ck.tensors[p.name] = TensorEntry{p.tensor.shape(), p.tensor.values()};
  for (const auto& l : net.layers()) {
    auto bn = std::dynamic_pointer_cast<BatchNormLayer>(l);
    if (!bn || !bn->stats.initialized) continue;
    const int c = static_cast<int>(bn->stats.mean.size());
    ck.tensors["stats/" + l->name() + ".running_mean"] =
        TensorEntry{{c}, bn->stats.mean};
    ck.tensors["stats/" + l->name() + ".running_var"] =
        TensorEntry{{c}, bn->stats.var};
  }
}

void restore_sequential(const Sequential& net, const Checkpoint& ck) {
  for (const auto& p : net.params()) {
    auto it = ck.tensors.find(p.name);
    if (it == ck.tensors.end())
      throw StateError("checkpoint has no tensor '" + p.name + "'");
    if (it->second.shape != p.tensor.shape())
      throw ShapeError("checkpoint tensor '" + p.name + "' has shape " +
                       shape_str(it->second.shape) + ", model expects " +
                       shape_str(p.tensor.shape()));
    Tensor t = p.tensor;
    t.values() = it->second.data;
  }
  for (const auto& l : net.layers()) {
    auto bn = std::dynamic_pointer_cast<BatchNormLayer>(l);
    if (!bn) continue;
    auto im = ck.tensors.find("stats/" + l->name() + ".running_mean");
    auto iv = ck.tensors.find("stats/" + l->name() + ".running_var");
    if (im == ck.tensors.end() || iv == ck.tensors.end()) continue;
    const size_t c = bn->stats.mean.empty() ? bn->gamma.values().size()
                                            : bn->stats.mean.size();
    if (im->second.data.size() != c || iv->second.data.size() != c)
      throw ShapeError("checkpoint running stats for '" + l->name() +
                       "' have " + std::to_string(im->second.data.size()) +
                       " channels, model expects " + std::to_string(c));
    bn->stats.mean = im->second.data;
    bn->stats.var = iv->second.data;
    bn->stats.initialized = true;
  }
}

void capture_split_model(const SplitModel& model, Checkpoint& ck) {
  capture_sequential(model.device_prefix(), ck);
  capture_sequential(model.encoder(), ck);
  capture_sequential(model.decoder(), ck);
  capture_sequential(model.server_suffix(), ck);
}

void restore_split_model(SplitModel& model, const Checkpoint& ck) {
  restore_sequential(model.device_prefix(), ck);
  restore_sequential(model.encoder(), ck);
  restore_sequential(model.decoder(), ck);
  restore_sequential(model.server_suffix(), ck);
}

void require_phase(const Checkpoint& ck,
                   const std::vector<std::string>& allowed,
                   const std::string& action) {
  for (const auto& a : allowed)
    if (ck.phase == a) return;
  std::string want;
  for (size_t i = 0; i < allowed.size(); ++i)
    want += (i ? " or " : "") + allowed[i];
  throw StateError("cannot " + action + " from a '" + ck.phase +
                   "' checkpoint (needs " + want + ")");
}

}  // namespace splitnn
