#pragma once

// Binary named-tensor checkpoints.
//
//   "LODS" | version u32 | entry count u64 | entries...
//   entry: name length u32 | UTF-8 name | rank u32 | extents u64[rank] | dtype u8 | values
//
// All integers and values are little-endian; dtype 1 = f32, 2 = f64.

#include <cstdint>
#include <cstring>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lods/denoiser.hpp"
#include "lods/gradcore.hpp"

namespace lods {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

struct CheckpointEntry {
  std::string name;
  Shape shape;
  DType dtype = DType::F64;
  std::vector<unsigned char> bytes;  // little-endian values
};

class Checkpoint {
 public:
  template <class Scalar>
  void put(const std::string& name, const Tensor<Scalar>& t) {
    static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
    CheckpointEntry e;
    e.name = name;
    e.shape = t.shape();
    e.dtype = std::is_same_v<Scalar, float> ? DType::F32 : DType::F64;
    e.bytes.resize(static_cast<std::size_t>(t.size()) * sizeof(Scalar));
    std::memcpy(e.bytes.data(), t.value().data(), e.bytes.size());
    set(std::move(e));
  }

  void put_scalar(const std::string& name, double v) { put(name, Tensor<double>::scalar(v)); }

  /// Converts from the stored dtype when it differs from Scalar.
  template <class Scalar>
  Tensor<Scalar> get(const std::string& name) const {
    const CheckpointEntry& e = entry(name);
    Tensor<Scalar> t(e.shape);
    const std::size_t n = static_cast<std::size_t>(t.size());
    if (e.dtype == DType::F32) {
      std::vector<float> v(n);
      std::memcpy(v.data(), e.bytes.data(), n * sizeof(float));
      for (std::size_t i = 0; i < n; ++i) t.data()[i] = static_cast<Scalar>(v[i]);
    } else {
      std::vector<double> v(n);
      std::memcpy(v.data(), e.bytes.data(), n * sizeof(double));
      for (std::size_t i = 0; i < n; ++i) t.data()[i] = static_cast<Scalar>(v[i]);
    }
    return t;
  }

  double get_scalar(const std::string& name) const { return get<double>(name).item(); }

  bool contains(const std::string& name) const;
  const CheckpointEntry& entry(const std::string& name) const;
  const std::vector<CheckpointEntry>& entries() const { return entries_; }
  void set(CheckpointEntry e);

 private:
  std::vector<CheckpointEntry> entries_;
};

/// Host must be little-endian; the format is written byte-for-byte.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);

/// Throws on bad magic, unsupported version, truncation or trailing bytes.
Checkpoint load_checkpoint(const std::string& path);

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes, const std::string& source = "<memory>");

/// Network weights plus the configuration and schedule needed to rebuild it.
template <class Scalar>
void store_denoiser(Checkpoint& ckpt, NetworkDenoiser<Scalar>& net) {
  const auto& c = net.config();
  const auto& s = net.schedule();
  ckpt.put_scalar("config.data_dim", static_cast<double>(c.data_dim));
  ckpt.put_scalar("config.num_classes", c.num_classes);
  ckpt.put_scalar("config.width", static_cast<double>(c.width));
  ckpt.put_scalar("config.hidden_layers", c.hidden_layers);
  ckpt.put_scalar("config.embed_dim", static_cast<double>(c.embed_dim));
  ckpt.put_scalar("config.time_dim", static_cast<double>(c.time_dim));
  ckpt.put_scalar("schedule.kind", s.kind() == ScheduleKind::LinearBeta ? 0.0 : 1.0);
  ckpt.put_scalar("schedule.steps", s.steps());
  ckpt.put_scalar("schedule.beta_min", s.beta_min());
  ckpt.put_scalar("schedule.beta_max", s.beta_max());
  for (auto& [name, p] : net.named_parameters()) ckpt.put(name, *p);
}

template <class Scalar>
std::unique_ptr<NetworkDenoiser<Scalar>> restore_denoiser(const Checkpoint& ckpt) {
  if (!ckpt.contains("config.data_dim")) throw std::runtime_error("checkpoint holds no denoiser");
  NetworkConfig c;
  c.data_dim = static_cast<Index>(ckpt.get_scalar("config.data_dim"));
  c.num_classes = static_cast<int>(ckpt.get_scalar("config.num_classes"));
  c.width = static_cast<Index>(ckpt.get_scalar("config.width"));
  c.hidden_layers = static_cast<int>(ckpt.get_scalar("config.hidden_layers"));
  c.embed_dim = static_cast<Index>(ckpt.get_scalar("config.embed_dim"));
  c.time_dim = static_cast<Index>(ckpt.get_scalar("config.time_dim"));
  auto sched = make_schedule(ckpt.get_scalar("schedule.kind") == 0.0 ? ScheduleKind::LinearBeta : ScheduleKind::Cosine,
                             static_cast<int>(ckpt.get_scalar("schedule.steps")), ckpt.get_scalar("schedule.beta_min"),
                             ckpt.get_scalar("schedule.beta_max"));
  auto net = std::make_unique<NetworkDenoiser<Scalar>>(c, std::move(sched), 0);
  for (auto& [name, p] : net->named_parameters()) {
    Tensor<Scalar> v = ckpt.get<Scalar>(name);
    if (v.shape() != p->shape())
      throw std::runtime_error("checkpoint tensor '" + name + "' has shape " + to_string(v.shape()) + ", expected " +
                               to_string(p->shape()));
    p->value() = v.value();
  }
  return net;
}

}  // namespace lods
