#include "lods/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>

namespace lods {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

const CheckpointEntry& Checkpoint::entry(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw std::runtime_error("checkpoint has no tensor named '" + name + "'");
}

void Checkpoint::set(CheckpointEntry e) {
  for (auto& old : entries_)
    if (old.name == e.name) {
      old = std::move(e);
      return;
    }
  entries_.push_back(std::move(e));
}

namespace {

template <class T>
void write_le(std::vector<unsigned char>& out, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.insert(out.end(), b, b + sizeof(T));
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, const std::string& source) : bytes_(bytes), source_(source) {}

  template <class T>
  T read(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  void take(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n)
      throw std::runtime_error(source_ + ": truncated checkpoint while reading " + what);
  }

  const std::vector<unsigned char>& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<unsigned char> out = {'L', 'O', 'D', 'S'};
  write_le<std::uint32_t>(out, kCheckpointVersion);
  write_le<std::uint64_t>(out, ckpt.entries().size());
  for (const auto& e : ckpt.entries()) {
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (Index x : e.shape) write_le<std::uint64_t>(out, static_cast<std::uint64_t>(x));
    out.push_back(static_cast<unsigned char>(e.dtype));
    out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes, const std::string& source) {
  Reader r(bytes, source);
  char magic[4];
  r.take(magic, 4, "magic");
  if (std::memcmp(magic, "LODS", 4) != 0) throw std::runtime_error(source + ": not a checkpoint (bad magic)");
  const auto version = r.read<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw std::runtime_error(source + ": unsupported version " + std::to_string(version) + " (this build reads " +
                             std::to_string(kCheckpointVersion) + ")");
  const auto count = r.read<std::uint64_t>("entry count");
  Checkpoint ckpt;
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = r.read<std::uint32_t>("name length");
    if (len > r.remaining()) throw std::runtime_error(source + ": truncated checkpoint while reading name");
    e.name.resize(len);
    r.take(e.name.data(), len, "name");
    const auto rank = r.read<std::uint32_t>("rank");
    if (static_cast<std::uint64_t>(rank) * 8 > r.remaining())
      throw std::runtime_error(source + ": truncated checkpoint while reading extents");
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto x = r.read<std::uint64_t>("extent");
      if (x > (std::uint64_t{1} << 40) || (x != 0 && n > (std::uint64_t{1} << 40) / x))
        throw std::runtime_error(source + ": tensor '" + e.name + "' is implausibly large");
      n *= x;
      e.shape.push_back(static_cast<Index>(x));
    }
    const auto tag = r.read<std::uint8_t>("dtype");
    if (tag != 1 && tag != 2)
      throw std::runtime_error(source + ": tensor '" + e.name + "' has unknown dtype tag " + std::to_string(tag));
    e.dtype = static_cast<DType>(tag);
    const std::uint64_t size = n * (e.dtype == DType::F32 ? 4 : 8);
    if (size > r.remaining()) throw std::runtime_error(source + ": truncated checkpoint in tensor '" + e.name + "'");
    e.bytes.resize(static_cast<std::size_t>(size));
    r.take(e.bytes.data(), e.bytes.size(), "values");
    if (ckpt.contains(e.name)) throw std::runtime_error(source + ": duplicate tensor '" + e.name + "'");
    ckpt.set(std::move(e));
  }
  if (r.remaining() != 0) throw std::runtime_error(source + ": trailing bytes after last tensor");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

}  // namespace lods
