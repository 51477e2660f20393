#include "lods/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "lods/rng.hpp"

namespace lods {

std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, ptr);
}

std::string metrics_csv(const std::vector<DistillStepRecord>& records) {
  std::string out = kMetricsHeader;
  out += '\n';
  for (const auto& r : records) {
    out += std::to_string(r.step);
    out += ',';
    out += format_number(r.distill_grad_norm);
    out += ',';
    out += format_number(r.alignment_loss);
    out += ',';
    out += std::to_string(r.t);
    out += ',';
    out += std::to_string(r.forwards);
    out += ',';
    out += std::to_string(r.backwards);
    out += '\n';
  }
  return out;
}

void write_text(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << contents;
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_pnm(const std::string& path, const Tensor<double>& image) {
  const Shape& s = image.shape();
  if (s.size() != 3 || (s[2] != 1 && s[2] != 3))
    throw std::invalid_argument("image export needs an H x W x 1 or H x W x 3 tensor, got " + to_string(s));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << (s[2] == 1 ? "P5" : "P6") << "\n" << s[1] << " " << s[0] << "\n255\n";
  for (double v : image.data()) {
    const double c = std::clamp(v, 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

ConditionedSamples make_mixture2d(Index per_class, double radius, double mode_std, std::uint64_t seed) {
  if (per_class < 1) throw std::invalid_argument("mixture needs at least one sample per class");
  if (!(mode_std >= 0.0)) throw std::invalid_argument("mode std must be >= 0");
  ConditionedSamples d;
  d.num_classes = 2;
  d.samples.resize(2 * per_class, 2);
  CounterRng rng(seed, 0, Stream::Data);
  for (int c = 0; c < 2; ++c)
    for (Index i = 0; i < per_class; ++i) {
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      const double mx = sign * radius;
      const double my = (c == 0 ? sign : -sign) * radius;
      const Index row = c * per_class + i;
      d.samples(row, 0) = mx + mode_std * rng.normal();
      d.samples(row, 1) = my + mode_std * rng.normal();
      d.labels.push_back(c);
    }
  return d;
}

ConditionedSamples make_shapes(Index per_class, Index size, Index channels, std::uint64_t seed) {
  if (per_class < 1 || size < 4 || (channels != 1 && channels != 3))
    throw std::invalid_argument("shapes dataset needs per_class >= 1, size >= 4 and 1 or 3 channels");
  ConditionedSamples d;
  d.num_classes = 2;
  const Index dim = size * size * channels;
  d.samples = Mat<double>::Constant(2 * per_class, dim, 0.0);
  CounterRng rng(seed, 1, Stream::Data);
  const double n = static_cast<double>(size);
  for (int c = 0; c < 2; ++c)
    for (Index i = 0; i < per_class; ++i) {
      const Index row = c * per_class + i;
      const double half = rng.uniform(0.18, 0.3);
      const double cx = rng.uniform(half, 1.0 - half);
      const double cy = rng.uniform(half, 1.0 - half);
      std::vector<double> color(static_cast<std::size_t>(channels));
      for (auto& v : color) v = rng.uniform(0.6, 1.0);
      for (Index y = 0; y < size; ++y)
        for (Index x = 0; x < size; ++x) {
          const double px = (x + 0.5) / n - cx, py = (y + 0.5) / n - cy;
          const bool inside = c == 0 ? px * px + py * py <= half * half
                                     : std::abs(px) <= half * 0.85 && std::abs(py) <= half * 0.85;
          if (!inside) continue;
          for (Index k = 0; k < channels; ++k) d.samples(row, (y * size + x) * channels + k) = color[k];
        }
      d.labels.push_back(c);
    }
  return d;
}

Mat<double> class_samples(const ConditionedSamples& data, int label) {
  Index n = 0;
  for (int l : data.labels) n += l == label;
  Mat<double> out(n, data.dim());
  Index k = 0;
  for (Index i = 0; i < data.size(); ++i)
    if (data.labels[i] == label) out.row(k++) = data.samples.row(i);
  return out;
}

}  // namespace lods
