#pragma once

// Metrics CSV, deterministic number formatting, image export, datasets.

#include <cstdint>
#include <string>
#include <vector>

#include "lods/denoiser.hpp"
#include "lods/gradcore.hpp"
#include "lods/priors.hpp"

namespace lods {

inline constexpr const char* kMetricsHeader = "step,distill_grad_norm,alignment_loss,t,forwards,backwards";

/// Shortest round-trip decimal; "nan", "inf", "-inf" for non-finite values.
std::string format_number(double x);

std::string metrics_csv(const std::vector<DistillStepRecord>& records);
void write_text(const std::string& path, const std::string& contents);
std::string read_text(const std::string& path);

/// Writes an H x W x C image with values in [0, 1] as binary PGM (C = 1) or PPM (C = 3).
void write_pnm(const std::string& path, const Tensor<double>& image);

/// Two modes per class on the diagonals: class 0 at +-(r, r), class 1 at +-(r, -r).
ConditionedSamples make_mixture2d(Index per_class, double radius, double mode_std, std::uint64_t seed);

/// size x size x channels images in [0, 1]: class 0 disks, class 1 squares, random position and size.
ConditionedSamples make_shapes(Index per_class, Index size, Index channels, std::uint64_t seed);

/// Rows of `data` with the given label.
Mat<double> class_samples(const ConditionedSamples& data, int label);

}  // namespace lods
