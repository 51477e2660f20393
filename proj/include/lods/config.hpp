#pragma once

// Run configuration: a TOML subset (tables, key = value with strings, numbers,
// booleans, inf, and flat numeric arrays) mapped onto RunConfig.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lods/denoiser.hpp"
#include "lods/generators.hpp"
#include "lods/priors.hpp"
#include "lods/schedule.hpp"

namespace lods {

struct TomlValue {
  enum class Type { String, Number, Bool, Array } type = Type::String;
  std::string text;  // strings; also the source token for numbers
  double number = 0.0;
  bool boolean = false;
  std::vector<double> array;
  int line = 0;
};

using TomlTable = std::map<std::string, TomlValue>;
using TomlDocument = std::map<std::string, TomlTable>;

/// Throws std::runtime_error with "<source>:<line>: <reason>" on malformed input.
TomlDocument parse_toml(const std::string& text, const std::string& source = "<config>");

enum class ExperimentKind { Train, Distill, Oracle, Eval };

const char* to_string(ExperimentKind k);
ExperimentKind parse_experiment_kind(const std::string& s);

enum class Precision { F32, F64 };

struct DatasetSpec {
  std::string kind = "mixture2d";  // mixture2d | shapes
  Index samples_per_class = 2048;
  double mode_radius = 1.5;
  double mode_std = 0.25;
  Index image_size = 8;
  Index channels = 1;
  std::uint64_t seed = 0;
};

struct GeneratorSpec {
  GeneratorKind kind = GeneratorKind::Identity;
  Index particles = 256;
  double init_scale = 1.0;
  SplatLayout splats;
  std::string source_theta;  // dds source run checkpoint (theta); empty = initial render
};

struct SandboxSpec {
  double mu_y = 1.0;
  double var_y = 0.5;
  double mu_null = 0.0;
  double var_null = 0.5;
};

struct OracleSpec {
  std::string preset = "equal-variance";  // equal-variance | unequal-variance
  double w = 7.5;
  Index samples = 100000;
  int t = -1;  // fixed timestep for unequal variances; -1 = mid-schedule
  double tolerance = 0.05;
};

struct RunConfig {
  ExperimentKind kind = ExperimentKind::Distill;
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  Precision precision = Precision::F64;

  ScheduleKind schedule_kind = ScheduleKind::LinearBeta;
  int schedule_steps = 1000;
  double beta_min = 1e-4;
  double beta_max = 2e-2;

  std::string checkpoint;  // trained denoiser; empty = analytic sandbox
  NetworkConfig network;

  DatasetSpec data;
  TrainSettings train;
  PriorConfig prior;
  GeneratorSpec generator;
  int distill_steps = 6000;
  int snapshot_every = 0;

  SandboxSpec sandbox;
  OracleSpec oracle;
  std::string eval_run;  // run directory consumed by eval/export
  Index eval_samples = 1024;
};

/// Defaults, then values from the document. Unknown tables or keys are errors.
RunConfig config_from_toml(const TomlDocument& doc, const std::string& source = "<config>");
RunConfig load_config(const std::string& path);

/// Every field with its current value, one table per section; parses back to `cfg`.
std::string to_toml(const RunConfig& cfg);

/// Applies "section.key=value" overrides.
void apply_override(RunConfig& cfg, const std::string& assignment);

NoiseSchedule build_schedule(const RunConfig& cfg);

}  // namespace lods
