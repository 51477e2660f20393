#pragma once

// Experiment runners behind the command-line tool. Each writes its
// artifacts under cfg.out_dir and returns a JSON summary with an "ok" flag.

#include <string>
#include <vector>

#include "json.hpp"

#include "lods/config.hpp"
#include "lods/oracle.hpp"

namespace lods {

using Json = nlohmann::json;

/// Trains a network denoiser on cfg.data; writes denoiser.ckpt, train_loss.csv, summary.json.
Json run_train(const RunConfig& cfg);

/// Distills with cfg.prior against the checkpoint (or the analytic sandbox when
/// none is set); writes metrics.csv, theta.ckpt, summary.json, config.toml.
Json run_distill(const RunConfig& cfg);

/// Sandbox oracle suite for cfg.oracle; writes oracle.json.
Json run_oracle(const RunConfig& cfg);

/// MMD of the final samples of run `cfg.eval_run` to its target-class reference samples.
Json run_eval(const RunConfig& cfg);

/// Renders every theta snapshot of `cfg.eval_run` to PGM/PPM (image generators)
/// and writes samples.csv with one row per particle and snapshot.
Json run_export(const RunConfig& cfg);

const std::vector<std::string>& recipe_names();

/// w-sweep | variant-compare | sandbox-acceptance | editing-demo. Writes <name>.csv and <name>.json.
Json run_recipe(const std::string& name, const RunConfig& cfg);

GaussianSandbox sandbox_from(const RunConfig& cfg);

/// Reference samples for evaluating a run: the target class of cfg.data, or
/// draws from the sandbox's conditional Gaussian when no checkpoint is set.
Mat<double> reference_samples(const RunConfig& cfg, Index n);

}  // namespace lods
