// lods: command-line front end for training, distillation, oracles and recipes.
//
//   lods train   --data mixture2d --out runs/denoiser
//   lods distill --variant lods_embedding --w 100 --checkpoint runs/denoiser/denoiser.ckpt
//   lods oracle  --preset equal-variance --w 7.5
//   lods eval    --run runs/default
//   lods export  --run runs/default --out runs/default/export
//   lods recipe  sandbox-acceptance

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "lods/config.hpp"
#include "lods/experiments.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  bool print_defaults = false;
  std::optional<std::string> variant, w, generator, data, checkpoint, out, run, preset, precision;
  std::optional<int> steps;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c, bool has_steps) {
  app->add_option("--config", c.config, "TOML run configuration");
  app->add_option("--set", c.sets, "Override a field, e.g. --set prior.theta_lr=0.01 (repeatable)");
  app->add_flag("--print-defaults", c.print_defaults, "Print the effective configuration as TOML and exit");
  app->add_option("--seed", c.seed, "run.seed");
  app->add_option("--out", c.out, "run.out_dir");
  app->add_option("--precision", c.precision, "run.precision (f32 | f64)");
  app->add_option("--checkpoint", c.checkpoint, "denoiser.checkpoint");
  app->add_option("--data", c.data, "data.kind (mixture2d | shapes)");
  app->add_option("--variant", c.variant, "prior.variant");
  app->add_option("--w", c.w, "guidance weight (a number or inf)");
  app->add_option("--generator", c.generator, "generator.kind (identity | splats)");
  app->add_option("--preset", c.preset, "oracle.preset");
  app->add_option("--run", c.run, "eval.run: a distillation run directory");
  if (has_steps) app->add_option("--steps", c.steps, "train.steps for train, distill.steps otherwise");
}

lods::RunConfig resolve(const Common& c, lods::ExperimentKind kind) {
  lods::RunConfig cfg = c.config.empty() ? lods::RunConfig{} : lods::load_config(c.config);
  cfg.kind = kind;
  std::vector<std::string> ov;
  auto push = [&](const char* key, const std::optional<std::string>& v) {
    if (v) ov.push_back(std::string(key) + "=" + *v);
  };
  if (c.seed) ov.push_back("run.seed=" + std::to_string(*c.seed));
  push("run.out_dir", c.out);
  push("run.precision", c.precision);
  push("denoiser.checkpoint", c.checkpoint);
  push("data.kind", c.data);
  push("prior.variant", c.variant);
  push(kind == lods::ExperimentKind::Oracle ? "oracle.w" : "prior.w", c.w);
  push("generator.kind", c.generator);
  push("oracle.preset", c.preset);
  push("eval.run", c.run);
  if (c.steps)
    ov.push_back(std::string(kind == lods::ExperimentKind::Train ? "train.steps=" : "distill.steps=") +
                 std::to_string(*c.steps));
  // Explicit --set assignments win over shortcuts.
  ov.insert(ov.end(), c.sets.begin(), c.sets.end());
  for (const auto& a : ov) lods::apply_override(cfg, a);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Score-distillation prior lab: train denoisers, distill, run oracles and recipes."};
  app.require_subcommand(1);

  Common common;
  std::string recipe;
  bool list_recipes = false;

  auto* train = app.add_subcommand("train", "Train a conditional MLP denoiser on a toy dataset");
  auto* distill = app.add_subcommand("distill", "Optimize generator parameters under a distillation prior");
  auto* oracle = app.add_subcommand("oracle", "Check the Gaussian sandbox against its closed forms");
  auto* eval = app.add_subcommand("eval", "MMD of a distillation run to its target class");
  auto* exporter = app.add_subcommand("export", "Write a run's snapshots as images and CSV");
  auto* rec = app.add_subcommand("recipe", "Run a named experiment recipe");
  for (auto* s : {train, distill, oracle, eval, exporter, rec}) add_common(s, common, s == train || s == distill || s == rec);
  rec->add_option("name", recipe, "w-sweep | variant-compare | sandbox-acceptance | editing-demo");
  rec->add_flag("--list", list_recipes, "List recipe names and exit");

  CLI11_PARSE(app, argc, argv);

  try {
    lods::ExperimentKind kind = lods::ExperimentKind::Distill;
    if (train->parsed()) kind = lods::ExperimentKind::Train;
    if (oracle->parsed()) kind = lods::ExperimentKind::Oracle;
    if (eval->parsed() || exporter->parsed()) kind = lods::ExperimentKind::Eval;

    if (rec->parsed() && list_recipes) {
      for (const auto& n : lods::recipe_names()) std::cout << n << "\n";
      return 0;
    }
    const lods::RunConfig cfg = resolve(common, kind);
    if (common.print_defaults) {
      std::cout << lods::to_toml(cfg);
      return 0;
    }

    lods::Json summary;
    if (train->parsed()) summary = lods::run_train(cfg);
    else if (distill->parsed()) summary = lods::run_distill(cfg);
    else if (oracle->parsed()) summary = lods::run_oracle(cfg);
    else if (eval->parsed()) summary = lods::run_eval(cfg);
    else if (exporter->parsed()) summary = lods::run_export(cfg);
    else {
      if (recipe.empty()) throw std::invalid_argument("recipe name required (see `recipe --list`)");
      summary = lods::run_recipe(recipe, cfg);
    }
    std::cout << summary.dump(2) << "\n";
    if (!summary.value("ok", false)) {
      if (summary.contains("diagnostic")) std::cerr << "error: " << summary["diagnostic"].get<std::string>() << "\n";
      else std::cerr << "error: at least one check failed\n";
      return 1;
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
