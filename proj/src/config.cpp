#include "lods/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace lods {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void fail(const std::string& source, int line, const std::string& why) {
  throw std::runtime_error(source + ":" + std::to_string(line) + ": " + why);
}

/// Strips a trailing comment that is not inside a string.
std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) in_str = !in_str;
    if (s[i] == '#' && !in_str) return s.substr(0, i);
  }
  return s;
}

bool parse_number(const std::string& tok, double& out) {
  if (tok == "inf" || tok == "+inf" || tok == "INF") {
    out = std::numeric_limits<double>::infinity();
    return true;
  }
  if (tok == "-inf") {
    out = -std::numeric_limits<double>::infinity();
    return true;
  }
  std::string clean;
  for (char c : tok)
    if (c != '_') clean.push_back(c);
  const char* b = clean.data();
  const char* e = b + clean.size();
  if (b != e && *b == '+') ++b;
  auto [ptr, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && ptr == e && b != e;
}

TomlValue parse_value(const std::string& raw, const std::string& source, int line) {
  TomlValue v;
  v.line = line;
  const std::string s = trim(raw);
  if (s.empty()) fail(source, line, "missing value");
  if (s.front() == '"') {
    if (s.size() < 2 || s.back() != '"') fail(source, line, "unterminated string");
    v.type = TomlValue::Type::String;
    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
      if (s[i] == '\\' && i + 2 < s.size()) {
        const char n = s[++i];
        v.text.push_back(n == 'n' ? '\n' : n == 't' ? '\t' : n);
      } else {
        v.text.push_back(s[i]);
      }
    }
    return v;
  }
  if (s == "true" || s == "false") {
    v.type = TomlValue::Type::Bool;
    v.boolean = s == "true";
    v.text = s;
    return v;
  }
  if (s.front() == '[') {
    if (s.back() != ']') fail(source, line, "unterminated array");
    v.type = TomlValue::Type::Array;
    v.text = s;
    std::stringstream items(s.substr(1, s.size() - 2));
    std::string item;
    while (std::getline(items, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      double x = 0.0;
      if (!parse_number(item, x)) fail(source, line, "array entries must be numbers, got '" + item + "'");
      v.array.push_back(x);
    }
    return v;
  }
  v.type = TomlValue::Type::Number;
  v.text = s;
  if (!parse_number(s, v.number)) fail(source, line, "cannot parse value '" + s + "'");
  return v;
}

std::string format_double(double x) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  std::string s(buf, ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  return out + "\"";
}

// Field registry ---------------------------------------------------------------

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> print;
  std::function<void(RunConfig&, const TomlValue&, const std::string&)> set;
};

const TomlValue& expect(const TomlValue& v, TomlValue::Type t, const std::string& name, const std::string& src) {
  if (v.type != t) {
    const char* what = t == TomlValue::Type::String ? "a string" : t == TomlValue::Type::Number ? "a number"
                       : t == TomlValue::Type::Bool ? "a boolean" : "an array";
    fail(src, v.line, name + " must be " + what);
  }
  return v;
}

template <class Get>
Field real(std::string sec, std::string key, Get get) {
  const std::string name = sec + "." + key;
  return {sec, key, [get](const RunConfig& c) { return format_double(get(const_cast<RunConfig&>(c))); },
          [get, name](RunConfig& c, const TomlValue& v, const std::string& src) {
            get(c) = expect(v, TomlValue::Type::Number, name, src).number;
          }};
}

template <class Int, class Get>
Field integer(std::string sec, std::string key, Get get) {
  const std::string name = sec + "." + key;
  return {sec, key, [get](const RunConfig& c) { return std::to_string(get(const_cast<RunConfig&>(c))); },
          [get, name](RunConfig& c, const TomlValue& v, const std::string& src) {
            const double x = expect(v, TomlValue::Type::Number, name, src).number;
            if (!std::isfinite(x) || std::floor(x) != x) fail(src, v.line, name + " must be an integer");
            if (x < static_cast<double>(std::numeric_limits<Int>::min()) ||
                x > static_cast<double>(std::numeric_limits<Int>::max()))
              fail(src, v.line, name + " is out of range");
            get(c) = static_cast<Int>(x);
          }};
}

template <class Get>
Field text(std::string sec, std::string key, Get get) {
  const std::string name = sec + "." + key;
  return {sec, key, [get](const RunConfig& c) { return quote(get(const_cast<RunConfig&>(c))); },
          [get, name](RunConfig& c, const TomlValue& v, const std::string& src) {
            get(c) = expect(v, TomlValue::Type::String, name, src).text;
          }};
}

/// String field mapped through parse/print functions (enums).
template <class Get, class Parse, class Print>
Field choice(std::string sec, std::string key, Get get, Parse parse, Print print) {
  const std::string name = sec + "." + key;
  return {sec, key, [get, print](const RunConfig& c) { return quote(print(get(const_cast<RunConfig&>(c)))); },
          [get, parse, name](RunConfig& c, const TomlValue& v, const std::string& src) {
            try {
              get(c) = parse(expect(v, TomlValue::Type::String, name, src).text);
            } catch (const std::invalid_argument& e) {
              fail(src, v.line, name + ": " + e.what());
            }
          }};
}

GeneratorKind parse_generator_kind(const std::string& s) {
  if (s == "identity") return GeneratorKind::Identity;
  if (s == "splats") return GeneratorKind::Splats;
  throw std::invalid_argument("unknown generator '" + s + "' (expected identity or splats)");
}

Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::F32;
  if (s == "f64") return Precision::F64;
  throw std::invalid_argument("unknown precision '" + s + "' (expected f32 or f64)");
}

const char* precision_name(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

std::string guidance_text(double w) { return std::isinf(w) ? "inf" : format_double(w); }

const std::vector<Field>& fields() {
  using C = RunConfig;
  static const std::vector<Field> all = {
      choice("run", "kind", [](C& c) -> auto& { return c.kind; }, parse_experiment_kind,
             [](ExperimentKind k) { return std::string(to_string(k)); }),
      integer<std::uint64_t>("run", "seed", [](C& c) -> auto& { return c.seed; }),
      text("run", "out_dir", [](C& c) -> auto& { return c.out_dir; }),
      choice("run", "precision", [](C& c) -> auto& { return c.precision; }, parse_precision,
             [](Precision p) { return std::string(precision_name(p)); }),

      choice("schedule", "kind", [](C& c) -> auto& { return c.schedule_kind; }, parse_schedule_kind,
             [](ScheduleKind k) { return std::string(to_string(k)); }),
      integer<int>("schedule", "steps", [](C& c) -> auto& { return c.schedule_steps; }),
      real("schedule", "beta_min", [](C& c) -> auto& { return c.beta_min; }),
      real("schedule", "beta_max", [](C& c) -> auto& { return c.beta_max; }),

      text("denoiser", "checkpoint", [](C& c) -> auto& { return c.checkpoint; }),
      integer<Index>("denoiser", "width", [](C& c) -> auto& { return c.network.width; }),
      integer<int>("denoiser", "hidden_layers", [](C& c) -> auto& { return c.network.hidden_layers; }),
      integer<Index>("denoiser", "embed_dim", [](C& c) -> auto& { return c.network.embed_dim; }),
      integer<Index>("denoiser", "time_dim", [](C& c) -> auto& { return c.network.time_dim; }),

      text("data", "kind", [](C& c) -> auto& { return c.data.kind; }),
      integer<Index>("data", "samples_per_class", [](C& c) -> auto& { return c.data.samples_per_class; }),
      real("data", "mode_radius", [](C& c) -> auto& { return c.data.mode_radius; }),
      real("data", "mode_std", [](C& c) -> auto& { return c.data.mode_std; }),
      integer<Index>("data", "image_size", [](C& c) -> auto& { return c.data.image_size; }),
      integer<Index>("data", "channels", [](C& c) -> auto& { return c.data.channels; }),
      integer<std::uint64_t>("data", "seed", [](C& c) -> auto& { return c.data.seed; }),

      integer<int>("train", "steps", [](C& c) -> auto& { return c.train.steps; }),
      integer<int>("train", "batch", [](C& c) -> auto& { return c.train.batch; }),
      choice("train", "optimizer", [](C& c) -> auto& { return c.train.optim.kind; }, parse_optimizer,
             [](OptimizerKind k) { return std::string(to_string(k)); }),
      real("train", "lr", [](C& c) -> auto& { return c.train.optim.lr; }),
      real("train", "drop_prob", [](C& c) -> auto& { return c.train.drop_prob; }),

      choice("prior", "variant", [](C& c) -> auto& { return c.prior.variant; }, parse_variant,
             [](Variant v) { return std::string(to_string(v)); }),
      {"prior", "w", [](const C& c) { return guidance_text(c.prior.w); },
       [](C& c, const TomlValue& v, const std::string& src) {
         c.prior.w = expect(v, TomlValue::Type::Number, "prior.w", src).number;
       }},
      integer<int>("prior", "target", [](C& c) -> auto& { return c.prior.target; }),
      integer<int>("prior", "source", [](C& c) -> auto& { return c.prior.source; }),
      integer<int>("prior", "embedding_init", [](C& c) -> auto& { return c.prior.embedding_init; }),
      integer<int>("prior", "adapter_rank", [](C& c) -> auto& { return c.prior.adapter_rank; }),
      real("prior", "adapter_scale", [](C& c) -> auto& { return c.prior.adapter_scale; }),
      choice("prior", "theta_optimizer", [](C& c) -> auto& { return c.prior.theta_optim.kind; }, parse_optimizer,
             [](OptimizerKind k) { return std::string(to_string(k)); }),
      real("prior", "theta_lr", [](C& c) -> auto& { return c.prior.theta_optim.lr; }),
      real("prior", "theta_momentum", [](C& c) -> auto& { return c.prior.theta_optim.momentum; }),
      real("prior", "theta_lr_final", [](C& c) -> auto& { return c.prior.theta_lr_final; }),
      choice("prior", "embedding_optimizer", [](C& c) -> auto& { return c.prior.embedding_optim.kind; },
             parse_optimizer, [](OptimizerKind k) { return std::string(to_string(k)); }),
      real("prior", "embedding_lr", [](C& c) -> auto& { return c.prior.embedding_optim.lr; }),
      choice("prior", "adapter_optimizer", [](C& c) -> auto& { return c.prior.adapter_optim.kind; },
             parse_optimizer, [](OptimizerKind k) { return std::string(to_string(k)); }),
      real("prior", "adapter_lr", [](C& c) -> auto& { return c.prior.adapter_optim.lr; }),
      real("prior", "state_lr_final", [](C& c) -> auto& { return c.prior.state_lr_final; }),
      real("prior", "t_min", [](C& c) -> auto& { return c.prior.timesteps.t_min; }),
      real("prior", "t_max", [](C& c) -> auto& { return c.prior.timesteps.t_max; }),
      choice("prior", "noise", [](C& c) -> auto& { return c.prior.noise; }, parse_noise_policy,
             [](NoisePolicy p) { return std::string(to_string(p)); }),
      real("prior", "divergence_limit", [](C& c) -> auto& { return c.prior.divergence_limit; }),

      choice("generator", "kind", [](C& c) -> auto& { return c.generator.kind; }, parse_generator_kind,
             [](GeneratorKind k) { return std::string(to_string(k)); }),
      integer<Index>("generator", "particles", [](C& c) -> auto& { return c.generator.particles; }),
      real("generator", "init_scale", [](C& c) -> auto& { return c.generator.init_scale; }),
      integer<Index>("generator", "width", [](C& c) -> auto& { return c.generator.splats.width; }),
      integer<Index>("generator", "height", [](C& c) -> auto& { return c.generator.splats.height; }),
      integer<Index>("generator", "channels", [](C& c) -> auto& { return c.generator.splats.channels; }),
      integer<Index>("generator", "splats", [](C& c) -> auto& { return c.generator.splats.count; }),
      real("generator", "background", [](C& c) -> auto& { return c.generator.splats.background; }),
      text("generator", "source_theta", [](C& c) -> auto& { return c.generator.source_theta; }),

      integer<int>("distill", "steps", [](C& c) -> auto& { return c.distill_steps; }),
      integer<int>("distill", "snapshot_every", [](C& c) -> auto& { return c.snapshot_every; }),

      real("sandbox", "mu_y", [](C& c) -> auto& { return c.sandbox.mu_y; }),
      real("sandbox", "var_y", [](C& c) -> auto& { return c.sandbox.var_y; }),
      real("sandbox", "mu_null", [](C& c) -> auto& { return c.sandbox.mu_null; }),
      real("sandbox", "var_null", [](C& c) -> auto& { return c.sandbox.var_null; }),

      text("oracle", "preset", [](C& c) -> auto& { return c.oracle.preset; }),
      real("oracle", "w", [](C& c) -> auto& { return c.oracle.w; }),
      integer<Index>("oracle", "samples", [](C& c) -> auto& { return c.oracle.samples; }),
      integer<int>("oracle", "t", [](C& c) -> auto& { return c.oracle.t; }),
      real("oracle", "tolerance", [](C& c) -> auto& { return c.oracle.tolerance; }),

      text("eval", "run", [](C& c) -> auto& { return c.eval_run; }),
      integer<Index>("eval", "samples", [](C& c) -> auto& { return c.eval_samples; }),
  };
  return all;
}

const Field* find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields())
    if (f.section == section && f.key == key) return &f;
  return nullptr;
}

}  // namespace

const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::Train: return "train";
    case ExperimentKind::Distill: return "distill";
    case ExperimentKind::Oracle: return "oracle";
    case ExperimentKind::Eval: return "eval";
  }
  return "?";
}

ExperimentKind parse_experiment_kind(const std::string& s) {
  if (s == "train") return ExperimentKind::Train;
  if (s == "distill") return ExperimentKind::Distill;
  if (s == "oracle") return ExperimentKind::Oracle;
  if (s == "eval") return ExperimentKind::Eval;
  throw std::invalid_argument("unknown experiment kind '" + s + "' (expected train, distill, oracle or eval)");
}

TomlDocument parse_toml(const std::string& text, const std::string& source) {
  TomlDocument doc;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string s = trim(strip_comment(raw));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') fail(source, line, "malformed table header");
      section = trim(s.substr(1, s.size() - 2));
      if (section.empty()) fail(source, line, "empty table name");
      doc[section];
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) fail(source, line, "expected key = value");
    const std::string key = trim(s.substr(0, eq));
    if (key.empty()) fail(source, line, "missing key");
    if (section.empty()) fail(source, line, "key '" + key + "' appears before any table");
    auto& table = doc[section];
    if (table.count(key)) fail(source, line, "duplicate key '" + section + "." + key + "'");
    table.emplace(key, parse_value(s.substr(eq + 1), source, line));
  }
  return doc;
}

RunConfig config_from_toml(const TomlDocument& doc, const std::string& source) {
  RunConfig cfg;
  for (const auto& [section, table] : doc) {
    for (const auto& [key, value] : table) {
      const Field* f = find_field(section, key);
      if (!f) fail(source, value.line, "unknown key '" + section + "." + key + "'");
      f->set(cfg, value, source);
    }
    if (table.empty()) {
      bool known = false;
      for (const auto& f : fields()) known = known || f.section == section;
      if (!known) fail(source, 0, "unknown table [" + section + "]");
    }
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_toml(parse_toml(ss.str(), path), path);
}

std::string to_toml(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.print(cfg) + "\n";
  }
  return out;
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw std::invalid_argument("override '" + assignment + "' must look like section.key=value");
  const std::string section = trim(assignment.substr(0, dot));
  const std::string key = trim(assignment.substr(dot + 1, eq - dot - 1));
  const Field* f = find_field(section, key);
  if (!f) throw std::invalid_argument("unknown key '" + section + "." + key + "'");
  std::string value = trim(assignment.substr(eq + 1));
  TomlValue v;
  double x = 0.0;
  if (!value.empty() && (value.front() == '"' || value.front() == '['))
    v = parse_value(value, "override", 0);
  else if (value == "true" || value == "false")
    v = parse_value(value, "override", 0);
  else if (parse_number(value, x))
    v = parse_value(value, "override", 0);
  else
    v = parse_value(quote(value), "override", 0);
  f->set(cfg, v, "override");
}

NoiseSchedule build_schedule(const RunConfig& cfg) {
  return make_schedule(cfg.schedule_kind, cfg.schedule_steps, cfg.beta_min, cfg.beta_max);
}

}  // namespace lods
