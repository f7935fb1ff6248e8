#include "imf/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace imf {

namespace {

using json = nlohmann::json;

// Typed, path-aware view of one JSON object. Every key read is recorded so
// finish() can reject the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label(), "expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  double number(const std::string& key, double def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(at(key), "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw ConfigError(at(key), "expected a finite number");
    return x;
  }

  std::int64_t integer(const std::string& key, std::int64_t def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_number_integer()) throw ConfigError(at(key), "expected an integer");
    return v.get<std::int64_t>();
  }

  std::uint64_t count(const std::string& key, std::uint64_t def) {
    const std::int64_t v = integer(key, static_cast<std::int64_t>(def));
    if (v < 0) throw ConfigError(at(key), "expected a non-negative integer");
    return static_cast<std::uint64_t>(v);
  }

  bool boolean(const std::string& key, bool def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(at(key), "expected true or false");
    return v.get<bool>();
  }

  std::string string(const std::string& key, const std::string& def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(at(key), "expected a string");
    return v.get<std::string>();
  }

  std::vector<double> numbers(const std::string& key, const std::vector<double>& def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(at(key), "expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) throw ConfigError(at(key) + "[" + std::to_string(i) + "]", "expected a number");
      out.push_back(v[i].get<double>());
    }
    return out;
  }

  std::optional<Section> child(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return Section(j_.at(key), at(key));
  }

  template <class Enum, class Parse>
  Enum choice(const std::string& key, Enum def, Parse parse) {
    if (!has(key)) return def;
    const std::string s = string(key, "");
    try {
      return parse(s);
    } catch (const ContractViolation& e) {
      throw ConfigError(at(key), e.what());
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(at(key), "unknown key");
    }
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string label() const { return path_.empty() ? "<root>" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class Fn>
void field(const std::string& path, Fn fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const ContractViolation& e) {
    throw ConfigError(path, e.what());
  }
}

Arch arch_from(const std::string& s) {
  if (s == "mlp") return Arch::mlp;
  if (s == "transformer") return Arch::transformer;
  throw ContractViolation("expected 'mlp' or 'transformer', got '" + s + "'");
}

ConditioningMode mode_from(const std::string& s) {
  if (s == "in_context") return ConditioningMode::in_context;
  if (s == "adaln_zero") return ConditioningMode::adaln_zero;
  throw ContractViolation("expected 'in_context' or 'adaln_zero', got '" + s + "'");
}

Precision precision_from(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ContractViolation("expected 'f32' or 'f64', got '" + s + "'");
}

int as_int(Section& s, const std::string& key, int def) {
  const std::int64_t v = s.integer(key, def);
  if (v < INT32_MIN || v > INT32_MAX) throw ConfigError(s.at(key), "integer out of range");
  return static_cast<int>(v);
}

void read_dataset(Section& s, DatasetSpec& d) {
  d.kind = s.choice("kind", d.kind, dataset_kind_from_string);
  d.dim = as_int(s, "dim", d.dim);
  d.labeled = s.boolean("labeled", d.labeled);
  d.gaussian.mu = s.numbers("mu", std::vector<double>(static_cast<std::size_t>(std::max(d.dim, 1)), 0.0));
  d.gaussian.sigma_x = s.number("sigma_x", d.gaussian.sigma_x);
  d.k = as_int(s, "k", d.k);
  d.radius = s.number("radius", d.radius);
  d.comp_sigma = s.number("comp_sigma", d.comp_sigma);
  d.noise = s.number("noise", d.noise);
  d.cells = as_int(s, "cells", d.cells);
  s.finish();
}

void read_net(Section& s, NetConfig& n, const RunConfig& run) {
  n.arch = s.choice("arch", n.arch, arch_from);
  n.depth = as_int(s, "depth", n.depth);
  n.width = as_int(s, "width", n.width);
  n.heads = as_int(s, "heads", n.heads);
  n.conditioning = s.choice("conditioning", n.conditioning, mode_from);
  if (auto t = s.child("tokens")) {
    n.tokens.class_tokens = as_int(*t, "class", n.tokens.class_tokens);
    n.tokens.time = as_int(*t, "time", n.tokens.time);
    n.tokens.guidance = as_int(*t, "guidance", n.tokens.guidance);
    n.tokens.interval = as_int(*t, "interval", n.tokens.interval);
    t->finish();
  }
  n.aux_head_depth = as_int(s, "aux_head_depth", n.aux_head_depth);
  n.embed_dim = as_int(s, "embed_dim", n.embed_dim);
  n.mlp_ratio = as_int(s, "mlp_ratio", n.mlp_ratio);
  n.embed_max_freq = s.number("embed_max_freq", n.embed_max_freq);
  n.embed_freq_span = s.number("embed_freq_span", n.embed_freq_span);
  // Derived fields may appear (resolved configs echo them) but must agree.
  const NetConfig derived = run.resolved_net();
  if (s.has("data_dim") && as_int(s, "data_dim", 0) != derived.data_dim) {
    throw ConfigError(s.at("data_dim"), "must equal dataset.dim");
  }
  if (s.has("num_classes") && as_int(s, "num_classes", 0) != derived.num_classes) {
    throw ConfigError(s.at("num_classes"), "must equal the dataset's class count");
  }
  if (s.has("omega_conditioning") && s.boolean("omega_conditioning", false) != derived.omega_conditioning) {
    throw ConfigError(s.at("omega_conditioning"), "must match the presence of the guidance section");
  }
  s.finish();
}

json dataset_json(const DatasetSpec& d) {
  json j{{"kind", to_string(d.kind)}, {"dim", d.dim}, {"labeled", d.labeled}};
  switch (d.kind) {
    case DatasetKind::gaussian:
      j["mu"] = d.gaussian.mu;
      j["sigma_x"] = d.gaussian.sigma_x;
      break;
    case DatasetKind::gaussian_mixture:
      j["k"] = d.k;
      j["radius"] = d.radius;
      j["comp_sigma"] = d.comp_sigma;
      break;
    case DatasetKind::two_moons:
      j["noise"] = d.noise;
      break;
    case DatasetKind::checkerboard:
      j["cells"] = d.cells;
      break;
  }
  return j;
}

}  // namespace

NetConfig RunConfig::resolved_net() const {
  NetConfig n = net;
  n.data_dim = dataset.dim;
  n.num_classes = dataset.num_classes();
  n.omega_conditioning = guidance.has_value();
  return n;
}

OptimizerConfig RunConfig::resolved_optimizer() const {
  OptimizerConfig o = optimizer;
  o.warmup_steps = static_cast<std::uint64_t>(std::llround(warmup_frac * static_cast<double>(steps)));
  o.cooldown_steps = static_cast<std::uint64_t>(std::llround(cooldown_frac * static_cast<double>(steps)));
  o.total_steps = steps;
  o.round_to_f32 = precision == Precision::f32;
  return o;
}

void RunConfig::validate() const {
  if (schema_version != kConfigSchemaVersion) {
    throw ConfigError("schema_version", "unsupported version " + std::to_string(schema_version));
  }
  if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  if (log_every < 1) throw ConfigError("log_every", "must be >= 1");
  if (warmup_frac < 0.0 || warmup_frac > 1.0) throw ConfigError("optimizer.warmup_frac", "must be in [0, 1]");
  if (cooldown_frac < 0.0 || cooldown_frac + warmup_frac > 1.0) {
    throw ConfigError("optimizer.cooldown_frac", "must be >= 0 with warmup_frac + cooldown_frac <= 1");
  }
  field("dataset", [&] { dataset.validate(); });
  field("net", [&] { resolved_net().validate(); });
  field("time_sampler", [&] { time_sampler.validate(); });
  field("optimizer", [&] { resolved_optimizer().validate(); });
  field("adaptive_weight", [&] { adaptive_weight.validate(); });
  if (guidance) {
    field("guidance", [&] { guidance->validate(); });
    if (objective != Objective::imf_boundary) {
      throw ConfigError("guidance", "guided training is defined for objective imf_boundary only");
    }
  }
  if (objective == Objective::imf_auxhead && net.aux_head_depth == 0) {
    throw ConfigError("net.aux_head_depth", "objective imf_auxhead needs aux_head_depth > 0");
  }
}

RunConfig parse_run_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
  }
  RunConfig cfg;
  Section s(root, "");
  if (!s.has("schema_version")) throw ConfigError("schema_version", "required");
  cfg.schema_version = as_int(s, "schema_version", 0);
  if (cfg.schema_version != kConfigSchemaVersion) {
    throw ConfigError("schema_version", "unsupported version " + std::to_string(cfg.schema_version));
  }
  cfg.seed = s.count("seed", cfg.seed);
  cfg.steps = s.count("steps", cfg.steps);
  cfg.batch_size = s.count("batch_size", cfg.batch_size);
  cfg.objective = s.choice("objective", cfg.objective, objective_from_string);
  cfg.precision = s.choice("precision", cfg.precision, precision_from);
  cfg.log_every = s.count("log_every", cfg.log_every);
  cfg.checkpoint_every = s.count("checkpoint_every", cfg.checkpoint_every);
  cfg.record_wall_time = s.boolean("record_wall_time", cfg.record_wall_time);
  if (auto d = s.child("dataset")) read_dataset(*d, cfg.dataset);
  if (auto g = s.child("guidance")) {
    GuidanceConfig gc;
    gc.omega.omega_max = g->number("omega_max", gc.omega.omega_max);
    gc.omega.beta = g->number("beta", gc.omega.beta);
    gc.class_drop = g->number("class_drop", gc.class_drop);
    g->finish();
    cfg.guidance = gc;
  }
  if (auto n = s.child("net")) read_net(*n, cfg.net, cfg);
  if (auto t = s.child("time_sampler")) {
    cfg.time_sampler.mu = t->number("mu", cfg.time_sampler.mu);
    cfg.time_sampler.sigma = t->number("sigma", cfg.time_sampler.sigma);
    cfg.time_sampler.ratio_r_neq_t = t->number("ratio_r_neq_t", cfg.time_sampler.ratio_r_neq_t);
    t->finish();
  }
  if (auto o = s.child("optimizer")) {
    OptimizerConfig& oc = cfg.optimizer;
    oc.lr = o->number("lr", oc.lr);
    const std::vector<double> betas = o->numbers("betas", {oc.beta1, oc.beta2});
    if (betas.size() != 2) throw ConfigError(o->at("betas"), "expected two numbers");
    oc.beta1 = betas[0];
    oc.beta2 = betas[1];
    oc.eps = o->number("eps", oc.eps);
    oc.weight_decay = o->number("weight_decay", oc.weight_decay);
    oc.ema_decay = o->number("ema_decay", oc.ema_decay);
    cfg.warmup_frac = o->number("warmup_frac", cfg.warmup_frac);
    cfg.cooldown_frac = o->number("cooldown_frac", cfg.cooldown_frac);
    o->finish();
  }
  if (auto a = s.child("adaptive_weight")) {
    cfg.adaptive_weight.p = a->number("p", cfg.adaptive_weight.p);
    cfg.adaptive_weight.c = a->number("c", cfg.adaptive_weight.c);
    a->finish();
  }
  s.finish();
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("<file>", "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string to_json_text(const RunConfig& cfg) {
  const NetConfig n = cfg.resolved_net();
  json net{{"arch", n.arch == Arch::mlp ? "mlp" : "transformer"},
           {"depth", n.depth},
           {"width", n.width},
           {"heads", n.heads},
           {"conditioning", n.conditioning == ConditioningMode::in_context ? "in_context" : "adaln_zero"},
           {"tokens",
            {{"class", n.tokens.class_tokens},
             {"time", n.tokens.time},
             {"guidance", n.tokens.guidance},
             {"interval", n.tokens.interval}}},
           {"aux_head_depth", n.aux_head_depth},
           {"embed_dim", n.embed_dim},
           {"mlp_ratio", n.mlp_ratio},
           {"embed_max_freq", n.embed_max_freq},
           {"embed_freq_span", n.embed_freq_span},
           {"data_dim", n.data_dim},
           {"num_classes", n.num_classes},
           {"omega_conditioning", n.omega_conditioning}};
  json j{{"schema_version", cfg.schema_version},
         {"seed", cfg.seed},
         {"steps", cfg.steps},
         {"batch_size", cfg.batch_size},
         {"objective", to_string(cfg.objective)},
         {"precision", cfg.precision == Precision::f32 ? "f32" : "f64"},
         {"log_every", cfg.log_every},
         {"checkpoint_every", cfg.checkpoint_every},
         {"record_wall_time", cfg.record_wall_time},
         {"dataset", dataset_json(cfg.dataset)},
         {"net", net},
         {"time_sampler",
          {{"mu", cfg.time_sampler.mu},
           {"sigma", cfg.time_sampler.sigma},
           {"ratio_r_neq_t", cfg.time_sampler.ratio_r_neq_t}}},
         {"optimizer",
          {{"lr", cfg.optimizer.lr},
           {"betas", {cfg.optimizer.beta1, cfg.optimizer.beta2}},
           {"eps", cfg.optimizer.eps},
           {"weight_decay", cfg.optimizer.weight_decay},
           {"warmup_frac", cfg.warmup_frac},
           {"cooldown_frac", cfg.cooldown_frac},
           {"ema_decay", cfg.optimizer.ema_decay}}},
         {"adaptive_weight", {{"p", cfg.adaptive_weight.p}, {"c", cfg.adaptive_weight.c}}}};
  if (cfg.guidance) {
    j["guidance"] = {{"omega_max", cfg.guidance->omega.omega_max},
                     {"beta", cfg.guidance->omega.beta},
                     {"class_drop", cfg.guidance->class_drop}};
  } else {
    j["guidance"] = nullptr;
  }
  return j.dump(2) + "\n";
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace imf
