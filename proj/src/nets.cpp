#include "imf/nets.hpp"

#include <cmath>

#include "imf/rng.hpp"

namespace imf {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractViolation(msg);
}

// Structural checks shared by layout and forward passes. Unlike validate()
// this admits depth 0, which describes the embedding/projection skeleton.
void check_structure(const NetConfig& c) {
  require(c.depth >= 0, "net.depth must be >= 0");
  require(c.width > 0, "net.width must be > 0");
  require(c.data_dim > 0, "net.data_dim must be > 0");
  require(c.embed_dim > 0 && c.embed_dim % 2 == 0, "net.embed_dim must be positive and even");
  require(c.num_classes >= 0, "net.num_classes must be >= 0");
  require(c.aux_head_depth >= 0 && c.aux_head_depth <= c.depth, "net.aux_head_depth must be in [0, depth]");
  require(c.mlp_ratio > 0, "net.mlp_ratio must be > 0");
  require(c.embed_max_freq > 0 && c.embed_freq_span >= 1, "net.embed frequencies invalid");
  if (c.arch == Arch::transformer) {
    require(c.heads > 0 && c.width % c.heads == 0, "net.width must be divisible by net.heads");
    const auto& t = c.tokens;
    require(t.class_tokens >= 0 && t.time >= 0 && t.guidance >= 0 && t.interval >= 0,
            "net.tokens counts must be >= 0");
  } else {
    require(c.conditioning == ConditioningMode::in_context,
            "net.conditioning adaln_zero requires arch transformer");
  }
}

std::vector<std::string> scalar_embedders(const NetConfig& cfg) {
  std::vector<std::string> names{"t", "dt"};
  if (cfg.omega_conditioning) {
    names.insert(names.end(), {"omega", "t_min", "t_max"});
  }
  return names;
}

std::size_t condition_token_count(const NetConfig& cfg) {
  std::size_t n = static_cast<std::size_t>(cfg.tokens.class_tokens + cfg.tokens.time);
  if (cfg.omega_conditioning) n += static_cast<std::size_t>(cfg.tokens.guidance + cfg.tokens.interval);
  return n;
}

const Var& param(const VarMap& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw ContractViolation("missing parameter '" + name + "'");
  return it->second;
}

Var linear(const VarMap& p, const std::string& prefix, const Var& x) {
  return matmul(x, param(p, prefix + ".weight")) + param(p, prefix + ".bias");
}

struct CondEmbeds {
  Var cls, time, guidance, interval;
  bool has_guidance = false;
};

CondEmbeds embed_conditions(const NetConfig& cfg, const VarMap& p, const CondBatch& cond) {
  const std::size_t n = cond.size();
  for (const Var* col : {&cond.r, &cond.t}) {
    require(col->shape() == Shape{n}, "condition columns must have shape [n]");
  }
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = cond.labels[i];
    require(label >= kNullClass && label < cfg.num_classes,
            "class label " + std::to_string(label) + " out of range for num_classes " +
                std::to_string(cfg.num_classes));
    rows[i] = label == kNullClass ? static_cast<std::size_t>(cfg.num_classes) : static_cast<std::size_t>(label);
  }
  CondEmbeds e;
  e.cls = take_rows(param(p, "embed.class"), rows);
  e.time = embed_scalar(cfg, p, "t", cond.t) + embed_scalar(cfg, p, "dt", cond.t - cond.r);
  if (cfg.omega_conditioning) {
    e.guidance = embed_scalar(cfg, p, "omega", cond.omega);
    e.interval = embed_scalar(cfg, p, "t_min", cond.t_min) + embed_scalar(cfg, p, "t_max", cond.t_max);
    e.has_guidance = true;
  }
  return e;
}

Var attention(const NetConfig& cfg, const VarMap& p, const std::string& prefix, const Var& x) {
  const std::size_t n = x.shape()[0], len = x.shape()[1], w = x.shape()[2];
  const std::size_t h = static_cast<std::size_t>(cfg.heads), dh = w / h;
  Var qkv = reshape(linear(p, prefix + ".qkv", x), {n, len, 3, h, dh});
  qkv = permute(qkv, {2, 0, 3, 1, 4});  // [3, n, h, len, dh]
  auto part = [&](std::size_t i) { return reshape(slice(qkv, 0, i, i + 1), {n, h, len, dh}); };
  Var q = part(0), k = part(1), v = part(2);
  Var scores = matmul(q, permute(k, {0, 1, 3, 2})) * (1.0 / std::sqrt(static_cast<double>(dh)));
  Var out = matmul(softmax(scores), v);  // [n, h, len, dh]
  out = reshape(permute(out, {0, 2, 1, 3}), {n, len, w});
  return linear(p, prefix + ".proj", out);
}

Var mlp_branch(const VarMap& p, const std::string& prefix, const Var& x) {
  return linear(p, prefix + ".fc2", gelu(linear(p, prefix + ".fc1", x)));
}

struct TrunkState {
  Var x;
  Var ctx;  // silu(summed condition embedding), adaLN mode only
};

Var transformer_block(const NetConfig& cfg, const VarMap& p, const std::string& prefix, const TrunkState& s) {
  const Var& x = s.x;
  if (cfg.conditioning == ConditioningMode::in_context) {
    Var h = x + attention(cfg, p, prefix + ".attn", layer_norm(x)) * param(p, prefix + ".gamma_attn");
    return h + mlp_branch(p, prefix + ".mlp", layer_norm(h)) * param(p, prefix + ".gamma_mlp");
  }
  const std::size_t n = x.shape()[0], w = static_cast<std::size_t>(cfg.width);
  Var mod = reshape(linear(p, prefix + ".adaln", s.ctx), {n, 1, 6 * w});
  auto chunk = [&](std::size_t j) { return slice(mod, 2, j * w, (j + 1) * w); };
  Var h = layer_norm(x) * (chunk(1) + 1.0) + chunk(0);
  Var y = x + chunk(2) * attention(cfg, p, prefix + ".attn", h);
  h = layer_norm(y) * (chunk(4) + 1.0) + chunk(3);
  return y + chunk(5) * mlp_branch(p, prefix + ".mlp", h);
}

Var mlp_block(const VarMap& p, const std::string& prefix, const Var& x) {
  Var f = linear(p, prefix + ".fc2", silu(linear(p, prefix + ".fc1", layer_norm(x))));
  return x + f * param(p, prefix + ".gamma");
}

TrunkState apply_block(const NetConfig& cfg, const VarMap& p, const std::string& prefix, TrunkState s) {
  s.x = cfg.arch == Arch::mlp ? mlp_block(p, prefix, s.x) : transformer_block(cfg, p, prefix, s);
  return s;
}

std::size_t shared_depth(const NetConfig& cfg) {
  return static_cast<std::size_t>(cfg.depth - cfg.aux_head_depth);
}

TrunkState trunk(const NetConfig& cfg, const VarMap& p, const Var& z, const CondBatch& cond) {
  check_structure(cfg);
  const std::size_t n = cond.size();
  require(z.shape() == Shape{n, static_cast<std::size_t>(cfg.data_dim)},
          "z must have shape [n, data_dim], got " + shape_str(z.shape()));
  const CondEmbeds e = embed_conditions(cfg, p, cond);
  TrunkState s;
  if (cfg.arch == Arch::mlp) {
    std::vector<Var> parts{z, e.cls, e.time};
    if (e.has_guidance) parts.insert(parts.end(), {e.guidance, e.interval});
    s.x = linear(p, "input", concat(parts, 1));
  } else {
    const std::size_t w = static_cast<std::size_t>(cfg.width);
    Var data = reshape(linear(p, "input", z), {n, 1, w});
    if (cfg.conditioning == ConditioningMode::in_context) {
      s.x = condition_token_count(cfg) > 0 ? concat({build_condition_tokens(cfg, p, cond), data}, 1) : data;
    } else {
      Var c = e.cls + e.time;
      if (e.has_guidance) c = c + e.guidance + e.interval;
      s.ctx = silu(c);
      s.x = data;
    }
  }
  for (std::size_t i = 0; i < shared_depth(cfg); ++i) {
    s = apply_block(cfg, p, "blocks." + std::to_string(i), std::move(s));
  }
  return s;
}

Var final_layer(const NetConfig& cfg, const VarMap& p, const std::string& prefix, const TrunkState& s) {
  Var h = s.x;
  if (cfg.arch == Arch::transformer) {
    const std::size_t len = h.shape()[1];
    h = reshape(slice(h, 1, len - 1, len), {h.shape()[0], h.shape()[2]});
    h = layer_norm(h);
  }
  if (cfg.arch == Arch::transformer && cfg.conditioning == ConditioningMode::adaln_zero) {
    const std::size_t w = static_cast<std::size_t>(cfg.width);
    Var mod = linear(p, prefix + ".adaln", s.ctx);
    h = h * (slice(mod, 1, w, 2 * w) + 1.0) + slice(mod, 1, 0, w);
  }
  return linear(p, prefix + ".out", h);
}

}  // namespace

void NetConfig::validate() const {
  require(depth >= 1, "net.depth must be >= 1");
  require(aux_head_depth < depth, "net.aux_head_depth must be < net.depth");
  check_structure(*this);
}

void ConditionSet::validate() const {
  require(0.0 <= r && r <= t && t <= 1.0, "condition requires 0 <= r <= t <= 1");
  require(omega >= 1.0, "condition requires omega >= 1");
  require(0.0 <= t_min && t_min <= 0.5, "condition requires t_min in [0, 0.5]");
  require(0.5 <= t_max && t_max <= 1.0, "condition requires t_max in [0.5, 1]");
  require(!class_label || *class_label >= 0, "class label must be non-negative");
}

CondBatch CondBatch::repeat(const ConditionSet& c, std::size_t n) {
  CondBatch b;
  b.r = Var(Tensor::full({n}, c.r));
  b.t = Var(Tensor::full({n}, c.t));
  b.omega = Var(Tensor::full({n}, c.omega));
  b.t_min = Var(Tensor::full({n}, c.t_min));
  b.t_max = Var(Tensor::full({n}, c.t_max));
  b.labels.assign(n, c.class_label ? *c.class_label : kNullClass);
  return b;
}

CondBatch CondBatch::from_columns(const Tensor& r, const Tensor& t, std::vector<int> labels,
                                  const Tensor& omega, const Tensor& t_min, const Tensor& t_max) {
  const Shape s{labels.size()};
  for (const Tensor* col : {&r, &t, &omega, &t_min, &t_max}) {
    require(col->shape() == s, "condition column shape " + shape_str(col->shape()) + " != " + shape_str(s));
  }
  CondBatch b;
  b.r = Var(r);
  b.t = Var(t);
  b.omega = Var(omega);
  b.t_min = Var(t_min);
  b.t_max = Var(t_max);
  b.labels = std::move(labels);
  return b;
}

CondBatch CondBatch::at_boundary() const {
  CondBatch b = *this;
  b.r = t;
  return b;
}

std::vector<ParamSpec> param_layout(const NetConfig& cfg) {
  check_structure(cfg);
  std::vector<ParamSpec> out;
  const std::size_t w = static_cast<std::size_t>(cfg.width);
  const std::size_t e = static_cast<std::size_t>(cfg.embed_dim);
  const std::size_t d = static_cast<std::size_t>(cfg.data_dim);
  const std::size_t hid = static_cast<std::size_t>(cfg.mlp_ratio) * w;
  const bool adaln = cfg.arch == Arch::transformer && cfg.conditioning == ConditioningMode::adaln_zero;

  auto linear_spec = [&](const std::string& name, std::size_t in, std::size_t o,
                         InitKind init = InitKind::fan_in_normal) {
    out.push_back({name + ".weight", {in, o}, init});
    out.push_back({name + ".bias", {o}, InitKind::zero});
  };
  auto block = [&](const std::string& prefix) {
    if (cfg.arch == Arch::mlp) {
      linear_spec(prefix + ".fc1", w, hid);
      linear_spec(prefix + ".fc2", hid, w);
      out.push_back({prefix + ".gamma", {w}, InitKind::zero});
      return;
    }
    linear_spec(prefix + ".attn.qkv", w, 3 * w);
    linear_spec(prefix + ".attn.proj", w, w);
    linear_spec(prefix + ".mlp.fc1", w, hid);
    linear_spec(prefix + ".mlp.fc2", hid, w);
    if (adaln) {
      linear_spec(prefix + ".adaln", w, 6 * w, InitKind::zero);
    } else {
      out.push_back({prefix + ".gamma_attn", {w}, InitKind::zero});
      out.push_back({prefix + ".gamma_mlp", {w}, InitKind::zero});
    }
  };
  auto head = [&](const std::string& prefix) {
    if (adaln) linear_spec(prefix + ".adaln", w, 2 * w, InitKind::zero);
    linear_spec(prefix + ".out", w, d);
  };

  for (const auto& name : scalar_embedders(cfg)) {
    linear_spec("embed." + name + ".fc1", e, w);
    linear_spec("embed." + name + ".fc2", w, w);
  }
  out.push_back({"embed.class", {static_cast<std::size_t>(cfg.num_classes) + 1, w}, InitKind::table_normal});
  if (cfg.arch == Arch::mlp) {
    const std::size_t types = cfg.omega_conditioning ? 4 : 2;
    linear_spec("input", d + types * w, w);
  } else {
    linear_spec("input", d, w);
    if (!adaln && condition_token_count(cfg) > 0) {
      out.push_back({"embed.cond_pos", {condition_token_count(cfg), w}, InitKind::table_normal});
    }
  }
  for (int i = 0; i < cfg.depth; ++i) block("blocks." + std::to_string(i));
  head("final");
  if (cfg.aux_head_depth > 0) {
    for (int j = 0; j < cfg.aux_head_depth; ++j) block("aux.blocks." + std::to_string(j));
    head("aux.final");
  }
  return out;
}

std::size_t count_params(const NetConfig& cfg, bool inference_only) {
  std::size_t n = 0;
  for (const auto& spec : param_layout(cfg)) {
    if (inference_only && is_aux_param(spec.name)) continue;
    n += shape_numel(spec.shape);
  }
  return n;
}

ParamStore init_params(const NetConfig& cfg, std::uint64_t seed) {
  ParamStore store;
  for (const auto& spec : param_layout(cfg)) {
    Tensor t(spec.shape);
    if (spec.init != InitKind::zero) {
      // Linear weights: variance 0.1 / fan_in. Lookup tables act like a
      // linear layer on one-hot inputs (fan_in 1).
      const double fan_in = spec.init == InitKind::fan_in_normal ? static_cast<double>(spec.shape[0]) : 1.0;
      const double sd = std::sqrt(0.1 / fan_in);
      Rng rng = Rng::domain(seed, "init." + spec.name);
      for (double& v : t.data()) v = sd * rng.normal();
    }
    store.emplace(spec.name, std::move(t));
  }
  return store;
}

bool is_aux_param(const std::string& name) { return name.rfind("aux.", 0) == 0; }

ParamStore inference_params(const ParamStore& params) {
  ParamStore out;
  for (const auto& [name, t] : params) {
    if (!is_aux_param(name)) out.emplace(name, t);
  }
  return out;
}

Var sinusoidal_features(const Var& values, int dim, double max_freq, double freq_span) {
  require(dim > 0 && dim % 2 == 0, "sinusoidal feature dim must be positive and even");
  require(values.shape().size() == 1, "sinusoidal features expect values of shape [n]");
  const std::size_t n = values.shape()[0];
  const std::size_t half = static_cast<std::size_t>(dim / 2);
  Tensor freqs({1, half});
  for (std::size_t k = 0; k < half; ++k) {
    const double frac = half > 1 ? static_cast<double>(k) / static_cast<double>(half - 1) : 0.0;
    freqs[k] = max_freq * std::pow(freq_span, -frac);
  }
  Var arg = reshape(values, {n, 1}) * Var(std::move(freqs));
  Var s = reshape(sin(arg), {n, half, 1});
  Var c = reshape(cos(arg), {n, half, 1});
  return reshape(concat({s, c}, 2), {n, static_cast<std::size_t>(dim)});
}

Var embed_scalar(const NetConfig& cfg, const VarMap& params, const std::string& name, const Var& values) {
  Var f = sinusoidal_features(values, cfg.embed_dim, cfg.embed_max_freq, cfg.embed_freq_span);
  const std::string prefix = "embed." + name;
  return linear(params, prefix + ".fc2", silu(linear(params, prefix + ".fc1", f)));
}

Var build_condition_tokens(const NetConfig& cfg, const VarMap& params, const CondBatch& cond) {
  require(cfg.arch == Arch::transformer && cfg.conditioning == ConditioningMode::in_context,
          "condition tokens require an in-context transformer");
  const CondEmbeds e = embed_conditions(cfg, params, cond);
  const std::size_t n = cond.size(), w = static_cast<std::size_t>(cfg.width);
  std::vector<Var> groups;
  auto replicate = [&](const Var& emb, int k) {
    if (k > 0) groups.push_back(broadcast_to(reshape(emb, {n, 1, w}), {n, static_cast<std::size_t>(k), w}));
  };
  replicate(e.cls, cfg.tokens.class_tokens);
  replicate(e.time, cfg.tokens.time);
  if (e.has_guidance) {
    replicate(e.guidance, cfg.tokens.guidance);
    replicate(e.interval, cfg.tokens.interval);
  }
  require(!groups.empty(), "no condition tokens configured");
  return concat(groups, 1) + param(params, "embed.cond_pos");
}

Var forward_trunk(const NetConfig& cfg, const VarMap& params, const Var& z, const CondBatch& cond) {
  return trunk(cfg, params, z, cond).x;
}

Var forward_u(const NetConfig& cfg, const VarMap& params, const Var& z, const CondBatch& cond) {
  TrunkState s = trunk(cfg, params, z, cond);
  for (std::size_t i = shared_depth(cfg); i < static_cast<std::size_t>(cfg.depth); ++i) {
    s = apply_block(cfg, params, "blocks." + std::to_string(i), std::move(s));
  }
  return final_layer(cfg, params, "final", s);
}

Var forward_v_boundary(const NetConfig& cfg, const VarMap& params, const Var& z, const CondBatch& cond) {
  return forward_u(cfg, params, z, cond.at_boundary());
}

Var forward_v_auxhead(const NetConfig& cfg, const VarMap& params, const Var& z, const CondBatch& cond) {
  require(cfg.aux_head_depth > 0, "forward_v_auxhead requires aux_head_depth > 0");
  TrunkState s = trunk(cfg, params, z, cond.at_boundary());
  for (int j = 0; j < cfg.aux_head_depth; ++j) {
    s = apply_block(cfg, params, "aux.blocks." + std::to_string(j), std::move(s));
  }
  return final_layer(cfg, params, "aux.final", s);
}

Tensor predict_u(const NetConfig& cfg, const ParamStore& params, const Tensor& z, const ConditionSet& cond) {
  const VarMap vars = constants(params);
  return forward_u(cfg, vars, Var(z), CondBatch::repeat(cond, z.dim(0))).value();
}

}  // namespace imf
