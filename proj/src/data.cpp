#include "imf/data.hpp"

#include <cmath>
#include <numbers>

namespace imf {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractViolation(msg);
}

void draw_component(const DatasetSpec& spec, int j, Rng& rng, double* out) {
  const Point m = spec.component_mean(j);
  for (int k = 0; k < spec.dim; ++k) out[k] = m[static_cast<std::size_t>(k)] + spec.comp_sigma * rng.normal();
}

void draw_point(const DatasetSpec& spec, Rng& rng, double* out, int* label) {
  switch (spec.kind) {
    case DatasetKind::gaussian: {
      const GaussianSpec& g = spec.gaussian;
      for (std::size_t k = 0; k < g.dim(); ++k) out[k] = g.mu[k] + g.sigma_x * rng.normal();
      return;
    }
    case DatasetKind::gaussian_mixture: {
      const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.k)));
      draw_component(spec, j, rng, out);
      *label = j;
      return;
    }
    case DatasetKind::two_moons: {
      const bool upper = rng.uniform() < 0.5;
      const double a = std::numbers::pi * rng.uniform();
      const double px = upper ? std::cos(a) : 1.0 - std::cos(a);
      const double py = upper ? std::sin(a) : 0.5 - std::sin(a);
      // centred and scaled to roughly unit spread
      out[0] = 2.0 * (px - 0.5) + spec.noise * rng.normal();
      out[1] = 2.0 * (py - 0.25) + spec.noise * rng.normal();
      return;
    }
    case DatasetKind::checkerboard: {
      const int n = spec.cells;
      const std::uint64_t black = static_cast<std::uint64_t>(n * n + 1) / 2;
      // enumerate cells with (i + j) even in row-major order
      std::uint64_t pick = rng.below(black);
      int ci = 0, cj = 0;
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          if ((i + j) % 2 != 0) continue;
          if (pick-- == 0) {
            ci = i;
            cj = j;
            i = n;
            break;
          }
        }
      }
      const double w = 4.0 / n;
      out[0] = -2.0 + w * (ci + rng.uniform());
      out[1] = -2.0 + w * (cj + rng.uniform());
      return;
    }
  }
}

}  // namespace

void DatasetSpec::validate() const {
  require(dim == 1 || dim == 2, "dataset.dim must be 1 or 2");
  switch (kind) {
    case DatasetKind::gaussian:
      gaussian.validate();
      require(gaussian.dim() == static_cast<std::size_t>(dim), "dataset.mu length must equal dataset.dim");
      break;
    case DatasetKind::gaussian_mixture:
      require(k >= 2, "dataset.k must be >= 2");
      require(radius >= 0.0, "dataset.radius must be >= 0");
      require(comp_sigma >= 0.0, "dataset.comp_sigma must be >= 0");
      break;
    case DatasetKind::two_moons:
      require(dim == 2, "dataset.dim must be 2 for two_moons");
      require(noise >= 0.0, "dataset.noise must be >= 0");
      break;
    case DatasetKind::checkerboard:
      require(dim == 2, "dataset.dim must be 2 for checkerboard");
      require(cells >= 2, "dataset.cells must be >= 2");
      break;
  }
  require(!labeled || kind == DatasetKind::gaussian_mixture, "dataset.labeled requires kind gaussian_mixture");
}

int DatasetSpec::num_classes() const { return labeled ? k : 0; }

Point DatasetSpec::component_mean(int j) const {
  require(kind == DatasetKind::gaussian_mixture && j >= 0 && j < k, "component_mean: bad component");
  if (dim == 1) return {k == 1 ? 0.0 : -radius + 2.0 * radius * j / (k - 1)};
  const double a = 2.0 * std::numbers::pi * j / k;
  return {radius * std::cos(a), radius * std::sin(a)};
}

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::gaussian: return "gaussian";
    case DatasetKind::gaussian_mixture: return "gaussian_mixture";
    case DatasetKind::two_moons: return "two_moons";
    case DatasetKind::checkerboard: return "checkerboard";
  }
  return "?";
}

DatasetKind dataset_kind_from_string(const std::string& name) {
  for (DatasetKind k : {DatasetKind::gaussian, DatasetKind::gaussian_mixture, DatasetKind::two_moons,
                        DatasetKind::checkerboard}) {
    if (to_string(k) == name) return k;
  }
  throw ContractViolation("unknown dataset kind '" + name + "'");
}

DataDraw sample_data(const DatasetSpec& spec, std::size_t n, Rng& rng) {
  spec.validate();
  const std::size_t d = static_cast<std::size_t>(spec.dim);
  DataDraw out{Tensor({n, d}), {}};
  if (spec.labeled) out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    int label = kNullClass;
    draw_point(spec, rng, &out.x.data()[i * d], &label);
    if (spec.labeled) out.labels[i] = label;
  }
  return out;
}

Tensor sample_class(const DatasetSpec& spec, int label, std::size_t n, Rng& rng) {
  spec.validate();
  require(spec.kind == DatasetKind::gaussian_mixture && label >= 0 && label < spec.k,
          "sample_class: label out of range");
  const std::size_t d = static_cast<std::size_t>(spec.dim);
  Tensor x({n, d});
  for (std::size_t i = 0; i < n; ++i) draw_component(spec, label, rng, &x.data()[i * d]);
  return x;
}

Batch sample_batch(const DatasetSpec& spec, std::size_t n, Rng& rng) {
  require(n >= 1, "sample_batch: n must be >= 1");
  const Rng step = rng.fork(rng());
  Rng data_rng = step.fork("data");
  Rng noise_rng = step.fork("noise");
  DataDraw draw = sample_data(spec, n, data_rng);
  Batch b;
  b.x = std::move(draw.x);
  b.e = Tensor(b.x.shape());
  for (double& v : b.e.data()) v = noise_rng.normal();
  if (spec.labeled) b.labels = std::move(draw.labels);
  return b;
}

}  // namespace imf
