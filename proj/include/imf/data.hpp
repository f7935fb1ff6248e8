#pragma once

#include <string>

#include "imf/objectives.hpp"
#include "imf/oracle.hpp"
#include "imf/rng.hpp"

namespace imf {

enum class DatasetKind { gaussian, gaussian_mixture, two_moons, checkerboard };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::gaussian_mixture;
  int dim = 2;
  bool labeled = false;
  GaussianSpec gaussian;   // kind = gaussian; dim must equal gaussian.mu.size()
  int k = 8;               // mixture components
  double radius = 4.0;     // mixture means on a circle (2D) or evenly on [-radius, radius] (1D)
  double comp_sigma = 0.3;
  double noise = 0.1;      // two moons
  int cells = 4;           // checkerboard cells per side on [-2, 2]^2

  void validate() const;
  /// Number of class labels (0 when unlabeled).
  int num_classes() const;
  /// Mean of mixture component j.
  Point component_mean(int j) const;
};

std::string to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(const std::string& name);

struct DataDraw {
  Tensor x;                 // [n, dim]
  std::vector<int> labels;  // empty when unlabeled
};

/// n i.i.d. data points (and labels if the dataset is labeled).
DataDraw sample_data(const DatasetSpec& spec, std::size_t n, Rng& rng);

/// n points from mixture component `label`.
Tensor sample_class(const DatasetSpec& spec, int label, std::size_t n, Rng& rng);

/// Data, fresh prior noise, and labels. x and e come from separate streams
/// forked off one draw of `rng`.
Batch sample_batch(const DatasetSpec& spec, std::size_t n, Rng& rng);

}  // namespace imf
