#pragma once

// Experimental stack of Gamma layers above the factor weights theta.
//
// Layer l (1-based, layer 1 sits directly above theta) has per-instance units
// z_l (N x K_l) and weights w_l (K_l x K_{l-1}, with K_0 = K). The link is
//
//   z_{l-1,ik} ~ Gamma(alpha_l, alpha_l / (z_l,i^T w_l,.k))
//
// so the prior mean of a lower unit is the weighted sum of the units above.
// theta itself gets rate a c / (z_1,i^T w_1,.k). The top layer has a fixed
// Gamma(top_shape, top_rate) prior and weights have Gamma(weight_shape,
// weight_rate) priors. All variational factors are mean-field Gamma and are
// updated with score-function gradients.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pfm/types.hpp"

namespace pfm::deep {

struct GammaField {
  RowMatrix shape;
  RowMatrix rate;
};

struct DeepLayer {
  int index = 1;
  int width = 0;
  double alpha = 1.0;
  GammaField weights;  // K_l x K_{l-1}
  GammaField units;    // N x K_l
};

struct DeepStackConfig {
  int n_layers = 0;
  std::vector<int> widths;  // one per layer; empty means K for every layer
  double alpha = 1.0;
  double weight_shape = 1.0;
  double weight_rate = 1.0;
  double top_shape = 1.0;
  double top_rate = 1.0;
  double step_size = 1e-3;
  int n_mc_samples = 32;
};

// theta expectations the stack conditions on while the PFM state is frozen.
struct ThetaSummary {
  RowMatrix mean;
  RowMatrix mean_log;
  double a = 0.3;
  double c = 1.0;
};

ThetaSummary summarize(const ThetaPosterior& theta, double a, double c);

/// (alpha, alpha / (z_upper^T w_col)); the implied prior mean is z_upper^T w_col.
std::pair<double, double> link_gamma(std::span<const double> z_upper,
                                     std::span<const double> w_col, double alpha);

std::vector<DeepLayer> init_layers(const DeepStackConfig& config, Index n_rows, int bottom_width,
                                   std::uint64_t seed);

// Parameters floor after each projected step.
inline constexpr double kParameterFloor = 1e-6;

/// Score-function estimate of the gradient of the layered bound with respect
/// to every variational shape and rate, laid out like `layers`.
struct ScoreGradient {
  std::vector<GammaField> weights;
  std::vector<GammaField> units;
  double elbo_estimate = 0.0;
};

ScoreGradient score_gradient(const std::vector<DeepLayer>& layers, const ThetaSummary& theta,
                             const DeepStackConfig& config, int n_mc_samples,
                             std::uint64_t seed);

// One Monte Carlo sample of log p - log q for the stack (no gradient).
double sample_elbo(const std::vector<DeepLayer>& layers, const ThetaSummary& theta,
                   const DeepStackConfig& config, std::uint64_t seed);

struct DeepStepResult {
  std::vector<DeepLayer> layers;
  double elbo_estimate = 0.0;
  bool accepted = true;
  std::string diagnostic;
};

/// Estimates the gradient with `n_mc_samples` draws and takes one projected
/// ascent step. A non-finite estimate leaves the layers unchanged and sets
/// accepted = false with a diagnostic.
DeepStepResult deep_grad_step(const std::vector<DeepLayer>& layers, const ThetaSummary& theta,
                              const DeepStackConfig& config, double step_size, int n_mc_samples,
                              std::uint64_t seed);

// E[z_1] E[w_1]: the multiplier on theta's prior mean, N x K.
RowMatrix theta_prior_scale(const std::vector<DeepLayer>& layers);

}  // namespace pfm::deep
