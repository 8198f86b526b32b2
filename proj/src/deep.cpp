#include "pfm/deep.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "pfm/model.hpp"
#include "pfm/special.hpp"

namespace pfm::deep {

namespace {

// Fixed so the reduction order does not depend on the thread count.
constexpr int kSampleChunks = 16;

double gamma_log_pdf(double x, double shape, double rate) {
  return shape * std::log(rate) - log_gamma(shape) + (shape - 1.0) * std::log(x) - rate * x;
}

struct Draw {
  std::vector<RowMatrix> weights;
  std::vector<RowMatrix> units;
};

std::mt19937_64 sample_stream(std::uint64_t seed, int sample) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(sample)};
  return std::mt19937_64(seq);
}

RowMatrix draw_field(const GammaField& field, std::mt19937_64& rng) {
  RowMatrix out(field.shape.rows(), field.shape.cols());
  for (Index r = 0; r < out.rows(); ++r)
    for (Index c = 0; c < out.cols(); ++c) {
      std::gamma_distribution<double> dist(field.shape(r, c), 1.0 / field.rate(r, c));
      // Clamp underflow so logs stay finite.
      out(r, c) = std::max(dist(rng), std::numeric_limits<double>::min());
    }
  return out;
}

double field_log_q(const GammaField& field, const RowMatrix& x) {
  double total = 0.0;
  for (Index r = 0; r < x.rows(); ++r)
    for (Index c = 0; c < x.cols(); ++c)
      total += gamma_log_pdf(x(r, c), field.shape(r, c), field.rate(r, c));
  return total;
}

Draw draw(const std::vector<DeepLayer>& layers, std::mt19937_64& rng) {
  Draw d;
  for (const auto& layer : layers) {
    d.weights.push_back(draw_field(layer.weights, rng));
    d.units.push_back(draw_field(layer.units, rng));
  }
  return d;
}

// log p(draw, theta) - log q(draw), with theta integrated under its frozen q.
double learning_signal(const std::vector<DeepLayer>& layers, const Draw& d,
                       const ThetaSummary& theta, const DeepStackConfig& config) {
  double log_p = 0.0;
  double log_q = 0.0;
  const auto depth = layers.size();
  for (std::size_t l = 0; l < depth; ++l) {
    const RowMatrix& w = d.weights[l];
    for (Index r = 0; r < w.rows(); ++r)
      for (Index c = 0; c < w.cols(); ++c)
        log_p += gamma_log_pdf(w(r, c), config.weight_shape, config.weight_rate);
    log_q += field_log_q(layers[l].weights, w) + field_log_q(layers[l].units, d.units[l]);
  }
  const RowMatrix& top = d.units[depth - 1];
  for (Index r = 0; r < top.rows(); ++r)
    for (Index c = 0; c < top.cols(); ++c)
      log_p += gamma_log_pdf(top(r, c), config.top_shape, config.top_rate);
  // Units of layer l given layer l + 1.
  for (std::size_t l = 0; l + 1 < depth; ++l) {
    const RowMatrix mean = d.units[l + 1] * d.weights[l + 1];
    const double alpha = layers[l].alpha;
    for (Index r = 0; r < mean.rows(); ++r)
      for (Index c = 0; c < mean.cols(); ++c)
        log_p += gamma_log_pdf(d.units[l](r, c), alpha, alpha / mean(r, c));
  }
  // theta given the bottom layer: Gamma(a, a c / m), expectation over q(theta).
  const RowMatrix scale = d.units[0] * d.weights[0];
  const double a = theta.a;
  for (Index i = 0; i < scale.rows(); ++i)
    for (Index k = 0; k < scale.cols(); ++k)
      log_p += gamma_expected_log_density(a, a * theta.c / scale(i, k), theta.mean(i, k),
                                          theta.mean_log(i, k));
  return log_p - log_q;
}

// Adds weight * d/d(shape, rate) log Gamma(x; shape, rate) into grad.
void add_score(const GammaField& field, const RowMatrix& x, double weight, GammaField& grad) {
  for (Index r = 0; r < x.rows(); ++r)
    for (Index c = 0; c < x.cols(); ++c) {
      const double shape = field.shape(r, c);
      const double rate = field.rate(r, c);
      grad.shape(r, c) += weight * (std::log(rate) - digamma(shape) + std::log(x(r, c)));
      grad.rate(r, c) += weight * (shape / rate - x(r, c));
    }
}

GammaField zeros_like(const GammaField& f) {
  return {RowMatrix::Zero(f.shape.rows(), f.shape.cols()),
          RowMatrix::Zero(f.shape.rows(), f.shape.cols())};
}

ScoreGradient zero_gradient(const std::vector<DeepLayer>& layers) {
  ScoreGradient g;
  for (const auto& layer : layers) {
    g.weights.push_back(zeros_like(layer.weights));
    g.units.push_back(zeros_like(layer.units));
  }
  return g;
}

void check_layers(const std::vector<DeepLayer>& layers, const ThetaSummary& theta) {
  if (layers.empty()) throw DomainError("deep stack: at least one layer is required");
  if (layers[0].units.shape.rows() != theta.mean.rows() ||
      layers[0].weights.shape.cols() != theta.mean.cols())
    throw DomainError("deep stack: bottom layer does not match theta's shape");
}

bool all_finite(const ScoreGradient& g) {
  for (std::size_t l = 0; l < g.weights.size(); ++l)
    if (!g.weights[l].shape.allFinite() || !g.weights[l].rate.allFinite() ||
        !g.units[l].shape.allFinite() || !g.units[l].rate.allFinite())
      return false;
  return std::isfinite(g.elbo_estimate);
}

void ascend(GammaField& field, const GammaField& grad, double step) {
  field.shape = (field.shape + step * grad.shape).cwiseMax(kParameterFloor);
  field.rate = (field.rate + step * grad.rate).cwiseMax(kParameterFloor);
}

}  // namespace

ThetaSummary summarize(const ThetaPosterior& theta, double a, double c) {
  ThetaSummary s{RowMatrix(theta.n_rows(), theta.n_factors()),
                 RowMatrix(theta.n_rows(), theta.n_factors()), a, c};
  for (Index i = 0; i < theta.n_rows(); ++i)
    for (Index k = 0; k < theta.n_factors(); ++k) {
      s.mean(i, k) = gamma_mean(theta.shape(i, k), theta.rate(i, k));
      s.mean_log(i, k) = gamma_mean_log(theta.shape(i, k), theta.rate(i, k));
    }
  return s;
}

std::pair<double, double> link_gamma(std::span<const double> z_upper,
                                     std::span<const double> w_col, double alpha) {
  if (z_upper.size() != w_col.size())
    throw DomainError("link_gamma: unit and weight vectors differ in length");
  if (!(alpha > 0.0)) throw DomainError("link_gamma: alpha must be positive");
  double inner = 0.0;
  for (std::size_t j = 0; j < z_upper.size(); ++j) inner += z_upper[j] * w_col[j];
  if (!(inner > 0.0)) throw DomainError("link_gamma: z^T w must be positive");
  return {alpha, alpha / inner};
}

std::vector<DeepLayer> init_layers(const DeepStackConfig& config, Index n_rows, int bottom_width,
                                   std::uint64_t seed) {
  if (config.n_layers < 1) return {};
  if (!config.widths.empty() && static_cast<int>(config.widths.size()) != config.n_layers)
    throw DomainError("deep stack: expected one width per layer");
  std::mt19937_64 rng(seed ^ 0xD1B54A32D192ED03ULL);
  std::uniform_real_distribution<double> jitter(0.0, 0.1);
  std::vector<DeepLayer> layers;
  int below = bottom_width;
  for (int l = 1; l <= config.n_layers; ++l) {
    const int width = config.widths.empty() ? bottom_width : config.widths[l - 1];
    if (width < 1) throw DomainError("deep stack: layer widths must be positive");
    DeepLayer layer;
    layer.index = l;
    layer.width = width;
    layer.alpha = config.alpha;
    // Weight means 1 / width so the summed prior mean starts near 1.
    layer.weights.shape.resize(width, below);
    for (Index r = 0; r < width; ++r)
      for (Index c = 0; c < below; ++c)
        layer.weights.shape(r, c) = config.weight_shape * (1.0 + jitter(rng));
    layer.weights.rate = RowMatrix::Constant(width, below, config.weight_shape * width);
    const double unit_shape = l == config.n_layers ? config.top_shape : config.alpha;
    layer.units.shape.resize(n_rows, width);
    for (Index r = 0; r < n_rows; ++r)
      for (Index c = 0; c < width; ++c) layer.units.shape(r, c) = unit_shape * (1.0 + jitter(rng));
    layer.units.rate = RowMatrix::Constant(n_rows, width, unit_shape);
    layers.push_back(std::move(layer));
    below = width;
  }
  return layers;
}

ScoreGradient score_gradient(const std::vector<DeepLayer>& layers, const ThetaSummary& theta,
                             const DeepStackConfig& config, int n_mc_samples,
                             std::uint64_t seed) {
  check_layers(layers, theta);
  if (n_mc_samples < 1) throw DomainError("score_gradient: n_mc_samples must be >= 1");
  std::vector<ScoreGradient> partial(kSampleChunks, zero_gradient(layers));
  std::vector<double> signal_sum(kSampleChunks, 0.0);

#pragma omp parallel for schedule(dynamic, 1)
  for (int chunk = 0; chunk < kSampleChunks; ++chunk) {
    for (int s = chunk; s < n_mc_samples; s += kSampleChunks) {
      auto rng = sample_stream(seed, s);
      const Draw d = draw(layers, rng);
      const double f = learning_signal(layers, d, theta, config);
      signal_sum[static_cast<std::size_t>(chunk)] += f;
      auto& g = partial[static_cast<std::size_t>(chunk)];
      for (std::size_t l = 0; l < layers.size(); ++l) {
        add_score(layers[l].weights, d.weights[l], f, g.weights[l]);
        add_score(layers[l].units, d.units[l], f, g.units[l]);
      }
    }
  }

  ScoreGradient total = zero_gradient(layers);
  const double inv = 1.0 / n_mc_samples;
  for (int chunk = 0; chunk < kSampleChunks; ++chunk) {
    const auto& g = partial[static_cast<std::size_t>(chunk)];
    for (std::size_t l = 0; l < layers.size(); ++l) {
      total.weights[l].shape += g.weights[l].shape;
      total.weights[l].rate += g.weights[l].rate;
      total.units[l].shape += g.units[l].shape;
      total.units[l].rate += g.units[l].rate;
    }
    total.elbo_estimate += signal_sum[static_cast<std::size_t>(chunk)];
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    total.weights[l].shape *= inv;
    total.weights[l].rate *= inv;
    total.units[l].shape *= inv;
    total.units[l].rate *= inv;
  }
  total.elbo_estimate *= inv;
  return total;
}

double sample_elbo(const std::vector<DeepLayer>& layers, const ThetaSummary& theta,
                   const DeepStackConfig& config, std::uint64_t seed) {
  check_layers(layers, theta);
  auto rng = sample_stream(seed, 0);
  return learning_signal(layers, draw(layers, rng), theta, config);
}

DeepStepResult deep_grad_step(const std::vector<DeepLayer>& layers, const ThetaSummary& theta,
                              const DeepStackConfig& config, double step_size, int n_mc_samples,
                              std::uint64_t seed) {
  DeepStepResult result{layers, 0.0, true, {}};
  const ScoreGradient grad = score_gradient(layers, theta, config, n_mc_samples, seed);
  result.elbo_estimate = grad.elbo_estimate;
  if (!all_finite(grad)) {
    result.accepted = false;
    result.diagnostic = "deep stack: non-finite score-function gradient estimate; step rejected";
    return result;
  }
  if (step_size == 0.0) return result;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    ascend(result.layers[l].weights, grad.weights[l], step_size);
    ascend(result.layers[l].units, grad.units[l], step_size);
  }
  return result;
}

RowMatrix theta_prior_scale(const std::vector<DeepLayer>& layers) {
  if (layers.empty()) return {};
  const auto& bottom = layers.front();
  const RowMatrix z = bottom.units.shape.cwiseQuotient(bottom.units.rate);
  const RowMatrix w = bottom.weights.shape.cwiseQuotient(bottom.weights.rate);
  return z * w;
}

}  // namespace pfm::deep
