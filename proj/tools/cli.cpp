#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pfm/inference.hpp"
#include "pfm/io.hpp"
#include "pfm/model.hpp"
#include "pfm/predict.hpp"

namespace pfm::cli {

namespace {

// A flag/value problem the user can fix; exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Writes to `path`, or to `fallback` when the path is empty.
void require(bool ok, const std::string& flag, const std::string& cause) {
  if (!ok) throw UsageError(flag + ": " + cause);
}

void check_fit_flags(const ModelConfig& model, const FitConfig& fit, Index n_rows) {
  require(model.n_factors >= 1, "--k", "must be >= 1, got " + std::to_string(model.n_factors));
  require(model.a > 0.0, "--a", "must be positive");
  require(model.b > 0.0, "--b", "must be positive");
  require(fit.max_iters >= 0, "--max-iters", "must be >= 0");
  require(fit.rel_tol > 0.0, "--tol", "must be positive");
  require(fit.eval_every >= 1, "--eval-every", "must be >= 1");
  require(fit.deep.n_layers >= 0, "--deep-layers", "must be >= 0");
  if (fit.mode == FitMode::Svi) {
    require(fit.deep.n_layers == 0, "--deep-layers", "the deep stack needs batch fitting (fit)");
    require(fit.schedule.batch_size >= 1 && fit.schedule.batch_size <= n_rows, "--batch-size",
            "must lie in [1, " + std::to_string(n_rows) + "], got " +
                std::to_string(fit.schedule.batch_size));
    require(fit.schedule.t0 > 0.0, "--t0", "must be positive");
    require(fit.schedule.kappa > 0.5 && fit.schedule.kappa <= 1.0, "--kappa", "must lie in (0.5, 1]");
  }
}

template <typename Writer>
void emit(const std::string& path, std::ostream& fallback, Writer&& write) {
  if (path.empty()) {
    write(fallback);
    return;
  }
  std::ofstream file(path, std::ios::trunc);
  if (!file) throw UsageError("cannot open " + path + " for writing");
  write(file);
}

struct ModelFlags {
  int k = 5;
  double a = 0.3;
  double b = 0.3;
  std::uint64_t seed = 0;
  int max_iters = 1000;
  double tol = 1e-6;
  int eval_every = 1;
  bool paper_moment = false;
  int deep_layers = 0;
  std::string config;

  CLI::Option* k_opt = nullptr;
  CLI::Option* a_opt = nullptr;
  CLI::Option* b_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* iters_opt = nullptr;
  CLI::Option* tol_opt = nullptr;
  CLI::Option* eval_opt = nullptr;

  void add(CLI::App& app) {
    k_opt = app.add_option("--k", k, "Number of latent factors")->capture_default_str();
    a_opt = app.add_option("--a", a, "Theta shape hyperparameter")->capture_default_str();
    b_opt = app.add_option("--b", b, "Beta shape/rate hyperparameter")->capture_default_str();
    seed_opt = app.add_option("--seed", seed, "Random seed")->capture_default_str();
    iters_opt = app.add_option("--max-iters", max_iters, "Iterations (epochs for fit-svi)")
                    ->capture_default_str();
    tol_opt = app.add_option("--tol", tol, "Relative ELBO change for convergence")
                  ->capture_default_str();
    eval_opt = app.add_option("--eval-every", eval_every, "ELBO evaluation period")
                   ->capture_default_str();
    app.add_flag("--paper-moment", paper_moment,
                 "Use the 1/K^2, 1/(a c^2) form of E[theta theta^T] in the M-step");
    app.add_option("--deep-layers", deep_layers, "Gamma layers stacked above theta (batch only)")
        ->capture_default_str();
    app.add_option("--config", config, "JSON config with ModelConfig/FitConfig fields");
  }

  // Defaults, then the JSON config, then flags given on the command line.
  void resolve(ModelConfig& model, FitConfig& fit) const {
    model.n_factors = k;
    model.a = a;
    model.b = b;
    model.seed = seed;
    fit.max_iters = max_iters;
    fit.rel_tol = tol;
    fit.eval_every = eval_every;
    fit.schedule.batch_size = 0;  // 0 = not set; fit-svi then uses N / 10
    if (!config.empty()) {
      std::ifstream in(config);
      if (!in) throw UsageError("--config: cannot open " + config);
      std::stringstream text;
      text << in.rdbuf();
      io::apply_config_json(text.str(), model, fit);
      if (k_opt->count()) model.n_factors = k;
      if (a_opt->count()) model.a = a;
      if (b_opt->count()) model.b = b;
      if (seed_opt->count()) model.seed = seed;
      if (iters_opt->count()) fit.max_iters = max_iters;
      if (tol_opt->count()) fit.rel_tol = tol;
      if (eval_opt->count()) fit.eval_every = eval_every;
    }
    fit.moment = paper_moment ? MomentMode::PaperFaithful : MomentMode::Factorized;
    fit.deep.n_layers = deep_layers;
  }
};

struct FitFlags {
  std::string counts;
  std::string responses;
  std::string out;
  std::string trace;
  bool no_timing = false;
  Index batch_size = 0;
  double t0 = 64.0;
  double kappa = 0.7;
  CLI::Option* batch_opt = nullptr;
  CLI::Option* t0_opt = nullptr;
  CLI::Option* kappa_opt = nullptr;
  ModelFlags model;
};

void add_fit_options(CLI::App& app, FitFlags& f, bool svi) {
  app.add_option("--counts", f.counts, "Training counts (coordinate format)")->required();
  app.add_option("--responses", f.responses, "Training responses, one per row");
  app.add_option("--out", f.out, "Checkpoint to write")->required();
  app.add_option("--trace", f.trace, "ELBO trace CSV to write");
  app.add_flag("--no-timing", f.no_timing, "Write elapsed_ms as 0 in the trace");
  f.model.add(app);
  if (svi) {
    f.batch_opt = app.add_option("--batch-size", f.batch_size, "Rows per mini-batch (default N/10)");
    f.t0_opt = app.add_option("--t0", f.t0, "Step-size delay t0")->capture_default_str();
    f.kappa_opt = app.add_option("--kappa", f.kappa, "Step-size exponent kappa in (0.5, 1]")
                      ->capture_default_str();
  }
}

int run_fit(const FitFlags& f, bool svi, std::ostream& out, std::ostream& err) {
  const CountMatrix counts = io::load_counts(f.counts);
  ResponseVector y;
  if (!f.responses.empty()) y = io::load_responses(f.responses, counts.n_rows());

  ModelConfig model;
  FitConfig fit;
  f.model.resolve(model, fit);
  if (svi) {
    fit.mode = FitMode::Svi;
    if (f.batch_opt->count())
      fit.schedule.batch_size = f.batch_size;
    else if (fit.schedule.batch_size == 0)
      fit.schedule.batch_size = std::max<Index>(1, counts.n_rows() / 10);
    if (f.t0_opt->count()) fit.schedule.t0 = f.t0;
    if (f.kappa_opt->count()) fit.schedule.kappa = f.kappa;
  } else {
    fit.mode = FitMode::Batch;
  }
  check_fit_flags(model, fit, counts.n_rows());

  const FitResult result = pfm::fit(counts, {y.data(), static_cast<std::size_t>(y.size())},
                                    model, fit);
  if (result.empty_rows || result.empty_cols)
    err << "note: " << result.empty_rows << " all-zero rows, " << result.empty_cols
        << " all-zero columns\n";
  io::save_checkpoint(f.out, io::make_checkpoint(model, result));
  if (!f.trace.empty())
    emit(f.trace, out, [&](std::ostream& s) { write_trace_csv(s, result.trace, !f.no_timing); });
  out << "iterations," << result.iterations << '\n'
      << "converged," << (result.converged ? "true" : "false") << '\n'
      << "final_elbo," << (result.trace.empty() ? std::string("nan") : fmt(result.trace.back().elbo))
      << '\n';
  return 0;
}

void check_k(const CLI::Option* opt, int k, const FittedModel& model) {
  if (opt->count() && k != model.config.n_factors)
    throw UsageError("dimension mismatch: --k is " + std::to_string(k) +
                     " but the checkpoint has K = " + std::to_string(model.config.n_factors));
}

std::vector<std::pair<Index, std::int64_t>> parse_features(const std::string& spec) {
  std::vector<std::pair<Index, std::int64_t>> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos)
      throw UsageError("--features: expected col:count, got \"" + item + "\"");
    try {
      out.emplace_back(std::stoll(item.substr(0, colon)), std::stoll(item.substr(colon + 1)));
    } catch (const std::exception&) {
      throw UsageError("--features: expected col:count, got \"" + item + "\"");
    }
  }
  if (out.empty()) throw UsageError("--features: at least one col:count pair is required");
  return out;
}

std::vector<double> parse_list(const std::string& spec, const char* flag) {
  std::vector<double> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw UsageError(std::string(flag) + ": \"" + item + "\" is not a number");
    }
  }
  return out;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Poisson factorization machine: fit, predict, query, simulate, eval"};
  app.require_subcommand(1);

  FitFlags fit_flags;
  auto* fit_cmd = app.add_subcommand("fit", "Batch variational EM");
  add_fit_options(*fit_cmd, fit_flags, false);

  FitFlags svi_flags;
  auto* svi_cmd = app.add_subcommand("fit-svi", "Stochastic variational inference");
  add_fit_options(*svi_cmd, svi_flags, true);

  std::string model_path, counts_path, out_path, responses_path, features;
  int k_check = 0;
  std::size_t top_n = 10;
  auto* predict_cmd = app.add_subcommand("predict", "Predict responses for new count rows");
  predict_cmd->add_option("--model", model_path, "Checkpoint")->required();
  predict_cmd->add_option("--counts", counts_path, "Query rows (coordinate format)")->required();
  predict_cmd->add_option("--out", out_path, "Predictions CSV (default stdout)");
  auto* predict_k = predict_cmd->add_option("--k", k_check, "Expected number of factors");

  auto* query_cmd = app.add_subcommand("query", "Expected counts and related items for a feature subset");
  query_cmd->add_option("--model", model_path, "Checkpoint")->required();
  query_cmd->add_option("--features", features, "Observed counts as col:count,col:count")
      ->required();
  query_cmd->add_option("--top", top_n, "Length of the ranked lists")->capture_default_str();
  query_cmd->add_option("--out", out_path, "Result CSV (default stdout)");
  auto* query_k = query_cmd->add_option("--k", k_check, "Expected number of factors");

  Index sim_n = 200, sim_d = 100;
  double sim_c = 1.0, sim_sigma = 0.1;
  std::string sim_eta, sim_prefix;
  ModelConfig sim_model;
  auto* sim_cmd = app.add_subcommand("simulate", "Sample a synthetic dataset");
  sim_cmd->add_option("--n", sim_n, "Rows")->capture_default_str();
  sim_cmd->add_option("--d", sim_d, "Columns")->capture_default_str();
  sim_cmd->add_option("--k", sim_model.n_factors, "Factors")->capture_default_str();
  sim_cmd->add_option("--a", sim_model.a, "Theta shape")->capture_default_str();
  sim_cmd->add_option("--b", sim_model.b, "Beta shape/rate")->capture_default_str();
  sim_cmd->add_option("--c", sim_c, "Theta prior scale")->capture_default_str();
  sim_cmd->add_option("--sigma", sim_sigma, "Response noise variance")->capture_default_str();
  sim_cmd->add_option("--eta", sim_eta, "Response weights, comma separated (default all 1)");
  sim_cmd->add_option("--seed", sim_model.seed, "Random seed")->capture_default_str();
  sim_cmd->add_option("--out-prefix", sim_prefix,
                      "Writes PREFIX.counts, .response, .theta, .beta")->required();

  double holdout = 0.0;
  std::uint64_t eval_seed = 0;
  auto* eval_cmd = app.add_subcommand("eval", "Held-out Poisson log-likelihood and response RMSE");
  eval_cmd->add_option("--model", model_path, "Checkpoint")->required();
  eval_cmd->add_option("--counts", counts_path, "Held-out rows (coordinate format)")->required();
  eval_cmd->add_option("--responses", responses_path, "Held-out responses");
  eval_cmd->add_option("--holdout-features", holdout,
                       "Fraction of columns scored but hidden from fold-in (0 scores all)")
      ->capture_default_str();
  eval_cmd->add_option("--seed", eval_seed, "Seed for choosing hidden columns")
      ->capture_default_str();
  eval_cmd->add_option("--out", out_path, "Metrics CSV (default stdout)");
  auto* eval_k = eval_cmd->add_option("--k", k_check, "Expected number of factors");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (fit_cmd->parsed()) return run_fit(fit_flags, false, out, err);
    if (svi_cmd->parsed()) return run_fit(svi_flags, true, out, err);

    if (predict_cmd->parsed()) {
      const auto ck = io::load_checkpoint(model_path);
      check_k(predict_k, k_check, ck.model);
      const CountMatrix rows = io::load_counts(counts_path);
      if (rows.n_cols() != ck.model.beta.n_cols())
        throw UsageError("dimension mismatch: query rows have " + std::to_string(rows.n_cols()) +
                         " columns but the checkpoint has D = " +
                         std::to_string(ck.model.beta.n_cols()));
      emit(out_path, out, [&](std::ostream& s) {
        s << "row,y_hat\n";
        for (Index i = 0; i < rows.n_rows(); ++i) {
          std::vector<std::pair<Index, std::int64_t>> nz;
          for (const auto& e : rows.row(i)) nz.emplace_back(e.col, e.count);
          const auto result = run_query(Query::full_row(rows.n_cols(), std::move(nz)), ck.model);
          s << i << ',' << fmt(result.predicted_response) << '\n';
        }
      });
      return 0;
    }

    if (query_cmd->parsed()) {
      const auto ck = io::load_checkpoint(model_path);
      check_k(query_k, k_check, ck.model);
      const Query q = Query::subset(ck.model.beta.n_cols(), parse_features(features));
      const auto result = run_query(q, ck.model);
      if (result.prior_only) err << "warning: no observed features; returning the prior\n";
      const auto ranks = rank_related(result, ck.model, top_n);
      emit(out_path, out, [&](std::ostream& s) {
        s << "kind,index,value\n";
        for (Index k = 0; k < result.theta_mean.size(); ++k)
          s << "theta," << k << ',' << fmt(result.theta_mean(k)) << '\n';
        s << "response,0," << fmt(result.predicted_response) << '\n';
        for (const auto& [d, v] : result.expected_counts) s << "expected," << d << ',' << fmt(v) << '\n';
        for (const auto& r : ranks.features) s << "top_feature," << r.index << ',' << fmt(r.score) << '\n';
        for (const auto& r : ranks.instances)
          s << "top_instance," << r.index << ',' << fmt(r.score) << '\n';
      });
      return 0;
    }

    if (sim_cmd->parsed()) {
      require(sim_n >= 1, "--n", "must be >= 1");
      require(sim_d >= 1, "--d", "must be >= 1");
      require(sim_model.n_factors >= 1, "--k", "must be >= 1");
      require(sim_model.a > 0.0, "--a", "must be positive");
      require(sim_model.b > 0.0, "--b", "must be positive");
      require(sim_c > 0.0, "--c", "must be positive");
      require(sim_sigma >= 0.0, "--sigma", "must be >= 0");
      Vector eta = Vector::Ones(sim_model.n_factors);
      if (!sim_eta.empty()) {
        const auto values = parse_list(sim_eta, "--eta");
        if (static_cast<int>(values.size()) != sim_model.n_factors)
          throw UsageError("--eta: expected " + std::to_string(sim_model.n_factors) +
                           " values, got " + std::to_string(values.size()));
        eta = Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()));
      }
      const auto data = sample_dataset(sim_model, sim_n, sim_d, sim_c, eta, sim_sigma,
                                       sim_model.seed);
      io::save_counts(sim_prefix + ".counts", data.counts);
      io::save_responses(sim_prefix + ".response", data.y);
      io::save_dense(sim_prefix + ".theta", data.theta);
      io::save_dense(sim_prefix + ".beta", data.beta);
      out << "rows," << sim_n << "\ncols," << sim_d << "\nnnz," << data.counts.nnz() << '\n';
      return 0;
    }

    if (eval_cmd->parsed()) {
      const auto ck = io::load_checkpoint(model_path);
      check_k(eval_k, k_check, ck.model);
      const CountMatrix rows = io::load_counts(counts_path);
      ResponseVector y;
      if (!responses_path.empty()) y = io::load_responses(responses_path, rows.n_rows());
      if (!(holdout >= 0.0 && holdout < 1.0))
        throw UsageError("--holdout-features must lie in [0, 1)");
      std::vector<bool> fold_in_cols(static_cast<std::size_t>(rows.n_cols()), true);
      const auto hidden = static_cast<std::size_t>(holdout * static_cast<double>(rows.n_cols()));
      if (hidden > 0) {
        std::vector<std::size_t> order(fold_in_cols.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(eval_seed);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t j = 0; j < hidden; ++j) fold_in_cols[order[j]] = false;
      }
      const auto score = evaluate_heldout(rows, {y.data(), static_cast<std::size_t>(y.size())},
                                          ck.model, fold_in_cols);
      emit(out_path, out, [&](std::ostream& s) {
        s << "metric,value\n"
          << "mean_poisson_loglik," << fmt(score.mean_poisson_loglik) << '\n'
          << "scored_cells," << score.scored_cells << '\n';
        if (y.size() > 0) s << "response_rmse," << fmt(score.rmse) << '\n';
      });
      return 0;
    }
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace pfm::cli
