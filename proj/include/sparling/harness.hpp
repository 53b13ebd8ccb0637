#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparling/annealing.hpp"
#include "sparling/datagen.hpp"
#include "sparling/metrics.hpp"
#include "sparling/models.hpp"

namespace sparling {

/// Invalid or inconsistent configuration (CLI exit code 2).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite loss or parameters during training (CLI exit code 3).
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AnnealSettings {
  bool enabled = true;
  std::int64_t eval_every = 20000;
  double initial_target = 1.0;
  double target_decay = 1e-6;
  double delta_update = 0.75;
  /// Defaults to 1.1 × the domain's minimum density.
  std::optional<double> delta_min;
};

struct TrainSettings {
  std::int64_t seed = 1;
  std::int64_t validation_seed = -1;
  std::int64_t test_seed = -2;
  std::int64_t budget = 300000;  ///< training examples, each drawn fresh from the seed's stream
  int batch_size = 10;
  double learning_rate = 1e-5;
  int validation_size = 500;
  int test_size = 1000;
  std::int64_t curve_every = 1000;
  std::int64_t checkpoint_every = 0;  ///< extra periodic checkpoints; 0 = plateau ends and final only
  int eval_chunk = 50;
};

struct RunConfig {
  std::string name = "run";
  DomainSpec domain;
  ModelConfig model;
  AnnealSettings anneal;
  TrainSettings train;

  /// Throws ConfigError.
  void validate() const;
  double delta_floor() const;

  nlohmann::ordered_json to_json() const;
  /// Unknown keys are rejected with ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

/// Desk-scale defaults for MicroDigitCircle with sparling-MT and annealing.
RunConfig desk_config();

struct TrainResult {
  std::int64_t examples = 0;
  double final_delta = 0.0;
  double final_validation_accuracy = 0.0;
  AnnealLog events;
  std::vector<std::filesystem::path> plateau_checkpoints;  ///< in schedule order, final last
  std::filesystem::path final_checkpoint;
};

/// Progress lines (human readable, not part of any output artifact).
using ProgressSink = std::function<void(const std::string&)>;

/// Runs the train loop and writes into `out_dir`:
///   config.json, events.jsonl, curve.csv, plateau_NN.sprl (one per δ,
///   written when the plateau ends), final.sprl.
/// Throws DivergenceError after writing diverged.sprl and divergence.json.
TrainResult train_run(const RunConfig& config, const std::filesystem::path& out_dir,
                      const ProgressSink& progress = {});

/// Exact-match accuracy of greedy decoding.
double sequence_accuracy(Model& model, const std::vector<Sample>& data, int chunk = 50);

struct EvalOptions {
  bool binning = true;
  std::vector<int> binning_ks{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  int chunk = 50;
};

struct Evaluation {
  MetricsReport report;
  std::optional<BinningResult> binning;
};

/// Metrics of `model` on `data`. η comes from the binning sweep when it
/// finds one, else 32 bits (raw float activations).
Evaluation evaluate(Model& model, const std::vector<Sample>& data, const DomainSpec& domain,
                    const EvalOptions& options = {});

/// Domain spec recorded in a checkpoint written by train_run.
DomainSpec checkpoint_domain(const Checkpoint& ckpt);

/// Writes report.json, confusion.csv and (when available) binning.csv.
void write_evaluation(const Evaluation& eval, const std::filesystem::path& out_dir);
std::string binning_csv(const BinningResult& result);

struct SweepRow {
  double delta = 0.0;
  std::int64_t examples = 0;
  MetricsReport report;
};

/// Evaluates every plateau checkpoint of a finished run on its test set.
/// Missing or unreadable checkpoints are skipped with a warning.
std::vector<SweepRow> sweep_run(const std::filesystem::path& run_dir, std::vector<std::string>* warnings = nullptr,
                                const ProgressSink& progress = {});
std::string sweep_csv(const std::vector<SweepRow>& rows);

struct BaselineRow {
  std::string method;  ///< "l1", "kl" or "sparling"
  double lambda = 0.0;
  MetricsReport report;
};

/// Trains L1 runs over `lambdas`, one KL run and one sparling run (each in
/// its own subdirectory of out_dir) and evaluates them on the test set.
std::vector<BaselineRow> run_baselines(const RunConfig& base, const std::vector<double>& lambdas, double kl_lambda,
                                       const std::filesystem::path& out_dir, const ProgressSink& progress = {});
std::string baselines_csv(const std::vector<BaselineRow>& rows);

struct MetricSummary {
  std::string metric;
  double mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int count = 0;
};

struct Aggregate {
  std::vector<MetricSummary> metrics;
  std::optional<double> spearman_e2ee_ce;
  std::optional<double> spearman_e2ee_fpe;
  std::vector<std::pair<std::int64_t, MetricsReport>> runs;  ///< (train seed, report)
};

/// Mean and percentile CI of the mean from `resamples` bootstrap draws.
MetricSummary bootstrap_mean(const std::string& metric, const std::vector<double>& values, int resamples = 10000,
                             std::uint64_t seed = 0);
/// Spearman rank correlation (average ranks for ties); nullopt when either
/// side is constant or fewer than two points.
std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b);

/// Reads config.json and report.json from each run directory. Configs must
/// agree on everything but the training seed.
Aggregate aggregate_runs(const std::vector<std::filesystem::path>& run_dirs);
nlohmann::ordered_json aggregate_json(const Aggregate& agg);
std::string scatter_csv(const Aggregate& agg);

/// Loads `checkpoint`, removes the bottleneck, freezes the encoder and
/// trains the decoder for `budget` examples. Writes retrained.sprl and
/// retrain_curve.csv into out_dir.
Model retrain_head(const std::filesystem::path& checkpoint, const RunConfig& config, std::int64_t budget,
                   const std::filesystem::path& out_dir, const ProgressSink& progress = {});

/// Batch of training samples [start, start+count) of a seed's stream as
/// stacked images and blank-padded slot targets.
struct Batch {
  Tensor images;
  std::vector<std::vector<int>> labels;
};
Batch make_batch(const std::vector<Sample>& samples, std::size_t begin, std::size_t end);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& content);

}  // namespace sparling
