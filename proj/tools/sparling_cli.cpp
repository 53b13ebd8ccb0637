// sparling: dataset generation, training, evaluation and report generation
// for MicroDigitCircle experiments.

#include <malloc.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "sparling/checkpoint.hpp"
#include "sparling/datagen.hpp"
#include "sparling/harness.hpp"

namespace fs = std::filesystem;
using namespace sparling;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;

RunConfig load_config(const std::string& path) { return path.empty() ? desk_config() : RunConfig::load(path); }

void log_line(const std::string& line) { std::cerr << line << std::endl; }

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("cannot parse '" + item + "' as a number");
    }
  }
  return out;
}

std::vector<Sample> load_or_generate(const std::string& dataset, const DomainSpec& domain, std::int64_t seed,
                                     int count) {
  if (dataset.empty()) return generate(domain, seed, count);
  Dataset ds = dataset_read(dataset);
  if (!(ds.header.spec == domain)) throw ConfigError("dataset domain spec differs from the checkpoint's");
  return std::move(ds.samples);
}

}  // namespace

int main(int argc, char** argv) {
  // Keep large activation buffers on the heap free lists instead of
  // returning them to the kernel every step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"MicroDigitCircle sparsity-bottleneck experiments"};
  app.require_subcommand(1);

  std::string config_path, out, spec_path, checkpoint, dataset, lambdas = "0.1,1,2,5,10";
  std::int64_t seed = 0, count = 1000, budget = 0;
  double kl_lambda = 1.0;
  bool skip_eval = false;
  std::vector<std::string> runs;

  auto* gen = app.add_subcommand("gen", "write a dataset file");
  gen->add_option("--spec", spec_path, "domain spec JSON (defaults when omitted)");
  gen->add_option("--seed", seed, "stream seed")->required();
  gen->add_option("--count", count, "number of samples")->check(CLI::PositiveNumber);
  gen->add_option("--out", out, "output file")->required();

  auto* train = app.add_subcommand("train", "train one run and evaluate it on the test set");
  train->add_option("--config", config_path, "run config JSON");
  train->add_option("--seed", seed, "training seed (overrides the config)");
  train->add_option("--out", out, "run directory")->required();
  train->add_flag("--skip-eval", skip_eval, "do not evaluate the final checkpoint");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--config", config_path, "run config JSON (test seed and size)");
  eval->add_option("--dataset", dataset, "dataset file instead of the generated test set");
  eval->add_option("--seed", seed, "dataset seed (default: the config's test seed)");
  eval->add_option("--out", out, "output directory")->required();

  auto* sweep = app.add_subcommand("sweep", "evaluate every plateau checkpoint of a run");
  sweep->add_option("--run", checkpoint, "run directory")->required();
  sweep->add_option("--out", out, "CSV path (default: <run>/sweep.csv)");

  auto* baselines = app.add_subcommand("baselines", "L1 lambda sweep, KL and sparling runs");
  baselines->add_option("--config", config_path, "base run config JSON");
  baselines->add_option("--seed", seed, "training seed (overrides the config)");
  baselines->add_option("--lambdas", lambdas, "comma-separated L1 weights");
  baselines->add_option("--kl-lambda", kl_lambda, "KL weight");
  baselines->add_option("--out", out, "output directory")->required();

  auto* aggregate = app.add_subcommand("aggregate", "combine finished runs across seeds");
  aggregate->add_option("--runs", runs, "run directories")->required()->expected(2, -1);
  aggregate->add_option("--out", out, "output directory")->required();

  auto* retrain = app.add_subcommand("retrain", "drop the bottleneck, freeze the encoder, refit the decoder");
  retrain->add_option("--checkpoint", checkpoint, "trained sparling checkpoint")->required();
  retrain->add_option("--config", config_path, "run config JSON");
  retrain->add_option("--seed", seed, "training seed (overrides the config)");
  retrain->add_option("--budget", budget, "examples (default: the config budget)");
  retrain->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) {
      DomainSpec spec;
      if (!spec_path.empty()) {
        try {
          spec = DomainSpec::from_json(nlohmann::json::parse(read_file(spec_path)));
        } catch (const nlohmann::json::exception& e) {
          throw ConfigError(std::string("spec: ") + e.what());
        }
      }
      try {
        spec.validate();
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
      dataset_write(out, DatasetHeader{spec, seed, 0, count}, generate(spec, seed, count));
    } else if (*train) {
      RunConfig config = load_config(config_path);
      if (train->count("--seed")) config.train.seed = seed;
      const TrainResult tr = train_run(config, out, log_line);
      if (!skip_eval) {
        Model model = Model::from_checkpoint(read_checkpoint(tr.final_checkpoint.string()));
        const auto test = generate(config.domain, config.train.test_seed, config.train.test_size);
        EvalOptions opts;
        opts.chunk = config.train.eval_chunk;
        write_evaluation(evaluate(model, test, config.domain, opts), out);
      }
    } else if (*eval) {
      const Checkpoint ckpt = read_checkpoint(checkpoint);
      const DomainSpec domain = checkpoint_domain(ckpt);
      RunConfig config = load_config(config_path);
      if (!config_path.empty() && !(config.domain == domain)) {
        throw ConfigError("checkpoint domain spec differs from the config's");
      }
      const std::int64_t data_seed = eval->count("--seed") ? seed : config.train.test_seed;
      Model model = Model::from_checkpoint(ckpt);
      const auto data = load_or_generate(dataset, domain, data_seed, config.train.test_size);
      EvalOptions opts;
      opts.chunk = config.train.eval_chunk;
      write_evaluation(evaluate(model, data, domain, opts), out);
    } else if (*sweep) {
      std::vector<std::string> warnings;
      const auto rows = sweep_run(checkpoint, &warnings, log_line);
      for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
      write_file(out.empty() ? fs::path(checkpoint) / "sweep.csv" : fs::path(out), sweep_csv(rows));
    } else if (*baselines) {
      RunConfig config = load_config(config_path);
      if (baselines->count("--seed")) config.train.seed = seed;
      const auto rows = run_baselines(config, parse_list(lambdas), kl_lambda, out, log_line);
      write_file(fs::path(out) / "baselines.csv", baselines_csv(rows));
    } else if (*aggregate) {
      std::vector<fs::path> dirs(runs.begin(), runs.end());
      const Aggregate agg = aggregate_runs(dirs);
      fs::create_directories(out);
      write_file(fs::path(out) / "aggregate.json", aggregate_json(agg).dump(2) + "\n");
      write_file(fs::path(out) / "scatter.csv", scatter_csv(agg));
    } else if (*retrain) {
      RunConfig config = load_config(config_path);
      if (retrain->count("--seed")) config.train.seed = seed;
      Model model = retrain_head(checkpoint, config, budget > 0 ? budget : config.train.budget, out, log_line);
      const auto test = generate(config.domain, config.train.test_seed, config.train.test_size);
      EvalOptions opts;
      opts.binning = false;
      write_evaluation(evaluate(model, test, config.domain, opts), out);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const SpecError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
