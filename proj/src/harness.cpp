#include "sparling/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "sparling/binio.hpp"
#include "sparling/checkpoint.hpp"
#include "sparling/optim.hpp"

namespace sparling {

namespace fs = std::filesystem;

namespace {

void check_keys(const nlohmann::json& j, const nlohmann::ordered_json& reference, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!reference.contains(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

std::string fmt(double v) {
  if (!std::isfinite(v)) return "";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

std::uint64_t init_seed(std::int64_t train_seed) {
  return static_cast<std::uint64_t>(train_seed) * 0x9E3779B97F4A7C15ull + 0x632BE59BD9B4E019ull;
}

Checkpoint make_checkpoint(const Model& model, const RunConfig& config, const OptimizerState* opt,
                           const std::vector<std::string>& names, double validation_accuracy) {
  Checkpoint ckpt = model.to_checkpoint();
  ckpt.meta["domain"] = config.domain.to_json();
  ckpt.meta["run"] = config.name;
  ckpt.meta["train_seed"] = config.train.seed;
  if (std::isfinite(validation_accuracy)) ckpt.meta["validation_accuracy"] = validation_accuracy;
  if (opt) put_optimizer(ckpt, *opt, names);
  return ckpt;
}

double percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

void RunConfig::validate() const {
  try {
    domain.validate();
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (model.alphabet != domain.glyph_count) {
    throw ConfigError("model alphabet " + std::to_string(model.alphabet) + " differs from domain glyph count " +
                      std::to_string(domain.glyph_count));
  }
  if (model.image_size != domain.image_size) throw ConfigError("model image_size differs from domain image_size");
  if (model.max_len < domain.max_glyphs) throw ConfigError("model max_len shorter than the longest label");
  if (model.in_channels != 1) throw ConfigError("MicroDigitCircle images have one channel");
  const auto& t = train;
  for (std::int64_t held_out : {t.validation_seed, t.test_seed}) {
    if (t.seed == held_out) throw ConfigError("training seed must differ from validation and test seeds");
  }
  if (t.validation_seed == t.test_seed) throw ConfigError("validation and test seeds must differ");
  if (t.batch_size < 2) throw ConfigError("batch_size must be >= 2 (batch-norm statistics)");
  if (t.budget <= 0 || t.budget % t.batch_size != 0) throw ConfigError("budget must be a positive multiple of batch_size");
  if (!(t.learning_rate > 0.0) || !std::isfinite(t.learning_rate)) throw ConfigError("learning_rate must be positive");
  if (t.validation_size < 1 || t.test_size < 1) throw ConfigError("validation_size and test_size must be >= 1");
  if (t.curve_every <= 0 || t.curve_every % t.batch_size != 0) {
    throw ConfigError("curve_every must be a positive multiple of batch_size");
  }
  if (t.checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (t.eval_chunk < 1) throw ConfigError("eval_chunk must be >= 1");
  AnnealState st;
  st.eval_every = anneal.eval_every;
  st.batch_size = t.batch_size;
  st.target_decay = anneal.target_decay;
  st.delta_update = anneal.delta_update;
  try {
    st.validate_config();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("anneal: ") + e.what());
  }
  if (anneal.delta_min && !(*anneal.delta_min >= 0.0 && *anneal.delta_min < 1.0)) {
    throw ConfigError("anneal delta_min must lie in [0,1)");
  }
}

double RunConfig::delta_floor() const { return anneal.delta_min.value_or(1.1 * min_density(domain)); }

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["name"] = name;
  j["domain"] = domain.to_json();
  j["model"] = model.to_json();
  auto& a = j["anneal"];
  a["enabled"] = anneal.enabled;
  a["eval_every"] = anneal.eval_every;
  a["initial_target"] = anneal.initial_target;
  a["target_decay"] = anneal.target_decay;
  a["delta_update"] = anneal.delta_update;
  a["delta_min"] = anneal.delta_min ? nlohmann::ordered_json(*anneal.delta_min) : nlohmann::ordered_json(nullptr);
  auto& t = j["train"];
  t["seed"] = train.seed;
  t["validation_seed"] = train.validation_seed;
  t["test_seed"] = train.test_seed;
  t["budget"] = train.budget;
  t["batch_size"] = train.batch_size;
  t["learning_rate"] = train.learning_rate;
  t["validation_size"] = train.validation_size;
  t["test_size"] = train.test_size;
  t["curve_every"] = train.curve_every;
  t["checkpoint_every"] = train.checkpoint_every;
  t["eval_chunk"] = train.eval_chunk;
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  const RunConfig defaults;
  const nlohmann::ordered_json ref = defaults.to_json();
  check_keys(j, ref, "config");
  RunConfig c;
  try {
    c.name = j.value("name", c.name);
    if (j.contains("domain")) {
      check_keys(j.at("domain"), ref.at("domain"), "config.domain");
      c.domain = DomainSpec::from_json(j.at("domain"));
    }
    if (j.contains("model")) {
      check_keys(j.at("model"), ref.at("model"), "config.model");
      c.model = ModelConfig::from_json(j.at("model"));
    } else {
      c.model.alphabet = c.domain.glyph_count;
      c.model.bottleneck_channels = c.domain.glyph_count;
      c.model.image_size = c.domain.image_size;
    }
    if (j.contains("anneal")) {
      const auto& a = j.at("anneal");
      check_keys(a, ref.at("anneal"), "config.anneal");
      c.anneal.enabled = a.value("enabled", c.anneal.enabled);
      c.anneal.eval_every = a.value("eval_every", c.anneal.eval_every);
      c.anneal.initial_target = a.value("initial_target", c.anneal.initial_target);
      c.anneal.target_decay = a.value("target_decay", c.anneal.target_decay);
      c.anneal.delta_update = a.value("delta_update", c.anneal.delta_update);
      if (a.contains("delta_min") && !a.at("delta_min").is_null()) c.anneal.delta_min = a.at("delta_min").get<double>();
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      check_keys(t, ref.at("train"), "config.train");
      c.train.seed = t.value("seed", c.train.seed);
      c.train.validation_seed = t.value("validation_seed", c.train.validation_seed);
      c.train.test_seed = t.value("test_seed", c.train.test_seed);
      c.train.budget = t.value("budget", c.train.budget);
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
      c.train.validation_size = t.value("validation_size", c.train.validation_size);
      c.train.test_size = t.value("test_size", c.train.test_size);
      c.train.curve_every = t.value("curve_every", c.train.curve_every);
      c.train.checkpoint_every = t.value("checkpoint_every", c.train.checkpoint_every);
      c.train.eval_chunk = t.value("eval_chunk", c.train.eval_chunk);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

RunConfig desk_config() {
  RunConfig c;
  c.name = "desk";
  c.anneal.eval_every = 10000;
  c.train.learning_rate = 1e-3;
  c.train.budget = 500000;
  return c;
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << content;
}

Batch make_batch(const std::vector<Sample>& samples, std::size_t begin, std::size_t end) {
  std::vector<const Tensor*> images;
  Batch b;
  for (std::size_t i = begin; i < end; ++i) {
    images.push_back(&samples[i].image);
    b.labels.push_back(samples[i].label);
  }
  b.images = stack_images(images);
  return b;
}

double sequence_accuracy(Model& model, const std::vector<Sample>& data, int chunk) {
  if (data.empty()) throw std::invalid_argument("sequence_accuracy: empty dataset");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(data.size(), i + static_cast<std::size_t>(chunk));
    const Batch b = make_batch(data, i, end);
    const auto pred = greedy_decode(model.decode_eval(model.encode_eval(b.images)), model.config().blank());
    for (std::size_t k = 0; k < pred.size(); ++k) correct += pred[k] == b.labels[k];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainResult train_run(const RunConfig& config, const fs::path& out_dir, const ProgressSink& progress) {
  config.validate();
  fs::create_directories(out_dir);
  write_file(out_dir / "config.json", config.to_json().dump(2) + "\n");

  Model model(config.model, init_seed(config.train.seed));
  const auto names = model.parameter_names();
  auto params = model.parameters();
  OptimizerState opt;
  opt.learning_rate = config.train.learning_rate;

  const std::vector<Sample> validation =
      generate(config.domain, config.train.validation_seed, config.train.validation_size);

  AnnealState anneal;
  anneal.target = config.anneal.initial_target;
  anneal.eval_every = config.anneal.eval_every;
  anneal.batch_size = config.train.batch_size;
  anneal.target_decay = config.anneal.target_decay;
  anneal.delta_update = config.anneal.delta_update;
  anneal.delta_min = config.delta_floor();
  anneal.enabled = config.anneal.enabled && config.model.is_sparling();

  std::ofstream events(out_dir / "events.jsonl", std::ios::binary);
  std::ofstream curve(out_dir / "curve.csv", std::ios::binary);
  if (!events || !curve) throw std::runtime_error("cannot write logs in " + out_dir.string());
  curve << "examples,loss,delta,density,target,validation_accuracy\n";

  TrainResult result;
  double last_accuracy = std::nan("");
  double loss_sum = 0.0, density_sum = 0.0;
  std::int64_t interval_batches = 0;
  const int B = config.train.batch_size;

  auto save = [&](const fs::path& path, double validation_accuracy) {
    write_checkpoint(path.string(), make_checkpoint(model, config, &opt, names, validation_accuracy));
  };
  auto validate = [&] { return sequence_accuracy(model, validation, config.train.eval_chunk); };

  for (std::int64_t examples = 0; examples < config.train.budget;) {
    const std::vector<Sample> samples = generate(config.domain, config.train.seed, B, examples);
    const Batch batch = make_batch(samples, 0, samples.size());

    Graph g;
    const Model::Output out = model.forward(g, batch.images, Mode::Train);
    const NodeId loss = model.loss(g, out, slot_targets(batch.labels, config.model.max_len, config.model.blank()));
    const float loss_value = g.value(loss).item();
    if (!std::isfinite(loss_value)) {
      save(out_dir / "diverged.sprl", last_accuracy);
      nlohmann::ordered_json d;
      d["examples"] = examples;
      d["loss"] = std::isnan(loss_value) ? "nan" : "inf";
      d["delta"] = model.sparsity().density;
      write_file(out_dir / "divergence.json", d.dump(2) + "\n");
      throw DivergenceError("non-finite loss at " + std::to_string(examples) + " examples");
    }
    for (Parameter* p : params) p->zero_grad();
    g.backward(loss);
    adam_step(params, opt);
    model.add_trained_examples(B);
    loss_sum += loss_value;
    density_sum += nonzero_fraction(g.value(out.motifs));
    ++interval_batches;

    const double delta_before = model.sparsity().density;
    const std::size_t logged = result.events.size();
    const bool reduced = anneal_step(anneal, model.sparsity(), validate, result.events);
    examples = anneal.examples;
    if (result.events.size() > logged) {
      const AnnealEvent& e = result.events.back();
      write_event(events, e);
      events.flush();
      last_accuracy = e.accuracy;
      if (progress) {
        std::ostringstream os;
        os << config.name << " " << e.examples << " acc=" << e.accuracy << " T=" << e.target << " delta=" << e.delta
           << (reduced ? " reduce" : "");
        progress(os.str());
      }
    }
    if (reduced) {
      // The plateau that just ended was trained at the previous δ.
      model.sparsity().density = delta_before;
      std::ostringstream name;
      name << "plateau_" << std::setw(2) << std::setfill('0') << result.plateau_checkpoints.size() << ".sprl";
      save(out_dir / name.str(), last_accuracy);
      result.plateau_checkpoints.push_back(out_dir / name.str());
      model.sparsity().density = delta_before * config.anneal.delta_update;
    }
    if (examples % config.train.curve_every == 0) {
      curve << examples << ',' << fmt(loss_sum / interval_batches) << ',' << fmt(model.sparsity().density) << ','
            << fmt(density_sum / interval_batches) << ',' << fmt(anneal.target) << ',' << fmt(last_accuracy)
            << '\n';
      loss_sum = density_sum = 0.0;
      interval_batches = 0;
    }
    if (config.train.checkpoint_every > 0 && examples % config.train.checkpoint_every == 0) {
      save(out_dir / ("step_" + std::to_string(examples) + ".sprl"), last_accuracy);
    }
  }
  for (Parameter* p : params) {
    if (!all_finite(p->value)) throw DivergenceError("non-finite parameter " + p->name);
  }

  result.examples = anneal.examples;
  result.final_delta = model.sparsity().density;
  result.final_validation_accuracy = validate();
  result.final_checkpoint = out_dir / "final.sprl";
  save(result.final_checkpoint, result.final_validation_accuracy);
  result.plateau_checkpoints.push_back(result.final_checkpoint);
  return result;
}

DomainSpec checkpoint_domain(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("domain")) throw ConfigError("checkpoint carries no domain spec");
  return DomainSpec::from_json(ckpt.meta.at("domain"));
}

Evaluation evaluate(Model& model, const std::vector<Sample>& data, const DomainSpec& domain,
                    const EvalOptions& options) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  const ModelConfig& mc = model.config();
  if (mc.image_size != domain.image_size || mc.alphabet != domain.glyph_count) {
    throw ConfigError("model does not match the evaluation domain");
  }
  const FootprintTable footprints = domain.footprints();
  MotifTally tally(mc.bottleneck_channels, domain.channels());
  std::vector<std::vector<int>> truth, pred;
  std::vector<Tensor> activations;
  double nonzero = 0.0, total = 0.0;
  const auto chunk = static_cast<std::size_t>(options.chunk);
  for (std::size_t i = 0; i < data.size(); i += chunk) {
    const std::size_t end = std::min(data.size(), i + chunk);
    const Batch b = make_batch(data, i, end);
    Tensor motifs = model.encode_eval(b.images);
    const auto decoded = greedy_decode(model.decode_eval(motifs), mc.blank());
    const auto maps = extract_motifs(motifs);
    for (std::size_t k = 0; k < maps.size(); ++k) {
      tally.add(maps[k], data[i + k].truth, footprints);
      nonzero += static_cast<double>(maps[k].entries.size());
    }
    total += static_cast<double>(motifs.size());
    pred.insert(pred.end(), decoded.begin(), decoded.end());
    truth.insert(truth.end(), b.labels.begin(), b.labels.end());
    if (options.binning) activations.push_back(std::move(motifs));
  }

  Evaluation ev;
  MetricsReport& r = ev.report;
  r.samples = static_cast<std::int64_t>(data.size());
  r.fpe = fpe(tally);
  r.fne = fne(tally);
  const ConfusionResult conf = ce(tally);
  r.ce = conf.ce;
  r.sigma = conf.sigma;
  r.confusion = confusion_matrix(tally, conf.sigma);
  r.e2ee = e2ee(truth, pred);
  std::size_t exact = 0;
  for (std::size_t k = 0; k < truth.size(); ++k) exact += truth[k] == pred[k];
  r.accuracy = static_cast<double>(exact) / static_cast<double>(truth.size());
  r.density = nonzero / total;

  r.eta = 32.0;
  if (options.binning && nonzero > 0.0) {
    const int blank = mc.blank();
    SequenceDecoder decode = [&model, blank](const Tensor& m) {
      return greedy_decode(model.decode_eval(m), blank);
    };
    ev.binning = binning_sweep(activations, decode, truth, options.binning_ks);
    if (ev.binning->eta) r.eta = *ev.binning->eta;
  }
  const double sites = static_cast<double>(mc.image_size) * mc.image_size;
  r.entropy_bound_bits = r.density > 0.0 && r.density < 1.0
                             ? entropy_bound({sites, static_cast<double>(mc.bottleneck_channels), r.density, r.eta})
                             : (r.density <= 0.0 ? 0.0 : sites * mc.bottleneck_channels * r.eta);
  return ev;
}

std::string binning_csv(const BinningResult& result) {
  std::ostringstream os;
  os << "k,e2ee,increase\n";
  for (const auto& row : result.rows) os << row.k << ',' << fmt(row.e2ee) << ',' << fmt(row.increase) << '\n';
  return os.str();
}

void write_evaluation(const Evaluation& eval, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  write_file(out_dir / "report.json", eval.report.to_json().dump(2) + "\n");
  write_file(out_dir / "confusion.csv", confusion_csv(eval.report));
  if (eval.binning) write_file(out_dir / "binning.csv", binning_csv(*eval.binning));
}

std::vector<SweepRow> sweep_run(const fs::path& run_dir, std::vector<std::string>* warnings,
                                const ProgressSink& progress) {
  const RunConfig config = RunConfig::load(run_dir / "config.json");
  AnnealLog log;
  {
    std::ifstream is(run_dir / "events.jsonl");
    if (!is) throw ConfigError("no events.jsonl in " + run_dir.string());
    log = read_event_log(is);
  }
  const auto plateaus = anneal_schedule_replay(log, config.model.initial_density, config.anneal.delta_update);
  const std::vector<Sample> test = generate(config.domain, config.train.test_seed, config.train.test_size);
  EvalOptions opts;
  opts.binning = false;
  opts.chunk = config.train.eval_chunk;

  std::vector<SweepRow> rows;
  for (std::size_t k = 0; k < plateaus.size(); ++k) {
    std::ostringstream name;
    name << "plateau_" << std::setw(2) << std::setfill('0') << k << ".sprl";
    fs::path path = run_dir / name.str();
    if (k + 1 == plateaus.size()) path = run_dir / "final.sprl";
    try {
      Model model = Model::from_checkpoint(read_checkpoint(path.string()));
      SweepRow row;
      row.delta = model.sparsity().density;
      row.examples = k + 1 < plateaus.size() ? plateaus[k + 1].first : model.trained_examples();
      row.report = evaluate(model, test, config.domain, opts).report;
      rows.push_back(std::move(row));
      if (progress) progress("sweep " + path.filename().string() + " delta=" + fmt(rows.back().delta));
    } catch (const std::exception& e) {
      if (warnings) warnings->push_back("skipping " + path.string() + ": " + e.what());
    }
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "delta,examples,fpe,fne,ce,e2ee,accuracy,density\n";
  for (const auto& r : rows) {
    os << fmt(r.delta) << ',' << r.examples << ',' << fmt(r.report.fpe) << ',' << fmt(r.report.fne) << ','
       << fmt(r.report.ce) << ',' << fmt(r.report.e2ee) << ',' << fmt(r.report.accuracy) << ','
       << fmt(r.report.density) << '\n';
  }
  return os.str();
}

std::vector<BaselineRow> run_baselines(const RunConfig& base, const std::vector<double>& lambdas, double kl_lambda,
                                       const fs::path& out_dir, const ProgressSink& progress) {
  if (lambdas.empty()) throw ConfigError("baselines: lambda grid is empty");
  struct Variant {
    std::string method;
    double lambda;
    RunConfig config;
  };
  std::vector<Variant> variants;
  for (double lambda : lambdas) {
    if (!(lambda >= 0.0)) throw ConfigError("baselines: lambda must be >= 0");
    RunConfig c = base;
    c.model.kind = BottleneckKind::L1;
    c.model.l1_lambda = lambda;
    c.name = base.name + "-l1-" + fmt(lambda);
    variants.push_back({"l1", lambda, c});
  }
  {
    RunConfig c = base;
    c.model.kind = BottleneckKind::KL;
    c.model.kl_lambda = kl_lambda;
    c.name = base.name + "-kl";
    variants.push_back({"kl", kl_lambda, c});
  }
  {
    RunConfig c = base;
    c.model.kind = BottleneckKind::SparlingMT;
    c.name = base.name + "-sparling";
    variants.push_back({"sparling", 0.0, c});
  }
  std::vector<BaselineRow> rows;
  for (const auto& v : variants) {
    const fs::path dir = out_dir / v.config.name;
    const TrainResult tr = train_run(v.config, dir, progress);
    Model model = Model::from_checkpoint(read_checkpoint(tr.final_checkpoint.string()));
    const auto test = generate(v.config.domain, v.config.train.test_seed, v.config.train.test_size);
    EvalOptions opts;
    opts.binning = false;
    const Evaluation ev = evaluate(model, test, v.config.domain, opts);
    write_evaluation(ev, dir);
    rows.push_back({v.method, v.lambda, ev.report});
  }
  return rows;
}

std::string baselines_csv(const std::vector<BaselineRow>& rows) {
  std::ostringstream os;
  os << "method,lambda,fpe,fne,ce,e2ee,accuracy,density\n";
  for (const auto& r : rows) {
    os << r.method << ',' << fmt(r.lambda) << ',' << fmt(r.report.fpe) << ',' << fmt(r.report.fne) << ','
       << fmt(r.report.ce) << ',' << fmt(r.report.e2ee) << ',' << fmt(r.report.accuracy) << ','
       << fmt(r.report.density) << '\n';
  }
  return os.str();
}

MetricSummary bootstrap_mean(const std::string& metric, const std::vector<double>& values, int resamples,
                             std::uint64_t seed) {
  if (values.empty()) throw std::invalid_argument("bootstrap_mean: no values for " + metric);
  if (resamples < 1) throw std::invalid_argument("bootstrap_mean: resamples must be >= 1");
  MetricSummary s;
  s.metric = metric;
  s.count = static_cast<int>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (double& m : means) {
    double sum = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) sum += values[pick(rng)];
    m = sum / static_cast<double>(values.size());
  }
  s.ci_low = percentile(means, 0.025);
  s.ci_high = percentile(means, 0.975);
  return s;
}

std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
  if (a.size() < 2) return std::nullopt;
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

Aggregate aggregate_runs(const std::vector<fs::path>& run_dirs) {
  if (run_dirs.size() < 2) throw ConfigError("aggregate needs at least two runs");
  Aggregate agg;
  std::optional<nlohmann::ordered_json> reference;
  for (const auto& dir : run_dirs) {
    const RunConfig config = RunConfig::load(dir / "config.json");
    nlohmann::ordered_json shared = config.to_json();
    shared.erase("name");
    shared["train"].erase("seed");
    if (!reference) {
      reference = shared;
    } else if (*reference != shared) {
      throw ConfigError("run " + dir.string() + " has a configuration inconsistent with " + run_dirs.front().string());
    }
    nlohmann::json report;
    try {
      report = nlohmann::json::parse(read_file(dir / "report.json"));
    } catch (const std::exception& e) {
      throw ConfigError("run " + dir.string() + " has no readable report.json: " + e.what());
    }
    agg.runs.emplace_back(config.train.seed, MetricsReport::from_json(report));
  }
  std::sort(agg.runs.begin(), agg.runs.end(), [](const auto& x, const auto& y) { return x.first < y.first; });

  auto collect = [&](const std::string& metric, auto getter) {
    std::vector<double> v;
    for (const auto& [seed, r] : agg.runs) {
      const std::optional<double> x = getter(r);
      if (x) v.push_back(*x);
    }
    if (!v.empty()) agg.metrics.push_back(bootstrap_mean(metric, v));
  };
  collect("fpe", [](const MetricsReport& r) { return r.fpe; });
  collect("fne", [](const MetricsReport& r) { return r.fne; });
  collect("ce", [](const MetricsReport& r) { return r.ce; });
  collect("e2ee", [](const MetricsReport& r) { return std::optional<double>(r.e2ee); });
  collect("accuracy", [](const MetricsReport& r) { return std::optional<double>(r.accuracy); });
  collect("density", [](const MetricsReport& r) { return std::optional<double>(r.density); });

  std::vector<double> e_ce, c_ce, e_fpe, f_fpe;
  for (const auto& [seed, r] : agg.runs) {
    if (r.ce) {
      e_ce.push_back(r.e2ee);
      c_ce.push_back(*r.ce);
    }
    if (r.fpe) {
      e_fpe.push_back(r.e2ee);
      f_fpe.push_back(*r.fpe);
    }
  }
  agg.spearman_e2ee_ce = spearman(e_ce, c_ce);
  agg.spearman_e2ee_fpe = spearman(e_fpe, f_fpe);
  return agg;
}

nlohmann::ordered_json aggregate_json(const Aggregate& agg) {
  nlohmann::ordered_json j;
  j["runs"] = agg.runs.size();
  auto& m = j["metrics"];
  m = nlohmann::ordered_json::object();
  for (const auto& s : agg.metrics) {
    m[s.metric] = {{"mean", s.mean}, {"ci_low", s.ci_low}, {"ci_high", s.ci_high}, {"count", s.count}};
  }
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  j["spearman_e2ee_ce"] = opt(agg.spearman_e2ee_ce);
  j["spearman_e2ee_fpe"] = opt(agg.spearman_e2ee_fpe);
  j["bootstrap_resamples"] = 10000;
  return j;
}

std::string scatter_csv(const Aggregate& agg) {
  std::ostringstream os;
  os << "seed,e2ee,ce,fpe,fne,density\n";
  for (const auto& [seed, r] : agg.runs) {
    os << seed << ',' << fmt(r.e2ee) << ',' << fmt(r.ce) << ',' << fmt(r.fpe) << ',' << fmt(r.fne) << ','
       << fmt(r.density) << '\n';
  }
  return os.str();
}

Model retrain_head(const fs::path& checkpoint, const RunConfig& config, std::int64_t budget, const fs::path& out_dir,
                   const ProgressSink& progress) {
  const Checkpoint ckpt = read_checkpoint(checkpoint.string());
  if (checkpoint_domain(ckpt) != config.domain) throw ConfigError("checkpoint domain differs from the run config");
  Model model = Model::from_checkpoint(ckpt);
  if (model.trained_examples() <= 0) throw ConfigError("retrain_head needs a trained model");
  if (!model.config().is_sparling()) throw ConfigError("retrain_head expects a sparling checkpoint");
  if (budget <= 0 || budget % config.train.batch_size != 0) {
    throw ConfigError("retrain budget must be a positive multiple of batch_size");
  }
  model.remove_bottleneck_and_freeze_encoder();
  fs::create_directories(out_dir);

  auto params = model.parameters();
  OptimizerState opt;
  opt.learning_rate = config.train.learning_rate;
  const ModelConfig& mc = model.config();
  const int B = config.train.batch_size;
  const std::int64_t start = model.trained_examples();
  std::ofstream curve(out_dir / "retrain_curve.csv", std::ios::binary);
  curve << "examples,loss\n";
  double loss_sum = 0.0;
  std::int64_t batches = 0;
  for (std::int64_t done = 0; done < budget; done += B) {
    const auto samples = generate(config.domain, config.train.seed, B, start + done);
    const Batch batch = make_batch(samples, 0, samples.size());
    Graph g;
    // Frozen encoder: eval mode keeps its batch-norm statistics fixed too.
    const NodeId x = g.constant(batch.images, "input");
    const NodeId motifs = model.encode(g, x, Mode::Eval, nullptr, nullptr);
    const NodeId logits = model.decode(g, motifs);
    const NodeId loss = ops::softmax_xent(g, logits, slot_targets(batch.labels, mc.max_len, mc.blank()));
    const float lv = g.value(loss).item();
    if (!std::isfinite(lv)) throw DivergenceError("non-finite loss while retraining the head");
    for (Parameter* p : params) p->zero_grad();
    g.backward(loss);
    adam_step(params, opt);
    model.add_trained_examples(B);
    loss_sum += lv;
    ++batches;
    if ((done + B) % config.train.curve_every == 0) {
      curve << done + B << ',' << fmt(loss_sum / batches) << '\n';
      if (progress && (done + B) % (config.train.curve_every * 10) == 0) {
        progress("retrain " + std::to_string(done + B) + " loss=" + fmt(loss_sum / batches));
      }
      loss_sum = 0.0;
      batches = 0;
    }
  }
  write_checkpoint((out_dir / "retrained.sprl").string(),
                   make_checkpoint(model, config, &opt, model.parameter_names(), std::nan("")));
  return model;
}

}  // namespace sparling
