#include "sparling/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <tuple>

namespace sparling {

namespace {

bool lex_less(const Motif& a, const Motif& b) {
  return std::tie(a.row, a.col, a.channel) < std::tie(b.row, b.col, b.channel);
}

}  // namespace

std::size_t Classification::count(MotifClass c) const {
  return static_cast<std::size_t>(std::count(classes.begin(), classes.end(), c));
}

Classification classify_predictions(const MotifMap& pred, const MotifMap& truth, const FootprintTable& footprints) {
  if (pred.height != truth.height || pred.width != truth.width) {
    throw ShapeError("classify_predictions: prediction map is " + std::to_string(pred.height) + "x" +
                     std::to_string(pred.width) + ", truth is " + std::to_string(truth.height) + "x" +
                     std::to_string(truth.width));
  }
  for (const Motif& t : truth.entries) {
    if (t.channel < 0 || static_cast<std::size_t>(t.channel) >= footprints.size()) {
      throw std::out_of_range("classify_predictions: no footprint for true channel " + std::to_string(t.channel));
    }
  }
  Classification out;
  const std::size_t np = pred.entries.size();
  out.classes.assign(np, MotifClass::FalsePositive);
  out.matched.assign(np, -1);
  out.truth_covered.assign(truth.entries.size(), false);

  for (std::size_t i = 0; i < np; ++i) {
    const Motif& p = pred.entries[i];
    int chosen = -1;
    for (std::size_t t = 0; t < truth.entries.size(); ++t) {
      const Motif& tm = truth.entries[t];
      if (!footprints[static_cast<std::size_t>(tm.channel)].contains(p.row - tm.row, p.col - tm.col)) continue;
      out.truth_covered[t] = true;
      if (chosen < 0 || lex_less(tm, truth.entries[static_cast<std::size_t>(chosen)])) chosen = static_cast<int>(t);
    }
    out.matched[i] = chosen;
  }

  std::vector<int> best(truth.entries.size(), -1);
  for (std::size_t i = 0; i < np; ++i) {
    const int t = out.matched[i];
    if (t < 0) continue;
    int& b = best[static_cast<std::size_t>(t)];
    if (b < 0) {
      b = static_cast<int>(i);
      continue;
    }
    const Motif& cur = pred.entries[static_cast<std::size_t>(b)];
    const Motif& cand = pred.entries[i];
    if (cand.value > cur.value || (cand.value == cur.value && lex_less(cand, cur))) b = static_cast<int>(i);
  }
  for (std::size_t i = 0; i < np; ++i) {
    const int t = out.matched[i];
    if (t < 0) continue;
    out.classes[i] = best[static_cast<std::size_t>(t)] == static_cast<int>(i) ? MotifClass::Maximal : MotifClass::NonMaximal;
  }
  return out;
}

MotifTally::MotifTally(int pred_channels_, int true_channels_)
    : pred_channels(pred_channels_),
      true_channels(true_channels_),
      match_counts(static_cast<std::size_t>(pred_channels_), std::vector<std::int64_t>(static_cast<std::size_t>(true_channels_), 0)),
      fp_by_channel(static_cast<std::size_t>(pred_channels_), 0),
      fn_by_channel(static_cast<std::size_t>(true_channels_), 0) {
  if (pred_channels_ <= 0 || true_channels_ <= 0) throw std::invalid_argument("MotifTally: channel counts must be positive");
}

void MotifTally::add(const MotifMap& pred, const MotifMap& truth, const FootprintTable& footprints) {
  const Classification cls = classify_predictions(pred, truth, footprints);
  predicted += static_cast<std::int64_t>(pred.entries.size());
  for (std::size_t i = 0; i < pred.entries.size(); ++i) {
    const int pc = pred.entries[i].channel;
    if (pc < 0 || pc >= pred_channels) throw std::out_of_range("MotifTally: predicted channel out of range");
    switch (cls.classes[i]) {
      case MotifClass::FalsePositive:
        ++false_positive;
        ++fp_by_channel[static_cast<std::size_t>(pc)];
        break;
      case MotifClass::Maximal: {
        ++maximal;
        const int tc = truth.entries[static_cast<std::size_t>(cls.matched[i])].channel;
        if (tc >= true_channels) throw std::out_of_range("MotifTally: true channel out of range");
        ++match_counts[static_cast<std::size_t>(pc)][static_cast<std::size_t>(tc)];
        break;
      }
      case MotifClass::NonMaximal:
        ++non_maximal;
        break;
    }
  }
  for (std::size_t t = 0; t < truth.entries.size(); ++t) {
    ++true_sites;
    if (!cls.truth_covered[t]) {
      ++uncovered_sites;
      ++fn_by_channel[static_cast<std::size_t>(truth.entries[t].channel)];
    }
  }
}

std::optional<double> fpe(const MotifTally& tally) {
  if (tally.predicted == 0) return std::nullopt;
  return static_cast<double>(tally.false_positive) / static_cast<double>(tally.predicted);
}

std::optional<double> fne(const MotifTally& tally) {
  if (tally.true_sites == 0) return std::nullopt;
  return static_cast<double>(tally.uncovered_sites) / static_cast<double>(tally.true_sites);
}

std::vector<int> max_weight_assignment(const std::vector<std::vector<std::int64_t>>& weights) {
  const std::size_t n = weights.size();
  if (n == 0) return {};
  std::int64_t wmax = 0;
  for (const auto& row : weights) {
    if (row.size() != n) throw std::invalid_argument("max_weight_assignment: matrix must be square");
    for (std::int64_t w : row) wmax = std::max(wmax, w);
  }
  // Minimum-cost assignment on cost = wmax - w, potentials formulation with
  // 1-based rows/columns and a virtual column 0.
  constexpr std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
  std::vector<std::int64_t> u(n + 1, 0), v(n + 1, 0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<std::int64_t> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      std::int64_t delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const std::int64_t cur = (wmax - weights[i0 - 1][j - 1]) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assignment(n, -1);
  for (std::size_t j = 1; j <= n; ++j) assignment[p[j] - 1] = static_cast<int>(j - 1);
  return assignment;
}

ConfusionResult ce(const MotifTally& tally) {
  const int n = std::max(tally.pred_channels, tally.true_channels);
  std::vector<std::vector<std::int64_t>> w(static_cast<std::size_t>(n), std::vector<std::int64_t>(static_cast<std::size_t>(n), 0));
  for (int p = 0; p < tally.pred_channels; ++p) {
    for (int t = 0; t < tally.true_channels; ++t) w[p][t] = tally.match_counts[p][t];
  }
  const std::vector<int> assignment = max_weight_assignment(w);
  ConfusionResult out;
  out.sigma.assign(assignment.begin(), assignment.begin() + tally.pred_channels);
  if (tally.maximal == 0) return out;
  std::int64_t correct = 0;
  for (int p = 0; p < tally.pred_channels; ++p) {
    const int t = out.sigma[static_cast<std::size_t>(p)];
    if (t < tally.true_channels) correct += tally.match_counts[p][t];
  }
  out.ce = static_cast<double>(tally.maximal - correct) / static_cast<double>(tally.maximal);
  return out;
}

std::vector<std::vector<std::int64_t>> confusion_matrix(const MotifTally& tally, const std::vector<int>& sigma) {
  const int labels = std::max(tally.pred_channels, tally.true_channels);
  if (static_cast<int>(sigma.size()) != tally.pred_channels) {
    throw std::invalid_argument("confusion_matrix: sigma must cover every predicted channel");
  }
  std::vector<std::vector<std::int64_t>> m(static_cast<std::size_t>(tally.true_channels + 1),
                                           std::vector<std::int64_t>(static_cast<std::size_t>(labels + 1), 0));
  for (int p = 0; p < tally.pred_channels; ++p) {
    const auto col = static_cast<std::size_t>(sigma[static_cast<std::size_t>(p)]);
    for (int t = 0; t < tally.true_channels; ++t) m[t][col] += tally.match_counts[p][t];
    m[tally.true_channels][col] += tally.fp_by_channel[p];
  }
  for (int t = 0; t < tally.true_channels; ++t) m[t][labels] += tally.fn_by_channel[t];
  return m;
}

std::size_t edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({up + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

double e2ee(const std::vector<std::vector<int>>& truth, const std::vector<std::vector<int>>& pred) {
  if (truth.size() != pred.size()) throw std::invalid_argument("e2ee: truth and prediction counts differ");
  if (truth.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const std::size_t len = std::max(truth[i].size(), pred[i].size());
    if (len == 0) continue;
    total += static_cast<double>(edit_distance(truth[i], pred[i])) / static_cast<double>(len);
  }
  return total / static_cast<double>(truth.size());
}

double binary_entropy_bits(double p) {
  if (p <= 0.0 || p >= 1.0) return 0.0;
  return -(p * std::log(p) + (1.0 - p) * std::log1p(-p)) / std::numbers::ln2;
}

double entropy_bound(const EntropyBoundInput& in) {
  if (!(in.sites > 0 && in.channels > 0 && in.density > 0 && in.density < 1 && in.eta >= 0)) {
    throw std::invalid_argument("entropy_bound: need S, C > 0, density in (0,1), eta >= 0");
  }
  return in.sites * in.channels * (binary_entropy_bits(in.density) + in.eta * in.density);
}

ActivationBinning ActivationBinning::fit(std::vector<float> values, int k) {
  if (values.empty()) throw std::invalid_argument("binning: no nonzero activations to bin");
  if (k < 0 || k > 20) throw std::invalid_argument("binning: k must lie in [0,20]");
  std::sort(values.begin(), values.end());
  const std::size_t bins = std::size_t{1} << k;
  const std::size_t n = values.size();
  ActivationBinning b;
  for (std::size_t i = 1; i < bins; ++i) b.edges.push_back(values[i * n / bins]);
  std::vector<std::vector<float>> members(bins);
  for (float v : values) members[b.bin_index(v)].push_back(v);
  b.representatives.assign(bins, 0.0f);
  for (std::size_t i = 0; i < bins; ++i) {
    const auto& m = members[i];
    if (m.empty()) continue;
    const std::size_t mid = m.size() / 2;
    b.representatives[i] = m.size() % 2 == 1 ? m[mid] : 0.5f * (m[mid - 1] + m[mid]);
  }
  return b;
}

std::size_t ActivationBinning::bin_index(float v) const {
  return static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), v) - edges.begin());
}

float ActivationBinning::apply(float v) const { return v > 0.0f ? representatives[bin_index(v)] : v; }

Tensor ActivationBinning::apply(const Tensor& t) const {
  Tensor out = t;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(out[i]);
  return out;
}

std::vector<float> nonzero_values(const std::vector<Tensor>& activations) {
  std::vector<float> values;
  for (const Tensor& t : activations) {
    for (float v : t.data()) {
      if (v > 0.0f) values.push_back(v);
    }
  }
  return values;
}

BinningResult binning_sweep(const std::vector<Tensor>& activations, const SequenceDecoder& decode,
                            const std::vector<std::vector<int>>& labels, const std::vector<int>& ks,
                            double tolerance) {
  const std::vector<float> values = nonzero_values(activations);
  if (values.empty()) throw std::invalid_argument("binning_sweep: model produced no nonzero activations");
  auto score = [&](const std::function<Tensor(const Tensor&)>& transform) {
    std::vector<std::vector<int>> pred;
    for (const Tensor& t : activations) {
      auto seqs = decode(transform(t));
      pred.insert(pred.end(), seqs.begin(), seqs.end());
    }
    return e2ee(labels, pred);
  };
  BinningResult result;
  result.baseline_e2ee = score([](const Tensor& t) { return t; });
  for (int k : ks) {
    const ActivationBinning bins = ActivationBinning::fit(values, k);
    BinningRow row;
    row.k = k;
    row.e2ee = score([&](const Tensor& t) { return bins.apply(t); });
    row.increase = row.e2ee - result.baseline_e2ee;
    result.rows.push_back(row);
  }
  std::vector<BinningRow> sorted = result.rows;
  std::sort(sorted.begin(), sorted.end(), [](const BinningRow& a, const BinningRow& b) { return a.k < b.k; });
  for (const BinningRow& r : sorted) {
    if (r.increase < tolerance) {
      result.eta = r.k;
      break;
    }
  }
  return result;
}

namespace {

nlohmann::ordered_json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

std::optional<double> opt_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["fpe"] = opt_json(fpe);
  j["fne"] = opt_json(fne);
  j["ce"] = opt_json(ce);
  j["e2ee"] = e2ee;
  j["accuracy"] = accuracy;
  j["density"] = density;
  j["entropy_bound_bits"] = entropy_bound_bits;
  j["eta"] = eta;
  j["samples"] = samples;
  j["sigma"] = sigma;
  j["confusion"] = confusion;
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.fpe = opt_from(j, "fpe");
  r.fne = opt_from(j, "fne");
  r.ce = opt_from(j, "ce");
  r.e2ee = j.at("e2ee").get<double>();
  r.accuracy = j.at("accuracy").get<double>();
  r.density = j.at("density").get<double>();
  r.entropy_bound_bits = j.value("entropy_bound_bits", 0.0);
  r.eta = j.value("eta", 0.0);
  r.samples = j.value("samples", std::int64_t{0});
  r.sigma = j.value("sigma", std::vector<int>{});
  r.confusion = j.value("confusion", std::vector<std::vector<std::int64_t>>{});
  return r;
}

std::string confusion_csv(const MetricsReport& report) {
  std::ostringstream os;
  if (report.confusion.empty()) return "";
  const std::size_t cols = report.confusion.front().size();
  os << "true\\pred";
  for (std::size_t c = 0; c + 1 < cols; ++c) os << ',' << c;
  os << ",none\n";
  for (std::size_t r = 0; r < report.confusion.size(); ++r) {
    if (r + 1 == report.confusion.size()) {
      os << "none";
    } else {
      os << r;
    }
    for (std::int64_t v : report.confusion[r]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

}  // namespace sparling
