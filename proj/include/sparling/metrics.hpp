#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparling/footprint.hpp"
#include "sparling/sparsity.hpp"

namespace sparling {

enum class MotifClass { FalsePositive, Maximal, NonMaximal };

/// Partition of one sample's predicted motifs.
struct Classification {
  std::vector<MotifClass> classes;  ///< parallel to pred.entries
  std::vector<int> matched;         ///< index into truth.entries, -1 for false positives
  std::vector<bool> truth_covered;  ///< per truth entry: some prediction lies in its footprint

  std::size_t count(MotifClass c) const;
};

/// Assigns every predicted motif to FPM, MM or NMM. A prediction matches the
/// lexicographically smallest (row, col, channel) true motif whose footprint
/// contains it; within each matched footprint the largest activation is
/// maximal, ties going to the smallest (row, col, channel).
Classification classify_predictions(const MotifMap& pred, const MotifMap& truth, const FootprintTable& footprints);

/// Running totals over a dataset, filled one sample at a time.
struct MotifTally {
  int pred_channels = 0;
  int true_channels = 0;
  std::int64_t predicted = 0;
  std::int64_t false_positive = 0;
  std::int64_t maximal = 0;
  std::int64_t non_maximal = 0;
  std::int64_t true_sites = 0;
  std::int64_t uncovered_sites = 0;
  /// maximal-motif counts, [pred channel][true channel]
  std::vector<std::vector<std::int64_t>> match_counts;
  /// false positives per predicted channel
  std::vector<std::int64_t> fp_by_channel;
  /// uncovered true sites per true channel
  std::vector<std::int64_t> fn_by_channel;

  MotifTally(int pred_channels, int true_channels);
  void add(const MotifMap& pred, const MotifMap& truth, const FootprintTable& footprints);
};

/// Σ|FPM| / Σ|P|; nullopt when nothing was predicted.
std::optional<double> fpe(const MotifTally& tally);
/// Uncovered true sites / true sites; nullopt when there are no true sites.
std::optional<double> fne(const MotifTally& tally);

/// Channel permutation sigma: sigma[pred channel] = label in
/// [0, max(pred, true)); labels >= true channels match nothing.
struct ConfusionResult {
  std::optional<double> ce;
  std::vector<int> sigma;
};

/// Minimum over channel permutations of the fraction of maximal motifs whose
/// mapped channel differs from their footprint's true channel, by optimal
/// assignment on the match-count matrix.
ConfusionResult ce(const MotifTally& tally);

/// Maximum-weight perfect matching on a square matrix (Hungarian method).
/// Returns assignment[row] = column.
std::vector<int> max_weight_assignment(const std::vector<std::vector<std::int64_t>>& weights);

/// (true + 1) × (labels + 1) counts. Rows are true channels plus a final
/// "none" row for false positives; columns are sigma-mapped predicted
/// channels plus a final "none" column for uncovered true sites.
/// Non-maximal motifs are excluded.
std::vector<std::vector<std::int64_t>> confusion_matrix(const MotifTally& tally, const std::vector<int>& sigma);

/// Levenshtein distance.
std::size_t edit_distance(const std::vector<int>& a, const std::vector<int>& b);

/// Mean of EditDistance / max(len) over pairs; empty-vs-empty counts as 0.
double e2ee(const std::vector<std::vector<int>>& truth, const std::vector<std::vector<int>>& pred);

/// Binary entropy in bits.
double binary_entropy_bits(double p);

struct EntropyBoundInput {
  double sites = 0.0;  ///< S: pixels per example
  double channels = 0.0;
  double density = 0.0;
  double eta = 0.0;  ///< bits per nonzero activation
};

/// S·C·(H_b(δ) + η·δ) in bits.
double entropy_bound(const EntropyBoundInput& in);

struct MetricsReport {
  std::optional<double> fpe;
  std::optional<double> fne;
  std::optional<double> ce;
  double e2ee = 0.0;
  double accuracy = 0.0;  ///< exact sequence match
  double density = 0.0;
  double entropy_bound_bits = 0.0;
  double eta = 0.0;
  std::int64_t samples = 0;
  std::vector<int> sigma;
  std::vector<std::vector<std::int64_t>> confusion;

  nlohmann::ordered_json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

/// Quantile binning of nonzero activations into 2^k bins, each value
/// replaced by the median of its bin.
struct ActivationBinning {
  std::vector<float> edges;            ///< 2^k - 1 ascending cut points
  std::vector<float> representatives;  ///< one per bin

  /// Fits bins on the given nonzero values. Throws when `values` is empty.
  static ActivationBinning fit(std::vector<float> values, int k);
  std::size_t bin_index(float v) const;
  float apply(float v) const;
  /// Copy of t with every strictly positive entry binned.
  Tensor apply(const Tensor& t) const;
};

/// Collects every strictly positive entry across the tensors.
std::vector<float> nonzero_values(const std::vector<Tensor>& activations);

struct BinningRow {
  int k = 0;
  double e2ee = 0.0;
  double increase = 0.0;  ///< e2ee minus the unbinned e2ee
};

struct BinningResult {
  double baseline_e2ee = 0.0;
  std::vector<BinningRow> rows;
  std::optional<int> eta;  ///< smallest k whose increase is below tolerance
};

using SequenceDecoder = std::function<std::vector<std::vector<int>>(const Tensor&)>;

/// For each k, bins the nonzero entries of every activation chunk with
/// 2^k quantile bins fit over all chunks, decodes, and scores against
/// `labels` (concatenated across chunks).
BinningResult binning_sweep(const std::vector<Tensor>& activations, const SequenceDecoder& decode,
                            const std::vector<std::vector<int>>& labels, const std::vector<int>& ks,
                            double tolerance = 0.001);

/// Confusion matrix as CSV with a header row of column labels.
std::string confusion_csv(const MetricsReport& report);

}  // namespace sparling
