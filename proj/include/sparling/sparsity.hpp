#pragma once

#include <vector>

#include "sparling/graph.hpp"
#include "sparling/layers.hpp"

namespace sparling {

enum class ThresholdVariant {
  MultiThreshold,   ///< one quantile per channel
  SingleThreshold,  ///< one quantile over all channels jointly
};

/// Thresholds and target density of a spatial sparsity layer, together with
/// the pre-activations buffered since the last threshold update.
struct SparsityState {
  ThresholdVariant variant = ThresholdVariant::MultiThreshold;
  int channels = 0;
  Tensor thresholds;  ///< [C] for MT, [1] for ST
  double density = 0.05;
  double momentum = 0.9;
  std::vector<float> buffer;  ///< pending pre-activations, rows of `channels`

  SparsityState() = default;
  SparsityState(int channels, double density, ThresholdVariant variant = ThresholdVariant::MultiThreshold,
                double momentum = 0.9);

  float threshold(int channel) const {
    return variant == ThresholdVariant::MultiThreshold ? thresholds[channel] : thresholds[0];
  }
  std::size_t buffered() const { return buffer.size(); }
  /// Buffered element count at which an update fires: 10·C/δ.
  double flush_bound() const { return 10.0 * channels / density; }
};

/// relu(z - t) with t broadcast over the channel axis; no graph.
Tensor sparse_apply(const Tensor& z, const SparsityState& state);

/// Records relu(z - t) on the graph. The threshold enters as a constant
/// node, so it never receives gradient. In train mode z is appended to the
/// accumulation buffer.
NodeId sparse_forward(Graph& g, NodeId z, SparsityState& state, Mode mode);

/// Linear-interpolation p-quantile. MT: one value per channel over all
/// other axes. ST: a single value over every element.
Tensor quantile_per_channel(const Tensor& z, double p, ThresholdVariant variant = ThresholdVariant::MultiThreshold);

/// Linear-interpolation p-quantile of an unsorted sample (copied).
double quantile(std::vector<float> values, double p);

/// EMA step t <- mu*t + (1-mu)*q(buffer, 1-delta) once the buffer holds at
/// least 10·C/δ elements; clears the buffer when it fires. Returns whether
/// an update happened.
bool threshold_update(SparsityState& state);

/// A single predicted or true motif: a strictly positive activation at a
/// spatial site and channel.
struct Motif {
  int row = 0;
  int col = 0;
  int channel = 0;
  float value = 0.0f;

  bool operator==(const Motif&) const = default;
};

/// Sparse view of one [H,W,C] activation map.
struct MotifMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<Motif> entries;

  double density() const;
  bool operator==(const MotifMap&) const = default;
};

/// One MotifMap per batch element of activations[B,H,W,C] holding exactly
/// the strictly positive entries, in row-major order.
std::vector<MotifMap> extract_motifs(const Tensor& activations);

/// Fraction of strictly positive entries.
double nonzero_fraction(const Tensor& t);

}  // namespace sparling
