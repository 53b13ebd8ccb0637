#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparling/checkpoint.hpp"
#include "sparling/graph.hpp"
#include "sparling/layers.hpp"
#include "sparling/sparsity.hpp"

namespace sparling {

enum class BottleneckKind { SparlingMT, SparlingST, L1, KL, None };

std::string to_string(BottleneckKind kind);
BottleneckKind parse_bottleneck(const std::string& name);

struct ModelConfig {
  int image_size = 32;
  int in_channels = 1;
  int residual_units = 2;
  int width = 16;
  int bottleneck_channels = 4;
  int pool = 4;
  int hidden = 128;
  int max_len = 4;
  int alphabet = 4;  ///< K; the decoder predicts K+1 classes with K as blank
  BottleneckKind kind = BottleneckKind::SparlingMT;
  bool bottleneck_batchnorm = true;
  double initial_density = 0.05;
  double l1_lambda = 0.0;
  double kl_lambda = 0.0;
  double kl_rho = 0.005;

  int blank() const { return alphabet; }
  int classes() const { return alphabet + 1; }
  /// Side of the encoder's square receptive field.
  int receptive_field() const { return 1 + 4 * residual_units; }
  bool is_sparling() const { return kind == BottleneckKind::SparlingMT || kind == BottleneckKind::SparlingST; }
  void validate() const;

  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Miniature motif encoder (fully convolutional, ending in the bottleneck)
/// followed by a fixed-slot decoder: max-pool, coordinate channels, two
/// dense layers, one softmax per output slot.
class Model {
 public:
  Model(ModelConfig config, std::uint64_t init_seed);

  struct Output {
    NodeId pre_bottleneck;          ///< batch-normed projection, before the bottleneck
    NodeId motifs;                  ///< bottleneck activations [B,S,S,Cb]
    NodeId logits;                  ///< [B,L,K+1]
    std::optional<NodeId> aux_loss;  ///< L1 / KL penalty
  };

  /// images: [B,S,S,Cin]. In train mode batch-norm statistics and (for
  /// sparling) the threshold buffer/EMA are updated.
  Output forward(Graph& g, const Tensor& images, Mode mode);
  NodeId encode(Graph& g, NodeId x, Mode mode, NodeId* pre_bottleneck, std::optional<NodeId>* aux_loss);
  NodeId decode(Graph& g, NodeId motifs);

  /// Eval-mode helpers without gradient tracking.
  Tensor encode_eval(const Tensor& images);
  Tensor decode_eval(const Tensor& motifs);

  /// Total loss node: cross-entropy plus any auxiliary penalty.
  NodeId loss(Graph& g, const Output& out, const std::vector<int>& targets);

  std::vector<Parameter*> parameters();
  std::vector<std::string> parameter_names() const;
  std::vector<Parameter*> encoder_parameters();

  const ModelConfig& config() const { return config_; }
  SparsityState& sparsity() { return sparsity_; }
  const SparsityState& sparsity() const { return sparsity_; }
  std::int64_t trained_examples() const { return trained_examples_; }
  void add_trained_examples(std::int64_t n) { trained_examples_ += n; }

  /// Switches the bottleneck to plain ReLU after batch-norm and freezes
  /// every encoder parameter.
  void remove_bottleneck_and_freeze_encoder();

  /// Parameters, batch-norm running stats, sparsity state and config.
  Checkpoint to_checkpoint() const;
  static Model from_checkpoint(const Checkpoint& ckpt);

 private:
  struct ConvParams {
    std::size_t kernel, bias;
  };
  struct BnParams {
    std::size_t gamma, beta;
    std::size_t stats;
  };
  struct ResidualUnit {
    ConvParams conv1;
    BnParams bn1;
    ConvParams conv2;
    BnParams bn2;
  };

  std::size_t add_param(std::string name, Tensor value);
  ConvParams add_conv(const std::string& name, int k, int in, int out);
  BnParams add_bn(const std::string& name, int channels);
  NodeId conv(Graph& g, NodeId x, const ConvParams& p);
  NodeId bn(Graph& g, NodeId x, const BnParams& p, Mode mode);

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::vector<std::string> stat_names_;
  std::vector<BatchNormStats> stats_;
  std::size_t encoder_param_count_ = 0;
  ConvParams stem_{};
  std::vector<ResidualUnit> units_;
  ConvParams proj_{};
  std::optional<BnParams> bottleneck_bn_;
  std::size_t dense1_w_ = 0, dense1_b_ = 0, dense2_w_ = 0, dense2_b_ = 0;
  SparsityState sparsity_;
  std::int64_t trained_examples_ = 0;
  std::uint64_t rng_state_;
};

/// Blank-padded targets (B·L entries) for a batch of labels.
std::vector<int> slot_targets(const std::vector<std::vector<int>>& labels, int max_len, int blank);

/// Greedy per-slot argmax with blanks removed.
std::vector<std::vector<int>> greedy_decode(const Tensor& logits, int blank);

/// Stacks [S,S,C] images into [B,S,S,C].
Tensor stack_images(const std::vector<const Tensor*>& images);

}  // namespace sparling
