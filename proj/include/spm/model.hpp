#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spm/tensor.hpp"

namespace spm {

struct ModelConfig {
  std::size_t embed_dim = 200;
  std::size_t hidden_dim = 400;
  std::size_t layers = 2;
  std::size_t source_vocab = 0;
  std::size_t target_vocab = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// One LSTM layer in row-batch layout: gates = x·input + h·hidden + bias,
// gate blocks ordered (input, forget, cell, output).
struct LstmWeights {
  Tensor input;   // [in × 4H]
  Tensor hidden;  // [H × 4H]
  Tensor bias;    // [4H]
};

// All trainable weights. Matrices are stored input-major so that a batch of
// row vectors multiplies from the left: the output projection is [H × V_t]
// (the transpose of the usual V_t × H), the mixing layer is [2H × H], and the
// embedding tables are [V × D] with one row per token.
struct ModelParams {
  ModelConfig config;

  Tensor source_embedding;  // [V_s × D]
  Tensor target_embedding;  // [V_t × D]
  std::vector<LstmWeights> encoder_forward;
  std::vector<LstmWeights> encoder_backward;
  std::vector<LstmWeights> decoder;  // layer 0 reads [embedding ; input feed]
  Tensor attention;                  // [H × H], score = h_i · (W z⃗)
  Tensor mix;                        // [2H × H]
  Tensor target_out;                 // [H × V_t]
  Tensor target_bias;                // [V_t]
  Tensor source_out;                 // [H × V_s]
  Tensor source_bias;                // [V_s]

  // Zero-initialized parameters of the configured sizes.
  explicit ModelParams(ModelConfig cfg);

  // Uniform(-range, range) for every weight; LSTM forget-gate biases start at 1.
  void initialize(std::uint64_t seed, double range = 0.1);

  // Stable, unique names in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::vector<Tensor> tensors() const;
  std::size_t parameter_count() const;

  ModelParams clone() const;
  void copy_from(const ModelParams& other);
  void zero_grad();
};

struct ForwardOptions {
  bool train = false;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
};

struct EncoderStates {
  std::vector<Tensor> states;    // h_i = h⃗_i + h⃖_i of the top layer, each [B × H]
  std::vector<Tensor> forward;   // top-layer h⃗_i
  std::vector<Tensor> backward;  // top-layer h⃖_i
  Tensor forward_last;           // h⃗ at each sample's last real position
  Tensor backward_first;         // h⃖_1
  Tensor score_mask;             // [B × I]: 0 for real positions, -inf for padding
  std::vector<std::size_t> lengths;

  std::size_t batch() const { return lengths.size(); }
  std::size_t max_length() const { return states.size(); }
};

struct DecoderState {
  std::vector<Tensor> hidden;  // per layer, [B × H]
  std::vector<Tensor> cell;
  Tensor feed;                 // z_{j-1}, zero at the first step
};

struct StepOutput {
  Tensor mixed;          // z_j
  Tensor target_probs;   // o_j, [B × V_t]
  Tensor source_probs;   // q_j, [B × V_s]; undefined unless requested
  Tensor attention;      // α_j, [B × I]
  DecoderState state;
};

// Encodes a batch of variable-length sources. Positions past a sample's
// length carry its state unchanged and are masked out of attention.
EncoderStates encode(const ModelParams& params, std::span<const std::vector<int>> sources,
                     const ForwardOptions& opts = {});
EncoderStates encode(const ModelParams& params, std::span<const int> source, const ForwardOptions& opts = {});

DecoderState init_decoder(const ModelParams& params, const EncoderStates& enc);

StepOutput decode_step(const ModelParams& params, std::span<const int> prev_ids, const DecoderState& state,
                       const EncoderStates& enc, const ForwardOptions& opts = {}, bool source_head = true);

}  // namespace spm
