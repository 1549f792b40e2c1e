#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "actadd/tensor.hpp"
#include "actadd/tokenizer.hpp"

namespace actadd {

struct ModelConfig {
  int n_layers = 0;
  int d_model = 0;
  int n_heads = 0;
  int vocab_size = 0;
  int max_positions = 0;
  float layernorm_epsilon = 1e-5f;

  int d_head() const noexcept { return n_heads > 0 ? d_model / n_heads : 0; }
  // Throws ValidationError naming the offending field.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// y = x W^T + b with W stored out_features x in_features.
struct Linear {
  Matrix weight;
  std::vector<float> bias;
};

struct LayerNormParams {
  std::vector<float> gain;
  std::vector<float> bias;
};

struct Block {
  LayerNormParams ln1;
  Linear qkv;        // 3*d_model x d_model, output order [q | k | v]
  Linear attn_proj;  // d_model x d_model
  LayerNormParams ln2;
  Linear mlp_up;    // 4*d_model x d_model
  Linear mlp_down;  // d_model x 4*d_model
};

// Unembedding is tied to wte.
struct Weights {
  Matrix wte;  // vocab_size x d_model
  Matrix wpe;  // max_positions x d_model
  std::vector<Block> blocks;
  LayerNormParams lnf;
};

struct Model {
  ModelConfig config;
  Weights weights;
  std::string hash;
};

// Loads and validates an AAWF weight file: config invariants, every tensor's
// shape, per-tensor crc32 and finiteness.
Model load_model(const std::filesystem::path& path);
void save_model(const Model& model, const std::filesystem::path& path);

// Deterministic synthetic weights (normal * scale, layernorm gains around 1).
// Used for benchmarks and tests where published weights are not needed.
Model random_model(const ModelConfig& config, std::uint64_t seed, float scale = 0.02f);

// Adds delta row r to stream position `position + r` at the input of block
// `layer`.
struct Injection {
  int layer = 0;
  Matrix delta;
  std::size_t position = 0;
};

struct HookSet {
  std::vector<int> capture_layers;
  std::vector<Injection> injections;

  bool empty() const noexcept { return capture_layers.empty() && injections.empty(); }
};

// Stream values at the input of block `layer` (after any injection there).
// layer == n_layers holds the stream after the last block, before the final
// layernorm.
struct ResidualSnapshot {
  int layer = 0;
  Matrix activations;
};

struct ForwardResult {
  Matrix logits;
  std::vector<ResidualSnapshot> captured;
  std::vector<std::size_t> modified_positions;  // sorted, unique

  const ResidualSnapshot* snapshot(int layer) const;
};

// Incremental forward pass over one sequence with a key/value cache. Every
// position is computed by the same per-row kernels whether it arrives alone or
// in a batch, so feeding a sequence token by token is bit-identical to one
// full pass.
class InferenceState {
 public:
  explicit InferenceState(const Model& model);

  // Appends `tokens` at positions [length(), length() + tokens.size()).
  // Injection rows land only where their absolute position falls among the
  // new tokens; captures cover the new rows. Returns logits for the new rows,
  // or only the last one when last_only is set.
  ForwardResult extend(std::span<const TokenId> tokens, const HookSet& hooks, bool last_only = false);

  std::size_t length() const noexcept { return length_; }

 private:
  const Model* model_;
  std::size_t length_ = 0;
  std::vector<Matrix> keys_;    // per layer: max_positions x d_model
  std::vector<Matrix> values_;  // per layer
  std::vector<std::pair<std::size_t, std::size_t>> modified_;
};

// Full pass. Preconditions are checked and reported as ValidationError:
// 1 <= length <= max_positions, ids < vocab_size, hook layers in range,
// injection rows fit inside the sequence, delta width == d_model.
ForwardResult forward(const Model& model, std::span<const TokenId> tokens, const HookSet& hooks = {});

// Runs blocks [layer, n_layers) on a given stream, then the final layernorm
// and unembedding. forward() with an injection at `layer` equals capturing at
// `layer`, adding the delta by hand and calling this.
Matrix resume_forward(const Model& model, int layer, const Matrix& stream);

// log p(targets[k] | prefix) read from logits row k-1, for k in [1, n).
// Position 0 has no prediction. Throws ValidationError on length mismatch.
std::vector<double> logprobs(const ForwardResult& result, std::span<const TokenId> targets);

// Numerically stable log-softmax of one row, in double.
std::vector<double> log_softmax(std::span<const float> row);

// Row-wise layernorm; exposed for tests.
void layer_norm(std::span<const float> in, std::span<float> out, const LayerNormParams& params, float epsilon);

float gelu(float x);

}  // namespace actadd
