#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "actadd/model.hpp"
#include "actadd/tokenizer.hpp"

namespace actadd {

// Both prompts are stored normalized (leading space added when missing).
struct ContrastPair {
  std::string plus;
  std::string minus;

  // Normalizes both prompts; throws ValidationError when both are empty.
  static ContrastPair make(std::string_view plus, std::string_view minus);

  friend bool operator==(const ContrastPair&, const ContrastPair&) = default;
};

struct SteeringSpec {
  ContrastPair pair;
  int layer = 0;
  double coefficient = 1.0;
  // Stream position receiving the first prompt token's delta. Position 0 is
  // BOS and never targeted.
  int alignment = 1;
  // Keep only the first n residual coordinates.
  std::optional<int> dim_cutoff;

  void validate(const ModelConfig& config) const;
};

// c * (h+ - h-) at one layer. Row i of `delta` corresponds to token i of the
// padded contrast pair, row 0 being the shared BOS and therefore zero. When
// injected, row i (i >= 1) is added to stream position alignment + i - 1, so
// the modified positions are [alignment, alignment + rows - 1).
struct SteeringVector {
  int layer = 0;
  Matrix delta;
  int alignment = 1;

  // Provenance, carried into exports; not used by injection.
  double coefficient = 1.0;
  std::optional<ContrastPair> pair;
  std::optional<int> dim_cutoff;

  std::size_t rows() const noexcept { return delta.rows; }
  // [first, last) stream positions this vector writes to.
  std::pair<std::size_t, std::size_t> modified_range() const;
  // Shortest prompt (including BOS) the vector fits into.
  std::size_t min_sequence_length() const { return modified_range().second; }

  std::vector<double> row_norms() const;
  bool is_zero() const;

  // Injection for a sequence of the given length. Throws ValidationError when
  // the vector does not fit; warns when it reaches the final position.
  Injection injection(std::size_t sequence_length) const;
  HookSet hooks(std::size_t sequence_length) const;
};

// Encodes both prompts with BOS and right-pads the shorter with the
// single-space token until the lengths match.
std::pair<TokenSequence, TokenSequence> pad_contrast_pair(const BpeVocab& vocab, const ContrastPair& pair);

SteeringVector build_steering_vector(const Model& model, const BpeVocab& vocab, const SteeringSpec& spec);

// Elementwise product. build(spec with c) == scale(build(spec with c = 1), c).
SteeringVector scale(const SteeringVector& vec, float factor);

// Zeroes columns >= n. n == d_model leaves the vector untouched.
SteeringVector truncate_dimensions(const SteeringVector& vec, int n);

// Standard-normal matrix of the same shape with each row rescaled to the L2
// norm of the matching row of `vec`. Zero rows stay zero.
SteeringVector random_matched_vector(const SteeringVector& vec, std::uint64_t seed);

// Contrast difference captured at the input of src_layer, tagged for
// injection at dst_layer. src_layer == 0 is the embedding difference.
SteeringVector transplant_vector(const Model& model, const BpeVocab& vocab, const ContrastPair& pair, int src_layer,
                                 int dst_layer, double coefficient, int alignment = 1);

struct NormProfile {
  // ratios[l][i] = ||c (h+ - h-)_i|| / ||s_i|| at the input of block l, for
  // positions i of the padded contrast pair. nullopt where ||s_i|| == 0.
  std::vector<std::vector<std::optional<double>>> ratios;
  std::size_t positions = 0;
};

NormProfile norm_profile(const Model& model, const BpeVocab& vocab, std::string_view user_prompt,
                         const ContrastPair& pair, double coefficient);

// Search ranges for c and l. Layers scale with n_layers / 48 relative to the
// reference 48-layer model. Informational only; nothing applies it.
struct HyperparameterGrid {
  std::vector<double> coefficients;
  std::vector<int> layers;
};
HyperparameterGrid suggested_grid(const ModelConfig& config);

// Vector files reuse the AAWF container with kind "steering_vector".
void save_vector(const SteeringVector& vec, const std::filesystem::path& path, const std::string& model_hash = {});
SteeringVector load_vector(const std::filesystem::path& path);

}  // namespace actadd
