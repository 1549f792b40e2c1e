#include "actadd/steering.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "actadd/aawf.hpp"
#include "actadd/error.hpp"
#include "actadd/log.hpp"
#include "actadd/rng.hpp"

namespace actadd {

ContrastPair ContrastPair::make(std::string_view plus, std::string_view minus) {
  if (plus.empty() && minus.empty()) throw ValidationError("pair", "p_plus and p_minus are both empty");
  return {normalize_steering_prompt(plus), normalize_steering_prompt(minus)};
}

void SteeringSpec::validate(const ModelConfig& config) const {
  if (pair.plus.empty() && pair.minus.empty()) throw ValidationError("pair", "p_plus and p_minus are both empty");
  if (layer < 0 || layer >= config.n_layers) {
    throw ValidationError("layer", "layer " + std::to_string(layer) + " outside valid range [0, " +
                                       std::to_string(config.n_layers - 1) + "]");
  }
  if (!std::isfinite(coefficient)) throw ValidationError("coefficient", "must be finite");
  if (alignment < 1) {
    throw ValidationError("alignment", "alignment must be >= 1 (position 0 is the BOS token), got " +
                                           std::to_string(alignment));
  }
  if (alignment >= config.max_positions) {
    throw ValidationError("alignment", "alignment " + std::to_string(alignment) + " exceeds max_positions");
  }
  if (dim_cutoff && (*dim_cutoff < 0 || *dim_cutoff > config.d_model)) {
    throw ValidationError("dim_cutoff", "dim_cutoff " + std::to_string(*dim_cutoff) + " outside [0, " +
                                            std::to_string(config.d_model) + "]");
  }
}

std::pair<std::size_t, std::size_t> SteeringVector::modified_range() const {
  const auto first = static_cast<std::size_t>(alignment);
  return {first, first + (rows() > 0 ? rows() - 1 : 0)};
}

std::vector<double> SteeringVector::row_norms() const {
  std::vector<double> norms(delta.rows, 0.0);
  for (std::size_t r = 0; r < delta.rows; ++r) {
    double sq = 0.0;
    for (float v : delta.row(r)) sq += static_cast<double>(v) * v;
    norms[r] = std::sqrt(sq);
  }
  return norms;
}

bool SteeringVector::is_zero() const {
  return std::all_of(delta.data.begin(), delta.data.end(), [](float v) { return v == 0.0f; });
}

Injection SteeringVector::injection(std::size_t sequence_length) const {
  const auto [first, last] = modified_range();
  if (last > sequence_length) {
    throw ValidationError("prompt", "steering vector modifies positions [" + std::to_string(first) + ", " +
                                        std::to_string(last) + ") but the prompt has only " +
                                        std::to_string(sequence_length) + " tokens including BOS");
  }
  if (last == sequence_length && last > first) {
    warn("steering vector reaches the final stream position; this tends to break syntax");
  }
  Injection inj;
  inj.layer = layer;
  inj.position = first;
  inj.delta = Matrix(rows() > 0 ? rows() - 1 : 0, delta.cols);
  std::copy(delta.data.begin() + static_cast<std::ptrdiff_t>(delta.cols), delta.data.end(), inj.delta.data.begin());
  return inj;
}

HookSet SteeringVector::hooks(std::size_t sequence_length) const {
  HookSet hooks;
  hooks.injections.push_back(injection(sequence_length));
  return hooks;
}

std::pair<TokenSequence, TokenSequence> pad_contrast_pair(const BpeVocab& vocab, const ContrastPair& pair) {
  if (pair.plus.empty() && pair.minus.empty()) throw ValidationError("pair", "p_plus and p_minus are both empty");
  const auto space = vocab.find_bytes(" ");
  if (!space) throw Error("vocabulary has no single-space token to pad contrast prompts with");
  auto plus = encode(vocab, pair.plus, true);
  auto minus = encode(vocab, pair.minus, true);
  auto& shorter = plus.size() < minus.size() ? plus : minus;
  const auto target = std::max(plus.size(), minus.size());
  while (shorter.size() < target) shorter.ids.push_back(*space);
  return {std::move(plus), std::move(minus)};
}

namespace {

Matrix capture_at(const Model& model, const TokenSequence& seq, int layer) {
  HookSet hooks;
  hooks.capture_layers = {layer};
  auto result = forward(model, seq.ids, hooks);
  return std::move(result.captured.front().activations);
}

Matrix contrast_difference(const Model& model, const BpeVocab& vocab, const ContrastPair& pair, int layer) {
  const auto [plus, minus] = pad_contrast_pair(vocab, pair);
  const Matrix hp = capture_at(model, plus, layer);
  const Matrix hm = capture_at(model, minus, layer);
  Matrix diff(hp.rows, hp.cols);
  for (std::size_t i = 0; i < diff.data.size(); ++i) diff.data[i] = hp.data[i] - hm.data[i];
  return diff;
}

void zero_columns_from(Matrix& m, std::size_t n) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    auto row = m.row(r);
    std::fill(row.begin() + static_cast<std::ptrdiff_t>(std::min(n, m.cols)), row.end(), 0.0f);
  }
}

}  // namespace

SteeringVector build_steering_vector(const Model& model, const BpeVocab& vocab, const SteeringSpec& spec) {
  spec.validate(model.config);
  SteeringVector unit;
  unit.layer = spec.layer;
  unit.alignment = spec.alignment;
  unit.delta = contrast_difference(model, vocab, spec.pair, spec.layer);
  unit.pair = spec.pair;
  unit.coefficient = 1.0;
  if (spec.dim_cutoff) unit = truncate_dimensions(unit, *spec.dim_cutoff);
  return scale(unit, static_cast<float>(spec.coefficient));
}

SteeringVector scale(const SteeringVector& vec, float factor) {
  if (!std::isfinite(factor)) throw ValidationError("factor", "scale factor must be finite");
  SteeringVector out = vec;
  for (auto& v : out.delta.data) v *= factor;
  out.coefficient = vec.coefficient * factor;
  return out;
}

SteeringVector truncate_dimensions(const SteeringVector& vec, int n) {
  if (n < 0 || static_cast<std::size_t>(n) > vec.delta.cols) {
    throw ValidationError("dim_cutoff", "dim_cutoff " + std::to_string(n) + " outside [0, " +
                                            std::to_string(vec.delta.cols) + "]");
  }
  SteeringVector out = vec;
  zero_columns_from(out.delta, static_cast<std::size_t>(n));
  if (static_cast<std::size_t>(n) < vec.delta.cols) out.dim_cutoff = n;
  return out;
}

SteeringVector random_matched_vector(const SteeringVector& vec, std::uint64_t seed) {
  Xoshiro256pp rng(seed);
  SteeringVector out = vec;
  out.pair.reset();
  const auto norms = vec.row_norms();
  std::vector<double> draw(vec.delta.cols);
  for (std::size_t r = 0; r < vec.delta.rows; ++r) {
    double sq = 0.0;
    for (auto& x : draw) {
      x = rng.normal();
      sq += x * x;
    }
    auto row = out.delta.row(r);
    if (norms[r] == 0.0 || sq == 0.0) {
      std::fill(row.begin(), row.end(), 0.0f);
      continue;
    }
    const double k = norms[r] / std::sqrt(sq);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = static_cast<float>(draw[c] * k);
  }
  return out;
}

SteeringVector transplant_vector(const Model& model, const BpeVocab& vocab, const ContrastPair& pair, int src_layer,
                                 int dst_layer, double coefficient, int alignment) {
  SteeringSpec src{pair, src_layer, coefficient, alignment, std::nullopt};
  src.validate(model.config);
  SteeringSpec dst = src;
  dst.layer = dst_layer;
  dst.validate(model.config);
  auto vec = build_steering_vector(model, vocab, src);
  vec.layer = dst_layer;
  return vec;
}

NormProfile norm_profile(const Model& model, const BpeVocab& vocab, std::string_view user_prompt,
                         const ContrastPair& pair, double coefficient) {
  const auto [plus, minus] = pad_contrast_pair(vocab, pair);
  const auto prompt = encode(vocab, user_prompt, true);
  if (prompt.size() < plus.size()) {
    throw ValidationError("prompt", "user prompt has " + std::to_string(prompt.size()) +
                                        " tokens including BOS but the contrast pair needs " +
                                        std::to_string(plus.size()));
  }
  const int n_layers = model.config.n_layers;
  HookSet hooks;
  for (int l = 0; l < n_layers; ++l) hooks.capture_layers.push_back(l);
  const auto rp = forward(model, plus.ids, hooks);
  const auto rm = forward(model, minus.ids, hooks);
  const auto rs = forward(model, prompt.ids, hooks);

  NormProfile profile;
  profile.positions = plus.size();
  const auto c = static_cast<float>(coefficient);
  for (int l = 0; l < n_layers; ++l) {
    const auto& hp = rp.snapshot(l)->activations;
    const auto& hm = rm.snapshot(l)->activations;
    const auto& s = rs.snapshot(l)->activations;
    std::vector<std::optional<double>> row;
    for (std::size_t i = 0; i < profile.positions; ++i) {
      double num = 0.0;
      double den = 0.0;
      for (std::size_t k = 0; k < s.cols; ++k) {
        const double delta = static_cast<double>(c * (hp(i, k) - hm(i, k)));
        num += delta * delta;
        den += static_cast<double>(s(i, k)) * s(i, k);
      }
      if (den == 0.0) {
        row.push_back(std::nullopt);
      } else {
        row.push_back(std::sqrt(num) / std::sqrt(den));
      }
    }
    profile.ratios.push_back(std::move(row));
  }
  return profile;
}

HyperparameterGrid suggested_grid(const ModelConfig& config) {
  HyperparameterGrid grid;
  grid.coefficients = {3, 5, 7, 10, 15, 20};
  std::set<int> layers;
  const double factor = static_cast<double>(config.n_layers) / 48.0;
  for (int l = 6; l <= 24; l += 2) {
    layers.insert(std::clamp(static_cast<int>(std::lround(l * factor)), 0, config.n_layers - 1));
  }
  grid.layers.assign(layers.begin(), layers.end());
  return grid;
}

void save_vector(const SteeringVector& vec, const std::filesystem::path& path, const std::string& model_hash) {
  nlohmann::json header;
  header["kind"] = "steering_vector";
  header["layer"] = vec.layer;
  header["alignment"] = vec.alignment;
  header["coefficient"] = vec.coefficient;
  header["d_model"] = vec.delta.cols;
  header["rows"] = vec.delta.rows;
  header["pair"] = vec.pair ? nlohmann::json{{"p_plus", vec.pair->plus}, {"p_minus", vec.pair->minus}}
                            : nlohmann::json(nullptr);
  header["dim_cutoff"] = vec.dim_cutoff ? nlohmann::json(*vec.dim_cutoff) : nlohmann::json(nullptr);
  if (!model_hash.empty()) header["model_hash"] = model_hash;
  aawf::write(path, std::move(header), {{"delta", {vec.delta.rows, vec.delta.cols}, vec.delta.data}});
}

SteeringVector load_vector(const std::filesystem::path& path) {
  auto file = aawf::read(path);
  const auto& h = file.header;
  if (h.value("kind", "") != "steering_vector") throw Error(path.string() + ": not a steering vector file");
  if (file.tensors.size() != 1 || file.tensors[0].name != "delta" || file.tensors[0].shape.size() != 2) {
    throw Error(path.string() + ": expected a single 2-D tensor named delta");
  }
  SteeringVector vec;
  try {
    vec.layer = h.at("layer").get<int>();
    vec.alignment = h.at("alignment").get<int>();
    vec.coefficient = h.at("coefficient").get<double>();
    if (h.contains("pair") && h["pair"].is_object()) {
      vec.pair = ContrastPair{h["pair"].at("p_plus").get<std::string>(), h["pair"].at("p_minus").get<std::string>()};
    }
    if (h.contains("dim_cutoff") && h["dim_cutoff"].is_number_integer()) vec.dim_cutoff = h["dim_cutoff"].get<int>();
    const auto rows = h.at("rows").get<std::size_t>();
    const auto cols = h.at("d_model").get<std::size_t>();
    if (file.tensors[0].shape != std::vector<std::size_t>{rows, cols}) {
      throw Error(path.string() + ": delta shape disagrees with header rows/d_model");
    }
    vec.delta.rows = rows;
    vec.delta.cols = cols;
    vec.delta.data = std::move(file.tensors[0].values);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": malformed vector header: " + e.what());
  }
  return vec;
}

}  // namespace actadd
