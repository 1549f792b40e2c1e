#include "actadd/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "actadd/aawf.hpp"
#include "actadd/error.hpp"
#include "actadd/rng.hpp"

namespace actadd {
namespace {

// Fixed-order dot product: eight interleaved partial sums, combined pairwise.
// The order depends only on n, so a row gives the same bits whichever call
// path computes it.
float dot(const float* a, const float* b, std::size_t n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
  }
  for (std::size_t k = 0; i < n; ++i, ++k) acc[k] += a[i] * b[i];
  return ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]));
}

void linear_row(std::span<const float> x, const Linear& lin, std::span<float> out) {
  const std::size_t in = lin.weight.cols;
  for (std::size_t o = 0; o < lin.weight.rows; ++o) {
    out[o] = lin.bias[o] + dot(x.data(), lin.weight.data.data() + o * in, in);
  }
}

void check_finite(const Matrix& stream, std::size_t first_position, int layer, const char* where) {
  for (std::size_t r = 0; r < stream.rows; ++r) {
    for (float v : stream.row(r)) {
      if (!std::isfinite(v)) {
        throw Error(std::string("non-finite activation ") + where + " layer " + std::to_string(layer) +
                    " at position " + std::to_string(first_position + r));
      }
    }
  }
}

// Runs one block over `stream` rows holding positions [start, start + rows).
// K/V for those positions are written into the caches first, then each row
// attends over [0, position].
void run_block(const ModelConfig& cfg, const Block& block, Matrix& stream, std::size_t start, Matrix& keys,
               Matrix& values) {
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t heads = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t dh = static_cast<std::size_t>(cfg.d_head());
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  Matrix queries(stream.rows, d);
  std::vector<float> normed(d);
  std::vector<float> qkv(3 * d);
  for (std::size_t r = 0; r < stream.rows; ++r) {
    layer_norm(stream.row(r), normed, block.ln1, cfg.layernorm_epsilon);
    linear_row(normed, block.qkv, qkv);
    std::copy_n(qkv.begin(), d, queries.row(r).begin());
    std::copy_n(qkv.begin() + static_cast<std::ptrdiff_t>(d), d, keys.row(start + r).begin());
    std::copy_n(qkv.begin() + static_cast<std::ptrdiff_t>(2 * d), d, values.row(start + r).begin());
  }

  std::vector<float> attended(d);
  std::vector<float> projected(d);
  std::vector<float> scores;
  std::vector<float> hidden(4 * d);
  std::vector<float> mlp_out(d);
  for (std::size_t r = 0; r < stream.rows; ++r) {
    const std::size_t pos = start + r;
    scores.resize(pos + 1);
    for (std::size_t h = 0; h < heads; ++h) {
      const float* q = queries.row(r).data() + h * dh;
      float max_score = -INFINITY;
      for (std::size_t j = 0; j <= pos; ++j) {
        scores[j] = dot(q, keys.row(j).data() + h * dh, dh) * scale;
        max_score = std::max(max_score, scores[j]);
      }
      float total = 0.0f;
      for (std::size_t j = 0; j <= pos; ++j) {
        scores[j] = std::exp(scores[j] - max_score);
        total += scores[j];
      }
      float* out = attended.data() + h * dh;
      std::fill_n(out, dh, 0.0f);
      for (std::size_t j = 0; j <= pos; ++j) {
        const float p = scores[j] / total;
        const float* v = values.row(j).data() + h * dh;
        for (std::size_t c = 0; c < dh; ++c) out[c] += p * v[c];
      }
    }
    linear_row(attended, block.attn_proj, projected);
    auto row = stream.row(r);
    for (std::size_t c = 0; c < d; ++c) row[c] += projected[c];

    layer_norm(row, normed, block.ln2, cfg.layernorm_epsilon);
    linear_row(normed, block.mlp_up, hidden);
    for (auto& h : hidden) h = gelu(h);
    linear_row(hidden, block.mlp_down, mlp_out);
    for (std::size_t c = 0; c < d; ++c) row[c] += mlp_out[c];
  }
}

void unembed_row(const Model& model, std::span<const float> stream_row, std::span<float> out) {
  const auto& cfg = model.config;
  std::vector<float> normed(static_cast<std::size_t>(cfg.d_model));
  layer_norm(stream_row, normed, model.weights.lnf, cfg.layernorm_epsilon);
  const std::size_t d = normed.size();
  const float* wte = model.weights.wte.data.data();
  for (std::size_t v = 0; v < static_cast<std::size_t>(cfg.vocab_size); ++v) {
    out[v] = dot(normed.data(), wte + v * d, d);
  }
}

void validate_hooks(const ModelConfig& cfg, const HookSet& hooks, std::size_t total_length) {
  for (int l : hooks.capture_layers) {
    if (l < 0 || l > cfg.n_layers) {
      throw ValidationError("capture_layers", "layer " + std::to_string(l) + " outside [0, " +
                                                  std::to_string(cfg.n_layers) + "]");
    }
  }
  for (const auto& inj : hooks.injections) {
    if (inj.layer < 0 || inj.layer >= cfg.n_layers) {
      throw ValidationError("layer", "injection layer " + std::to_string(inj.layer) + " outside [0, " +
                                         std::to_string(cfg.n_layers - 1) + "]");
    }
    if (inj.delta.cols != static_cast<std::size_t>(cfg.d_model)) {
      throw ValidationError("delta", "injection width " + std::to_string(inj.delta.cols) +
                                         " does not match d_model " + std::to_string(cfg.d_model));
    }
    if (inj.position + inj.delta.rows > total_length) {
      throw ValidationError("alignment", "injection rows [" + std::to_string(inj.position) + ", " +
                                             std::to_string(inj.position + inj.delta.rows) +
                                             ") do not fit a sequence of length " + std::to_string(total_length));
    }
  }
}

std::vector<std::size_t> flatten_ranges(const std::vector<std::pair<std::size_t, std::size_t>>& ranges) {
  std::vector<std::size_t> out;
  for (auto [b, e] : ranges) {
    for (std::size_t p = b; p < e; ++p) out.push_back(p);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace

float gelu(float x) {
  constexpr float kSqrt2OverPi = 0.7978845608028654f;
  return 0.5f * x * (1.0f + std::tanh(kSqrt2OverPi * (x + 0.044715f * x * x * x)));
}

void layer_norm(std::span<const float> in, std::span<float> out, const LayerNormParams& params, float epsilon) {
  const std::size_t n = in.size();
  float mean = 0.0f;
  for (float v : in) mean += v;
  mean /= static_cast<float>(n);
  float var = 0.0f;
  for (float v : in) var += (v - mean) * (v - mean);
  var /= static_cast<float>(n);
  const float inv = 1.0f / std::sqrt(var + epsilon);
  for (std::size_t i = 0; i < n; ++i) out[i] = (in[i] - mean) * inv * params.gain[i] + params.bias[i];
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* field) {
    if (v <= 0) throw ValidationError(field, "must be positive, got " + std::to_string(v));
  };
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(vocab_size, "vocab_size");
  positive(max_positions, "max_positions");
  if (d_model % n_heads != 0) {
    throw ValidationError("n_heads", "d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                                         std::to_string(n_heads));
  }
  if (!(layernorm_epsilon > 0.0f) || !std::isfinite(layernorm_epsilon)) {
    throw ValidationError("layernorm_epsilon", "must be a positive finite number");
  }
}

const ResidualSnapshot* ForwardResult::snapshot(int layer) const {
  for (const auto& s : captured) {
    if (s.layer == layer) return &s;
  }
  return nullptr;
}

InferenceState::InferenceState(const Model& model) : model_(&model) {
  const auto& cfg = model.config;
  keys_.reserve(static_cast<std::size_t>(cfg.n_layers));
  values_.reserve(static_cast<std::size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    keys_.emplace_back(static_cast<std::size_t>(cfg.max_positions), static_cast<std::size_t>(cfg.d_model));
    values_.emplace_back(static_cast<std::size_t>(cfg.max_positions), static_cast<std::size_t>(cfg.d_model));
  }
}

ForwardResult InferenceState::extend(std::span<const TokenId> tokens, const HookSet& hooks, bool last_only) {
  const Model& model = *model_;
  const auto& cfg = model.config;
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t start = length_;
  const std::size_t total = start + tokens.size();

  if (tokens.empty()) throw ValidationError("tokens", "empty token sequence");
  if (total > static_cast<std::size_t>(cfg.max_positions)) {
    throw ValidationError("tokens", "sequence length " + std::to_string(total) + " exceeds max_positions " +
                                        std::to_string(cfg.max_positions));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= cfg.vocab_size) {
      throw ValidationError("tokens", "token id " + std::to_string(tokens[i]) + " at position " +
                                          std::to_string(start + i) + " outside vocabulary of size " +
                                          std::to_string(cfg.vocab_size));
    }
  }
  validate_hooks(cfg, hooks, total);

  Matrix stream(tokens.size(), d);
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    const auto tok = model.weights.wte.row(static_cast<std::size_t>(tokens[r]));
    const auto pos = model.weights.wpe.row(start + r);
    auto row = stream.row(r);
    for (std::size_t c = 0; c < d; ++c) row[c] = tok[c] + pos[c];
  }

  ForwardResult result;
  auto maybe_capture = [&](int layer) {
    if (std::find(hooks.capture_layers.begin(), hooks.capture_layers.end(), layer) != hooks.capture_layers.end()) {
      result.captured.push_back({layer, stream});
    }
  };

  for (int l = 0; l < cfg.n_layers; ++l) {
    for (const auto& inj : hooks.injections) {
      if (inj.layer != l) continue;
      const std::size_t b = std::max(inj.position, start);
      const std::size_t e = std::min(inj.position + inj.delta.rows, total);
      for (std::size_t p = b; p < e; ++p) {
        auto row = stream.row(p - start);
        const auto delta = inj.delta.row(p - inj.position);
        for (std::size_t c = 0; c < d; ++c) row[c] += delta[c];
      }
      if (b < e) modified_.emplace_back(b, e);
    }
    maybe_capture(l);
    run_block(cfg, model.weights.blocks[static_cast<std::size_t>(l)], stream, start,
              keys_[static_cast<std::size_t>(l)], values_[static_cast<std::size_t>(l)]);
    check_finite(stream, start, l, "after");
  }
  maybe_capture(cfg.n_layers);

  const std::size_t first = last_only ? tokens.size() - 1 : 0;
  result.logits = Matrix(tokens.size() - first, static_cast<std::size_t>(cfg.vocab_size));
  for (std::size_t r = first; r < tokens.size(); ++r) unembed_row(model, stream.row(r), result.logits.row(r - first));
  length_ = total;
  result.modified_positions = flatten_ranges(modified_);
  return result;
}

ForwardResult forward(const Model& model, std::span<const TokenId> tokens, const HookSet& hooks) {
  InferenceState state(model);
  return state.extend(tokens, hooks);
}

Matrix resume_forward(const Model& model, int layer, const Matrix& stream) {
  const auto& cfg = model.config;
  if (layer < 0 || layer > cfg.n_layers) {
    throw ValidationError("layer", "resume layer " + std::to_string(layer) + " out of range");
  }
  if (stream.cols != static_cast<std::size_t>(cfg.d_model) || stream.rows == 0 ||
      stream.rows > static_cast<std::size_t>(cfg.max_positions)) {
    throw ValidationError("stream", "stream shape does not match the model");
  }
  Matrix work = stream;
  Matrix keys(stream.rows, static_cast<std::size_t>(cfg.d_model));
  Matrix values(stream.rows, static_cast<std::size_t>(cfg.d_model));
  for (int l = layer; l < cfg.n_layers; ++l) {
    run_block(cfg, model.weights.blocks[static_cast<std::size_t>(l)], work, 0, keys, values);
    check_finite(work, 0, l, "after");
  }
  Matrix logits(stream.rows, static_cast<std::size_t>(cfg.vocab_size));
  for (std::size_t r = 0; r < stream.rows; ++r) unembed_row(model, work.row(r), logits.row(r));
  return logits;
}

std::vector<double> log_softmax(std::span<const float> row) {
  double max_v = -INFINITY;
  for (float v : row) max_v = std::max(max_v, static_cast<double>(v));
  double total = 0.0;
  for (float v : row) total += std::exp(static_cast<double>(v) - max_v);
  const double log_z = max_v + std::log(total);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = static_cast<double>(row[i]) - log_z;
  return out;
}

std::vector<double> logprobs(const ForwardResult& result, std::span<const TokenId> targets) {
  if (targets.size() != result.logits.rows) {
    throw ValidationError("targets", "length " + std::to_string(targets.size()) + " does not match " +
                                         std::to_string(result.logits.rows) + " logit rows");
  }
  std::vector<double> out;
  if (targets.size() < 2) return out;
  out.reserve(targets.size() - 1);
  for (std::size_t k = 1; k < targets.size(); ++k) {
    const auto row = result.logits.row(k - 1);
    const auto t = targets[k];
    if (t < 0 || static_cast<std::size_t>(t) >= row.size()) {
      throw ValidationError("targets", "target id " + std::to_string(t) + " at position " + std::to_string(k) +
                                           " outside vocabulary");
    }
    double max_v = -INFINITY;
    for (float v : row) max_v = std::max(max_v, static_cast<double>(v));
    double total = 0.0;
    for (float v : row) total += std::exp(static_cast<double>(v) - max_v);
    out.push_back(static_cast<double>(row[static_cast<std::size_t>(t)]) - max_v - std::log(total));
  }
  return out;
}

// ---- weight files ----------------------------------------------------------

namespace {

struct TensorTable {
  std::map<std::string, aawf::NamedTensor*> by_name;

  aawf::NamedTensor& take(const std::string& name, std::vector<std::size_t> shape) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("weights: missing tensor " + name);
    auto& t = *it->second;
    if (t.shape != shape) {
      std::string want, got;
      for (auto s : shape) want += std::to_string(s) + ",";
      for (auto s : t.shape) got += std::to_string(s) + ",";
      throw Error("weights: shape mismatch for tensor " + name + " (expected [" + want + "] got [" + got + "])");
    }
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      if (!std::isfinite(t.values[i])) {
        throw Error("weights: non-finite value in tensor " + name + " at flat index " + std::to_string(i));
      }
    }
    return t;
  }

  Matrix matrix(const std::string& name, std::size_t rows, std::size_t cols) {
    auto& t = take(name, {rows, cols});
    Matrix m;
    m.rows = rows;
    m.cols = cols;
    m.data = std::move(t.values);
    return m;
  }

  std::vector<float> vector(const std::string& name, std::size_t n) { return std::move(take(name, {n}).values); }
};

std::string block_name(int i, const char* suffix) { return "h." + std::to_string(i) + "." + suffix; }

}  // namespace

Model load_model(const std::filesystem::path& path) {
  auto file = aawf::read(path);
  if (file.header.contains("format_version") && file.header["format_version"] != 1) {
    throw Error(path.string() + ": unsupported format version " + file.header["format_version"].dump());
  }
  if (!file.header.contains("config")) throw Error(path.string() + ": header lacks a config object");

  Model model;
  const auto& c = file.header["config"];
  try {
    model.config.n_layers = c.at("n_layers").get<int>();
    model.config.d_model = c.at("d_model").get<int>();
    model.config.n_heads = c.at("n_heads").get<int>();
    model.config.vocab_size = c.at("vocab_size").get<int>();
    model.config.max_positions = c.at("max_positions").get<int>();
    model.config.layernorm_epsilon = c.at("layernorm_epsilon").get<float>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": malformed config: " + e.what());
  }
  model.config.validate();

  TensorTable table;
  for (auto& t : file.tensors) table.by_name[t.name] = &t;

  const auto& cfg = model.config;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  auto& w = model.weights;
  w.wte = table.matrix("wte", static_cast<std::size_t>(cfg.vocab_size), d);
  w.wpe = table.matrix("wpe", static_cast<std::size_t>(cfg.max_positions), d);
  for (int i = 0; i < cfg.n_layers; ++i) {
    Block b;
    b.ln1 = {table.vector(block_name(i, "ln1.g"), d), table.vector(block_name(i, "ln1.b"), d)};
    b.qkv = {table.matrix(block_name(i, "attn.qkv.w"), 3 * d, d), table.vector(block_name(i, "attn.qkv.b"), 3 * d)};
    b.attn_proj = {table.matrix(block_name(i, "attn.proj.w"), d, d), table.vector(block_name(i, "attn.proj.b"), d)};
    b.ln2 = {table.vector(block_name(i, "ln2.g"), d), table.vector(block_name(i, "ln2.b"), d)};
    b.mlp_up = {table.matrix(block_name(i, "mlp.up.w"), 4 * d, d), table.vector(block_name(i, "mlp.up.b"), 4 * d)};
    b.mlp_down = {table.matrix(block_name(i, "mlp.down.w"), d, 4 * d), table.vector(block_name(i, "mlp.down.b"), d)};
    w.blocks.push_back(std::move(b));
  }
  w.lnf = {table.vector("lnf.g", d), table.vector("lnf.b", d)};

  if (file.header.contains("model_hash") && file.header["model_hash"].is_string()) {
    model.hash = file.header["model_hash"].get<std::string>();
  } else {
    model.hash = aawf::content_hash(file);
  }
  return model;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  const auto& cfg = model.config;
  cfg.validate();
  nlohmann::json header;
  header["kind"] = "model";
  header["config"] = {{"n_layers", cfg.n_layers},         {"d_model", cfg.d_model},
                      {"n_heads", cfg.n_heads},           {"vocab_size", cfg.vocab_size},
                      {"max_positions", cfg.max_positions}, {"layernorm_epsilon", cfg.layernorm_epsilon}};

  std::vector<aawf::NamedTensor> tensors;
  auto add_matrix = [&](std::string name, const Matrix& m) { tensors.push_back({std::move(name), {m.rows, m.cols}, m.data}); };
  auto add_vector = [&](std::string name, const std::vector<float>& v) { tensors.push_back({std::move(name), {v.size()}, v}); };
  const auto& w = model.weights;
  add_matrix("wte", w.wte);
  add_matrix("wpe", w.wpe);
  for (int i = 0; i < cfg.n_layers; ++i) {
    const auto& b = w.blocks[static_cast<std::size_t>(i)];
    add_vector(block_name(i, "ln1.g"), b.ln1.gain);
    add_vector(block_name(i, "ln1.b"), b.ln1.bias);
    add_matrix(block_name(i, "attn.qkv.w"), b.qkv.weight);
    add_vector(block_name(i, "attn.qkv.b"), b.qkv.bias);
    add_matrix(block_name(i, "attn.proj.w"), b.attn_proj.weight);
    add_vector(block_name(i, "attn.proj.b"), b.attn_proj.bias);
    add_vector(block_name(i, "ln2.g"), b.ln2.gain);
    add_vector(block_name(i, "ln2.b"), b.ln2.bias);
    add_matrix(block_name(i, "mlp.up.w"), b.mlp_up.weight);
    add_vector(block_name(i, "mlp.up.b"), b.mlp_up.bias);
    add_matrix(block_name(i, "mlp.down.w"), b.mlp_down.weight);
    add_vector(block_name(i, "mlp.down.b"), b.mlp_down.bias);
  }
  add_vector("lnf.g", w.lnf.gain);
  add_vector("lnf.b", w.lnf.bias);
  aawf::write(path, std::move(header), tensors);
}

Model random_model(const ModelConfig& config, std::uint64_t seed, float scale) {
  config.validate();
  Xoshiro256pp rng(seed);
  auto normal_matrix = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (auto& v : m.data) v = static_cast<float>(rng.normal()) * scale;
    return m;
  };
  auto normal_vector = [&](std::size_t n, float mean, float s) {
    std::vector<float> v(n);
    for (auto& x : v) x = mean + static_cast<float>(rng.normal()) * s;
    return v;
  };
  const auto d = static_cast<std::size_t>(config.d_model);
  Model model;
  model.config = config;
  auto& w = model.weights;
  w.wte = normal_matrix(static_cast<std::size_t>(config.vocab_size), d);
  w.wpe = normal_matrix(static_cast<std::size_t>(config.max_positions), d);
  for (int i = 0; i < config.n_layers; ++i) {
    Block b;
    b.ln1 = {normal_vector(d, 1.0f, 0.1f), normal_vector(d, 0.0f, 0.1f)};
    b.qkv = {normal_matrix(3 * d, d), normal_vector(3 * d, 0.0f, scale)};
    b.attn_proj = {normal_matrix(d, d), normal_vector(d, 0.0f, scale)};
    b.ln2 = {normal_vector(d, 1.0f, 0.1f), normal_vector(d, 0.0f, 0.1f)};
    b.mlp_up = {normal_matrix(4 * d, d), normal_vector(4 * d, 0.0f, scale)};
    b.mlp_down = {normal_matrix(d, 4 * d), normal_vector(d, 0.0f, scale)};
    w.blocks.push_back(std::move(b));
  }
  w.lnf = {normal_vector(d, 1.0f, 0.1f), normal_vector(d, 0.0f, 0.1f)};
  model.hash = "random-" + std::to_string(seed);
  return model;
}

}  // namespace actadd
