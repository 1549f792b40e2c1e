#include "actadd/report_json.hpp"

#include <cmath>
#include <iomanip>

namespace actadd {

using nlohmann::json;

namespace {

json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

template <class T>
json optional_value(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace

void to_json(json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers},     {"d_model", c.d_model},           {"n_heads", c.n_heads},
       {"vocab_size", c.vocab_size}, {"max_positions", c.max_positions}, {"layernorm_epsilon", c.layernorm_epsilon}};
}

void to_json(json& j, const ContrastPair& pair) { j = {{"plus", pair.plus}, {"minus", pair.minus}}; }

void to_json(json& j, const SteeringSpec& spec) {
  j = {{"pair", spec.pair},
       {"layer", spec.layer},
       {"coefficient", spec.coefficient},
       {"alignment", spec.alignment},
       {"dim_cutoff", optional_value(spec.dim_cutoff)}};
}

void to_json(json& j, const GenerationParams& p) {
  j = {{"temperature", p.temperature},
       {"top_p", p.top_p},
       {"frequency_penalty", p.frequency_penalty},
       {"max_new_tokens", p.max_new_tokens},
       {"seed", p.seed}};
}

void to_json(json& j, const Completion& c) {
  j = {{"prompt_tokens", c.prompt.ids},
       {"generated_tokens", c.generated.ids},
       {"text", to_valid_utf8(c.text)},
       {"seed", c.seed},
       {"steering", c.steering ? json(*c.steering) : json(nullptr)}};
}

void to_json(json& j, const SteeringVector& vec) {
  const auto [first, last] = vec.modified_range();
  json norms = json::array();
  for (double n : vec.row_norms()) norms.push_back(number(n));
  j = {{"layer", vec.layer},
       {"rows", vec.rows()},
       {"d_model", vec.delta.cols},
       {"alignment", vec.alignment},
       {"coefficient", vec.coefficient},
       {"pair", vec.pair ? json(*vec.pair) : json(nullptr)},
       {"dim_cutoff", optional_value(vec.dim_cutoff)},
       {"modified_positions", {first, last}},
       {"row_norms", norms}};
}

void to_json(json& j, const NormProfile& profile) {
  json layers = json::array();
  for (const auto& row : profile.ratios) {
    json r = json::array();
    for (const auto& v : row) r.push_back(v ? number(*v) : json(nullptr));
    layers.push_back(std::move(r));
  }
  j = {{"report_version", kReportVersion}, {"positions", profile.positions}, {"ratios", layers}};
}

void to_json(json& j, const HyperparameterGrid& grid) {
  j = {{"coefficients", grid.coefficients}, {"layers", grid.layers}};
}

void to_json(json& j, const BinResult& b) {
  j = {{"lo", b.lo},
       {"hi", b.hi},
       {"documents", b.documents},
       {"excluded", b.excluded},
       {"mean_delta", number(b.mean_delta)},
       {"ratio", number(b.ratio)}};
}

void to_json(json& j, const GroupResult& g) {
  j = {{"name", g.name}, {"documents", g.documents}, {"mean_delta", number(g.mean_delta)}, {"ratio", number(g.ratio)}};
}

void to_json(json& j, const DocumentDelta& d) {
  j = {{"id", d.id},
       {"topic_freq", d.topic_freq},
       {"baseline", number(d.baseline)},
       {"condition", number(d.condition)}};
}

void to_json(json& j, const PerplexityReport& r) {
  j = {{"report_version", kReportVersion},
       {"condition", r.condition},
       {"bins", r.bins},
       {"groups", r.groups},
       {"documents", r.documents}};
}

void to_json(json& j, const TokenShift& s) {
  j = {{"id", s.id}, {"text", to_valid_utf8(s.text)}, {"count", s.count}, {"mean_delta", number(s.mean_delta)}};
}

void to_json(json& j, const TokenShiftReport& r) {
  json qq = json::array();
  for (const auto& [t, o] : r.qq) qq.push_back({number(t), number(o)});
  j = {{"report_version", kReportVersion},
       {"min_instances", r.min_instances},
       {"total_tokens", r.total_tokens},
       {"kept_tokens", r.tokens.size()},
       {"top", r.top},
       {"bottom", r.bottom},
       {"qq", qq}};
}

void to_json(json& j, const GenerationScore& s) {
  j = {{"layer", optional_value(s.layer)},
       {"coefficient", s.coefficient},
       {"dim_cutoff", optional_value(s.dim_cutoff)},
       {"n", s.n},
       {"mean_count", number(s.mean_count)},
       {"fraction", number(s.fraction)},
       {"counts", s.counts}};
}

void to_json(json& j, const SweepReport& r) {
  j = {{"report_version", kReportVersion}, {"baseline", r.baseline}, {"steered", r.steered}};
}

void to_json(json& j, const PAtKReport& r) {
  j = {{"report_version", kReportVersion},
       {"items", r.items},
       {"k", r.ks},
       {"baseline", r.baseline},
       {"steered", r.steered}};
}

void to_json(json& j, const KlEntry& e) {
  j = {{"prompt", e.prompt}, {"kl_a", number(e.kl_a)}, {"kl_b", number(e.kl_b)}};
}

void to_json(json& j, const KlReport& r) {
  j = {{"report_version", kReportVersion},
       {"median_a", number(r.median_a)},
       {"median_b", number(r.median_b)},
       {"prompts", r.prompts}};
}

void to_json(json& j, const PremiumMeasurement& m) {
  j = {{"model", m.model},
       {"baseline_seconds", m.baseline_seconds},
       {"actadd_seconds", m.actadd_seconds},
       {"mean_baseline", m.mean_baseline},
       {"mean_actadd", m.mean_actadd},
       {"median_baseline", m.median_baseline},
       {"median_actadd", m.median_actadd},
       {"premium", number(m.premium)},
       {"median_premium", number(m.median_premium)},
       {"low_resolution", m.low_resolution}};
}

void to_json(json& j, const PremiumReport& r) {
  j = {{"report_version", kReportVersion}, {"models", r.models}};
}

void write_qq_csv(const TokenShiftReport& report, std::ostream& out) {
  out << "theoretical,observed\n" << std::setprecision(17);
  for (const auto& [t, o] : report.qq) out << t << ',' << o << '\n';
}

void write_perplexity_csv(const PerplexityReport& report, std::ostream& out) {
  out << "lo,hi,documents,excluded,mean_delta,ratio\n" << std::setprecision(17);
  for (const auto& b : report.bins) {
    out << b.lo << ',' << b.hi << ',' << b.documents << ',' << (b.excluded ? 1 : 0) << ',' << b.mean_delta << ','
        << b.ratio << '\n';
  }
}

}  // namespace actadd
