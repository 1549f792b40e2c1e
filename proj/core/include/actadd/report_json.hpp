#pragma once

#include <nlohmann/json.hpp>
#include <ostream>

#include "actadd/eval.hpp"
#include "actadd/sampler.hpp"
#include "actadd/steering.hpp"

namespace actadd {

// Serialization of results. Top-level reports carry "report_version".
// Non-finite doubles serialize as null.

void to_json(nlohmann::json& j, const ModelConfig& config);
void to_json(nlohmann::json& j, const ContrastPair& pair);
void to_json(nlohmann::json& j, const SteeringSpec& spec);
void to_json(nlohmann::json& j, const GenerationParams& params);
void to_json(nlohmann::json& j, const Completion& completion);
// Summary without the delta values themselves.
void to_json(nlohmann::json& j, const SteeringVector& vec);
void to_json(nlohmann::json& j, const NormProfile& profile);
void to_json(nlohmann::json& j, const HyperparameterGrid& grid);

void to_json(nlohmann::json& j, const BinResult& bin);
void to_json(nlohmann::json& j, const GroupResult& group);
void to_json(nlohmann::json& j, const DocumentDelta& doc);
void to_json(nlohmann::json& j, const PerplexityReport& report);
void to_json(nlohmann::json& j, const TokenShift& shift);
void to_json(nlohmann::json& j, const TokenShiftReport& report);
void to_json(nlohmann::json& j, const GenerationScore& score);
void to_json(nlohmann::json& j, const SweepReport& report);
void to_json(nlohmann::json& j, const PAtKReport& report);
void to_json(nlohmann::json& j, const KlEntry& entry);
void to_json(nlohmann::json& j, const KlReport& report);
void to_json(nlohmann::json& j, const PremiumMeasurement& m);
void to_json(nlohmann::json& j, const PremiumReport& report);

// theoretical,observed per line with a header.
void write_qq_csv(const TokenShiftReport& report, std::ostream& out);
// lo,hi,documents,excluded,mean_delta,ratio per bin with a header.
void write_perplexity_csv(const PerplexityReport& report, std::ostream& out);

}  // namespace actadd
