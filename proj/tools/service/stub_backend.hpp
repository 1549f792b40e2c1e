#pragma once

#include <chrono>
#include <string>

#include "actadd/eval.hpp"

namespace actadd::service {

// Backend whose forward pass costs a fixed wall time: `base` per pass plus
// `injection` more when any injection is present. Waits by spinning on the
// steady clock so the cost does not depend on scheduler wakeup latency.
// Captures and logits are zeros of the right shape.
class StubBackend final : public ForwardBackend {
 public:
  StubBackend(ModelConfig config, std::chrono::microseconds base, std::chrono::microseconds injection)
      : config_(config), base_(base), injection_(injection) {}

  std::string name() const override { return "stub"; }
  const ModelConfig& config() const override { return config_; }

  ForwardResult run(std::span<const TokenId> tokens, const HookSet& hooks) override {
    const auto start = std::chrono::steady_clock::now();
    const auto cost = hooks.injections.empty() ? base_ : base_ + injection_;
    ForwardResult result;
    result.logits = Matrix(1, static_cast<std::size_t>(config_.vocab_size));
    for (int layer : hooks.capture_layers) {
      result.captured.push_back({layer, Matrix(tokens.size(), static_cast<std::size_t>(config_.d_model))});
    }
    while (std::chrono::steady_clock::now() - start < cost) {
    }
    return result;
  }

  // Premium the measurement should report for a batch of `batch` sequences.
  double expected_premium(int batch) const {
    const double b = static_cast<double>(base_.count());
    const double i = static_cast<double>(injection_.count());
    return (2.0 * b + batch * (b + i)) / (batch * b) - 1.0;
  }

 private:
  ModelConfig config_;
  std::chrono::microseconds base_;
  std::chrono::microseconds injection_;
};

}  // namespace actadd::service
