#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <utility>
#include <vector>

#include "sparling/sparsity.hpp"

namespace sparling {

/// Registers of the validation-gated density annealing loop.
struct AnnealState {
  double target = 1.0;             ///< accuracy bar T
  std::int64_t eval_every = 20000;  ///< M, in examples seen
  int batch_size = 10;             ///< B
  double target_decay = 1e-6;      ///< d_T, per example
  double delta_update = 0.75;
  double delta_min = 0.0;  ///< δ is never reduced below this floor
  bool enabled = true;     ///< false: δ held fixed (ablation)
  std::int64_t examples = 0;
  std::int64_t steps = 0;

  void validate_config() const;
};

struct AnnealEvent {
  std::int64_t examples = 0;
  double accuracy = 0.0;
  double target = 0.0;  ///< T after the gate decision
  double delta = 0.0;   ///< δ after the gate decision

  bool operator==(const AnnealEvent&) const = default;
};

using AnnealLog = std::vector<AnnealEvent>;

/// Thrown when the validation callback fails; the log up to that point is
/// intact and should be flushed by the caller.
class ValidationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Advances the controller by one training step of B examples:
/// T <- T - B·d_T, and every M examples A <- validate(); if A > T then
/// δ <- δ·δ_update and T <- A. Appends one event per validation.
/// Returns true when δ was reduced.
bool anneal_step(AnnealState& state, SparsityState& sparsity, const std::function<double()>& validate,
                 AnnealLog& log);

/// (examples seen, δ) at the start of every δ plateau, beginning with
/// (0, δ0). Rejects logs whose example counts go backwards or whose δ
/// changes by anything other than a single δ_update factor.
std::vector<std::pair<std::int64_t, double>> anneal_schedule_replay(const AnnealLog& log, double delta0,
                                                                    double delta_update = 0.75);

/// JSON-lines: {"examples": int, "accuracy": float, "target": float, "delta": float}.
void write_event_log(std::ostream& os, const AnnealLog& log);
void write_event(std::ostream& os, const AnnealEvent& event);
AnnealLog read_event_log(std::istream& is);

}  // namespace sparling
