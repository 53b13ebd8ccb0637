#include "sparling/annealing.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <string>

#include <json.hpp>

namespace sparling {

void AnnealState::validate_config() const {
  if (!(delta_update > 0.0 && delta_update < 1.0)) throw std::invalid_argument("delta_update must lie in (0,1)");
  if (eval_every <= 0) throw std::invalid_argument("eval_every must be positive");
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  if (target_decay < 0.0) throw std::invalid_argument("target_decay must be non-negative");
}

bool anneal_step(AnnealState& state, SparsityState& sparsity, const std::function<double()>& validate,
                 AnnealLog& log) {
  ++state.steps;
  const std::int64_t before = state.examples;
  state.examples += state.batch_size;
  state.target -= state.batch_size * state.target_decay;
  // A validation is due whenever the example counter crosses a multiple of M.
  if (state.examples / state.eval_every == before / state.eval_every) return false;

  double accuracy = 0.0;
  try {
    accuracy = validate();
  } catch (const std::exception& e) {
    throw ValidationFailure(std::string("validation failed at ") + std::to_string(state.examples) +
                            " examples: " + e.what());
  }
  if (!std::isfinite(accuracy) || accuracy < 0.0 || accuracy > 1.0) {
    throw ValidationFailure("validation returned accuracy outside [0,1]: " + std::to_string(accuracy));
  }

  bool reduced = false;
  if (state.enabled && accuracy > state.target && sparsity.density * state.delta_update >= state.delta_min) {
    sparsity.density *= state.delta_update;
    state.target = accuracy;
    reduced = true;
  }
  log.push_back(AnnealEvent{state.examples, accuracy, state.target, sparsity.density});
  return reduced;
}

std::vector<std::pair<std::int64_t, double>> anneal_schedule_replay(const AnnealLog& log, double delta0,
                                                                    double delta_update) {
  std::vector<std::pair<std::int64_t, double>> plateaus{{0, delta0}};
  double delta = delta0;
  std::int64_t last = 0;
  for (const AnnealEvent& e : log) {
    if (e.examples < last) throw std::invalid_argument("corrupt anneal log: example counts decrease");
    if (!std::isfinite(e.delta) || !std::isfinite(e.accuracy) || !std::isfinite(e.target)) {
      throw std::invalid_argument("corrupt anneal log: non-finite field");
    }
    last = e.examples;
    if (e.delta == delta) continue;
    const double expected = delta * delta_update;
    if (std::abs(e.delta - expected) > 1e-12 * expected) {
      throw std::invalid_argument("corrupt anneal log: density " + std::to_string(e.delta) +
                                  " does not follow " + std::to_string(delta));
    }
    delta = e.delta;
    plateaus.emplace_back(e.examples, delta);
  }
  return plateaus;
}

void write_event(std::ostream& os, const AnnealEvent& e) {
  nlohmann::ordered_json j;
  j["examples"] = e.examples;
  j["accuracy"] = e.accuracy;
  j["target"] = e.target;
  j["delta"] = e.delta;
  os << j.dump() << '\n';
}

void write_event_log(std::ostream& os, const AnnealLog& log) {
  for (const AnnealEvent& e : log) write_event(os, e);
}

AnnealLog read_event_log(std::istream& is) {
  AnnealLog log;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      log.push_back(AnnealEvent{j.at("examples").get<std::int64_t>(), j.at("accuracy").get<double>(),
                                j.at("target").get<double>(), j.at("delta").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("corrupt anneal log at line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return log;
}

}  // namespace sparling
