#pragma once

// Exhaustive exploration of the escort controller over every observation
// string up to a fixed length. Shared by the unit and acceptance suites.

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "escorte/control/control.hpp"
#include "escorte/error.hpp"

namespace escorte::testing {

struct ControlCheckResult {
  std::size_t nodes = 0;
  std::size_t aborted = 0;
  std::size_t unsafe_speed = 0;        // non-zero speed in Halted/Prompted/Aborted
  std::size_t no_return = 0;           // confirmed Following did not restore Proceeding
  std::size_t abort_without_prompt = 0;
  std::size_t early_abort = 0;         // Aborted before the abort timeout elapsed
  std::size_t unconfirmed_change = 0;  // observation-driven move without a full confirm run
  std::size_t aborted_step_accepted = 0;
  std::string first_failure;

  bool ok() const {
    return unsafe_speed == 0 && no_return == 0 && abort_without_prompt == 0 && early_abort == 0 &&
           unconfirmed_change == 0 && aborted_step_accepted == 0;
  }
};

namespace detail {

using control::ControlState;
using control::Observation;

inline std::string describe(const std::vector<Observation>& path) {
  std::string s;
  for (auto o : path) {
    if (!s.empty()) s += ',';
    s += control::to_string(o);
  }
  return s;
}

struct Explorer {
  const control::ControlConfig& cfg;
  double dt;
  std::size_t max_len;
  ControlCheckResult r;
  std::vector<Observation> path;

  void note(std::size_t& counter, const char* what) {
    ++counter;
    if (r.first_failure.empty()) r.first_failure = std::string(what) + " after [" + describe(path) + "]";
  }

  void visit(const control::ControlStatus& before, bool prompted_before) {
    if (path.size() == max_len) return;
    for (Observation o : {Observation::Following, Observation::Lagging, Observation::Stopping,
                          Observation::Absent}) {
      path.push_back(o);
      auto [after, cmd] = control::control_step(before, o, dt, cfg);
      ++r.nodes;
      const bool prompted =
          prompted_before ||
          (before.state == ControlState::Halted && after.state == ControlState::Prompted);

      if ((after.state == ControlState::Halted || after.state == ControlState::Prompted ||
           after.state == ControlState::Aborted) &&
          cmd.speed != 0.0) {
        note(r.unsafe_speed, "non-zero speed while stopped");
      }
      if (cmd.terminate && cmd.speed != 0.0) note(r.unsafe_speed, "terminate with speed");

      if (after.state != before.state) {
        const bool confirmed_follow =
            after.run == Observation::Following && after.run_length >= cfg.lag_confirm;
        switch (after.state) {
          case ControlState::Proceeding:
            if (!confirmed_follow) note(r.unconfirmed_change, "unconfirmed return to proceeding");
            break;
          case ControlState::Slowed:
            if (!(after.run == Observation::Lagging && after.run_length >= cfg.lag_confirm))
              note(r.unconfirmed_change, "unconfirmed slow-down");
            break;
          case ControlState::Halted:
            if (!(after.run == Observation::Stopping && after.run_length >= cfg.stop_confirm))
              note(r.unconfirmed_change, "unconfirmed halt");
            break;
          default:
            break;
        }
      }

      if (after.state == ControlState::Aborted) {
        ++r.aborted;
        if (!prompted) note(r.abort_without_prompt, "abort without prompt timeout");
        if (before.state != ControlState::Prompted ||
            before.time_since_prompt + dt < cfg.abort_timeout)
          note(r.early_abort, "abort before timeout");
        try {
          control::control_step(after, Observation::Following, dt, cfg);
          note(r.aborted_step_accepted, "stepping an aborted machine");
        } catch (const ContractError&) {
        }
      } else {
        // Liveness: a confirmed run of Following always restores Proceeding.
        control::ControlStatus probe = after;
        for (std::size_t i = 0; i < cfg.lag_confirm; ++i)
          probe = control::control_step(probe, Observation::Following, dt, cfg).first;
        if (probe.state != ControlState::Proceeding) note(r.no_return, "no return to proceeding");
        visit(after, prompted);
      }
      path.pop_back();
    }
  }
};

}  // namespace detail

inline ControlCheckResult check_control_exhaustively(const control::ControlConfig& cfg, double dt,
                                                     std::size_t max_len) {
  detail::Explorer e{cfg, dt, max_len, {}, {}};
  e.visit(control::reset(cfg), false);
  return e.r;
}

}  // namespace escorte::testing
