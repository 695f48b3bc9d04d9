#pragma once

#include <cstddef>
#include <optional>
#include <string_view>
#include <utility>

#include "escorte/action/action.hpp"
#include "escorte/config.hpp"

namespace escorte::control {

enum class ControlState : std::uint8_t { Proceeding, Slowed, Halted, Prompted, Aborted };
enum class Observation : std::uint8_t { Following, Lagging, Stopping, Absent };
enum class Prompt : std::uint8_t { None, KeepUp, PleaseProceed };

std::string_view to_string(ControlState s);
std::string_view to_string(Observation o);
std::string_view to_string(Prompt p);

/// Maps a classifier output (or its absence) to an observation.
Observation observe(const std::optional<action::ActionPrediction>& prediction);
Observation observe(action::ActionState state);

struct ControlConfig {
  double cruise_speed = 1.0;   // m/s
  double slowed_speed = 0.5;   // m/s
  std::size_t lag_confirm = 15;   // frames; also used to confirm Following
  std::size_t stop_confirm = 30;  // frames
  double prompt_timeout = 5.0;    // s in Halted before asking the escortee to proceed
  double abort_timeout = 30.0;    // s after the prompt before giving up

  /// Throws ConfigError unless 0 < slowed < cruise, timeouts > 0, confirms >= 1.
  void validate() const;
  /// Keys: control.cruise_speed, control.slowed_speed, control.lag_confirm,
  /// control.stop_confirm, control.prompt_timeout, control.abort_timeout.
  /// Other keys are ignored.
  static ControlConfig from_config(const KeyValueConfig& cfg);
};

struct RobotCommand {
  double speed = 0.0;
  Prompt prompt = Prompt::None;
  bool terminate = false;

  friend bool operator==(const RobotCommand&, const RobotCommand&) = default;
};

struct ControlStatus {
  ControlState state = ControlState::Proceeding;
  double time_in_state = 0.0;
  double time_since_prompt = 0.0;
  /// Current run of identical non-absent observations.
  Observation run = Observation::Absent;
  std::size_t run_length = 0;
  RobotCommand last;

  friend bool operator==(const ControlStatus&, const ControlStatus&) = default;
};

/// Proceeding at cruise speed with zeroed timers. Throws ConfigError on an invalid config.
ControlStatus reset(const ControlConfig& config);

/// One control tick.
///
///   Slowed/Halted/Prompted -> Proceeding  after lag_confirm consecutive Following
///   Proceeding/Slowed -> Halted           after stop_confirm consecutive Stopping
///   Proceeding -> Slowed                  after lag_confirm consecutive Lagging (keep-up prompt)
///   Halted -> Prompted                    after prompt_timeout in Halted (please-proceed prompt)
///   Prompted -> Aborted                   after abort_timeout unless the current run is Following
///
/// Absent observations leave the state, timers and observation run untouched
/// and repeat the last speed without a prompt. Prompts are emitted only on
/// the tick that enters a state. Throws ContractError for an Aborted machine
/// or dt <= 0.
std::pair<ControlStatus, RobotCommand> control_step(const ControlStatus& status,
                                                    Observation observation, double dt,
                                                    const ControlConfig& config);

/// Convenience wrapper owning the status.
class Controller {
 public:
  explicit Controller(ControlConfig config) : config_(config), status_(reset(config_)) {}

  RobotCommand step(Observation observation, double dt) {
    auto [next, cmd] = control_step(status_, observation, dt, config_);
    status_ = next;
    return cmd;
  }
  const ControlStatus& status() const noexcept { return status_; }
  const ControlConfig& config() const noexcept { return config_; }

 private:
  ControlConfig config_;
  ControlStatus status_;
};

}  // namespace escorte::control
