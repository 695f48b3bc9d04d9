#include "escorte/control/control.hpp"

#include "escorte/error.hpp"

namespace escorte::control {

std::string_view to_string(ControlState s) {
  switch (s) {
    case ControlState::Proceeding: return "proceeding";
    case ControlState::Slowed: return "slowed";
    case ControlState::Halted: return "halted";
    case ControlState::Prompted: return "prompted";
    case ControlState::Aborted: return "aborted";
  }
  return "unknown";
}

std::string_view to_string(Observation o) {
  switch (o) {
    case Observation::Following: return "following";
    case Observation::Lagging: return "lagging";
    case Observation::Stopping: return "stopping";
    case Observation::Absent: return "absent";
  }
  return "unknown";
}

std::string_view to_string(Prompt p) {
  switch (p) {
    case Prompt::None: return "none";
    case Prompt::KeepUp: return "keep-up";
    case Prompt::PleaseProceed: return "please-proceed";
  }
  return "unknown";
}

Observation observe(action::ActionState state) {
  switch (state) {
    case action::ActionState::Following: return Observation::Following;
    case action::ActionState::Lagging: return Observation::Lagging;
    case action::ActionState::Stopping: return Observation::Stopping;
  }
  return Observation::Absent;
}

Observation observe(const std::optional<action::ActionPrediction>& prediction) {
  return prediction ? observe(prediction->state) : Observation::Absent;
}

void ControlConfig::validate() const {
  if (!(slowed_speed > 0.0 && slowed_speed < cruise_speed)) {
    throw ConfigError("control speeds must satisfy 0 < slowed < cruise");
  }
  if (!(prompt_timeout > 0.0) || !(abort_timeout > 0.0)) {
    throw ConfigError("control timeouts must be positive");
  }
  if (lag_confirm == 0 || stop_confirm == 0) {
    throw ConfigError("control confirm counts must be at least 1");
  }
}

ControlConfig ControlConfig::from_config(const KeyValueConfig& cfg) {
  ControlConfig c;
  c.cruise_speed = cfg.get_double("control.cruise_speed", c.cruise_speed);
  c.slowed_speed = cfg.get_double("control.slowed_speed", c.slowed_speed);
  c.lag_confirm = cfg.get_uint("control.lag_confirm", c.lag_confirm);
  c.stop_confirm = cfg.get_uint("control.stop_confirm", c.stop_confirm);
  c.prompt_timeout = cfg.get_double("control.prompt_timeout", c.prompt_timeout);
  c.abort_timeout = cfg.get_double("control.abort_timeout", c.abort_timeout);
  c.validate();
  return c;
}

ControlStatus reset(const ControlConfig& config) {
  config.validate();
  ControlStatus s;
  s.last.speed = config.cruise_speed;
  return s;
}

namespace {

double speed_for(ControlState s, const ControlConfig& c) {
  switch (s) {
    case ControlState::Proceeding: return c.cruise_speed;
    case ControlState::Slowed: return c.slowed_speed;
    default: return 0.0;
  }
}

}  // namespace

std::pair<ControlStatus, RobotCommand> control_step(const ControlStatus& status,
                                                    Observation observation, double dt,
                                                    const ControlConfig& config) {
  if (status.state == ControlState::Aborted) {
    throw ContractError("control_step: the escort has been aborted");
  }
  if (!(dt > 0.0)) throw ContractError("control_step: dt must be positive");

  ControlStatus next = status;
  if (observation == Observation::Absent) {
    next.last.prompt = Prompt::None;
    return {next, next.last};
  }

  if (observation == next.run) {
    ++next.run_length;
  } else {
    next.run = observation;
    next.run_length = 1;
  }
  next.time_in_state += dt;
  if (next.state == ControlState::Prompted) next.time_since_prompt += dt;

  const bool following = next.run == Observation::Following && next.run_length >= config.lag_confirm;
  const bool lagging = next.run == Observation::Lagging && next.run_length >= config.lag_confirm;
  const bool stopping = next.run == Observation::Stopping && next.run_length >= config.stop_confirm;

  ControlState target = next.state;
  Prompt prompt = Prompt::None;
  switch (next.state) {
    case ControlState::Proceeding:
      if (stopping) {
        target = ControlState::Halted;
      } else if (lagging) {
        target = ControlState::Slowed;
        prompt = Prompt::KeepUp;
      }
      break;
    case ControlState::Slowed:
      if (following) {
        target = ControlState::Proceeding;
      } else if (stopping) {
        target = ControlState::Halted;
      }
      break;
    case ControlState::Halted:
      if (following) {
        target = ControlState::Proceeding;
      } else if (next.time_in_state >= config.prompt_timeout) {
        target = ControlState::Prompted;
        prompt = Prompt::PleaseProceed;
      }
      break;
    case ControlState::Prompted:
      if (following) {
        target = ControlState::Proceeding;
      } else if (next.time_since_prompt >= config.abort_timeout &&
                 next.run != Observation::Following) {
        target = ControlState::Aborted;
      }
      break;
    case ControlState::Aborted:
      break;
  }

  if (target != next.state) {
    next.state = target;
    next.time_in_state = 0.0;
    next.time_since_prompt = 0.0;
  }
  next.last = RobotCommand{speed_for(next.state, config), prompt,
                           next.state == ControlState::Aborted};
  return {next, next.last};
}

}  // namespace escorte::control
