#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "escorte/action/action.hpp"
#include "escorte/config.hpp"
#include "escorte/control/control.hpp"
#include "escorte/error.hpp"
#include "escorte/harness/io.hpp"
#include "escorte/harness/metrics.hpp"
#include "escorte/harness/pipeline.hpp"
#include "escorte/num/checkpoint.hpp"
#include "escorte/reid/reid.hpp"
#include "escorte/sim/world.hpp"

namespace py = pybind11;
using namespace escorte;
using Vector = std::vector<double>;

namespace {

KeyValueConfig to_config(const py::dict& d) {
  KeyValueConfig cfg;
  for (const auto& [k, v] : d) {
    const std::string key = py::str(k);
    if (py::isinstance<py::bool_>(v)) {
      cfg.set(key, v.cast<bool>() ? "true" : "false");
    } else if (py::isinstance<py::float_>(v)) {
      cfg.set(key, harness::format_double(v.cast<double>()));
    } else {
      cfg.set(key, py::str(v));
    }
  }
  return cfg;
}

num::Matrix to_matrix(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array");
  num::Matrix m(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), m.data().begin());
  return m;
}

py::array_t<double> to_array(const num::Matrix& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

std::vector<const sim::Sequence*> pointers(const std::vector<sim::Sequence>& seqs,
                                           const std::optional<std::string>& split) {
  std::vector<const sim::Sequence*> out;
  for (const auto& s : seqs)
    if (!split || s.split == sim::parse_split(*split)) out.push_back(&s);
  return out;
}

control::Observation parse_observation(const std::string& s) {
  if (s == "absent") return control::Observation::Absent;
  return control::observe(action::parse_action(s));
}

py::object from_json(const std::string& text) {
  return py::module_::import("json").attr("loads")(text);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Escort robot perception and control core";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<VersionError>(m, "VersionError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  // Simulation and corpus IO.
  py::class_<sim::Detection>(m, "Detection")
      .def_readonly("x", &sim::Detection::x)
      .def_readonly("y", &sim::Detection::y)
      .def_readonly("w", &sim::Detection::w)
      .def_readonly("h", &sim::Detection::h)
      .def_readonly("feature", &sim::Detection::feature)
      .def_readonly("subject", &sim::Detection::subject);

  py::class_<sim::FrameRecord>(m, "FrameRecord")
      .def_readonly("frame", &sim::FrameRecord::frame)
      .def_readonly("t", &sim::FrameRecord::t)
      .def_property_readonly("action",
                             [](const sim::FrameRecord& f) { return std::string(action::to_string(f.action)); })
      .def_readonly("gap_m", &sim::FrameRecord::gap_m)
      .def_readonly("detections", &sim::FrameRecord::detections);

  py::class_<sim::Sequence>(m, "Sequence")
      .def_readonly("id", &sim::Sequence::id)
      .def_property_readonly("split",
                             [](const sim::Sequence& s) { return std::string(sim::to_string(s.split)); })
      .def_readonly("fps", &sim::Sequence::fps)
      .def_readonly("robot_speed", &sim::Sequence::robot_speed)
      .def_readonly("feature_dim", &sim::Sequence::feature_dim)
      .def_readonly("frames", &sim::Sequence::frames)
      .def("labels", [](const sim::Sequence& s) {
        std::vector<std::string> out;
        for (const auto& f : s.frames) out.emplace_back(action::to_string(f.action));
        return out;
      })
      .def("relabel", [](const sim::Sequence& s) {
        std::vector<std::string> out;
        for (auto a : sim::relabel(s)) out.emplace_back(action::to_string(a));
        return out;
      })
      .def("__eq__", [](const sim::Sequence& a, const sim::Sequence& b) { return a == b; });

  m.def(
      "generate_corpus",
      [](const py::dict& config, std::optional<std::uint64_t> seed, std::size_t threads) {
        sim::GenerateConfig g = sim::GenerateConfig::from_config(to_config(config));
        if (seed) g.spec.seed = *seed;
        py::gil_scoped_release release;
        return sim::generate_corpus(g.spec, g.counts, g.spec.seed, threads).sequences;
      },
      py::arg("config") = py::dict(), py::arg("seed") = py::none(), py::arg("threads") = 1,
      "Simulate a corpus from scenario keys (sequences, duration, sigma, ...).");
  m.def("save_corpus", &harness::save_corpus, py::arg("sequences"), py::arg("directory"));
  m.def("load_corpus", &harness::load_corpus, py::arg("directory"));
  m.def("save_sequence", &harness::save_sequence, py::arg("sequence"), py::arg("path"));
  m.def("load_sequence", &harness::load_sequence, py::arg("path"));

  // Re-identification.
  py::class_<reid::EmbeddingModel>(m, "EmbeddingModel")
      .def_static("load", [](const std::filesystem::path& p) {
        return reid::EmbeddingModel::from_checkpoint(num::load_checkpoint(p));
      })
      .def("save", [](const reid::EmbeddingModel& model, const std::filesystem::path& p) {
        num::save_checkpoint(model.to_checkpoint(), p);
      })
      .def_property_readonly("input_dim", [](const reid::EmbeddingModel& model) { return model.dims().input; })
      .def_property_readonly("embed_dim", [](const reid::EmbeddingModel& model) { return model.dims().embed; })
      .def("embed", [](const reid::EmbeddingModel& model, const Vector& f) { return model.embed(f); });

  m.def(
      "triplet_loss",
      [](const Vector& a, const Vector& p, const Vector& n, double margin) {
        return reid::triplet_loss(a, p, n, margin);
      },
      py::arg("anchor"), py::arg("positive"), py::arg("negative"),
        py::arg("margin") = reid::kDefaultMargin);
  m.def(
      "match_subject",
      [](const Vector& reference, const std::vector<Vector>& candidates, double threshold) {
        const auto r = reid::match_subject({reference, 0, 0}, candidates, threshold);
        return py::make_tuple(r.subject, r.best_distance);
      },
      py::arg("reference"), py::arg("candidates"), py::arg("threshold") = reid::kDefaultThreshold,
      "Returns (index or None, best distance).");
  m.def(
      "train_reid",
      [](const std::vector<sim::Sequence>& seqs, const py::dict& config) {
        const KeyValueConfig kv = to_config(config);
        reid::ReidTrainConfig rc = reid::ReidTrainConfig::from_config(kv);
        const auto train = pointers(seqs, "train");
        if (!train.empty() && !kv.has("input_dim")) rc.dims.input = train.front()->feature_dim;
        py::gil_scoped_release release;
        num::Rng rng(rc.seed);
        auto r = reid::train_reid(harness::triplet_pools(train), rc, rng);
        return std::make_pair(std::move(r.model), std::move(r.loss_history));
      },
      py::arg("sequences"), py::arg("config") = py::dict(),
      "Train on the train split; returns (model, loss history).");

  // Action detection.
  py::class_<action::ActionModel>(m, "ActionModel")
      .def_static("load", [](const std::filesystem::path& p) {
        return action::ActionModel::from_checkpoint(num::load_checkpoint(p));
      })
      .def("save", [](const action::ActionModel& model, const std::filesystem::path& p) {
        num::save_checkpoint(model.to_checkpoint(), p);
      })
      .def_property_readonly("window", [](const action::ActionModel& model) { return model.config().window; })
      .def_property_readonly("dim", [](const action::ActionModel& model) { return model.config().dim; })
      .def(
          "detect",
          [](const action::ActionModel& model, const std::vector<std::optional<Vector>>& stream) {
            py::list out;
            for (const auto& p : action::detect_stream(model, stream)) {
              py::dict d;
              d["frame"] = p.frame;
              d["state"] = std::string(action::to_string(p.state));
              d["probabilities"] = std::vector<double>(p.probabilities.begin(), p.probabilities.end());
              out.append(d);
            }
            return out;
          },
          py::arg("stream"), "Online predictions for a stream of vectors (None = absent).");

  m.def(
      "attention_pool",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& h,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
        const auto r = action::attention_pool(to_matrix(h), to_matrix(a));
        return py::make_tuple(to_array(r.scores), to_array(r.weights), to_array(r.pooled));
      },
      py::arg("h"), py::arg("a"), "Returns (B, C, u) for H (w x d) and A (d x 1).");
  m.def(
      "train_action",
      [](const std::vector<sim::Sequence>& seqs, const reid::EmbeddingModel& reid_model,
         const py::dict& config) {
        const KeyValueConfig kv = to_config(config);
        action::ActionTrainConfig ac = action::ActionTrainConfig::from_config(kv);
        if (!kv.has("d")) ac.model.dim = harness::subject_vector_dim(reid_model, ac.model.input);
        py::gil_scoped_release release;
        const auto set = harness::action_training_set(pointers(seqs, "train"), reid_model, ac.model.input);
        num::Rng rng(ac.seed);
        auto r = action::train_action(set, ac, rng);
        return std::make_pair(std::move(r.model), std::move(r.loss_history));
      },
      py::arg("sequences"), py::arg("reid_model"), py::arg("config") = py::dict(),
      "Train on the train split; returns (model, loss history).");

  // Evaluation.
  m.def(
      "evaluate_joint",
      [](const reid::EmbeddingModel& reid_model, const action::ActionModel& action_model,
         const std::vector<sim::Sequence>& seqs, const std::string& split, double threshold,
         std::size_t threads) {
        std::string json;
        {
          py::gil_scoped_release release;
          json = harness::evaluate_joint(reid_model, action_model, pointers(seqs, split),
                                         {threshold, threads})
                     .to_json();
        }
        return from_json(json);
      },
      py::arg("reid_model"), py::arg("action_model"), py::arg("sequences"),
      py::arg("split") = "test", py::arg("threshold") = reid::kDefaultThreshold,
      py::arg("threads") = 1, "Report as a dict.");
  m.def(
      "measure_latency",
      [](const reid::EmbeddingModel& reid_model, const action::ActionModel& action_model,
         std::size_t frames, double fps, bool alpha_as_prose, std::uint64_t seed) {
        harness::LatencyConfig lc;
        lc.frames = frames;
        lc.fps = fps;
        lc.alpha_as_prose = alpha_as_prose;
        num::Rng rng(seed);
        const auto r = harness::measure_latency(reid_model, action_model, rng, lc);
        py::dict d;
        d["w"] = r.w;
        d["t_r"] = r.t_r;
        d["t_f"] = r.t_f;
        d["t_a"] = r.t_a;
        d["t_i"] = r.t_i;
        d["alpha_as_prose"] = r.alpha_as_prose;
        return d;
      },
      py::arg("reid_model"), py::arg("action_model"), py::arg("frames") = 300,
      py::arg("fps") = 30.0, py::arg("alpha_as_prose") = false, py::arg("seed") = 1);
  m.def(
      "average_precision",
      [](const Vector& scores, const std::vector<bool>& positives) {
        std::vector<std::uint8_t> p(positives.begin(), positives.end());
        return harness::average_precision(scores, p);
      },
      py::arg("scores"), py::arg("positives"), "None when there are no positives.");
  m.def("mean_ap", [](const Vector& aps) { return harness::mean_ap(aps); }, py::arg("aps"));
  m.def(
      "confusion_matrix",
      [](const std::vector<std::string>& predictions, const std::vector<std::string>& truths) {
        std::vector<action::ActionState> p, t;
        for (const auto& s : predictions) p.push_back(action::parse_action(s));
        for (const auto& s : truths) t.push_back(action::parse_action(s));
        return harness::confusion_matrix(p, t);
      },
      py::arg("predictions"), py::arg("truths"), "Rows are truth, columns prediction.");
  m.def(
      "inference_time",
      [](std::size_t w, double t_r, double t_f, double t_a, bool alpha_as_prose) {
        return harness::inference_time({w, t_r, t_f, t_a}, alpha_as_prose);
      },
      py::arg("w"), py::arg("t_r"), py::arg("t_f"), py::arg("t_a"), py::arg("alpha_as_prose") = false);

  // Control.
  py::class_<control::Controller>(m, "Controller")
      .def(py::init([](const py::dict& config) {
             return control::Controller(control::ControlConfig::from_config(to_config(config)));
           }),
           py::arg("config") = py::dict(), "Keys: control.cruise_speed, control.lag_confirm, ...")
      .def(
          "step",
          [](control::Controller& c, const std::string& observation, double dt) {
            const auto cmd = c.step(parse_observation(observation), dt);
            py::dict d;
            d["speed"] = cmd.speed;
            d["prompt"] = std::string(control::to_string(cmd.prompt));
            d["terminate"] = cmd.terminate;
            return d;
          },
          py::arg("observation"), py::arg("dt"),
          "observation is following, lagging, stopping or absent.")
      .def_property_readonly("state", [](const control::Controller& c) {
        return std::string(control::to_string(c.status().state));
      });
}
