#include "escorte/harness/io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "escorte/error.hpp"
#include "escorte/log.hpp"

namespace escorte::harness {

using nlohmann::json;

std::string format_double(double v) {
  if (!std::isfinite(v)) throw NumericError("cannot serialize a non-finite value");
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

void write_string(std::ostream& out, const std::string& s) { out << json(s).dump(); }

void write_detection(std::ostream& out, const sim::Detection& d) {
  out << "{\"x\":" << format_double(d.x) << ",\"y\":" << format_double(d.y)
      << ",\"w\":" << format_double(d.w) << ",\"h\":" << format_double(d.h) << ",\"feat\":[";
  for (std::size_t i = 0; i < d.feature.size(); ++i) {
    if (i) out << ',';
    out << format_double(d.feature[i]);
  }
  out << "],\"subject\":" << (d.subject ? 1 : 0) << '}';
}

// Field access with errors that carry the line number.
class LineReader {
 public:
  LineReader(const json& j, std::size_t line) : j_(j), line_(line) {
    if (!j.is_object()) fail("expected a JSON object");
  }

  const json& at(const char* key) const {
    const auto it = j_.find(key);
    if (it == j_.end()) fail(std::string("missing field '") + key + "'");
    return *it;
  }
  double number(const json& v, const char* what) const {
    if (!v.is_number()) fail(std::string("field '") + what + "' must be a number");
    return v.get<double>();
  }
  double number(const char* key) const { return number(at(key), key); }
  std::uint64_t count(const char* key) const {
    const json& v = at(key);
    if (!v.is_number_unsigned()) fail(std::string("field '") + key + "' must be a non-negative integer");
    return v.get<std::uint64_t>();
  }
  std::string text(const char* key) const {
    const json& v = at(key);
    if (!v.is_string()) fail(std::string("field '") + key + "' must be a string");
    return v.get<std::string>();
  }
  void only(const std::set<std::string>& keys) const {
    for (const auto& [k, v] : j_.items()) {
      (void)v;
      if (!keys.count(k)) fail("unexpected field '" + k + "'");
    }
  }
  [[noreturn]] void fail(const std::string& what) const { throw ParseError(line_, what); }

 private:
  const json& j_;
  std::size_t line_;
};

json parse_line(const std::string& text, std::size_t line) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(line, std::string("malformed JSON: ") + e.what());
  }
}

void check_version(const LineReader& r, const char* schema) {
  if (r.text("schema") != schema) r.fail(std::string("expected schema '") + schema + "'");
  const json& v = r.at("version");
  if (!v.is_number_integer()) r.fail("field 'version' must be an integer");
  if (v.get<std::int64_t>() != kFormatVersion) {
    throw VersionError(std::string(schema) + " version " + std::to_string(v.get<std::int64_t>()) +
                       " is not supported (expected " + std::to_string(kFormatVersion) + ")");
  }
}

}  // namespace

void write_sequence(const sim::Sequence& seq, std::ostream& out) {
  out << "{\"schema\":\"" << kSequenceSchema << "\",\"version\":" << kFormatVersion
      << ",\"seq_id\":";
  write_string(out, seq.id);
  out << ",\"split\":\"" << sim::to_string(seq.split) << "\",\"fps\":" << format_double(seq.fps)
      << ",\"robot_speed\":" << format_double(seq.robot_speed)
      << ",\"feature_dim\":" << seq.feature_dim << "}\n";
  for (const auto& f : seq.frames) {
    out << "{\"seq_id\":";
    write_string(out, seq.id);
    out << ",\"frame\":" << f.frame << ",\"t\":" << format_double(f.t) << ",\"action\":\""
        << action::to_string(f.action) << "\",\"gap_m\":" << format_double(f.gap_m)
        << ",\"detections\":[";
    for (std::size_t i = 0; i < f.detections.size(); ++i) {
      if (i) out << ',';
      write_detection(out, f.detections[i]);
    }
    out << "]}\n";
  }
}

sim::Sequence read_sequence(std::istream& in) {
  sim::Sequence seq;
  std::string text;
  std::size_t line = 0;
  bool header = false;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) {
      throw ParseError(line, "blank line");
    }
    const json j = parse_line(text, line);
    const LineReader r(j, line);
    if (!header) {
      check_version(r, kSequenceSchema);
      r.only({"schema", "version", "seq_id", "split", "fps", "robot_speed", "feature_dim"});
      seq.id = r.text("seq_id");
      try {
        seq.split = sim::parse_split(r.text("split"));
      } catch (const ConfigError& e) {
        r.fail(e.what());
      }
      seq.fps = r.number("fps");
      seq.robot_speed = r.number("robot_speed");
      seq.feature_dim = r.count("feature_dim");
      if (!(seq.fps > 0.0)) r.fail("fps must be positive");
      header = true;
      continue;
    }
    r.only({"seq_id", "frame", "t", "action", "gap_m", "detections"});
    if (r.text("seq_id") != seq.id) r.fail("seq_id does not match the header");
    sim::FrameRecord f;
    f.frame = r.count("frame");
    if (f.frame != seq.frames.size()) {
      r.fail("frame " + std::to_string(f.frame) + " out of order (expected " +
             std::to_string(seq.frames.size()) + ")");
    }
    f.t = r.number("t");
    try {
      f.action = action::parse_action(r.text("action"));
    } catch (const ConfigError& e) {
      r.fail(e.what());
    }
    f.gap_m = r.number("gap_m");
    const json& dets = r.at("detections");
    if (!dets.is_array()) r.fail("field 'detections' must be an array");
    std::size_t subjects = 0;
    for (const json& dj : dets) {
      const LineReader dr(dj, line);
      dr.only({"x", "y", "w", "h", "feat", "subject"});
      sim::Detection d;
      d.x = dr.number("x");
      d.y = dr.number("y");
      d.w = dr.number("w");
      d.h = dr.number("h");
      if (d.x < 0.0 || d.y < 0.0 || !(d.w > 0.0) || !(d.h > 0.0) ||
          d.x + d.w > sim::kImageWidth + 1e-9 || d.y + d.h > sim::kImageHeight + 1e-9) {
        dr.fail("bounding box outside the 1280x720 image");
      }
      const json& feat = dr.at("feat");
      if (!feat.is_array() || feat.size() != seq.feature_dim) {
        dr.fail("feat must be an array of " + std::to_string(seq.feature_dim) + " numbers");
      }
      d.feature.reserve(feat.size());
      for (const json& v : feat) d.feature.push_back(dr.number(v, "feat"));
      const std::uint64_t flag = dr.count("subject");
      if (flag > 1) dr.fail("subject must be 0 or 1");
      d.subject = flag == 1;
      subjects += flag;
      f.detections.push_back(std::move(d));
    }
    if (subjects > 1) r.fail("more than one subject detection");
    seq.frames.push_back(std::move(f));
  }
  if (line == 0) warn("empty sequence file");
  return seq;
}

void save_sequence(const sim::Sequence& seq, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  write_sequence(seq, out);
  if (!out) throw ConfigError("write failed for " + path.string());
}

sim::Sequence load_sequence(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return read_sequence(in);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), path.string() + ": " + e.what());
  }
}

void save_corpus(const std::vector<sim::Sequence>& sequences, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / kManifestName, std::ios::binary);
  if (!manifest) throw ConfigError("cannot write " + (dir / kManifestName).string());
  manifest << "{\"schema\":\"" << kCorpusSchema << "\",\"version\":" << kFormatVersion
           << ",\"sequences\":" << sequences.size() << "}\n";
  for (const auto& seq : sequences) {
    const std::string file = seq.id + ".jsonl";
    save_sequence(seq, dir / file);
    manifest << "{\"seq_id\":" << json(seq.id).dump() << ",\"file\":" << json(file).dump()
             << ",\"split\":\"" << sim::to_string(seq.split) << "\"}\n";
  }
}

std::vector<sim::Sequence> load_corpus(const std::filesystem::path& dir) {
  const auto path = dir / kManifestName;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::vector<sim::Sequence> out;
  std::string text;
  std::size_t line = 0;
  std::size_t expected = 0;
  while (std::getline(in, text)) {
    ++line;
    const json j = parse_line(text, line);
    const LineReader r(j, line);
    if (line == 1) {
      check_version(r, kCorpusSchema);
      expected = r.count("sequences");
      continue;
    }
    r.only({"seq_id", "file", "split"});
    sim::Sequence seq = load_sequence(dir / r.text("file"));
    if (seq.id != r.text("seq_id")) r.fail("manifest seq_id does not match " + r.text("file"));
    sim::Split split{};
    try {
      split = sim::parse_split(r.text("split"));
    } catch (const ConfigError& e) {
      r.fail(e.what());
    }
    if (split != seq.split) r.fail("manifest split does not match " + r.text("file"));
    out.push_back(std::move(seq));
  }
  if (line == 0) throw ParseError(0, path.string() + ": empty manifest");
  if (out.size() != expected) {
    throw ParseError(line, "manifest lists " + std::to_string(out.size()) +
                               " sequences but the header says " + std::to_string(expected));
  }
  return out;
}

}  // namespace escorte::harness
