#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "escorte/sim/world.hpp"

namespace escorte::harness {

// Sequence files are line-delimited JSON. Line 1 is a header:
//   {"schema":"escorte-seq","version":1,"seq_id":"seq-0000","split":"train",
//    "fps":30,"robot_speed":1,"feature_dim":64}
// and every further line is one frame:
//   {"seq_id":"seq-0000","frame":0,"t":0,"action":"following","gap_m":1.27,
//    "detections":[{"x":..,"y":..,"w":..,"h":..,"feat":[..],"subject":1}]}
// Floating values are written with 17 significant digits so a save/load
// round trip is lossless. See docs/formats.md for the field reference.

inline constexpr const char* kSequenceSchema = "escorte-seq";
inline constexpr const char* kCorpusSchema = "escorte-corpus";
inline constexpr int kFormatVersion = 1;
inline constexpr const char* kManifestName = "manifest.jsonl";

/// printf("%.17g"); non-finite values are rejected with NumericError.
std::string format_double(double v);

void write_sequence(const sim::Sequence& seq, std::ostream& out);
/// Throws ParseError (with the 1-based line) on malformed input and
/// VersionError on a schema version mismatch. An empty stream yields an empty
/// sequence and a warning.
sim::Sequence read_sequence(std::istream& in);

void save_sequence(const sim::Sequence& seq, const std::filesystem::path& path);
sim::Sequence load_sequence(const std::filesystem::path& path);

/// Writes one file per sequence plus manifest.jsonl listing files and splits.
void save_corpus(const std::vector<sim::Sequence>& sequences, const std::filesystem::path& dir);
/// Reads every sequence listed in the manifest, in manifest order.
std::vector<sim::Sequence> load_corpus(const std::filesystem::path& dir);

}  // namespace escorte::harness
