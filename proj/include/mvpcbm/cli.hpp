#pragma once

// Command-line front end: synth, train, eval, explain, export-viz, gradcheck.
//
// Configuration is a JSON file (--config) plus --set key=value overrides;
// overrides win, unknown keys are errors. A config file may be flat or hold
// "synth" / "train" sections; each command reads the keys it owns.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mvpcbm/autodiff.hpp"
#include "mvpcbm/bundle.hpp"
#include "mvpcbm/head.hpp"

namespace mvpcbm::cli {

enum ExitCode : int { kOk = 0, kVerificationFailed = 1, kUsageError = 2, kNumericFailure = 3 };

/// Runs one command; args exclude the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

nlohmann::json to_json(const SynthConfig& cfg);
/// Strict: unknown keys throw ConfigInvalid.
SynthConfig synth_config_from_json(const nlohmann::json& j, SynthConfig base = {});

/// "key=value" -> {key: value}; value parsed as JSON, else taken as a string.
std::pair<std::string, nlohmann::json> parse_override(const std::string& text);

/// Merges the file (section `section` if present, else the flat object) with
/// overrides. Keys of the other sections are ignored.
nlohmann::json merged_config(const std::optional<std::string>& config_path, const std::string& section,
                             const std::vector<std::string>& overrides);

/// --threads value, else MVPCBM_THREADS, else 0 (all cores).
std::size_t resolve_thread_flag(std::optional<std::size_t> flag);

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t n_samples = 3;
  double eps = 1e-5;
  double tolerance = 1e-4;
  /// Distance |w| must keep from every threshold, max and min for a seed to be used.
  double boundary_margin = 1e-4;
  /// Negative control: corrupts the analytic gradient of K.
  bool inject_fault = false;
};

struct GradcheckOutcome {
  ad::GradCheckReport report;
  std::uint64_t seed_used = 0;
  std::size_t seeds_skipped = 0;
  double runtime_seconds = 0.0;
};

/// Toy problem: L=3, m=2, k=3, d=8, N_p=16, two classes. Checks the full
/// loss w.r.t. every head parameter and the features of the first sample.
GradcheckOutcome gradcheck(const GradcheckOptions& opts);
nlohmann::json to_json(const GradcheckOutcome& outcome);

}  // namespace mvpcbm::cli
