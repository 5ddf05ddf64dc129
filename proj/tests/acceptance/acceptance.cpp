// Acceptance suite: one PASS/FAIL line per primary criterion.
// Usage: acceptance [name-substring ...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mvpcbm/cli.hpp"
#include "mvpcbm/error.hpp"
#include "mvpcbm/eval.hpp"
#include "mvpcbm/head.hpp"

namespace {

using namespace mvpcbm;
namespace fs = std::filesystem;

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

constexpr std::size_t kSeeds = 5;

// ---- 1. gradient fidelity -------------------------------------------------------------------

Outcome gradient_fidelity() {
  constexpr double kTol = 1e-4, kMaxSeconds = 60.0;
  const auto o = cli::gradcheck({});
  std::string worst;
  for (const auto& e : o.report.entries) worst += fmt(" %s=%.1e", e.name.c_str(), e.max_error);
  return {o.report.passed && o.report.max_error <= kTol && o.runtime_seconds < kMaxSeconds,
          fmt("max mixed error %.2e <= %.0e, %.2fs < 60s;", o.report.max_error, kTol, o.runtime_seconds) + worst};
}

// ---- shared random-sample generator for the invariant checks -----------------------------------

struct RandomCase {
  PreparedSample sample;
  HeadParams params;
};

std::vector<RandomCase> random_cases(std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<RandomCase> out;
  while (out.size() < count) {
    SynthConfig s;
    s.n_samples = 50;
    s.n_layers = 1 + rng() % 12;
    s.n_attributes = 1 + rng() % 5;
    s.n_concepts = 2 + rng() % 3;
    s.embed_dim = 4 + rng() % 29;
    s.n_patches = s.n_attributes + rng() % 12;
    s.n_classes = 2;
    s.noise_scale = 0.05 + u(rng);
    s.seed = rng();
    const auto b = generate_synthetic(s);
    TrainConfig cfg;
    cfg.tau1_init = 0.01 + 2 * u(rng);
    cfg.tau2_init = 3 * g(rng);
    cfg.k_init = 2 * g(rng);
    const auto params = HeadParams::init(2, s.n_attributes * s.n_concepts, cfg);
    for (std::size_t i = 0; i < b.n_samples && out.size() < count; ++i) out.push_back({prepare_sample(b, i), params});
  }
  return out;
}

// ---- 2. normalization invariants ---------------------------------------------------------------

Outcome normalization_invariants() {
  constexpr double kTol = 1e-9;
  double worst_pref = 0.0, worst_layer = 0.0;
  for (const auto& c : random_cases(1000, 21)) {
    const auto t = trace_sample(c.sample, c.params, TrainConfig{});
    const auto L = t.n_layers, m = t.n_attributes, k = t.n_concepts;
    for (std::size_t l = 0; l < L; ++l) {
      double s = 0;
      for (std::size_t i = 0; i < m; ++i) s += t.pref[l * m + i];
      worst_pref = std::max(worst_pref, std::fabs(s - 1.0));
    }
    for (std::size_t c2 = 0; c2 < m * k; ++c2) {
      double s = 0;
      for (std::size_t l = 0; l < L; ++l) s += t.state.layer_weights[l * m * k + c2];
      worst_layer = std::max(worst_layer, std::fabs(s - 1.0));
    }
  }
  return {worst_pref <= kTol && worst_layer <= kTol,
          fmt("1000 samples: max |sum_i p - 1| = %.1e, max |sum_l w - 1| = %.1e (tol 1e-9)", worst_pref, worst_layer)};
}

// ---- 3. mask / threshold invariants -------------------------------------------------------------

Outcome mask_invariants() {
  std::size_t violations = 0, checked = 0;
  std::string first;
  auto fail = [&](const std::string& what) {
    if (violations++ == 0) first = what;
  };
  for (const auto& c : random_cases(1000, 33)) {
    const auto t = trace_sample(c.sample, c.params, TrainConfig{});
    const auto L = t.n_layers, per = t.n_attributes * t.n_concepts;
    double mask_sum = 0;
    for (std::size_t l = 0; l < L; ++l) {
      double lo = INFINITY, hi = 0.0;
      for (std::size_t r = 0; r < per; ++r) {
        const auto w = std::fabs(t.state.layer_weights[l * per + r]);
        lo = std::min(lo, w);
        hi = std::max(hi, w);
      }
      const double theta = t.state.thresholds[l];
      if (!(theta >= lo - 1e-15 && theta <= hi + 1e-15)) fail(fmt("theta %.17g outside [%.17g, %.17g]", theta, lo, hi));
      bool max_kept = false;
      for (std::size_t r = 0; r < per; ++r) {
        const auto idx = l * per + r;
        const double m = t.state.mask[idx];
        if (m != 0.0 && m != 1.0) fail("mask not binary");
        if (t.state.mask[idx] == 0.0 && t.state.sparse_weights[idx] != 0.0) fail("sparse weight outside mask");
        if (std::fabs(t.state.layer_weights[idx]) == hi && m == 1.0) max_kept = true;
        mask_sum += m;
      }
      if (!max_kept) fail("layer maximum masked");
    }
    const double sparsity = mask_sum / static_cast<double>(L * per);
    if (sparsity < 0.0 || sparsity > 1.0) fail("sparsity outside [0,1]");
    ++checked;
  }
  return {violations == 0, fmt("%zu samples, %zu violations", checked, violations) + (first.empty() ? "" : "; " + first)};
}

// ---- 4. degeneracy oracle -----------------------------------------------------------------------

Outcome degeneracy_oracle() {
  constexpr double kTol = 1e-12;
  SynthConfig s;
  s.n_samples = 100;
  s.n_layers = 1;
  s.n_attributes = 3;
  s.planted_layer = {0, 0, 0};
  s.seed = 4;
  const auto b = generate_synthetic(s);
  TrainConfig cfg;
  cfg.uniform_preference = true;
  cfg.tau2_init = 0.0;
  auto params = HeadParams::init(s.n_classes, s.n_attributes * s.n_concepts, cfg);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  for (double& w : params.W.data) w = g(rng);
  for (double& w : params.b.data) w = g(rng);
  double worst = 0.0;
  bool all_ones = true;
  for (std::size_t i = 0; i < b.n_samples; ++i) {
    const auto ps = prepare_sample(b, i);
    ad::Tape t;
    const auto p = bind_params(t, params, false);
    const auto full = forward_prepared(t, p, ps, cfg);
    for (double m : full.mask.value()) all_ones = all_ones && m == 1.0;
    const auto base = baseline_forward(t, p, t.constant(ad::Tensor({1, s.n_attributes, s.n_concepts}, ps.cosines)));
    for (std::size_t c = 0; c < s.n_classes; ++c) {
      worst = std::max(worst, std::fabs(full.logits.value()[c] - base.logits.value()[c]));
    }
  }
  return {all_ones && worst <= kTol, fmt("100 samples, L=1: max |logit diff| = %.1e (tol 1e-12), mask all ones: %s", worst,
                                         all_ones ? "yes" : "no")};
}

// ---- 5. sparsity monotonicity ---------------------------------------------------------------------

Outcome sparsity_monotonicity() {
  const double lambdas[] = {0.0, 0.01, 0.1};
  std::vector<double> means;
  for (double lambda2 : lambdas) {
    double total = 0.0;
    for (std::size_t seed = 0; seed < kSeeds; ++seed) {
      SynthConfig s;
      s.seed = seed;
      const auto samples = prepare_all(generate_synthetic(s));
      TrainConfig cfg;
      cfg.lambda2 = lambda2;
      cfg.seed = seed;
      const auto r = fit_prepared(samples, s.n_classes, cfg);
      total += r.report.epochs.back().hard_sparsity;
    }
    means.push_back(total / kSeeds);
  }
  const bool monotone = means[0] >= means[1] && means[1] >= means[2];

  // Deterministic part: raising K with the weights fixed.
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  bool k_monotone = true;
  for (int trial = 0; trial < 500; ++trial) {
    ad::Tape t;
    std::vector<double> raw(6 * 3 * 3);
    for (double& v : raw) v = u(rng);
    const auto w = mcsaf::layer_softmax(t.constant(ad::Tensor({6, 3, 3}, raw)));
    const ad::Tensor wt(w.shape(), {w.value().begin(), w.value().end()});
    double prev = 1.0;
    for (double K = -8.0; K <= 8.0; K += 0.25) {
      const auto theta = mcsaf::adaptive_threshold(w, t.scalar(K));
      const double frac = mcsaf::sparsity_fraction(mcsaf::hard_mask(wt, theta.value()));
      k_monotone = k_monotone && frac <= prev;
      prev = frac;
    }
  }
  return {monotone && k_monotone,
          fmt("mean hard sparsity lambda2=0: %.4f, 0.01: %.4f, 0.1: %.4f (non-increasing: %s); K sweep monotone: %s",
              means[0], means[1], means[2], monotone ? "yes" : "no", k_monotone ? "yes" : "no")};
}

// ---- 6/7. planted recovery and accuracy share the training runs --------------------------------------

struct PlantedRun {
  std::vector<std::size_t> planted, recovered;
  EvalResult full, baseline;
  double seconds = 0.0;
};

SynthConfig planted_config(std::uint64_t seed) {
  SynthConfig s;
  s.n_samples = 2000;
  s.n_layers = 12;
  s.n_attributes = 4;
  s.n_concepts = 3;
  s.signal_strength = 1.0;
  s.noise_scale = 0.1;
  s.seed = seed;
  return s;
}

const std::vector<PlantedRun>& planted_runs() {
  static const std::vector<PlantedRun> runs = [] {
    std::vector<PlantedRun> out;
    for (std::size_t seed = 0; seed < kSeeds; ++seed) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto s = planted_config(seed);
      const auto samples = prepare_all(generate_synthetic(s));
      TrainConfig cfg;
      cfg.seed = seed;
      PlantedRun run;
      const auto full = fit_prepared(samples, s.n_classes, cfg);
      run.planted = resolved_planted_layers(s);
      run.recovered = column_argmax(preference_weighted_layer_mass(samples, full.params, cfg), s.n_layers,
                                    s.n_attributes);
      run.full = evaluate_prepared(samples, s.n_classes, full.params, cfg);
      run.seconds = seconds_since(t0);
      cfg.mode = Mode::BaselineLastLayer;
      const auto base = fit_prepared(samples, s.n_classes, cfg);
      run.baseline = evaluate_prepared(samples, s.n_classes, base.params, cfg);
      out.push_back(std::move(run));
    }
    return out;
  }();
  return runs;
}

Outcome planted_recovery() {
  std::size_t hits = 0, total = 0;
  double seconds = 0.0;
  std::string per_seed;
  for (const auto& r : planted_runs()) {
    std::size_t h = 0;
    for (std::size_t i = 0; i < r.planted.size(); ++i) h += r.planted[i] == r.recovered[i];
    hits += h;
    total += r.planted.size();
    seconds += r.seconds;
    per_seed += fmt(" %zu/%zu", h, r.planted.size());
  }
  const double frac = static_cast<double>(hits) / static_cast<double>(total);
  return {frac >= 0.8 && seconds < 300.0,
          fmt("%zu/%zu attributes recovered (%.0f%% >= 80%%), full-mode training %.0fs < 300s; per seed:", hits, total,
              100 * frac, seconds) + per_seed};
}

Outcome synthetic_accuracy() {
  bool all_accurate = true;
  std::size_t baseline_lower = 0;
  std::string per_seed;
  for (const auto& r : planted_runs()) {
    all_accurate = all_accurate && r.full.accuracy >= 0.95 && r.full.balanced_accuracy >= 0.95;
    baseline_lower += r.baseline.balanced_accuracy < r.full.balanced_accuracy;
    per_seed += fmt(" [acc %.3f bmac %.3f | baseline bmac %.3f]", r.full.accuracy, r.full.balanced_accuracy,
                    r.baseline.balanced_accuracy);
  }
  return {all_accurate && baseline_lower >= 4,
          fmt("ACC,BMAC >= 0.95 on all seeds: %s; baseline lower in %zu/5 seeds;", all_accurate ? "yes" : "no",
              baseline_lower) + per_seed};
}

// ---- 8. metric oracle -------------------------------------------------------------------------------

Outcome metric_oracle() {
  std::mt19937_64 rng(8);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t C = 2 + rng() % 6, n = 1 + rng() % 300;
    std::vector<std::size_t> p(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng() % C;
      p[i] = (rng() % 3 == 0) ? y[i] : rng() % C;
    }
    // Counting oracle.
    std::vector<std::size_t> support(C, 0), hit(C, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
      ++support[y[i]];
      if (p[i] == y[i]) {
        ++hit[y[i]];
        ++correct;
      }
    }
    double rs = 0.0;
    std::size_t cls = 0;
    for (std::size_t c = 0; c < C; ++c)
      if (support[c] > 0) {
        rs += static_cast<double>(hit[c]) / static_cast<double>(support[c]);
        ++cls;
      }
    const auto r = compute_metrics(p, y, C);
    if (r.accuracy != static_cast<double>(correct) / static_cast<double>(n) ||
        r.balanced_accuracy != rs / static_cast<double>(cls)) {
      ++mismatches;
    }
  }
  const std::vector<std::size_t> y{0, 0, 0, 0, 1, 1}, p{0, 0, 0, 0, 1, 0};
  const double bmac = compute_metrics(p, y, 2).balanced_accuracy;
  return {mismatches == 0 && bmac == 0.75,
          fmt("50 fixtures, %zu exact mismatches; recall (1.0, 0.5) fixture BMAC = %.17g", mismatches, bmac)};
}

// ---- 9. bundle round trip ------------------------------------------------------------------------------

Outcome bundle_round_trip() {
  const auto dir = fs::temp_directory_path() / "mvpcbm_acceptance_bundles";
  fs::create_directories(dir);
  std::mt19937_64 rng(9);
  std::size_t identical = 0;
  FeatureBundle last;
  for (int i = 0; i < 50; ++i) {
    SynthConfig s;
    s.n_samples = 1 + rng() % 20;
    s.n_layers = 1 + rng() % 6;
    s.n_attributes = 1 + rng() % 4;
    s.n_concepts = 2 + rng() % 3;
    s.embed_dim = 1 + rng() % 16;
    s.n_patches = s.n_attributes + rng() % 8;
    s.n_classes = 2;
    s.seed = rng();
    const auto b = generate_synthetic(s);
    const auto path = dir / ("b" + std::to_string(i) + ".mvpb");
    write_bundle(b, path);
    identical += read_bundle(path) == b;
    last = b;
  }
  const auto path = dir / "corrupt.mvpb";
  write_bundle(last, path);
  std::vector<char> good;
  {
    std::ifstream f(path, std::ios::binary);
    good.assign(std::istreambuf_iterator<char>(f), {});
  }
  struct Corruption {
    const char* name;
    ErrorCode expected;
    std::function<void(std::vector<char>&)> apply;
  };
  const std::vector<Corruption> corruptions{
      {"magic", ErrorCode::BadMagic, [](auto& b) { b[1] = 'Q'; }},
      {"version", ErrorCode::UnsupportedVersion, [](auto& b) { b[4] = 9; }},
      {"truncated", ErrorCode::HeaderPayloadMismatch, [](auto& b) { b.resize(b.size() - 1); }},
      {"header length", ErrorCode::HeaderPayloadMismatch, [](auto& b) { b[8] = static_cast<char>(b[8] + 1); }},
      {"nan", ErrorCode::NonFiniteValue,
       [](auto& b) {
         const float nan = NAN;
         std::memcpy(b.data() + b.size() - 4, &nan, 4);
       }},
  };
  std::size_t rejected = 0;
  std::string wrong;
  for (const auto& c : corruptions) {
    auto bytes = good;
    c.apply(bytes);
    {
      std::ofstream f(path, std::ios::binary | std::ios::trunc);
      f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    try {
      read_bundle(path);
      wrong += std::string(" ") + c.name + ":accepted";
    } catch (const Error& e) {
      if (e.code() == c.expected) ++rejected;
      else wrong += std::string(" ") + c.name + ":" + std::string(to_string(e.code()));
    }
  }
  fs::remove_all(dir);
  return {identical == 50 && rejected == corruptions.size(),
          fmt("%zu/50 bundles identical after write/read; %zu/%zu corruptions rejected with the documented error",
              identical, rejected, corruptions.size()) + wrong};
}

// ---- 10. determinism --------------------------------------------------------------------------------------

Outcome determinism() {
  const auto dir = fs::temp_directory_path() / "mvpcbm_acceptance_det";
  fs::create_directories(dir);
  const auto bundle = (dir / "b.mvpb").string();
  std::ostringstream sink, err;
  int code = cli::run({"synth", "--out", bundle, "--seed", "3"}, sink, err);
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  std::vector<std::string> ckpts, reports;
  for (const char* threads : {"1", "4"}) {
    const auto ck = (dir / (std::string("c") + threads + ".json")).string();
    const auto rp = (dir / (std::string("r") + threads + ".jsonl")).string();
    code |= cli::run({"train", "--bundle", bundle, "--seed", "11", "--set", "epochs=20", "--threads", threads,
                      "--checkpoint", ck, "--report", rp},
                     sink, err);
    ckpts.push_back(slurp(ck));
    reports.push_back(slurp(rp));
  }
  fs::remove_all(dir);
  const bool same = code == 0 && ckpts[0] == ckpts[1] && reports[0] == reports[1] && !ckpts[0].empty();
  return {same, fmt("two train runs (1 and 4 threads): checkpoints %s (%zu bytes), reports %s (%zu bytes)",
                    ckpts[0] == ckpts[1] ? "identical" : "DIFFER", ckpts[0].size(),
                    reports[0] == reports[1] ? "identical" : "DIFFER", reports[0].size())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient-fidelity", gradient_fidelity},
      {"normalization-invariants", normalization_invariants},
      {"mask-threshold-invariants", mask_invariants},
      {"degeneracy-oracle", degeneracy_oracle},
      {"sparsity-monotonicity", sparsity_monotonicity},
      {"planted-preference-recovery", planted_recovery},
      {"synthetic-accuracy", synthetic_accuracy},
      {"metric-oracle", metric_oracle},
      {"bundle-round-trip", bundle_round_trip},
      {"determinism", determinism},
  };
  std::vector<std::string> filters(argv + 1, argv + argc);
  std::size_t failed = 0, ran = 0;
  for (const auto& [name, check] : criteria) {
    if (!filters.empty() && std::none_of(filters.begin(), filters.end(),
                                         [&](const auto& f) { return name.find(f) != std::string::npos; })) {
      continue;
    }
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.passed;
    std::cout << (o.passed ? "PASS " : "FAIL ") << name << " (" << fmt("%.1fs", seconds_since(t0)) << "): " << o.detail
              << std::endl;
  }
  std::cout << (failed == 0 ? "ALL PASS" : "FAILURES") << ": " << ran - failed << "/" << ran << " criteria" << std::endl;
  return failed == 0 ? 0 : 1;
}
