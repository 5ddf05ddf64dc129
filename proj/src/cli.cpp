#include "mvpcbm/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "mvpcbm/error.hpp"
#include "mvpcbm/eval.hpp"
#include "mvpcbm/random.hpp"

namespace mvpcbm::cli {

using nlohmann::json;

// ---- configuration ----------------------------------------------------------------------

json to_json(const SynthConfig& c) {
  return json{{"n_samples", c.n_samples},
              {"n_layers", c.n_layers},
              {"n_attributes", c.n_attributes},
              {"n_concepts", c.n_concepts},
              {"embed_dim", c.embed_dim},
              {"n_patches", c.n_patches},
              {"n_classes", c.n_classes},
              {"planted_layer", c.planted_layer},
              {"signal_strength", c.signal_strength},
              {"noise_scale", c.noise_scale},
              {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const json& j, SynthConfig c) {
  if (!j.is_object()) throw Error(ErrorCode::ConfigInvalid, "synth config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "n_samples") c.n_samples = value.get<std::size_t>();
      else if (key == "n_layers") c.n_layers = value.get<std::size_t>();
      else if (key == "n_attributes") c.n_attributes = value.get<std::size_t>();
      else if (key == "n_concepts") c.n_concepts = value.get<std::size_t>();
      else if (key == "embed_dim") c.embed_dim = value.get<std::size_t>();
      else if (key == "n_patches") c.n_patches = value.get<std::size_t>();
      else if (key == "n_classes") c.n_classes = value.get<std::size_t>();
      else if (key == "planted_layer") {
        c.planted_layer = value.is_number() ? std::vector<std::size_t>{value.get<std::size_t>()}
                                            : value.get<std::vector<std::size_t>>();
      } else if (key == "signal_strength") c.signal_strength = value.get<double>();
      else if (key == "noise_scale") c.noise_scale = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw Error(ErrorCode::ConfigInvalid, "unknown synth config key '" + key + "'");
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ConfigInvalid, "config key '" + key + "': " + e.what());
    }
  }
  return c;
}

std::pair<std::string, json> parse_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(ErrorCode::ConfigInvalid, "override '" + text + "' is not key=value");
  }
  const auto key = text.substr(0, eq), raw = text.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  return {key, value};
}

json merged_config(const std::optional<std::string>& config_path, const std::string& section,
                   const std::vector<std::string>& overrides) {
  json merged = json::object();
  if (config_path) {
    std::ifstream f(*config_path);
    if (!f) throw Error(ErrorCode::ConfigInvalid, "cannot open config " + *config_path);
    json file = json::parse(f, nullptr, false);
    if (file.is_discarded() || !file.is_object()) {
      throw Error(ErrorCode::ConfigInvalid, "config " + *config_path + " is not a JSON object");
    }
    const bool sectioned = file.contains("synth") || file.contains("train");
    if (sectioned) {
      for (const auto& [key, value] : file.items()) {
        if (key != "synth" && key != "train") {
          throw Error(ErrorCode::ConfigInvalid, "unknown config section '" + key + "'");
        }
      }
      if (file.contains(section)) merged = file.at(section);
    } else {
      merged = file;
    }
  }
  for (const auto& text : overrides) {
    auto [key, value] = parse_override(text);
    merged[key] = value;
  }
  return merged;
}

std::size_t resolve_thread_flag(std::optional<std::size_t> flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("MVPCBM_THREADS"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const auto v = std::strtoull(env, &end, 10);
    if (end == nullptr || *end != '\0') throw Error(ErrorCode::ConfigInvalid, "MVPCBM_THREADS must be an integer");
    return static_cast<std::size_t>(v);
  }
  return 0;
}

// ---- gradcheck ----------------------------------------------------------------------------

namespace {

SynthConfig toy_config(std::uint64_t seed, std::size_t n_samples) {
  SynthConfig s;
  s.n_samples = n_samples;
  s.n_layers = 3;
  s.n_attributes = 2;
  s.n_concepts = 3;
  s.embed_dim = 8;
  s.n_patches = 16;
  s.n_classes = 2;
  s.seed = seed;
  return s;
}

HeadParams random_params(const FeatureBundle& bundle, const TrainConfig& cfg, std::uint64_t seed) {
  auto rng = rng_stream(seed, "init");
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto p = HeadParams::init(bundle.schema.n_classes(), bundle.schema.n_attributes() * bundle.schema.n_concepts(), cfg);
  p.log_tau1.data[0] = std::log(0.2) + 0.3 * gauss(rng);
  p.tau2.data[0] = 0.2 + 0.5 * gauss(rng);
  p.K.data[0] = gauss(rng);
  for (double& v : p.W.data) v = 0.5 * gauss(rng);
  for (double& v : p.b.data) v = 0.5 * gauss(rng);
  return p;
}

// Smallest distance of any |w| to its layer threshold, or between the two
// largest / two smallest |w| of a layer (where max/min switch their argument).
double boundary_distance(const FeatureBundle& bundle, const HeadParams& params, const TrainConfig& cfg) {
  double best = INFINITY;
  for (std::size_t s = 0; s < bundle.n_samples; ++s) {
    const auto t = trace_sample(prepare_sample(bundle, s), params, cfg);
    const auto per_layer = t.n_attributes * t.n_concepts;
    for (std::size_t l = 0; l < t.n_layers; ++l) {
      std::vector<double> w(per_layer);
      for (std::size_t r = 0; r < per_layer; ++r) w[r] = std::fabs(t.state.layer_weights[l * per_layer + r]);
      for (double v : w) best = std::min(best, std::fabs(v - t.state.thresholds[l]));
      std::sort(w.begin(), w.end());
      if (per_layer >= 2) {
        best = std::min(best, w[1] - w[0]);
        best = std::min(best, w[per_layer - 1] - w[per_layer - 2]);
      }
    }
  }
  return best;
}

// Passes the loss through unchanged but leaks its gradient into `victim`.
ad::Var faulty_identity(ad::Var loss, ad::Var victim) {
  return loss.tape().record(loss.shape(), {loss.value().begin(), loss.value().end()}, {loss, victim},
                            [a = loss.id(), v = victim.id()](ad::Tape& tape, std::uint32_t self) {
                              const double g = tape.grad(self)[0];
                              tape.accumulate(a, 0, g);
                              tape.accumulate(v, 0, g);
                            });
}

}  // namespace

GradcheckOutcome gradcheck(const GradcheckOptions& opts) {
  const auto start = std::chrono::steady_clock::now();
  TrainConfig cfg;
  constexpr std::size_t kMaxSeedAttempts = 64;

  GradcheckOutcome outcome;
  FeatureBundle bundle;
  HeadParams params;
  std::uint64_t seed = opts.seed;
  for (std::size_t attempt = 0;; ++attempt, ++seed) {
    if (attempt == kMaxSeedAttempts) {
      throw Error(ErrorCode::ValidationFailed, "no seed kept every weight away from mask boundaries");
    }
    bundle = generate_synthetic(toy_config(seed, opts.n_samples));
    params = random_params(bundle, cfg, seed);
    if (boundary_distance(bundle, params, cfg) > opts.boundary_margin) break;
    ++outcome.seeds_skipped;
  }
  outcome.seed_used = seed;

  std::vector<std::vector<std::size_t>> concept_labels(bundle.n_samples);
  for (std::size_t s = 0; s < bundle.n_samples; ++s) {
    auto cl = bundle.sample_concept_labels(s);
    concept_labels[s].assign(cl.begin(), cl.end());
  }

  ad::Tape scratch;
  const auto s0 = sample_vars(scratch, bundle, 0, false);
  auto tensor_of = [](ad::Var v) { return ad::Tensor(v.shape(), {v.value().begin(), v.value().end()}); };
  ad::Tensor cls = tensor_of(s0.cls_tokens), patches = tensor_of(s0.patch_tokens);
  ad::Tensor attrs = tensor_of(s0.attribute_embeddings), concepts = tensor_of(s0.concept_embeddings);

  auto named = params.named();
  named.push_back({"cls_tokens", &cls});
  named.push_back({"patch_tokens", &patches});
  named.push_back({"attribute_embeddings", &attrs});
  named.push_back({"concept_embeddings", &concepts});

  const ad::Objective objective = [&](ad::Tape& tape, std::span<const ad::Var> v) {
    const auto p = params_from_leaves(v.subspan(0, 5));
    ad::Var total;
    for (std::size_t s = 0; s < bundle.n_samples; ++s) {
      SampleVars sv = s == 0 ? SampleVars{v[5], v[6], v[7], v[8]} : sample_vars(tape, bundle, s, false);
      sv.attribute_embeddings = v[7];
      sv.concept_embeddings = v[8];
      const auto fwd = forward_features(tape, p, sv, bundle.n_patches, cfg);
      const auto loss = total_loss(fwd, bundle.labels[s], concept_labels[s], cfg).total;
      total = total.valid() ? ad::add(total, loss) : loss;
    }
    total = ad::scale(total, 1.0 / static_cast<double>(bundle.n_samples));
    return opts.inject_fault ? faulty_identity(total, p.K) : total;
  };
  outcome.report = ad::finite_diff_check(objective, named, opts.eps, opts.tolerance);
  outcome.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return outcome;
}

json to_json(const GradcheckOutcome& o) {
  json entries = json::array();
  for (const auto& e : o.report.entries) {
    entries.push_back({{"name", e.name},
                       {"max_error", e.max_error},
                       {"max_abs_error", e.max_abs_error},
                       {"worst_index", e.worst_index}});
  }
  return json{{"passed", o.report.passed},
              {"max_error", o.report.max_error},
              {"tolerance", o.report.tolerance},
              {"seed_used", o.seed_used},
              {"seeds_skipped", o.seeds_skipped},
              {"runtime_seconds", o.runtime_seconds},
              {"parameters", entries}};
}

// ---- commands ----------------------------------------------------------------------------------

namespace {

struct Common {
  std::optional<std::string> config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
};

void add_config_options(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config file");
  cmd->add_option("--set", c.overrides, "key=value override (repeatable)");
  cmd->add_option("--seed", c.seed, "global seed");
}

void add_thread_option(CLI::App* cmd, Common& c) {
  cmd->add_option("--threads", c.threads, "worker threads (0 = all cores; env MVPCBM_THREADS)");
}

FeatureBundle load_bundle(const std::string& path) {
  auto b = read_bundle(path);
  return b;
}

Checkpoint load_compatible(const std::string& ckpt_path, const FeatureBundle& bundle) {
  auto ckpt = read_checkpoint(ckpt_path);
  require_compatible(ckpt, bundle);
  return ckpt;
}

TrainConfig eval_config(const Checkpoint& ckpt, std::size_t threads) {
  TrainConfig cfg = ckpt.config;
  cfg.threads = threads;
  return cfg;
}

int cmd_synth(const Common& c, const std::string& out_path, std::ostream& out) {
  auto cfg = synth_config_from_json(merged_config(c.config, "synth", c.overrides));
  if (c.seed) cfg.seed = *c.seed;
  const auto bundle = generate_synthetic(cfg);
  write_bundle(bundle, out_path);
  const auto issues = validate_bundle(bundle);
  out << json{{"path", out_path},
              {"valid", issues.empty()},
              {"issues", issues},
              {"fingerprint", bundle_fingerprint(bundle)},
              {"n_samples", bundle.n_samples},
              {"n_layers", bundle.n_layers},
              {"n_attributes", bundle.schema.n_attributes()},
              {"n_concepts", bundle.schema.n_concepts()},
              {"n_classes", bundle.schema.n_classes()},
              {"embed_dim", bundle.embed_dim},
              {"n_patches", bundle.n_patches},
              {"planted_layer", resolved_planted_layers(cfg)},
              {"bytes", encoded_size(bundle)}}
             .dump()
      << '\n';
  return kOk;
}

int cmd_train(const Common& c, const std::string& bundle_path, const std::string& ckpt_path,
              const std::string& report_path, const std::optional<std::string>& mode, std::ostream& out,
              std::ostream& err) {
  auto cfg = train_config_from_json(merged_config(c.config, "train", c.overrides));
  if (c.seed) cfg.seed = *c.seed;
  if (mode) cfg.mode = parse_mode(*mode);
  cfg.threads = resolve_thread_flag(c.threads);
  validate(cfg);
  const auto bundle = load_bundle(bundle_path);

  std::ofstream report(report_path, std::ios::trunc | std::ios::binary);
  if (!report) throw Error(ErrorCode::IoError, "cannot write " + report_path);
  std::size_t clamp_events = 0, sign_flips = 0;
  const auto result = fit(bundle, cfg, [&](const EpochStats& s) {
    report << to_json(s, cfg.mode).dump() << '\n';
    clamp_events += s.clamp_events;
    sign_flips += s.tau2_sign_flips;
  });
  if (!report) throw Error(ErrorCode::IoError, "write failed: " + report_path);

  Checkpoint ckpt;
  ckpt.params = result.params;
  ckpt.config = cfg;
  ckpt.fingerprint = bundle_fingerprint(bundle);
  ckpt.n_layers = bundle.n_layers;
  ckpt.n_attributes = bundle.schema.n_attributes();
  ckpt.n_concepts = bundle.schema.n_concepts();
  ckpt.n_classes = bundle.schema.n_classes();
  write_checkpoint(ckpt, ckpt_path);

  if (clamp_events > 0) err << "warning: " << clamp_events << " adjusted-weight exponents hit the +-30 clamp\n";
  if (sign_flips > 0) err << "warning: tau2 changed sign " << sign_flips << " times\n";
  json summary{{"checkpoint", ckpt_path}, {"report", report_path}, {"mode", std::string(to_string(cfg.mode))},
               {"epochs", cfg.epochs}};
  if (!result.report.epochs.empty()) summary["final"] = to_json(result.report.epochs.back(), cfg.mode);
  out << summary.dump() << '\n';
  return kOk;
}

int cmd_eval(const Common& c, const std::string& bundle_path, const std::string& ckpt_path, std::ostream& out) {
  const auto bundle = load_bundle(bundle_path);
  const auto ckpt = load_compatible(ckpt_path, bundle);
  const auto r = evaluate(bundle, ckpt.params, eval_config(ckpt, resolve_thread_flag(c.threads)));
  out << json{{"acc", r.accuracy}, {"bmac", r.balanced_accuracy}, {"per_class_recall", r.per_class_recall}}.dump()
      << '\n';
  return kOk;
}

int cmd_explain(const Common& c, const std::string& bundle_path, const std::string& ckpt_path, std::size_t sample,
                std::size_t topk, std::ostream& out) {
  const auto bundle = load_bundle(bundle_path);
  const auto ckpt = load_compatible(ckpt_path, bundle);
  const auto e = explain(bundle, sample, ckpt.params, eval_config(ckpt, resolve_thread_flag(c.threads)), topk);
  out << to_json(e).dump() << '\n';
  return kOk;
}

int cmd_export(const Common& c, const std::string& bundle_path, const std::string& ckpt_path,
               const std::string& out_dir, std::size_t sample, std::size_t topk, std::ostream& out) {
  const auto bundle = load_bundle(bundle_path);
  const auto ckpt = load_compatible(ckpt_path, bundle);
  const auto cfg = eval_config(ckpt, resolve_thread_flag(c.threads));
  if (sample >= bundle.n_samples) {
    throw Error(ErrorCode::IndexOutOfRange, "sample " + std::to_string(sample) + " of " +
                                                std::to_string(bundle.n_samples));
  }
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  write_preference_profile(export_preference_profile(bundle, ckpt.params, cfg), bundle.schema,
                           dir / "preference_profile.csv");
  write_activation_maps(export_activation_maps(bundle, sample, ckpt.params, cfg), bundle.schema, sample, dir);
  std::vector<Explanation> explanations;
  explanations.reserve(bundle.n_samples);
  for (std::size_t s = 0; s < bundle.n_samples; ++s) explanations.push_back(explain(bundle, s, ckpt.params, cfg, topk));
  write_explanations(explanations, dir / "explanations.jsonl");
  out << json{{"out_dir", out_dir},
              {"files",
               {"preference_profile.csv", "activation_dense.csv", "activation_sparse.csv", "explanations.jsonl"}}}
             .dump()
      << '\n';
  return kOk;
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonFiniteLoss:
    case ErrorCode::NonFiniteValue:
      return kNumericFailure;
    default:
      return kUsageError;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-layer concept-bottleneck head: synthetic data, training, evaluation, explanations", "mvpcbm"};
  app.require_subcommand(1);

  Common common;
  std::string bundle_path, out_path, ckpt_path = "checkpoint.json", report_path = "report.jsonl";
  std::string out_dir = "viz";
  std::optional<std::string> mode;
  std::size_t sample = 0, topk = 5;
  GradcheckOptions gc;

  auto* synth = app.add_subcommand("synth", "write a synthetic feature bundle");
  add_config_options(synth, common);
  synth->add_option("--out", out_path, "output bundle path")->required();

  auto* train = app.add_subcommand("train", "train the head on a bundle");
  add_config_options(train, common);
  add_thread_option(train, common);
  train->add_option("--bundle", bundle_path, "input bundle")->required();
  train->add_option("--checkpoint", ckpt_path, "output checkpoint JSON");
  train->add_option("--report", report_path, "output report JSONL");
  train->add_option("--mode", mode, "full | baseline_last_layer");

  auto* eval = app.add_subcommand("eval", "print accuracy and balanced accuracy");
  add_thread_option(eval, common);
  eval->add_option("--bundle", bundle_path, "input bundle")->required();
  eval->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();

  auto* expl = app.add_subcommand("explain", "top-k concept explanation for one sample");
  expl->add_option("--bundle", bundle_path, "input bundle")->required();
  expl->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
  expl->add_option("--sample", sample, "sample index")->required();
  expl->add_option("--topk", topk, "number of concepts")->check(CLI::PositiveNumber);

  auto* viz = app.add_subcommand("export-viz", "write preference profile, activation maps and explanations");
  add_thread_option(viz, common);
  viz->add_option("--bundle", bundle_path, "input bundle")->required();
  viz->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
  viz->add_option("--out-dir", out_dir, "output directory");
  viz->add_option("--sample", sample, "sample for the activation maps");
  viz->add_option("--topk", topk, "concepts per explanation")->check(CLI::PositiveNumber);

  auto* grad = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
  grad->add_option("--seed", gc.seed, "toy problem seed");
  grad->add_option("--eps", gc.eps, "central-difference step");
  grad->add_option("--tol", gc.tolerance, "maximum mixed error");
  grad->add_flag("--inject-fault", gc.inject_fault, "corrupt one analytic gradient (negative control)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsageError;
  }

  try {
    if (*synth) return cmd_synth(common, out_path, out);
    if (*train) return cmd_train(common, bundle_path, ckpt_path, report_path, mode, out, err);
    if (*eval) return cmd_eval(common, bundle_path, ckpt_path, out);
    if (*expl) return cmd_explain(common, bundle_path, ckpt_path, sample, topk, out);
    if (*viz) return cmd_export(common, bundle_path, ckpt_path, out_dir, sample, topk, out);
    if (*grad) {
      const auto outcome = gradcheck(gc);
      out << to_json(outcome).dump() << '\n';
      return outcome.report.passed ? kOk : kVerificationFailed;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }
  return kUsageError;
}

}  // namespace mvpcbm::cli
