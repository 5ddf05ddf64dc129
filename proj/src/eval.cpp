#include "mvpcbm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "mvpcbm/error.hpp"
#include "mvpcbm/parallel.hpp"

namespace mvpcbm {

using nlohmann::json;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  return f;
}

void write_sidecar(const std::filesystem::path& csv_path, const json& meta) {
  auto path = csv_path;
  path.replace_extension(".json");
  auto f = open_out(path);
  f << meta.dump() << '\n';
}

std::vector<double> to_vector(ad::Var v) { return {v.value().begin(), v.value().end()}; }

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

void check_params(std::span<const PreparedSample> samples, std::size_t n_classes, const HeadParams& params) {
  if (samples.empty()) return;
  const auto& s = samples.front();
  if (params.bottleneck() != s.n_attributes * s.n_concepts || params.n_classes() != n_classes) {
    throw Error(ErrorCode::DimensionMismatch,
                "parameters expect " + std::to_string(params.n_classes()) + " classes x " +
                    std::to_string(params.bottleneck()) + " concepts; bundle has " + std::to_string(n_classes) +
                    " x " + std::to_string(s.n_attributes * s.n_concepts));
  }
}

}  // namespace

// ---- metrics -------------------------------------------------------------------------

EvalResult compute_metrics(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                           std::size_t n_classes) {
  if (predictions.size() != labels.size()) {
    throw Error(ErrorCode::ShapeMismatch, "predictions and labels differ in length");
  }
  EvalResult r;
  r.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
  r.support.assign(n_classes, 0);
  r.per_class_recall.assign(n_classes, 0.0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes || predictions[i] >= n_classes) {
      throw Error(ErrorCode::LabelOutOfRange, "entry " + std::to_string(i) + " outside " + std::to_string(n_classes) +
                                                  " classes");
    }
    ++r.confusion[labels[i]][predictions[i]];
    ++r.support[labels[i]];
    if (labels[i] == predictions[i]) ++correct;
  }
  if (!labels.empty()) r.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  double recall_sum = 0.0;
  std::size_t supported = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (r.support[c] == 0) continue;
    r.per_class_recall[c] = static_cast<double>(r.confusion[c][c]) / static_cast<double>(r.support[c]);
    recall_sum += r.per_class_recall[c];
    ++supported;
  }
  if (supported > 0) r.balanced_accuracy = recall_sum / static_cast<double>(supported);
  return r;
}

SampleTrace trace_sample(const PreparedSample& sample, const HeadParams& params, const TrainConfig& cfg) {
  ad::Tape tape;
  auto p = bind_params(tape, params, false);
  auto f = forward(tape, p, sample, cfg);
  SampleTrace t;
  t.n_layers = f.scores.shape()[0];
  t.n_attributes = sample.n_attributes;
  t.n_concepts = sample.n_concepts;
  t.pref = to_vector(f.pref);
  t.state.n_layers = t.n_layers;
  t.state.n_attributes = t.n_attributes;
  t.state.n_concepts = t.n_concepts;
  t.state.scores = to_vector(f.scores);
  t.state.layer_weights = to_vector(f.weights);
  t.state.thresholds = to_vector(f.thresholds);
  t.state.mask = to_vector(f.mask);
  t.state.adjusted = to_vector(f.adjusted);
  t.state.sparse_weights = to_vector(f.sparse_weights);
  t.state.aggregated = to_vector(f.aggregated);
  t.logits = to_vector(f.logits);
  t.predicted = argmax(t.logits);
  return t;
}

std::vector<std::size_t> predict(std::span<const PreparedSample> samples, const HeadParams& params,
                                 const TrainConfig& cfg) {
  std::vector<std::size_t> out(samples.size());
  parallel_for(samples.size(), cfg.threads, [&](std::size_t i) {
    ad::Tape tape;
    auto p = bind_params(tape, params, false);
    out[i] = argmax(forward(tape, p, samples[i], cfg).logits.value());
  });
  return out;
}

EvalResult evaluate_prepared(std::span<const PreparedSample> samples, std::size_t n_classes,
                             const HeadParams& params, const TrainConfig& cfg) {
  check_params(samples, n_classes, params);
  const auto predictions = predict(samples, params, cfg);
  std::vector<std::size_t> labels(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) labels[i] = samples[i].label;
  return compute_metrics(predictions, labels, n_classes);
}

EvalResult evaluate(const FeatureBundle& bundle, const HeadParams& params, const TrainConfig& cfg) {
  if (params.bottleneck() != bundle.schema.n_attributes() * bundle.schema.n_concepts() ||
      params.n_classes() != bundle.schema.n_classes()) {
    throw Error(ErrorCode::DimensionMismatch, "parameters do not fit the bundle schema");
  }
  const auto samples = prepare_all(bundle, cfg.threads);
  return evaluate_prepared(samples, bundle.schema.n_classes(), params, cfg);
}

json to_json(const EvalResult& r) {
  return json{{"acc", r.accuracy},
              {"bmac", r.balanced_accuracy},
              {"per_class_recall", r.per_class_recall},
              {"support", r.support},
              {"confusion", r.confusion}};
}

// ---- explanations ----------------------------------------------------------------------

std::vector<double> minmax_normalize(std::span<const double> values) {
  std::vector<double> out(values.size(), 0.0);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - *lo) / range;
  return out;
}

std::vector<std::size_t> rank_top(std::span<const double> normalized, std::size_t topk) {
  std::vector<std::size_t> order(normalized.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return normalized[a] > normalized[b]; });
  order.resize(std::min(topk, order.size()));
  return order;
}

Explanation explain(const FeatureBundle& bundle, std::size_t sample, const HeadParams& params,
                    const TrainConfig& cfg, std::size_t topk) {
  if (topk == 0) throw Error(ErrorCode::ConfigInvalid, "topk must be >= 1");
  if (sample >= bundle.n_samples) {
    throw Error(ErrorCode::IndexOutOfRange,
                "sample " + std::to_string(sample) + " of " + std::to_string(bundle.n_samples));
  }
  const auto prepared = prepare_sample(bundle, sample);
  check_params(std::span(&prepared, 1), bundle.schema.n_classes(), params);
  const auto trace = trace_sample(prepared, params, cfg);
  const auto m = trace.n_attributes, k = trace.n_concepts, L = trace.n_layers;
  const auto layer_offset = bundle.n_layers - L;

  Explanation e;
  e.sample = sample;
  e.predicted = trace.predicted;
  e.true_class = prepared.label;
  e.predicted_name = bundle.schema.class_names[e.predicted];
  e.true_name = bundle.schema.class_names[e.true_class];
  e.winning_layer.resize(m * k);
  for (std::size_t c = 0; c < m * k; ++c) {
    std::size_t best = 0;
    for (std::size_t l = 1; l < L; ++l) {
      if (trace.state.sparse_weights[l * m * k + c] > trace.state.sparse_weights[best * m * k + c]) best = l;
    }
    e.winning_layer[c] = best + layer_offset;
  }
  const auto normalized = minmax_normalize(trace.state.aggregated);
  for (std::size_t c : rank_top(normalized, topk)) {
    RankedConcept r;
    r.attribute = c / k;
    r.concept_index = c % k;
    r.attribute_name = bundle.schema.attribute_names[r.attribute];
    r.concept_text = bundle.schema.concept_texts[r.attribute][r.concept_index];
    r.activation = trace.state.aggregated[c];
    r.score = normalized[c];
    r.winning_layer = e.winning_layer[c];
    e.ranked.push_back(std::move(r));
  }
  return e;
}

json to_json(const Explanation& e) {
  json ranked = json::array();
  for (const auto& r : e.ranked) {
    ranked.push_back({{"attribute", r.attribute_name},
                      {"concept", r.concept_text},
                      {"attribute_index", r.attribute},
                      {"concept_index", r.concept_index},
                      {"score", r.score},
                      {"activation", r.activation},
                      {"winning_layer", r.winning_layer}});
  }
  return json{{"sample", e.sample},
              {"predicted", e.predicted},
              {"predicted_name", e.predicted_name},
              {"true", e.true_class},
              {"true_name", e.true_name},
              {"top_concepts", ranked},
              {"winning_layer", e.winning_layer}};
}

// ---- preference profile ---------------------------------------------------------------------

PreferenceProfile preference_profile(std::span<const PreparedSample> samples, const HeadParams& params,
                                     const TrainConfig& cfg) {
  if (samples.empty()) throw Error(ErrorCode::ConfigInvalid, "preference profile needs samples");
  const auto L = samples.front().n_layers, m = samples.front().n_attributes;
  std::vector<std::vector<double>> prefs(samples.size());
  TrainConfig full = cfg;
  full.mode = Mode::Full;
  parallel_for(samples.size(), cfg.threads, [&](std::size_t s) {
    ad::Tape tape;
    auto p = bind_params(tape, params, false);
    prefs[s] = to_vector(forward_prepared(tape, p, samples[s], full).pref);
  });
  PreferenceProfile out;
  out.n_layers = L;
  out.n_attributes = m;
  out.mean.assign(L * m, 0.0);
  out.stddev.assign(L * m, 0.0);
  const double n = static_cast<double>(samples.size());
  for (const auto& p : prefs)
    for (std::size_t i = 0; i < L * m; ++i) out.mean[i] += p[i];
  for (double& v : out.mean) v /= n;
  for (const auto& p : prefs)
    for (std::size_t i = 0; i < L * m; ++i) out.stddev[i] += (p[i] - out.mean[i]) * (p[i] - out.mean[i]);
  for (double& v : out.stddev) v = std::sqrt(v / n);
  return out;
}

PreferenceProfile export_preference_profile(const FeatureBundle& bundle, const HeadParams& params,
                                            const TrainConfig& cfg) {
  const auto samples = prepare_all(bundle, cfg.threads);
  return preference_profile(samples, params, cfg);
}

std::vector<double> preference_weighted_layer_mass(std::span<const PreparedSample> samples,
                                                   const HeadParams& params, const TrainConfig& cfg) {
  if (samples.empty()) throw Error(ErrorCode::ConfigInvalid, "layer mass needs samples");
  const auto L = samples.front().n_layers, m = samples.front().n_attributes, k = samples.front().n_concepts;
  TrainConfig full = cfg;
  full.mode = Mode::Full;
  std::vector<std::vector<double>> per_sample(samples.size());
  parallel_for(samples.size(), cfg.threads, [&](std::size_t s) {
    const auto t = trace_sample(samples[s], params, full);
    auto& mass = per_sample[s];
    mass.assign(L * m, 0.0);
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t i = 0; i < m; ++i) {
        double w = 0.0;
        for (std::size_t j = 0; j < k; ++j) w += t.state.layer_weights[(l * m + i) * k + j];
        mass[l * m + i] = t.pref[l * m + i] * w;
      }
  });
  std::vector<double> out(L * m, 0.0);
  for (const auto& mass : per_sample)
    for (std::size_t i = 0; i < L * m; ++i) out[i] += mass[i];
  for (double& v : out) v /= static_cast<double>(samples.size());
  return out;
}

std::vector<std::size_t> column_argmax(std::span<const double> table, std::size_t n_layers,
                                       std::size_t n_attributes) {
  if (table.size() != n_layers * n_attributes || n_layers == 0) {
    throw Error(ErrorCode::ShapeMismatch, "column_argmax: table size");
  }
  std::vector<std::size_t> out(n_attributes, 0);
  for (std::size_t i = 0; i < n_attributes; ++i)
    for (std::size_t l = 1; l < n_layers; ++l)
      if (table[l * n_attributes + i] > table[out[i] * n_attributes + i]) out[i] = l;
  return out;
}

// ---- activation maps ---------------------------------------------------------------------------

ActivationMaps export_activation_maps(const FeatureBundle& bundle, std::size_t sample, const HeadParams& params,
                                      const TrainConfig& cfg) {
  if (sample >= bundle.n_samples) {
    throw Error(ErrorCode::IndexOutOfRange,
                "sample " + std::to_string(sample) + " of " + std::to_string(bundle.n_samples));
  }
  const auto prepared = prepare_sample(bundle, sample);
  check_params(std::span(&prepared, 1), bundle.schema.n_classes(), params);
  const auto t = trace_sample(prepared, params, cfg);
  ActivationMaps maps;
  maps.n_layers = t.n_layers;
  maps.n_attributes = t.n_attributes;
  maps.n_concepts = t.n_concepts;
  maps.first_layer = bundle.n_layers - t.n_layers;
  maps.dense = t.state.scores;
  maps.sparse.resize(maps.dense.size());
  for (std::size_t i = 0; i < maps.dense.size(); ++i) maps.sparse[i] = t.state.sparse_weights[i] * maps.dense[i];
  return maps;
}

// ---- writers -------------------------------------------------------------------------------------

void write_preference_profile(const PreferenceProfile& profile, const ConceptSchema& schema,
                              const std::filesystem::path& csv_path) {
  auto f = open_out(csv_path);
  f << "layer,attribute,mean,std\n";
  for (std::size_t l = 0; l < profile.n_layers; ++l)
    for (std::size_t i = 0; i < profile.n_attributes; ++i) {
      const auto idx = l * profile.n_attributes + i;
      f << l << ',' << csv_field(schema.attribute_names[i]) << ',' << num(profile.mean[idx]) << ','
        << num(profile.stddev[idx]) << '\n';
    }
  if (!f) throw Error(ErrorCode::IoError, "write failed: " + csv_path.string());
  write_sidecar(csv_path, {{"file", csv_path.filename().string()},
                           {"columns", {"layer", "attribute", "mean", "std"}},
                           {"n_layers", profile.n_layers},
                           {"attributes", schema.attribute_names},
                           {"aggregation", "mean and population std over samples"}});
}

void write_activation_maps(const ActivationMaps& maps, const ConceptSchema& schema, std::size_t sample,
                           const std::filesystem::path& dir) {
  const auto L = maps.n_layers, m = maps.n_attributes, k = maps.n_concepts;
  auto write_one = [&](const std::vector<double>& values, const std::string& name, const char* kind) {
    const auto path = dir / name;
    auto f = open_out(path);
    f << "layer,attribute,concept,value\n";
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) {
          f << maps.first_layer + l << ',' << csv_field(schema.attribute_names[i]) << ','
            << csv_field(schema.concept_texts[i][j]) << ',' << num(values[(l * m + i) * k + j]) << '\n';
        }
    if (!f) throw Error(ErrorCode::IoError, "write failed: " + path.string());
    write_sidecar(path, {{"file", name},
                         {"kind", kind},
                         {"sample", sample},
                         {"columns", {"layer", "attribute", "concept", "value"}},
                         {"n_layers", L},
                         {"attributes", schema.attribute_names},
                         {"concepts", schema.concept_texts}});
  };
  write_one(maps.dense, "activation_dense.csv", "dense");
  write_one(maps.sparse, "activation_sparse.csv", "sparse");
}

void write_explanations(std::span<const Explanation> explanations, const std::filesystem::path& jsonl_path) {
  auto f = open_out(jsonl_path);
  for (const auto& e : explanations) f << to_json(e).dump() << '\n';
  if (!f) throw Error(ErrorCode::IoError, "write failed: " + jsonl_path.string());
}

}  // namespace mvpcbm
