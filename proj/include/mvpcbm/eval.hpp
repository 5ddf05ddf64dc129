#pragma once

// Metrics (accuracy, balanced accuracy) and interpretability exports: top-k
// concept explanations, per-layer preference profiles, dense vs sparse
// activation maps.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mvpcbm/bundle.hpp"
#include "mvpcbm/head.hpp"

namespace mvpcbm {

struct EvalResult {
  double accuracy = 0.0;
  double balanced_accuracy = 0.0;                // mean recall over classes with support > 0
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<double> per_class_recall;          // 0 for classes without support
  std::vector<std::size_t> support;
};

/// Throws LabelOutOfRange for entries >= n_classes, ShapeMismatch on length mismatch.
EvalResult compute_metrics(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                           std::size_t n_classes);

/// Argmax-logit predictions (ties to the lowest class index).
std::vector<std::size_t> predict(std::span<const PreparedSample> samples, const HeadParams& params,
                                 const TrainConfig& cfg);

/// Throws DimensionMismatch when params do not fit the bundle's schema.
EvalResult evaluate(const FeatureBundle& bundle, const HeadParams& params, const TrainConfig& cfg);
EvalResult evaluate_prepared(std::span<const PreparedSample> samples, std::size_t n_classes,
                             const HeadParams& params, const TrainConfig& cfg);

nlohmann::json to_json(const EvalResult& r);

/// Forward values of one sample, row-major.
struct SampleTrace {
  std::size_t n_layers = 0, n_attributes = 0, n_concepts = 0;
  std::vector<double> pref;  // L x m
  mcsaf::ActivationState state;
  std::vector<double> logits;
  std::size_t predicted = 0;
};

/// In baseline mode the trace covers the last layer only (n_layers == 1).
SampleTrace trace_sample(const PreparedSample& sample, const HeadParams& params, const TrainConfig& cfg);

struct RankedConcept {
  std::size_t attribute = 0, concept_index = 0;
  std::string attribute_name, concept_text;
  double activation = 0.0;  // raw s_agg
  double score = 0.0;       // min-max normalized over the sample's m*k activations
  std::size_t winning_layer = 0;
};

struct Explanation {
  std::size_t sample = 0;
  std::size_t predicted = 0, true_class = 0;
  std::string predicted_name, true_name;
  std::vector<RankedConcept> ranked;           // descending score, ties by (attribute, concept)
  std::vector<std::size_t> winning_layer;      // m*k, argmax over layers of the sparse weight
};

/// Min-max normalization to [0,1]; all zeros when every value is equal.
std::vector<double> minmax_normalize(std::span<const double> values);

/// Indices of the top-k normalized values, descending, ties broken by index.
std::vector<std::size_t> rank_top(std::span<const double> normalized, std::size_t topk);

/// topk is clamped to m*k. Throws ConfigInvalid for topk == 0.
Explanation explain(const FeatureBundle& bundle, std::size_t sample, const HeadParams& params,
                    const TrainConfig& cfg, std::size_t topk = 5);

nlohmann::json to_json(const Explanation& e);

/// Mean and population std of p[l,i] over samples.
struct PreferenceProfile {
  std::size_t n_layers = 0, n_attributes = 0;
  std::vector<double> mean, stddev;  // L x m
};

PreferenceProfile preference_profile(std::span<const PreparedSample> samples, const HeadParams& params,
                                     const TrainConfig& cfg);
PreferenceProfile export_preference_profile(const FeatureBundle& bundle, const HeadParams& params,
                                            const TrainConfig& cfg);

/// Mean over samples of p[l,i] * sum_j w[l,i,j]: the layer mass each
/// attribute draws on. [L x m].
std::vector<double> preference_weighted_layer_mass(std::span<const PreparedSample> samples,
                                                   const HeadParams& params, const TrainConfig& cfg);

/// argmax over layers of each attribute's column of an [L x m] table.
std::vector<std::size_t> column_argmax(std::span<const double> table, std::size_t n_layers,
                                       std::size_t n_attributes);

struct ActivationMaps {
  std::size_t n_layers = 0, n_attributes = 0, n_concepts = 0;
  std::size_t first_layer = 0;  // bundle layer of row 0 (last layer in baseline mode)
  std::vector<double> dense;   // s, L x m x k
  std::vector<double> sparse;  // w_sparse * s
};

ActivationMaps export_activation_maps(const FeatureBundle& bundle, std::size_t sample, const HeadParams& params,
                                      const TrainConfig& cfg);

/// File writers: UTF-8 CSV plus a one-line JSON sidecar (`<stem>.json`).
void write_preference_profile(const PreferenceProfile& profile, const ConceptSchema& schema,
                              const std::filesystem::path& csv_path);
void write_activation_maps(const ActivationMaps& maps, const ConceptSchema& schema, std::size_t sample,
                           const std::filesystem::path& dir);
void write_explanations(std::span<const Explanation> explanations, const std::filesystem::path& jsonl_path);

}  // namespace mvpcbm
