#pragma once

// Trainable concept-bottleneck head: preference modeling, sparse multi-layer
// fusion, linear classifier, the three-term loss, AdamW, and the training loop.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mvpcbm/autodiff.hpp"
#include "mvpcbm/bundle.hpp"
#include "mvpcbm/icpm.hpp"
#include "mvpcbm/mcsaf.hpp"

namespace mvpcbm {

enum class Mode { Full, BaselineLastLayer };

std::string_view to_string(Mode mode);
Mode parse_mode(std::string_view text);

struct TrainConfig {
  double lambda1 = 1.0;
  double lambda2 = 0.01;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  Mode mode = Mode::Full;

  // Ablations.
  bool uniform_preference = false;  // preference modeling off
  bool no_concept_loss = false;     // lambda1 forced to 0
  bool no_sparse_loss = false;      // lambda2 forced to 0
  bool soft_mask = false;           // sigmoid mask instead of the hard mask
  bool fixed_tau1 = false;          // tau1 frozen at tau1_init
  bool fixed_tau2 = false;          // tau2 frozen at tau2_init

  double surrogate_beta = 50.0;
  double tau1_init = 0.2;
  double tau2_init = 0.2;
  double k_init = 0.0;
  /// Worker threads for the per-sample loops; 0 means hardware concurrency.
  std::size_t threads = 1;

  double effective_lambda1() const { return no_concept_loss ? 0.0 : lambda1; }
  double effective_lambda2() const { return no_sparse_loss ? 0.0 : lambda2; }
};

/// Throws ConfigInvalid on out-of-range settings.
void validate(const TrainConfig& cfg);

struct HeadParams {
  ad::Tensor log_tau1;  // tau1 = exp(log_tau1) > 0
  ad::Tensor tau2;
  ad::Tensor K;
  ad::Tensor W;  // |Y| x (m*k)
  ad::Tensor b;  // |Y|

  /// tau1 = tau2 = 0.2 and K = 0 by default; W and b zero.
  static HeadParams init(std::size_t n_classes, std::size_t bottleneck, const TrainConfig& cfg);

  double tau1() const;
  std::size_t n_classes() const { return b.size(); }
  std::size_t bottleneck() const { return W.shape.size() == 2 ? W.shape[1] : 0; }
  std::size_t flat_size() const;

  std::vector<ad::NamedTensor> named();
  bool operator==(const HeadParams& other) const;
};

/// Parameters placed on a tape for one forward pass.
struct ParamVars {
  ad::Var tau1, tau2, K, W, b;
  ad::Var log_tau1;
};

/// Creates leaves for every parameter. Gradients are read back per leaf.
ParamVars bind_params(ad::Tape& tape, const HeadParams& params, bool requires_grad);
/// Same, starting from already-created leaves (log_tau1, tau2, K, W, b).
ParamVars params_from_leaves(std::span<const ad::Var> leaves);

/// Frozen-feature quantities for one sample. Because the encoder is frozen,
/// raw preferences and concept cosines do not depend on any trainable
/// parameter and can be computed once.
struct PreparedSample {
  std::size_t n_layers = 0, n_attributes = 0, n_concepts = 0;
  std::vector<double> raw_pref;  // L x m
  std::vector<double> cosines;   // L x m x k
  std::uint32_t label = 0;
  std::vector<std::size_t> concept_labels;  // m
};

PreparedSample prepare_sample(const FeatureBundle& bundle, std::size_t sample);
std::vector<PreparedSample> prepare_all(const FeatureBundle& bundle, std::size_t threads = 1);

/// Sample inputs as tape leaves, for gradient checks through the features.
struct SampleVars {
  ad::Var cls_tokens;            // L x d
  ad::Var patch_tokens;          // L x N_p x d
  ad::Var attribute_embeddings;  // m x d
  ad::Var concept_embeddings;    // m x k x d
};

SampleVars sample_vars(ad::Tape& tape, const FeatureBundle& bundle, std::size_t sample,
                       bool requires_grad);

struct Forward {
  ad::Var pref;        // L x m (reported preference)
  ad::Var scores;      // L x m x k
  ad::Var weights;     // L x m x k
  ad::Var thresholds;  // L
  ad::Var adjusted;    // L x m x k
  ad::Var mask;        // L x m x k
  ad::Var sparse_weights;  // L x m x k
  ad::Var aggregated;  // m x k
  ad::Var logits;      // |Y|
  double hard_sparsity = 0.0;
};

/// Full pipeline from raw preferences [L x m] and concept cosines [L x m x k].
Forward forward_from_parts(ad::Tape& tape, const ParamVars& p, ad::Var raw_pref, ad::Var cosines,
                           const TrainConfig& cfg);
Forward forward_prepared(ad::Tape& tape, const ParamVars& p, const PreparedSample& s,
                         const TrainConfig& cfg);
/// Full pipeline straight from tokens, differentiable w.r.t. features too.
Forward forward_features(ad::Tape& tape, const ParamVars& p, const SampleVars& s,
                         std::size_t n_patches, const TrainConfig& cfg);

/// Last-layer baseline: plain cosine activations of the final layer's
/// per-attribute pooled tokens, no preference, no mask. `cosines` is [L x m x k];
/// only the last layer is read.
Forward baseline_forward(ad::Tape& tape, const ParamVars& p, ad::Var cosines);
Forward baseline_forward_features(ad::Tape& tape, const ParamVars& p, const SampleVars& s,
                                  std::size_t n_patches);

/// Dispatches on cfg.mode.
Forward forward(ad::Tape& tape, const ParamVars& p, const PreparedSample& s, const TrainConfig& cfg);

/// W * s_agg + b with s_agg flattened attribute-major.
ad::Var classify(ad::Var aggregated, ad::Var W, ad::Var b);

/// Mean over attributes of the within-attribute k-way cross-entropy.
ad::Var concept_loss(ad::Var aggregated, std::span<const std::size_t> concept_labels);

/// Mean of sigmoid(beta * (|w| - theta_l)) over layers and concepts.
ad::Var sparse_loss_surrogate(ad::Var weights, ad::Var thresholds, double beta);

struct LossTerms {
  ad::Var total;
  ad::Var classification;
  ad::Var concept_term;
  ad::Var surrogate;  // invalid in baseline mode
};

LossTerms total_loss(const Forward& fwd, std::size_t label, std::span<const std::size_t> concept_labels,
                     const TrainConfig& cfg);

/// One AdamW update in place; decay is applied to the weights directly.
void adamw_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                  std::span<double> v, std::size_t step, double lr, double beta1, double beta2,
                  double epsilon, double weight_decay);

class AdamW {
 public:
  explicit AdamW(const HeadParams& shape_like);

  /// `grads` is flattened in parameter order (log_tau1, tau2, K, W, b).
  /// Classifier W, b decay; temperatures and K do not.
  void step(HeadParams& params, std::span<const double> grads, const TrainConfig& cfg);
  std::size_t steps() const { return step_; }

 private:
  std::vector<double> m_, v_;
  std::size_t step_ = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double total_loss = 0.0;
  double classification_loss = 0.0;
  double concept_loss = 0.0;
  double hard_sparsity = 0.0;
  double surrogate_sparsity = 0.0;
  double train_accuracy = 0.0;
  double train_balanced_accuracy = 0.0;
  double tau1 = 0.0, tau2 = 0.0, K = 0.0;
  std::size_t clamp_events = 0;
  std::size_t tau2_sign_flips = 0;
};

struct TrainReport {
  Mode mode = Mode::Full;
  std::vector<EpochStats> epochs;
};

struct FitResult {
  TrainReport report;
  HeadParams params;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Shuffled mini-batch training; deterministic given cfg.seed regardless of
/// thread count. Throws NonFiniteLoss if the loss leaves the finite range.
FitResult fit(const FeatureBundle& bundle, const TrainConfig& cfg, const EpochCallback& on_epoch = {});
FitResult fit_prepared(std::span<const PreparedSample> samples, std::size_t n_classes,
                       const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Mean total loss over `samples` and its gradient (flattened parameter order).
double batch_loss_and_grad(std::span<const PreparedSample> samples, const HeadParams& params,
                           const TrainConfig& cfg, std::vector<double>* grad);

// ---- serialization ------------------------------------------------------------

nlohmann::json to_json(const TrainConfig& cfg);
/// Strict: unknown keys throw ConfigInvalid. Missing keys keep `base` values.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
nlohmann::json to_json(const EpochStats& stats, Mode mode);

struct Checkpoint {
  HeadParams params;
  TrainConfig config;
  std::string fingerprint;
  std::size_t n_layers = 0, n_attributes = 0, n_concepts = 0, n_classes = 0;
};

nlohmann::json checkpoint_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);
/// Throws DimensionMismatch if the checkpoint was trained on a different schema.
void require_compatible(const Checkpoint& ckpt, const FeatureBundle& bundle);

}  // namespace mvpcbm
