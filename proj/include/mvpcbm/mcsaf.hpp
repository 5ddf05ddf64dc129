#pragma once

// Multi-layer concept sparse activation fusion.
//
// Per sample: pool patch tokens into one vector per attribute, score every
// (layer, attribute, concept) by preference-weighted cosine, turn scores into
// per-concept weights over layers, sparsify them with an adaptive per-layer
// threshold and a hard mask, and sum the surviving weighted scores into the
// m x k concept bottleneck.

#include <cstddef>
#include <span>
#include <vector>

#include "mvpcbm/autodiff.hpp"

namespace mvpcbm::mcsaf {

/// Contiguous segments of the patch sequence, one per attribute:
/// bounds[i] = round_half_even(i * N_p / m).
struct PoolingPlan {
  std::vector<std::size_t> bounds;  // m + 1 entries, bounds.front() == 0, bounds.back() == N_p

  /// Throws TooFewPatches when n_patches < n_attributes.
  static PoolingPlan make(std::size_t n_patches, std::size_t n_attributes);

  std::size_t segments() const noexcept { return bounds.empty() ? 0 : bounds.size() - 1; }
  std::size_t n_patches() const noexcept { return bounds.empty() ? 0 : bounds.back(); }
};

/// [N_p x d] -> [m x d], row i the mean of segment i.
ad::Var attribute_pool(ad::Var patch_tokens, const PoolingPlan& plan);

/// Pools every layer at once: [L x N_p x d] -> [L x m x d].
ad::Var attribute_pool_layers(ad::Var patch_tokens, const PoolingPlan& plan);

/// cos(pooled[l,i], concept[i,j]) for pooled [L x m x d] and concepts [m x k x d] -> [L x m x k].
ad::Var concept_cosines(ad::Var pooled, ad::Var concept_embeddings);

/// s[l,i,j] = pref[l,i] * cosines[l,i,j].
ad::Var concept_scores(ad::Var pref, ad::Var cosines);
ad::Var concept_scores(ad::Var pref, ad::Var pooled, ad::Var concept_embeddings);

/// Per-(i,j) softmax over layers, temperature 1.
ad::Var layer_softmax(ad::Var scores);

/// theta[l] = sigmoid(K) * (max_l - min_l) + min_l over |w| at layer l.
/// Accepts [L x m x k] or [L x (m*k)] weights; returns [L].
ad::Var adaptive_threshold(ad::Var layer_weights, ad::Var K);

inline constexpr double kExponentClamp = 30.0;

/// w * exp(tau2 * (|w| - theta_l)); the exponent is clamped to +-30 and
/// clamp events are counted on the tape.
ad::Var adjust_weights(ad::Var layer_weights, ad::Var thresholds, ad::Var tau2);

/// 1 where |w| >= theta_l (inclusive); the per-layer maximum always passes.
/// Shape follows `layer_weights`.
ad::Tensor hard_mask(const ad::Tensor& layer_weights, std::span<const double> thresholds);

/// Differentiable relaxation sigmoid(beta * (|w| - theta_l)), same shape as weights.
ad::Var soft_mask(ad::Var layer_weights, ad::Var thresholds, double beta);

/// s_agg[i,j] = sum_l mask * adjusted * scores. `mask` may be a constant
/// (hard mask, no gradient) or a differentiable soft mask. Returns [m x k].
ad::Var sparse_aggregate(ad::Var mask, ad::Var adjusted, ad::Var scores);

/// Mean of the mask over layers and concepts (the reported sparse loss).
double sparsity_fraction(const ad::Tensor& mask);

/// Snapshot of one sample's fusion intermediates, row-major.
struct ActivationState {
  std::size_t n_layers = 0, n_attributes = 0, n_concepts = 0;
  std::vector<double> scores;          // L x m x k
  std::vector<double> layer_weights;   // L x m x k
  std::vector<double> thresholds;      // L
  std::vector<double> mask;            // L x m x k, values in {0,1} (soft mask: (0,1))
  std::vector<double> adjusted;        // L x m x k
  std::vector<double> sparse_weights;  // L x m x k
  std::vector<double> aggregated;      // m x k
};

}  // namespace mvpcbm::mcsaf
