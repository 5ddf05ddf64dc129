#include "mvpcbm/mcsaf.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mvpcbm/error.hpp"

namespace mvpcbm::mcsaf {

namespace {

// Rounds num/den to nearest, ties to even.
std::size_t round_half_even(std::size_t num, std::size_t den) {
  const std::size_t q = num / den, r = num % den;
  if (2 * r > den) return q + 1;
  if (2 * r == den) return q + (q & 1);
  return q;
}

// [L x (rest)] view: layer axis first, everything else flattened.
ad::Var by_layer(ad::Var w) {
  if (w.shape().empty()) throw Error(ErrorCode::ShapeMismatch, "layer weights must have a layer axis");
  const auto L = w.shape()[0];
  return ad::reshape(w, {L, w.size() / L});
}

}  // namespace

PoolingPlan PoolingPlan::make(std::size_t n_patches, std::size_t n_attributes) {
  if (n_attributes == 0) throw Error(ErrorCode::ConfigInvalid, "pooling needs at least one attribute");
  if (n_patches < n_attributes) {
    throw Error(ErrorCode::TooFewPatches, std::to_string(n_patches) + " patches for " +
                                              std::to_string(n_attributes) + " attributes");
  }
  PoolingPlan plan;
  plan.bounds.resize(n_attributes + 1);
  for (std::size_t i = 0; i <= n_attributes; ++i) plan.bounds[i] = round_half_even(i * n_patches, n_attributes);
  return plan;
}

ad::Var attribute_pool(ad::Var patch_tokens, const PoolingPlan& plan) {
  const auto& shape = patch_tokens.shape();
  if (shape.size() != 2 || shape[0] != plan.n_patches()) {
    throw Error(ErrorCode::ShapeMismatch, "attribute_pool: patch tokens " + ad::shape_str(shape) +
                                              " for a plan over " + std::to_string(plan.n_patches()) + " patches");
  }
  const auto m = plan.segments(), np = plan.n_patches();
  std::vector<double> pool(m * np, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const auto lo = plan.bounds[i], hi = plan.bounds[i + 1];
    if (hi == lo) throw Error(ErrorCode::TooFewPatches, "empty pooling segment " + std::to_string(i));
    for (std::size_t p = lo; p < hi; ++p) pool[i * np + p] = 1.0 / static_cast<double>(hi - lo);
  }
  auto P = patch_tokens.tape().constant(ad::Tensor({m, np}, std::move(pool)));
  return ad::matmul(P, patch_tokens);
}

ad::Var attribute_pool_layers(ad::Var patch_tokens, const PoolingPlan& plan) {
  const auto& shape = patch_tokens.shape();
  if (shape.size() != 3 || shape[1] != plan.n_patches()) {
    throw Error(ErrorCode::ShapeMismatch, "attribute_pool_layers: patch tokens " + ad::shape_str(shape));
  }
  const auto L = shape[0], np = shape[1], d = shape[2], m = plan.segments();
  // Block-diagonal pooling matrix [L*m x L*N_p].
  std::vector<double> pool(L * m * L * np, 0.0);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t i = 0; i < m; ++i) {
      const auto lo = plan.bounds[i], hi = plan.bounds[i + 1];
      if (hi == lo) throw Error(ErrorCode::TooFewPatches, "empty pooling segment " + std::to_string(i));
      for (std::size_t p = lo; p < hi; ++p)
        pool[(l * m + i) * (L * np) + l * np + p] = 1.0 / static_cast<double>(hi - lo);
    }
  auto P = patch_tokens.tape().constant(ad::Tensor({L * m, L * np}, std::move(pool)));
  auto pooled = ad::matmul(P, ad::reshape(patch_tokens, {L * np, d}));
  return ad::reshape(pooled, {L, m, d});
}

ad::Var concept_cosines(ad::Var pooled, ad::Var concept_embeddings) {
  const auto& ps = pooled.shape();
  const auto& cs = concept_embeddings.shape();
  if (ps.size() != 3 || cs.size() != 3 || ps[1] != cs[0] || ps[2] != cs[2]) {
    throw Error(ErrorCode::ShapeMismatch,
                "concept_cosines: pooled " + ad::shape_str(ps) + " concepts " + ad::shape_str(cs));
  }
  const auto L = ps[0], m = ps[1], d = ps[2], k = cs[1];
  std::vector<std::size_t> pooled_idx, concept_idx;
  pooled_idx.reserve(L * m * k * d);
  concept_idx.reserve(L * m * k * d);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t t = 0; t < d; ++t) {
          pooled_idx.push_back((l * m + i) * d + t);
          concept_idx.push_back((i * k + j) * d + t);
        }
  const ad::Shape pairs{L * m * k, d};
  auto a = ad::gather(pooled, std::move(pooled_idx), pairs);
  auto b = ad::gather(concept_embeddings, std::move(concept_idx), pairs);
  return ad::reshape(ad::cosine_rows(a, b), {L, m, k});
}

ad::Var concept_scores(ad::Var pref, ad::Var cosines) {
  const auto& cs = cosines.shape();
  if (cs.size() != 3 || pref.shape() != ad::Shape{cs[0], cs[1]}) {
    throw Error(ErrorCode::ShapeMismatch,
                "concept_scores: pref " + ad::shape_str(pref.shape()) + " cosines " + ad::shape_str(cs));
  }
  return ad::mul(ad::repeat_each(pref, cs[2]), cosines);
}

ad::Var concept_scores(ad::Var pref, ad::Var pooled, ad::Var concept_embeddings) {
  return concept_scores(pref, concept_cosines(pooled, concept_embeddings));
}

ad::Var layer_softmax(ad::Var scores) {
  if (scores.shape().empty() || scores.shape()[0] == 0) {
    throw Error(ErrorCode::ShapeMismatch, "layer_softmax needs at least one layer");
  }
  return ad::softmax(scores, 0);
}

ad::Var adaptive_threshold(ad::Var layer_weights, ad::Var K) {
  auto w = ad::abs(by_layer(layer_weights));
  auto lo = ad::row_min(w);
  auto range = ad::sub(ad::row_max(w), lo);
  return ad::add(ad::scale(range, ad::sigmoid(K)), lo);
}

ad::Var adjust_weights(ad::Var layer_weights, ad::Var thresholds, ad::Var tau2) {
  auto w = by_layer(layer_weights);
  if (thresholds.shape() != ad::Shape{w.shape()[0]}) {
    throw Error(ErrorCode::ShapeMismatch, "adjust_weights: thresholds " + ad::shape_str(thresholds.shape()));
  }
  const auto per_layer = w.shape()[1];
  auto gap = ad::sub(ad::abs(w), ad::repeat_each(thresholds, per_layer));
  auto exponent = ad::clamp(ad::scale(gap, tau2), -kExponentClamp, kExponentClamp);
  return ad::reshape(ad::mul(ad::exp(exponent), w), layer_weights.shape());
}

ad::Tensor hard_mask(const ad::Tensor& layer_weights, std::span<const double> thresholds) {
  const auto L = thresholds.size();
  if (L == 0 || layer_weights.size() % L != 0 || layer_weights.shape.empty() ||
      layer_weights.shape[0] != L) {
    throw Error(ErrorCode::ShapeMismatch, "hard_mask: weights " + ad::shape_str(layer_weights.shape) +
                                              " thresholds " + std::to_string(L));
  }
  const auto per_layer = layer_weights.size() / L;
  ad::Tensor mask = ad::Tensor::zeros(layer_weights.shape);
  for (std::size_t l = 0; l < L; ++l) {
    const double* row = layer_weights.data.data() + l * per_layer;
    double top = 0.0;
    for (std::size_t r = 0; r < per_layer; ++r) top = std::max(top, std::fabs(row[r]));
    // theta <= max holds exactly in real arithmetic; keep it so under rounding.
    const double cut = std::min(thresholds[l], top);
    for (std::size_t r = 0; r < per_layer; ++r) mask.data[l * per_layer + r] = std::fabs(row[r]) >= cut ? 1.0 : 0.0;
  }
  return mask;
}

ad::Var soft_mask(ad::Var layer_weights, ad::Var thresholds, double beta) {
  auto w = by_layer(layer_weights);
  auto gap = ad::sub(ad::abs(w), ad::repeat_each(thresholds, w.shape()[1]));
  return ad::reshape(ad::sigmoid(ad::scale(gap, beta)), layer_weights.shape());
}

ad::Var sparse_aggregate(ad::Var mask, ad::Var adjusted, ad::Var scores) {
  const auto& shape = scores.shape();
  if (mask.shape() != shape || adjusted.shape() != shape || shape.empty()) {
    throw Error(ErrorCode::ShapeMismatch, "sparse_aggregate: mask " + ad::shape_str(mask.shape()) +
                                              " adjusted " + ad::shape_str(adjusted.shape()) + " scores " +
                                              ad::shape_str(shape));
  }
  const auto L = shape[0];
  auto contrib = by_layer(ad::mul(ad::mul(mask, adjusted), scores));
  auto ones = scores.tape().constant(ad::Tensor({1, L}, std::vector<double>(L, 1.0)));
  ad::Shape out(shape.begin() + 1, shape.end());
  return ad::reshape(ad::matmul(ones, contrib), out);
}

double sparsity_fraction(const ad::Tensor& mask) {
  if (mask.size() == 0) return 0.0;
  if (mask.shape.empty()) return mask.data[0];
  const auto L = mask.shape[0];
  const auto per_layer = mask.size() / L;
  double total = 0.0;
  for (std::size_t l = 0; l < L; ++l) {
    double active = 0.0;
    for (std::size_t r = 0; r < per_layer; ++r) active += mask.data[l * per_layer + r];
    total += active / static_cast<double>(per_layer);
  }
  return total / static_cast<double>(L);
}

}  // namespace mvpcbm::mcsaf
