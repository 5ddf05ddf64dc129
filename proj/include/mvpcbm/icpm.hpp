#pragma once

// Intra-layer concept preference: how strongly each visual layer's class token
// aligns with each attribute's global text embedding, normalized over
// attributes within the layer with a learnable temperature.

#include <cstddef>
#include <vector>

#include "mvpcbm/autodiff.hpp"

namespace mvpcbm::icpm {

/// sigmoid(cos(cls_token, T_i)) for each attribute; cls [d], attributes [m x d] -> [m].
ad::Var raw_preference(ad::Var cls_token, ad::Var attribute_embeddings);

/// Raw preferences for every layer at once; cls tokens [L x d] -> [L x m].
ad::Var raw_preference_rows(ad::Var cls_tokens, ad::Var attribute_embeddings);

/// softmax(raw / tau1) over attributes. 1-D raw -> [m]; [L x m] raw -> row-wise.
ad::Var normalize_preference(ad::Var raw, ad::Var tau1);

/// Full per-sample preference: [L x d] class tokens -> [L x m], rows sum to 1.
ad::Var preference_matrix(ad::Var cls_tokens, ad::Var attribute_embeddings, ad::Var tau1);

/// Constant 1/m preference (no gradient), used when preference modeling is off.
ad::Var uniform_preference(ad::Tape& tape, std::size_t n_layers, std::size_t n_attributes);

/// Value snapshot of a preference node.
struct PreferenceMatrix {
  std::size_t n_layers = 0;
  std::size_t n_attributes = 0;
  std::vector<double> values;  // L x m, rows sum to 1
  double tau1 = 0.0;

  double at(std::size_t layer, std::size_t attribute) const { return values[layer * n_attributes + attribute]; }
};

PreferenceMatrix snapshot(ad::Var pref, double tau1);

}  // namespace mvpcbm::icpm
