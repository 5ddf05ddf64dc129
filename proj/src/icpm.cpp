#include "mvpcbm/icpm.hpp"

#include "mvpcbm/error.hpp"

namespace mvpcbm::icpm {

ad::Var raw_preference(ad::Var cls_token, ad::Var attribute_embeddings) {
  const auto d = cls_token.size();
  auto rows = raw_preference_rows(ad::reshape(cls_token, {1, d}), attribute_embeddings);
  return ad::reshape(rows, {rows.size()});
}

ad::Var raw_preference_rows(ad::Var cls_tokens, ad::Var attribute_embeddings) {
  const auto& cs = cls_tokens.shape();
  const auto& as = attribute_embeddings.shape();
  if (cs.size() != 2 || as.size() != 2 || cs[1] != as[1]) {
    throw Error(ErrorCode::ShapeMismatch,
                "raw_preference: cls " + ad::shape_str(cs) + " attributes " + ad::shape_str(as));
  }
  const auto L = cs[0], m = as[0], d = cs[1];
  std::vector<std::size_t> cls_idx, attr_idx;
  cls_idx.reserve(L * m * d);
  attr_idx.reserve(L * m * d);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t t = 0; t < d; ++t) {
        cls_idx.push_back(l * d + t);
        attr_idx.push_back(i * d + t);
      }
  auto a = ad::gather(cls_tokens, std::move(cls_idx), {L * m, d});
  auto b = ad::gather(attribute_embeddings, std::move(attr_idx), {L * m, d});
  return ad::reshape(ad::sigmoid(ad::cosine_rows(a, b)), {L, m});
}

ad::Var normalize_preference(ad::Var raw, ad::Var tau1) {
  const auto rank = raw.shape().size();
  if (rank != 1 && rank != 2) throw Error(ErrorCode::ShapeMismatch, "normalize_preference: rank must be 1 or 2");
  return ad::softmax(raw, rank - 1, tau1);
}

ad::Var preference_matrix(ad::Var cls_tokens, ad::Var attribute_embeddings, ad::Var tau1) {
  return normalize_preference(raw_preference_rows(cls_tokens, attribute_embeddings), tau1);
}

ad::Var uniform_preference(ad::Tape& tape, std::size_t n_layers, std::size_t n_attributes) {
  const double v = 1.0 / static_cast<double>(n_attributes);
  return tape.constant(ad::Tensor({n_layers, n_attributes}, std::vector<double>(n_layers * n_attributes, v)));
}

PreferenceMatrix snapshot(ad::Var pref, double tau1) {
  const auto& s = pref.shape();
  if (s.size() != 2) throw Error(ErrorCode::ShapeMismatch, "preference snapshot expects [L x m]");
  auto v = pref.value();
  return PreferenceMatrix{s[0], s[1], std::vector<double>(v.begin(), v.end()), tau1};
}

}  // namespace mvpcbm::icpm
