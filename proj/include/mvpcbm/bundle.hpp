#pragma once

// FeatureBundle: per-sample, per-layer visual tokens plus concept text
// embeddings and labels, and its single-file MVPB v1 encoding.
//
// MVPB v1 layout (all little-endian):
//   bytes 0-3   "MVPB"
//   bytes 4-7   version, u32 (= 1)
//   bytes 8-15  header length in bytes, u64
//   UTF-8 JSON header
//   labels              [n] u32
//   concept_labels      [n*m] u32
//   attribute_embeddings[m*d] f32
//   concept_embeddings  [m*k*d] f32
//   features            [n*L*(1+N_p)*d] f32   (token 0 is the class token)

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mvpcbm {

struct ConceptSchema {
  std::vector<std::string> attribute_names;                // m
  std::vector<std::vector<std::string>> concept_texts;     // m x k
  std::vector<std::string> class_names;                    // |Y|
  std::vector<std::vector<std::uint32_t>> class_concept_map;  // |Y| x m, entries < k

  std::size_t n_attributes() const noexcept { return attribute_names.size(); }
  std::size_t n_concepts() const noexcept {
    return concept_texts.empty() ? 0 : concept_texts.front().size();
  }
  std::size_t n_classes() const noexcept { return class_names.size(); }

  bool operator==(const ConceptSchema&) const = default;
};

inline constexpr std::string_view kAttrSourceTextEncoder = "text_encoder";
inline constexpr std::string_view kAttrSourceConceptMean = "concept_mean";

struct FeatureBundle {
  ConceptSchema schema;
  std::size_t n_samples = 0;
  std::size_t n_layers = 0;
  std::size_t embed_dim = 0;
  std::size_t n_patches = 0;
  std::string attr_embed_source{kAttrSourceTextEncoder};

  std::vector<std::uint32_t> labels;          // n
  std::vector<std::uint32_t> concept_labels;  // n x m
  std::vector<float> attribute_embeddings;    // m x d
  std::vector<float> concept_embeddings;      // m x k x d
  std::vector<float> features;                // n x L x (1+N_p) x d

  std::size_t tokens_per_layer() const noexcept { return 1 + n_patches; }
  std::size_t sample_stride() const noexcept { return n_layers * tokens_per_layer() * embed_dim; }

  /// All tokens of one sample: [L x (1+N_p) x d].
  std::span<const float> sample_features(std::size_t sample) const;
  /// One token vector; token 0 is the class token.
  std::span<const float> token(std::size_t sample, std::size_t layer, std::size_t token) const;
  std::span<const float> concept_embedding(std::size_t attribute, std::size_t concept_index) const;
  std::span<const float> attribute_embedding(std::size_t attribute) const;
  std::span<const std::uint32_t> sample_concept_labels(std::size_t sample) const;

  bool operator==(const FeatureBundle&) const = default;
};

/// Empty when valid; one human-readable entry per violated invariant.
std::vector<std::string> validate_bundle(const FeatureBundle& bundle);

void write_bundle(const FeatureBundle& bundle, const std::filesystem::path& path);
FeatureBundle read_bundle(const std::filesystem::path& path);

/// Byte length of the encoded file for a given bundle (header included).
std::size_t encoded_size(const FeatureBundle& bundle);

/// Samples `indices` (in order) into a new bundle sharing the schema.
FeatureBundle subset(const FeatureBundle& bundle, std::span<const std::size_t> indices);

/// Stable digest of dimensions and schema (sample count excluded), hex-encoded.
std::string bundle_fingerprint(const FeatureBundle& bundle);

struct SynthConfig {
  std::size_t n_samples = 400;
  std::size_t n_layers = 6;
  std::size_t n_attributes = 3;
  std::size_t n_concepts = 3;
  std::size_t embed_dim = 32;
  std::size_t n_patches = 12;
  std::size_t n_classes = 3;
  /// Layer carrying each attribute's signal; empty selects an even spread
  /// that avoids the last layer.
  std::vector<std::size_t> planted_layer;
  double signal_strength = 1.0;
  double noise_scale = 0.1;
  std::uint64_t seed = 0;
};

/// Planted layers actually used for `cfg` (resolves the empty default).
std::vector<std::size_t> resolved_planted_layers(const SynthConfig& cfg);

/// Deterministic synthetic bundle with attribute signals planted at chosen layers.
FeatureBundle generate_synthetic(const SynthConfig& cfg);

}  // namespace mvpcbm
