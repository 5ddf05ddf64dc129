#include "mvpcbm/bundle.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mvpcbm/error.hpp"
#include "mvpcbm/mcsaf.hpp"
#include "mvpcbm/random.hpp"

namespace mvpcbm {

namespace {

using nlohmann::json;

constexpr std::array<char, 4> kMagic{'M', 'V', 'P', 'B'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kPreambleBytes = 4 + 4 + 8;
// Tokens that carry no planted signal still need a direction for cosine.
constexpr double kBackgroundFloor = 1e-3;

std::string label(const char* what, std::size_t a) { return std::string(what) + "[" + std::to_string(a) + "]"; }

std::string label(const char* what, std::size_t a, std::size_t b) {
  return std::string(what) + "[" + std::to_string(a) + "," + std::to_string(b) + "]";
}

template <class T>
double row_norm(std::span<const T> row) {
  double acc = 0.0;
  for (T v : row) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

json header_json(const FeatureBundle& b) {
  const auto& s = b.schema;
  return json{{"n_samples", b.n_samples},
              {"n_layers", b.n_layers},
              {"n_attributes", s.n_attributes()},
              {"n_concepts_per_attr", s.n_concepts()},
              {"embed_dim", b.embed_dim},
              {"n_patches", b.n_patches},
              {"n_classes", s.n_classes()},
              {"class_names", s.class_names},
              {"attribute_names", s.attribute_names},
              {"concept_texts", s.concept_texts},
              {"class_concept_map", s.class_concept_map},
              {"attr_embed_source", b.attr_embed_source}};
}

std::size_t payload_bytes(std::size_t n, std::size_t L, std::size_t m, std::size_t k,
                          std::size_t d, std::size_t np) {
  return 4 * (n + n * m + m * d + m * k * d + n * L * (1 + np) * d);
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_floats(std::string& out, std::span<const float> values) {
  for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

class PayloadReader {
 public:
  PayloadReader(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}

  std::vector<std::uint32_t> u32s(std::size_t count) {
    std::vector<std::uint32_t> out(count);
    for (auto& v : out) v = get_u32(take(4));
    return out;
  }

  std::vector<float> f32s(std::size_t count) {
    std::vector<float> out(count);
    for (auto& v : out) v = std::bit_cast<float>(get_u32(take(4)));
    return out;
  }

 private:
  const unsigned char* take(std::size_t n) {
    if (pos_ + n > size_) throw Error(ErrorCode::HeaderPayloadMismatch, "payload truncated");
    const auto* p = data_ + pos_;
    pos_ += n;
    return p;
  }

  const unsigned char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

template <class T>
T header_get(const json& h, const char* key) {
  if (!h.contains(key)) throw Error(ErrorCode::HeaderPayloadMismatch, std::string("header missing ") + key);
  try {
    return h.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::HeaderPayloadMismatch, std::string("header key ") + key + ": " + e.what());
  }
}

void normalize(std::span<double> v) {
  const double n = row_norm<double>(v);
  for (double& x : v) x /= n;
}

}  // namespace

// ---- FeatureBundle accessors ------------------------------------------------

std::span<const float> FeatureBundle::sample_features(std::size_t sample) const {
  return std::span<const float>(features).subspan(sample * sample_stride(), sample_stride());
}

std::span<const float> FeatureBundle::token(std::size_t sample, std::size_t layer,
                                            std::size_t tok) const {
  const std::size_t offset = ((sample * n_layers + layer) * tokens_per_layer() + tok) * embed_dim;
  return std::span<const float>(features).subspan(offset, embed_dim);
}

std::span<const float> FeatureBundle::concept_embedding(std::size_t attribute,
                                                        std::size_t concept_index) const {
  const std::size_t offset = (attribute * schema.n_concepts() + concept_index) * embed_dim;
  return std::span<const float>(concept_embeddings).subspan(offset, embed_dim);
}

std::span<const float> FeatureBundle::attribute_embedding(std::size_t attribute) const {
  return std::span<const float>(attribute_embeddings).subspan(attribute * embed_dim, embed_dim);
}

std::span<const std::uint32_t> FeatureBundle::sample_concept_labels(std::size_t sample) const {
  const auto m = schema.n_attributes();
  return std::span<const std::uint32_t>(concept_labels).subspan(sample * m, m);
}

// ---- validation ---------------------------------------------------------------

std::vector<std::string> validate_bundle(const FeatureBundle& b) {
  std::vector<std::string> out;
  const auto& s = b.schema;
  const std::size_t m = s.n_attributes(), k = s.n_concepts(), C = s.n_classes();
  const std::size_t n = b.n_samples, L = b.n_layers, d = b.embed_dim;

  if (m < 1) out.push_back("schema: at least one attribute required");
  if (k < 1) out.push_back("schema: at least one concept per attribute required");
  if (C < 2) out.push_back("schema: at least two classes required");
  if (L < 1) out.push_back("n_layers must be >= 1");
  if (d < 1) out.push_back("embed_dim must be >= 1");
  if (s.concept_texts.size() != m) out.push_back("concept_texts must have one row per attribute");
  for (std::size_t i = 0; i < s.concept_texts.size(); ++i) {
    if (s.concept_texts[i].size() != k) out.push_back(label("concept_texts", i) + " must have k entries");
  }
  if (s.class_concept_map.size() != C) out.push_back("class_concept_map must have one row per class");
  for (std::size_t c = 0; c < s.class_concept_map.size(); ++c) {
    const auto& row = s.class_concept_map[c];
    if (row.size() != m) {
      out.push_back(label("class_concept_map", c) + " must have m entries");
      continue;
    }
    for (std::size_t i = 0; i < m; ++i) {
      if (row[i] >= k) out.push_back(label("class_concept_map", c, i) + " >= k");
    }
  }
  if (b.attr_embed_source != kAttrSourceTextEncoder && b.attr_embed_source != kAttrSourceConceptMean) {
    out.push_back("attr_embed_source must be text_encoder or concept_mean");
  }

  bool sizes_ok = true;
  auto check_size = [&](const char* name, std::size_t have, std::size_t want) {
    if (have != want) {
      out.push_back(std::string(name) + ": " + std::to_string(have) + " elements, expected " +
                    std::to_string(want));
      sizes_ok = false;
    }
  };
  check_size("labels", b.labels.size(), n);
  check_size("concept_labels", b.concept_labels.size(), n * m);
  check_size("attribute_embeddings", b.attribute_embeddings.size(), m * d);
  check_size("concept_embeddings", b.concept_embeddings.size(), m * k * d);
  check_size("features", b.features.size(), n * L * (1 + b.n_patches) * d);
  if (!sizes_ok || d == 0) return out;

  for (std::size_t i = 0; i < n; ++i) {
    if (b.labels[i] >= C) out.push_back(label("labels", i) + " = " + std::to_string(b.labels[i]) + " >= n_classes");
    for (std::size_t a = 0; a < m; ++a) {
      if (b.concept_labels[i * m + a] >= k) out.push_back(label("concept_labels", i, a) + " >= k");
    }
  }
  auto finite = [](std::span<const float> v) {
    return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
  };
  for (std::size_t i = 0; i < m; ++i) {
    auto row = b.attribute_embedding(i);
    if (!finite(row)) out.push_back(label("attribute_embeddings", i) + " not finite");
    else if (!(row_norm(row) > 0.0)) out.push_back(label("attribute_embeddings", i) + " has zero norm");
    for (std::size_t j = 0; j < k; ++j) {
      auto c = b.concept_embedding(i, j);
      if (!finite(c)) out.push_back(label("concept_embeddings", i, j) + " not finite");
      else if (!(row_norm(c) > 0.0)) out.push_back(label("concept_embeddings", i, j) + " has zero norm");
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l = 0; l < L; ++l) {
      bool layer_finite = true;
      for (std::size_t t = 0; t < b.tokens_per_layer(); ++t) layer_finite = layer_finite && finite(b.token(i, l, t));
      if (!layer_finite) {
        out.push_back(label("features", i, l) + " contains non-finite values");
      } else if (!(row_norm(b.token(i, l, 0)) > 0.0)) {
        out.push_back(label("class_token", i, l) + " has zero norm");
      }
    }
  }
  return out;
}

// ---- encoding -------------------------------------------------------------------

std::size_t encoded_size(const FeatureBundle& b) {
  const auto& s = b.schema;
  return kPreambleBytes + header_json(b).dump().size() +
         payload_bytes(b.n_samples, b.n_layers, s.n_attributes(), s.n_concepts(), b.embed_dim,
                       b.n_patches);
}

void write_bundle(const FeatureBundle& b, const std::filesystem::path& path) {
  if (auto issues = validate_bundle(b); !issues.empty()) {
    throw Error(ErrorCode::ValidationFailed, issues.front() + " (" + std::to_string(issues.size()) + " issues)");
  }
  const std::string header = header_json(b).dump();
  std::string out;
  out.reserve(encoded_size(b));
  out.append(kMagic.data(), kMagic.size());
  put_u32(out, kVersion);
  put_u64(out, header.size());
  out += header;
  for (auto v : b.labels) put_u32(out, v);
  for (auto v : b.concept_labels) put_u32(out, v);
  put_floats(out, b.attribute_embeddings);
  put_floats(out, b.concept_embeddings);
  put_floats(out, b.features);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error(ErrorCode::IoError, "write failed: " + path.string());
}

FeatureBundle read_bundle(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());

  if (bytes.size() < kPreambleBytes) {
    if (bytes.size() >= 4 && !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
      throw Error(ErrorCode::BadMagic, path.string());
    }
    throw Error(ErrorCode::HeaderPayloadMismatch, "file shorter than preamble");
  }
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) throw Error(ErrorCode::BadMagic, path.string());
  if (const auto version = get_u32(raw + 4); version != kVersion) {
    throw Error(ErrorCode::UnsupportedVersion, "version " + std::to_string(version));
  }
  const std::uint64_t header_len = get_u64(raw + 8);
  if (header_len > bytes.size() - kPreambleBytes) {
    throw Error(ErrorCode::HeaderPayloadMismatch, "header length exceeds file size");
  }
  json h;
  try {
    h = json::parse(bytes.begin() + kPreambleBytes,
                    bytes.begin() + static_cast<std::ptrdiff_t>(kPreambleBytes + header_len));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::HeaderPayloadMismatch, std::string("header is not JSON: ") + e.what());
  }

  FeatureBundle b;
  b.n_samples = header_get<std::size_t>(h, "n_samples");
  b.n_layers = header_get<std::size_t>(h, "n_layers");
  b.embed_dim = header_get<std::size_t>(h, "embed_dim");
  b.n_patches = header_get<std::size_t>(h, "n_patches");
  b.schema.class_names = header_get<std::vector<std::string>>(h, "class_names");
  b.schema.attribute_names = header_get<std::vector<std::string>>(h, "attribute_names");
  b.schema.concept_texts = header_get<std::vector<std::vector<std::string>>>(h, "concept_texts");
  b.schema.class_concept_map = header_get<std::vector<std::vector<std::uint32_t>>>(h, "class_concept_map");
  b.attr_embed_source = header_get<std::string>(h, "attr_embed_source");
  const auto m = header_get<std::size_t>(h, "n_attributes");
  const auto k = header_get<std::size_t>(h, "n_concepts_per_attr");
  const auto C = header_get<std::size_t>(h, "n_classes");
  if (m != b.schema.n_attributes() || k != b.schema.n_concepts() || C != b.schema.n_classes()) {
    throw Error(ErrorCode::HeaderPayloadMismatch, "header counts disagree with schema lists");
  }

  const std::size_t n = b.n_samples, L = b.n_layers, d = b.embed_dim;
  const std::size_t expected = payload_bytes(n, L, m, k, d, b.n_patches);
  const std::size_t actual = bytes.size() - kPreambleBytes - header_len;
  if (expected != actual) {
    throw Error(ErrorCode::HeaderPayloadMismatch, "payload is " + std::to_string(actual) +
                                                      " bytes, header implies " + std::to_string(expected));
  }
  PayloadReader reader(raw + kPreambleBytes + header_len, actual);
  b.labels = reader.u32s(n);
  b.concept_labels = reader.u32s(n * m);
  b.attribute_embeddings = reader.f32s(m * d);
  b.concept_embeddings = reader.f32s(m * k * d);
  b.features = reader.f32s(n * L * (1 + b.n_patches) * d);

  for (const auto* section : {&b.attribute_embeddings, &b.concept_embeddings, &b.features}) {
    for (std::size_t i = 0; i < section->size(); ++i) {
      if (!std::isfinite((*section)[i])) {
        throw Error(ErrorCode::NonFiniteValue, "non-finite payload value at element " + std::to_string(i));
      }
    }
  }
  if (auto issues = validate_bundle(b); !issues.empty()) {
    throw Error(ErrorCode::ValidationFailed, issues.front() + " (" + std::to_string(issues.size()) + " issues)");
  }
  return b;
}

FeatureBundle subset(const FeatureBundle& b, std::span<const std::size_t> indices) {
  FeatureBundle out;
  out.schema = b.schema;
  out.n_layers = b.n_layers;
  out.embed_dim = b.embed_dim;
  out.n_patches = b.n_patches;
  out.attr_embed_source = b.attr_embed_source;
  out.attribute_embeddings = b.attribute_embeddings;
  out.concept_embeddings = b.concept_embeddings;
  out.n_samples = indices.size();
  for (auto i : indices) {
    if (i >= b.n_samples) throw Error(ErrorCode::IndexOutOfRange, "subset index " + std::to_string(i));
    out.labels.push_back(b.labels[i]);
    auto cl = b.sample_concept_labels(i);
    out.concept_labels.insert(out.concept_labels.end(), cl.begin(), cl.end());
    auto feats = b.sample_features(i);
    out.features.insert(out.features.end(), feats.begin(), feats.end());
  }
  return out;
}

std::string bundle_fingerprint(const FeatureBundle& b) {
  json h = header_json(b);
  h.erase("n_samples");
  const std::uint64_t digest = fnv1a64(h.dump());
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << digest;
  return os.str();
}

// ---- synthetic generator --------------------------------------------------------

std::vector<std::size_t> resolved_planted_layers(const SynthConfig& cfg) {
  if (!cfg.planted_layer.empty()) return cfg.planted_layer;
  std::vector<std::size_t> out(cfg.n_attributes);
  const std::size_t span = cfg.n_layers > 1 ? cfg.n_layers - 1 : 1;
  for (std::size_t i = 0; i < cfg.n_attributes; ++i) {
    out[i] = cfg.n_layers > 1 ? ((i + 1) * span) / (cfg.n_attributes + 1) : 0;
  }
  return out;
}

FeatureBundle generate_synthetic(const SynthConfig& cfg) {
  const std::size_t n = cfg.n_samples, L = cfg.n_layers, m = cfg.n_attributes, k = cfg.n_concepts;
  const std::size_t d = cfg.embed_dim, np = cfg.n_patches, C = cfg.n_classes;
  if (L < 1 || m < 1 || k < 1 || d < 1 || C < 2) {
    throw Error(ErrorCode::ConfigInvalid, "need n_layers, n_attributes, n_concepts, embed_dim >= 1 and n_classes >= 2");
  }
  if (!(cfg.signal_strength >= 0.0) || !(cfg.noise_scale >= 0.0) ||
      !std::isfinite(cfg.signal_strength) || !std::isfinite(cfg.noise_scale)) {
    throw Error(ErrorCode::ConfigInvalid, "signal_strength and noise_scale must be finite and non-negative");
  }
  const auto planted = resolved_planted_layers(cfg);
  if (planted.size() != m) throw Error(ErrorCode::ConfigInvalid, "planted_layer needs one entry per attribute");
  for (auto l : planted) {
    if (l >= L) throw Error(ErrorCode::ConfigInvalid, "planted_layer entry " + std::to_string(l) + " >= n_layers");
  }
  const auto plan = mcsaf::PoolingPlan::make(np, m);  // TooFewPatches when np < m

  // Distinct concept patterns per class need k^m >= C.
  double patterns = 1.0;
  for (std::size_t i = 0; i < m; ++i) patterns *= static_cast<double>(k);
  if (patterns < static_cast<double>(C)) {
    throw Error(ErrorCode::ConfigInvalid, "k^m concept patterns cannot distinguish n_classes");
  }

  auto rng = rng_stream(cfg.seed, "synth");
  std::normal_distribution<double> gauss(0.0, 1.0);

  FeatureBundle b;
  b.n_samples = n;
  b.n_layers = L;
  b.embed_dim = d;
  b.n_patches = np;
  b.attr_embed_source = std::string(kAttrSourceConceptMean);
  for (std::size_t c = 0; c < C; ++c) b.schema.class_names.push_back("class_" + std::to_string(c));
  for (std::size_t i = 0; i < m; ++i) {
    b.schema.attribute_names.push_back("attribute_" + std::to_string(i));
    std::vector<std::string> texts;
    for (std::size_t j = 0; j < k; ++j) texts.push_back("concept_" + std::to_string(i) + "_" + std::to_string(j));
    b.schema.concept_texts.push_back(std::move(texts));
  }
  std::set<std::vector<std::uint32_t>> seen;
  std::uniform_int_distribution<std::uint32_t> pick_concept(0, static_cast<std::uint32_t>(k - 1));
  while (b.schema.class_concept_map.size() < C) {
    std::vector<std::uint32_t> row(m);
    for (auto& v : row) v = pick_concept(rng);
    if (seen.insert(row).second) b.schema.class_concept_map.push_back(std::move(row));
  }

  std::vector<double> concepts(m * k * d);
  for (std::size_t r = 0; r < m * k; ++r) {
    std::span<double> row(concepts.data() + r * d, d);
    for (double& v : row) v = gauss(rng);
    normalize(row);
  }
  std::vector<double> attributes(m * d, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    std::span<double> row(attributes.data() + i * d, d);
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t t = 0; t < d; ++t) row[t] += concepts[(i * k + j) * d + t];
    // Concept directions can cancel (e.g. d = 1); fall back to the first concept.
    if (row_norm<double>(row) < 1e-9) std::copy_n(concepts.data() + i * k * d, d, row.begin());
    normalize(row);
  }
  b.concept_embeddings.assign(concepts.begin(), concepts.end());
  b.attribute_embeddings.assign(attributes.begin(), attributes.end());

  std::uniform_int_distribution<std::uint32_t> pick_class(0, static_cast<std::uint32_t>(C - 1));
  const std::size_t tokens = 1 + np;
  b.labels.resize(n);
  b.concept_labels.resize(n * m);
  b.features.resize(n * L * tokens * d);
  std::vector<double> signal(tokens * d);
  std::vector<char> has_signal(tokens);
  for (std::size_t s = 0; s < n; ++s) {
    const auto y = pick_class(rng);
    b.labels[s] = y;
    const auto& pattern = b.schema.class_concept_map[y];
    std::copy(pattern.begin(), pattern.end(), b.concept_labels.begin() + static_cast<std::ptrdiff_t>(s * m));
    for (std::size_t l = 0; l < L; ++l) {
      std::fill(signal.begin(), signal.end(), 0.0);
      std::fill(has_signal.begin(), has_signal.end(), 0);
      for (std::size_t i = 0; i < m; ++i) {
        if (planted[i] != l) continue;
        const double* t_true = concepts.data() + (i * k + pattern[i]) * d;
        auto add_to = [&](std::size_t tok) {
          has_signal[tok] = 1;
          for (std::size_t t = 0; t < d; ++t) signal[tok * d + t] += cfg.signal_strength * t_true[t];
        };
        add_to(0);
        for (std::size_t p = plan.bounds[i]; p < plan.bounds[i + 1]; ++p) add_to(1 + p);
      }
      float* out = b.features.data() + (s * L + l) * tokens * d;
      for (std::size_t tok = 0; tok < tokens; ++tok) {
        const bool planted_here = has_signal[tok] && cfg.signal_strength > 0.0;
        const double sigma = planted_here ? cfg.noise_scale : std::max(cfg.noise_scale, kBackgroundFloor);
        for (std::size_t t = 0; t < d; ++t) {
          const double noise = sigma > 0.0 ? sigma * gauss(rng) : 0.0;
          out[tok * d + t] = static_cast<float>(signal[tok * d + t] + noise);
        }
      }
    }
  }
  return b;
}

}  // namespace mvpcbm
