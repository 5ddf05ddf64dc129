#include "mvpcbm/head.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>

#include "mvpcbm/error.hpp"
#include "mvpcbm/eval.hpp"
#include "mvpcbm/parallel.hpp"
#include "mvpcbm/random.hpp"

namespace mvpcbm {

using nlohmann::json;

std::string_view to_string(Mode mode) {
  return mode == Mode::Full ? "full" : "baseline_last_layer";
}

Mode parse_mode(std::string_view text) {
  if (text == "full") return Mode::Full;
  if (text == "baseline_last_layer") return Mode::BaselineLastLayer;
  throw Error(ErrorCode::ConfigInvalid, "unknown mode '" + std::string(text) + "'");
}

void validate(const TrainConfig& c) {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::ConfigInvalid, what); };
  auto finite = [](double v) { return std::isfinite(v); };
  if (!(c.learning_rate > 0.0) || !finite(c.learning_rate)) fail("learning_rate must be > 0");
  if (!(c.lambda1 >= 0.0) || !(c.lambda2 >= 0.0) || !finite(c.lambda1) || !finite(c.lambda2)) {
    fail("lambda1 and lambda2 must be >= 0");
  }
  if (!(c.weight_decay >= 0.0) || !finite(c.weight_decay)) fail("weight_decay must be >= 0");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) fail("beta1, beta2 must lie in [0,1)");
  if (!(c.epsilon > 0.0)) fail("epsilon must be > 0");
  if (c.batch_size < 1) fail("batch_size must be >= 1");
  if (!(c.surrogate_beta > 0.0) || !finite(c.surrogate_beta)) fail("surrogate_beta must be > 0");
  if (!(c.tau1_init > 0.0) || !finite(c.tau1_init)) fail("tau1_init must be > 0");
  if (!finite(c.tau2_init) || !finite(c.k_init)) fail("tau2_init and k_init must be finite");
}

// ---- parameters -------------------------------------------------------------------

HeadParams HeadParams::init(std::size_t n_classes, std::size_t bottleneck, const TrainConfig& cfg) {
  HeadParams p;
  p.log_tau1 = ad::Tensor::scalar(std::log(cfg.tau1_init), true);
  p.tau2 = ad::Tensor::scalar(cfg.tau2_init, true);
  p.K = ad::Tensor::scalar(cfg.k_init, true);
  p.W = ad::Tensor::zeros({n_classes, bottleneck}, true);
  p.b = ad::Tensor::zeros({n_classes}, true);
  return p;
}

double HeadParams::tau1() const { return std::exp(log_tau1.item()); }

std::size_t HeadParams::flat_size() const { return 3 + W.size() + b.size(); }

std::vector<ad::NamedTensor> HeadParams::named() {
  return {{"log_tau1", &log_tau1}, {"tau2", &tau2}, {"K", &K}, {"W", &W}, {"b", &b}};
}

bool HeadParams::operator==(const HeadParams& o) const {
  return log_tau1.data == o.log_tau1.data && tau2.data == o.tau2.data && K.data == o.K.data &&
         W.data == o.W.data && W.shape == o.W.shape && b.data == o.b.data;
}

ParamVars params_from_leaves(std::span<const ad::Var> leaves) {
  if (leaves.size() != 5) throw Error(ErrorCode::ShapeMismatch, "expected 5 parameter leaves");
  ParamVars p;
  p.log_tau1 = leaves[0];
  p.tau1 = ad::exp(leaves[0]);
  p.tau2 = leaves[1];
  p.K = leaves[2];
  p.W = leaves[3];
  p.b = leaves[4];
  return p;
}

ParamVars bind_params(ad::Tape& tape, const HeadParams& params, bool requires_grad) {
  std::vector<ad::Var> leaves{
      tape.leaf(ad::Tensor(params.log_tau1.shape, params.log_tau1.data), requires_grad),
      tape.leaf(ad::Tensor(params.tau2.shape, params.tau2.data), requires_grad),
      tape.leaf(ad::Tensor(params.K.shape, params.K.data), requires_grad),
      tape.leaf(ad::Tensor(params.W.shape, params.W.data), requires_grad),
      tape.leaf(ad::Tensor(params.b.shape, params.b.data), requires_grad),
  };
  return params_from_leaves(leaves);
}

// ---- samples -------------------------------------------------------------------------

SampleVars sample_vars(ad::Tape& tape, const FeatureBundle& bundle, std::size_t sample, bool requires_grad) {
  if (sample >= bundle.n_samples) throw Error(ErrorCode::IndexOutOfRange, "sample " + std::to_string(sample));
  const auto L = bundle.n_layers, d = bundle.embed_dim, np = bundle.n_patches;
  const auto m = bundle.schema.n_attributes(), k = bundle.schema.n_concepts();
  std::vector<double> cls(L * d), patches(L * np * d);
  for (std::size_t l = 0; l < L; ++l) {
    auto c = bundle.token(sample, l, 0);
    std::copy(c.begin(), c.end(), cls.begin() + static_cast<std::ptrdiff_t>(l * d));
    for (std::size_t p = 0; p < np; ++p) {
      auto t = bundle.token(sample, l, 1 + p);
      std::copy(t.begin(), t.end(), patches.begin() + static_cast<std::ptrdiff_t>((l * np + p) * d));
    }
  }
  SampleVars s;
  s.cls_tokens = tape.leaf(ad::Tensor({L, d}, std::move(cls)), requires_grad);
  s.patch_tokens = tape.leaf(ad::Tensor({L, np, d}, std::move(patches)), requires_grad);
  s.attribute_embeddings = tape.leaf(
      ad::Tensor({m, d}, std::vector<double>(bundle.attribute_embeddings.begin(), bundle.attribute_embeddings.end())),
      requires_grad);
  s.concept_embeddings = tape.leaf(
      ad::Tensor({m, k, d}, std::vector<double>(bundle.concept_embeddings.begin(), bundle.concept_embeddings.end())),
      requires_grad);
  return s;
}

PreparedSample prepare_sample(const FeatureBundle& bundle, std::size_t sample) {
  ad::Tape tape;
  auto s = sample_vars(tape, bundle, sample, false);
  const auto plan = mcsaf::PoolingPlan::make(bundle.n_patches, bundle.schema.n_attributes());
  auto raw = icpm::raw_preference_rows(s.cls_tokens, s.attribute_embeddings);
  auto cos = mcsaf::concept_cosines(mcsaf::attribute_pool_layers(s.patch_tokens, plan), s.concept_embeddings);

  PreparedSample out;
  out.n_layers = bundle.n_layers;
  out.n_attributes = bundle.schema.n_attributes();
  out.n_concepts = bundle.schema.n_concepts();
  out.raw_pref.assign(raw.value().begin(), raw.value().end());
  out.cosines.assign(cos.value().begin(), cos.value().end());
  out.label = bundle.labels[sample];
  auto cl = bundle.sample_concept_labels(sample);
  out.concept_labels.assign(cl.begin(), cl.end());
  return out;
}

std::vector<PreparedSample> prepare_all(const FeatureBundle& bundle, std::size_t threads) {
  std::vector<PreparedSample> out(bundle.n_samples);
  parallel_for(bundle.n_samples, threads, [&](std::size_t i) { out[i] = prepare_sample(bundle, i); });
  return out;
}

// ---- forward ---------------------------------------------------------------------------

ad::Var classify(ad::Var aggregated, ad::Var W, ad::Var b) {
  return ad::affine(W, ad::reshape(aggregated, {aggregated.size()}), b);
}

Forward forward_from_parts(ad::Tape& tape, const ParamVars& p, ad::Var raw_pref, ad::Var cosines,
                           const TrainConfig& cfg) {
  const auto& cs = cosines.shape();
  if (cs.size() != 3 || raw_pref.shape() != ad::Shape{cs[0], cs[1]}) {
    throw Error(ErrorCode::ShapeMismatch, "forward: raw_pref " + ad::shape_str(raw_pref.shape()) +
                                              " cosines " + ad::shape_str(cs));
  }
  const auto L = cs[0], m = cs[1];
  Forward f;
  ad::Var weighting;
  if (cfg.uniform_preference) {
    f.pref = icpm::uniform_preference(tape, L, m);
    weighting = tape.constant(ad::Tensor({L, m}, std::vector<double>(L * m, 1.0)));
  } else {
    f.pref = icpm::normalize_preference(raw_pref, p.tau1);
    weighting = f.pref;
  }
  f.scores = mcsaf::concept_scores(weighting, cosines);
  f.weights = mcsaf::layer_softmax(f.scores);
  f.thresholds = mcsaf::adaptive_threshold(f.weights, p.K);
  f.adjusted = mcsaf::adjust_weights(f.weights, f.thresholds, p.tau2);

  const ad::Tensor weights(f.weights.shape(), {f.weights.value().begin(), f.weights.value().end()});
  const ad::Tensor hard = mcsaf::hard_mask(weights, f.thresholds.value());
  f.hard_sparsity = mcsaf::sparsity_fraction(hard);
  f.mask = cfg.soft_mask ? mcsaf::soft_mask(f.weights, f.thresholds, cfg.surrogate_beta)
                         : tape.constant(hard);
  f.sparse_weights = ad::mul(f.mask, f.adjusted);
  f.aggregated = mcsaf::sparse_aggregate(f.mask, f.adjusted, f.scores);
  f.logits = classify(f.aggregated, p.W, p.b);
  return f;
}

Forward forward_prepared(ad::Tape& tape, const ParamVars& p, const PreparedSample& s, const TrainConfig& cfg) {
  const auto L = s.n_layers, m = s.n_attributes, k = s.n_concepts;
  auto raw = tape.constant(ad::Tensor({L, m}, s.raw_pref));
  auto cos = tape.constant(ad::Tensor({L, m, k}, s.cosines));
  return forward_from_parts(tape, p, raw, cos, cfg);
}

Forward forward_features(ad::Tape& tape, const ParamVars& p, const SampleVars& s, std::size_t n_patches,
                         const TrainConfig& cfg) {
  const auto m = s.attribute_embeddings.shape()[0];
  const auto plan = mcsaf::PoolingPlan::make(n_patches, m);
  auto raw = icpm::raw_preference_rows(s.cls_tokens, s.attribute_embeddings);
  auto cos = mcsaf::concept_cosines(mcsaf::attribute_pool_layers(s.patch_tokens, plan), s.concept_embeddings);
  return forward_from_parts(tape, p, raw, cos, cfg);
}

Forward baseline_forward(ad::Tape& tape, const ParamVars& p, ad::Var cosines) {
  const auto& cs = cosines.shape();
  if (cs.size() != 3 || cs[0] < 1) throw Error(ErrorCode::ShapeMismatch, "baseline_forward: cosines " + ad::shape_str(cs));
  const auto L = cs[0], m = cs[1], k = cs[2];
  std::vector<std::size_t> last(m * k);
  std::iota(last.begin(), last.end(), (L - 1) * m * k);

  Forward f;
  f.pref = icpm::uniform_preference(tape, L, m);
  f.scores = ad::gather(cosines, std::move(last), {1, m, k});
  const ad::Tensor ones({1, m, k}, std::vector<double>(m * k, 1.0));
  f.weights = tape.constant(ones);
  f.thresholds = tape.constant(ad::Tensor({1}, {1.0}));
  f.adjusted = f.weights;
  f.mask = f.weights;
  f.sparse_weights = f.weights;
  f.aggregated = ad::reshape(f.scores, {m, k});
  f.logits = classify(f.aggregated, p.W, p.b);
  f.hard_sparsity = 1.0;
  return f;
}

Forward baseline_forward_features(ad::Tape& tape, const ParamVars& p, const SampleVars& s, std::size_t n_patches) {
  const auto m = s.attribute_embeddings.shape()[0];
  const auto plan = mcsaf::PoolingPlan::make(n_patches, m);
  auto cos = mcsaf::concept_cosines(mcsaf::attribute_pool_layers(s.patch_tokens, plan), s.concept_embeddings);
  return baseline_forward(tape, p, cos);
}

Forward forward(ad::Tape& tape, const ParamVars& p, const PreparedSample& s, const TrainConfig& cfg) {
  if (cfg.mode == Mode::BaselineLastLayer) {
    auto cos = tape.constant(ad::Tensor({s.n_layers, s.n_attributes, s.n_concepts}, s.cosines));
    return baseline_forward(tape, p, cos);
  }
  return forward_prepared(tape, p, s, cfg);
}

// ---- losses -----------------------------------------------------------------------------

ad::Var concept_loss(ad::Var aggregated, std::span<const std::size_t> concept_labels) {
  if (aggregated.shape().size() != 2) throw Error(ErrorCode::ShapeMismatch, "concept_loss expects [m x k]");
  return ad::mean(ad::cross_entropy_rows(aggregated, concept_labels));
}

ad::Var sparse_loss_surrogate(ad::Var weights, ad::Var thresholds, double beta) {
  if (!(beta > 0.0)) throw Error(ErrorCode::ConfigInvalid, "surrogate beta must be > 0");
  return ad::mean(mcsaf::soft_mask(weights, thresholds, beta));
}

LossTerms total_loss(const Forward& fwd, std::size_t label, std::span<const std::size_t> concept_labels,
                     const TrainConfig& cfg) {
  LossTerms t;
  t.classification = ad::cross_entropy(fwd.logits, label);
  t.concept_term = concept_loss(fwd.aggregated, concept_labels);
  t.total = ad::add(t.classification, ad::scale(t.concept_term, cfg.effective_lambda1()));
  if (cfg.mode == Mode::Full) {
    t.surrogate = sparse_loss_surrogate(fwd.weights, fwd.thresholds, cfg.surrogate_beta);
    t.total = ad::add(t.total, ad::scale(t.surrogate, cfg.effective_lambda2()));
  }
  return t;
}

// ---- optimizer -----------------------------------------------------------------------------

void adamw_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                  std::span<double> v, std::size_t step, double lr, double beta1, double beta2,
                  double epsilon, double weight_decay) {
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    param[i] -= lr * weight_decay * param[i];
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + epsilon);
  }
}

AdamW::AdamW(const HeadParams& shape_like)
    : m_(shape_like.flat_size(), 0.0), v_(shape_like.flat_size(), 0.0) {}

void AdamW::step(HeadParams& params, std::span<const double> grads, const TrainConfig& cfg) {
  if (grads.size() != m_.size()) throw Error(ErrorCode::ShapeMismatch, "AdamW: gradient size");
  ++step_;
  std::size_t offset = 0;
  auto update = [&](ad::Tensor& t, bool trainable, double decay) {
    const auto n = t.size();
    if (trainable) {
      adamw_update(t.data, grads.subspan(offset, n), std::span(m_).subspan(offset, n),
                   std::span(v_).subspan(offset, n), step_, cfg.learning_rate, cfg.beta1, cfg.beta2,
                   cfg.epsilon, decay);
    }
    offset += n;
  };
  update(params.log_tau1, !cfg.fixed_tau1, 0.0);
  update(params.tau2, !cfg.fixed_tau2, 0.0);
  update(params.K, true, 0.0);
  update(params.W, true, cfg.weight_decay);
  update(params.b, true, cfg.weight_decay);
}

// ---- training ---------------------------------------------------------------------------------

namespace {

struct SampleResult {
  std::vector<double> grad;
  double total = 0.0, classification = 0.0, concept_term = 0.0, surrogate = 0.0, hard_sparsity = 0.0;
  std::size_t predicted = 0;
  std::size_t clamp_events = 0;
};

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

SampleResult run_sample(const PreparedSample& s, const HeadParams& params, const TrainConfig& cfg, bool with_grad) {
  ad::Tape tape;
  auto p = bind_params(tape, params, with_grad);
  auto fwd = forward(tape, p, s, cfg);
  auto loss = total_loss(fwd, s.label, s.concept_labels, cfg);

  SampleResult r;
  r.total = loss.total.item();
  r.classification = loss.classification.item();
  r.concept_term = loss.concept_term.item();
  r.surrogate = loss.surrogate.valid() ? loss.surrogate.item() : 0.0;
  r.hard_sparsity = fwd.hard_sparsity;
  r.predicted = argmax(fwd.logits.value());
  r.clamp_events = tape.clamp_events();
  if (!std::isfinite(r.total)) throw Error(ErrorCode::NonFiniteLoss, "loss is not finite");
  if (with_grad) {
    tape.backward(loss.total);
    r.grad.reserve(params.flat_size());
    for (ad::Var leaf : {p.log_tau1, p.tau2, p.K, p.W, p.b}) {
      auto g = leaf.grad();
      if (g.empty()) r.grad.insert(r.grad.end(), leaf.size(), 0.0);
      else r.grad.insert(r.grad.end(), g.begin(), g.end());
    }
  }
  return r;
}

std::vector<SampleResult> run_batch(std::span<const PreparedSample> samples, std::span<const std::size_t> indices,
                                    const HeadParams& params, const TrainConfig& cfg, bool with_grad) {
  std::vector<SampleResult> out(indices.size());
  parallel_for(indices.size(), cfg.threads, [&](std::size_t i) {
    try {
      out[i] = run_sample(samples[indices[i]], params, cfg, with_grad);
    } catch (const Error& e) {
      // An underflowed tau1 = exp(log_tau1) is divergence too, not a config error.
      if (e.code() == ErrorCode::NonFiniteValue || e.code() == ErrorCode::NonFiniteLoss ||
          e.code() == ErrorCode::NonPositiveTemperature) {
        throw Error(ErrorCode::NonFiniteLoss, "sample " + std::to_string(indices[i]) + ": " + e.what());
      }
      throw;
    }
  });
  return out;
}

// Mean gradient, summed in sample order so the result is thread-count independent.
std::vector<double> mean_grad(const std::vector<SampleResult>& results, std::size_t size) {
  std::vector<double> g(size, 0.0);
  for (const auto& r : results)
    for (std::size_t i = 0; i < size; ++i) g[i] += r.grad[i];
  const double inv = 1.0 / static_cast<double>(results.size());
  for (double& v : g) v *= inv;
  return g;
}

void check_samples(std::span<const PreparedSample> samples, std::size_t n_classes) {
  if (samples.empty()) throw Error(ErrorCode::ConfigInvalid, "no samples to train on");
  const auto& first = samples.front();
  for (const auto& s : samples) {
    if (s.n_layers != first.n_layers || s.n_attributes != first.n_attributes || s.n_concepts != first.n_concepts) {
      throw Error(ErrorCode::DimensionMismatch, "samples disagree on dimensions");
    }
    if (s.label >= n_classes) throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(s.label));
  }
}

}  // namespace

double batch_loss_and_grad(std::span<const PreparedSample> samples, const HeadParams& params,
                           const TrainConfig& cfg, std::vector<double>* grad) {
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto results = run_batch(samples, idx, params, cfg, grad != nullptr);
  double total = 0.0;
  for (const auto& r : results) total += r.total;
  if (grad != nullptr) *grad = mean_grad(results, params.flat_size());
  return total / static_cast<double>(results.size());
}

FitResult fit_prepared(std::span<const PreparedSample> samples, std::size_t n_classes, const TrainConfig& cfg,
                       const EpochCallback& on_epoch) {
  validate(cfg);
  check_samples(samples, n_classes);
  const auto& first = samples.front();
  FitResult result;
  result.report.mode = cfg.mode;
  result.params = HeadParams::init(n_classes, first.n_attributes * first.n_concepts, cfg);
  AdamW optimizer(result.params);

  auto shuffle_rng = rng_stream(cfg.seed, "shuffle");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> predictions(samples.size()), labels(samples.size());

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochStats stats;
    stats.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto count = std::min(cfg.batch_size, order.size() - start);
      std::span<const std::size_t> batch(order.data() + start, count);
      auto results = run_batch(samples, batch, result.params, cfg, true);
      for (std::size_t i = 0; i < count; ++i) {
        const auto& r = results[i];
        stats.total_loss += r.total;
        stats.classification_loss += r.classification;
        stats.concept_loss += r.concept_term;
        stats.surrogate_sparsity += r.surrogate;
        stats.hard_sparsity += r.hard_sparsity;
        stats.clamp_events += r.clamp_events;
        predictions[start + i] = r.predicted;
        labels[start + i] = samples[batch[i]].label;
      }
      const double tau2_before = result.params.tau2.item();
      optimizer.step(result.params, mean_grad(results, result.params.flat_size()), cfg);
      const double tau2_after = result.params.tau2.item();
      if ((tau2_before > 0.0) != (tau2_after > 0.0)) ++stats.tau2_sign_flips;
    }
    const double inv = 1.0 / static_cast<double>(samples.size());
    stats.total_loss *= inv;
    stats.classification_loss *= inv;
    stats.concept_loss *= inv;
    stats.surrogate_sparsity *= inv;
    stats.hard_sparsity *= inv;
    const auto metrics = compute_metrics(predictions, labels, n_classes);
    stats.train_accuracy = metrics.accuracy;
    stats.train_balanced_accuracy = metrics.balanced_accuracy;
    stats.tau1 = result.params.tau1();
    stats.tau2 = result.params.tau2.item();
    stats.K = result.params.K.item();
    if (!std::isfinite(stats.total_loss)) {
      throw Error(ErrorCode::NonFiniteLoss, "epoch " + std::to_string(epoch) + " mean loss is not finite");
    }
    if (on_epoch) on_epoch(stats);
    result.report.epochs.push_back(stats);
  }
  return result;
}

FitResult fit(const FeatureBundle& bundle, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  validate(cfg);
  if (auto issues = validate_bundle(bundle); !issues.empty()) {
    throw Error(ErrorCode::ValidationFailed, issues.front());
  }
  const auto samples = prepare_all(bundle, cfg.threads);
  return fit_prepared(samples, bundle.schema.n_classes(), cfg, on_epoch);
}

// ---- serialization -------------------------------------------------------------------------------

json to_json(const TrainConfig& c) {
  return json{{"lambda1", c.lambda1},
              {"lambda2", c.lambda2},
              {"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"epsilon", c.epsilon},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"mode", std::string(to_string(c.mode))},
              {"uniform_preference", c.uniform_preference},
              {"no_concept_loss", c.no_concept_loss},
              {"no_sparse_loss", c.no_sparse_loss},
              {"soft_mask", c.soft_mask},
              {"fixed_tau1", c.fixed_tau1},
              {"fixed_tau2", c.fixed_tau2},
              {"surrogate_beta", c.surrogate_beta},
              {"tau1_init", c.tau1_init},
              {"tau2_init", c.tau2_init},
              {"k_init", c.k_init}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw Error(ErrorCode::ConfigInvalid, "train config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "lambda1") c.lambda1 = value.get<double>();
      else if (key == "lambda2") c.lambda2 = value.get<double>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "weight_decay") c.weight_decay = value.get<double>();
      else if (key == "beta1") c.beta1 = value.get<double>();
      else if (key == "beta2") c.beta2 = value.get<double>();
      else if (key == "epsilon") c.epsilon = value.get<double>();
      else if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "mode") c.mode = parse_mode(value.get<std::string>());
      else if (key == "uniform_preference") c.uniform_preference = value.get<bool>();
      else if (key == "no_concept_loss") c.no_concept_loss = value.get<bool>();
      else if (key == "no_sparse_loss") c.no_sparse_loss = value.get<bool>();
      else if (key == "soft_mask") c.soft_mask = value.get<bool>();
      else if (key == "fixed_tau1") c.fixed_tau1 = value.get<bool>();
      else if (key == "fixed_tau2") c.fixed_tau2 = value.get<bool>();
      else if (key == "surrogate_beta") c.surrogate_beta = value.get<double>();
      else if (key == "tau1_init") c.tau1_init = value.get<double>();
      else if (key == "tau2_init") c.tau2_init = value.get<double>();
      else if (key == "k_init") c.k_init = value.get<double>();
      else if (key == "threads") c.threads = value.get<std::size_t>();
      else throw Error(ErrorCode::ConfigInvalid, "unknown train config key '" + key + "'");
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ConfigInvalid, "config key '" + key + "': " + e.what());
    }
  }
  return c;
}

json to_json(const EpochStats& s, Mode mode) {
  return json{{"epoch", s.epoch},
              {"mode", std::string(to_string(mode))},
              {"total_loss", s.total_loss},
              {"classification_loss", s.classification_loss},
              {"concept_loss", s.concept_loss},
              {"hard_sparsity", s.hard_sparsity},
              {"surrogate_sparsity", s.surrogate_sparsity},
              {"train_acc", s.train_accuracy},
              {"train_bmac", s.train_balanced_accuracy},
              {"tau1", s.tau1},
              {"tau2", s.tau2},
              {"K", s.K},
              {"clamp_events", s.clamp_events},
              {"tau2_sign_flips", s.tau2_sign_flips}};
}

json checkpoint_json(const Checkpoint& c) {
  return json{{"format", "mvpcbm-checkpoint"},
              {"version", 1},
              {"fingerprint", c.fingerprint},
              {"dims",
               {{"n_layers", c.n_layers},
                {"n_attributes", c.n_attributes},
                {"n_concepts", c.n_concepts},
                {"n_classes", c.n_classes}}},
              {"tau1", c.params.tau1()},
              {"log_tau1", c.params.log_tau1.item()},
              {"tau2", c.params.tau2.item()},
              {"K", c.params.K.item()},
              {"W", c.params.W.data},
              {"b", c.params.b.data},
              {"config", to_json(c.config)}};
}

Checkpoint checkpoint_from_json(const json& j) {
  try {
    if (j.at("format") != "mvpcbm-checkpoint" || j.at("version") != 1) {
      throw Error(ErrorCode::ConfigInvalid, "not an mvpcbm checkpoint (format/version)");
    }
    Checkpoint c;
    c.fingerprint = j.at("fingerprint").get<std::string>();
    const auto& dims = j.at("dims");
    c.n_layers = dims.at("n_layers").get<std::size_t>();
    c.n_attributes = dims.at("n_attributes").get<std::size_t>();
    c.n_concepts = dims.at("n_concepts").get<std::size_t>();
    c.n_classes = dims.at("n_classes").get<std::size_t>();
    c.config = train_config_from_json(j.at("config"));
    const auto bottleneck = c.n_attributes * c.n_concepts;
    c.params = HeadParams::init(c.n_classes, bottleneck, c.config);
    c.params.log_tau1.data[0] = j.at("log_tau1").get<double>();
    c.params.tau2.data[0] = j.at("tau2").get<double>();
    c.params.K.data[0] = j.at("K").get<double>();
    auto W = j.at("W").get<std::vector<double>>();
    auto b = j.at("b").get<std::vector<double>>();
    if (W.size() != c.n_classes * bottleneck || b.size() != c.n_classes) {
      throw Error(ErrorCode::DimensionMismatch, "checkpoint classifier size disagrees with dims");
    }
    c.params.W.data = std::move(W);
    c.params.b.data = std::move(b);
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("malformed checkpoint: ") + e.what());
  }
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  f << checkpoint_json(ckpt).dump(2) << '\n';
  if (!f) throw Error(ErrorCode::IoError, "write failed: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, "checkpoint is not JSON: " + std::string(e.what()));
  }
  return checkpoint_from_json(j);
}

void require_compatible(const Checkpoint& ckpt, const FeatureBundle& bundle) {
  const auto fp = bundle_fingerprint(bundle);
  if (fp != ckpt.fingerprint) {
    throw Error(ErrorCode::DimensionMismatch,
                "bundle fingerprint " + fp + " does not match checkpoint " + ckpt.fingerprint);
  }
}

}  // namespace mvpcbm
