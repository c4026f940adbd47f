#pragma once

// Joint policy / value network over a stochastic bottleneck.
//
//   encoder  p(z|s)   dense MLP -> diagonal Gaussian (mean, log-std)
//   action   q_a(a|z) MLP -> action
//   value    q_v(v|z) MLP -> Gaussian (mean, log-std)
//   classify          MLP -> failure logit (baseline head)
//   prior    r(z)     learned diagonal Gaussian mixture
//
// Training minimizes L_BC + lambda * L_V + beta * L_KL, where L_BC and L_V
// are Monte-Carlo Huber losses over reparameterized latent samples and L_KL
// is a sampled estimate of KL(p(z|s) || r(z)). In classifier mode L_V is
// replaced by binary cross-entropy on the failure logit.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bcva/error.hpp"
#include "bcva/grad.hpp"
#include "bcva/rng.hpp"
#include "bcva/stats.hpp"
#include "bcva/trajlog.hpp"

namespace bcva::net {

using grad::Tape;
using grad::Tensor;
using grad::Var;

inline constexpr double kLogStdMin = -6.0;
inline constexpr double kLogStdMax = 2.0;

struct ModelConfig {
  int input_dim = 0;
  int latent_dim = 16;
  std::vector<int> encoder_hidden{128, 64};
  std::vector<int> action_hidden{64, 64};
  std::vector<int> value_hidden{64, 64, 64};
  int prior_components = 8;
  int mc_samples = 4;
  double lambda = 0.5;
  double beta = 1e-6;
  int action_dim = static_cast<int>(Action::kDim);

  void validate() const {
    auto positive = [](const std::vector<int>& v) {
      return !v.empty() && std::all_of(v.begin(), v.end(), [](int x) { return x >= 1; });
    };
    if (input_dim < 1 || latent_dim < 1 || prior_components < 1 || mc_samples < 1 || action_dim < 1) {
      throw DomainError("model config: sizes must be >= 1");
    }
    if (!positive(encoder_hidden) || !positive(action_hidden) || !positive(value_hidden)) {
      throw DomainError("model config: hidden layer sizes must be >= 1");
    }
    if (action_hidden.size() != 2) throw DomainError("model config: the action head has 2 hidden layers");
    if (value_hidden.size() != 3) throw DomainError("model config: the value head has 3 hidden layers");
    if (lambda < 0.0 || beta < 0.0) throw DomainError("model config: lambda and beta must be >= 0");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Input width: flattened pixels, then joint angles, then base x, y, heading.
inline int input_dim_for(const ObservationSpec& spec, std::size_t joints) {
  return static_cast<int>(spec.pixel_count() + joints + 3);
}

inline void write_features(const Observation& obs, double* out) {
  std::size_t k = 0;
  for (std::uint8_t p : obs.pixels) out[k++] = p / 255.0;
  for (double q : obs.kinematics.joint_angles) out[k++] = q;
  out[k++] = obs.kinematics.x;
  out[k++] = obs.kinematics.y;
  out[k++] = obs.kinematics.heading;
}

/// Configuration plus the single parameter store shared by every head.
struct ModelParams {
  ModelConfig config;
  grad::ParamStore store;
};

namespace detail {

inline void add_linear(grad::ParamStore& store, CounterRng& rng, const std::string& name, int in, int out,
                       double gain, double bias = 0.0) {
  const double limit = gain * std::sqrt(6.0 / in);
  Tensor w({static_cast<std::size_t>(in), static_cast<std::size_t>(out)});
  for (auto& v : w.values()) v = rng.uniform(-limit, limit);
  store.add(name + ".w", std::move(w));
  store.add(name + ".b", Tensor({static_cast<std::size_t>(out)}, bias));
}

inline void add_mlp(grad::ParamStore& store, CounterRng& rng, const std::string& prefix, int in,
                    const std::vector<int>& hidden) {
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    add_linear(store, rng, prefix + "." + std::to_string(i), in, hidden[i], 1.0);
    in = hidden[i];
  }
}

}  // namespace detail

/// Seeded initialization: uniform fan-in scaling for hidden layers, smaller
/// output layers, prior component means drawn from N(0, 1).
inline ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams p{config, {}};
  CounterRng rng(seed, 0x1417);
  auto& s = p.store;
  detail::add_mlp(s, rng, "enc", config.input_dim, config.encoder_hidden);
  const int enc_out = config.encoder_hidden.back();
  detail::add_linear(s, rng, "enc.mean", enc_out, config.latent_dim, 0.5);
  detail::add_linear(s, rng, "enc.logstd", enc_out, config.latent_dim, 0.1, -2.0);
  detail::add_mlp(s, rng, "act", config.latent_dim, config.action_hidden);
  detail::add_linear(s, rng, "act.out", config.action_hidden.back(), config.action_dim, 0.5);
  detail::add_mlp(s, rng, "val", config.latent_dim, config.value_hidden);
  detail::add_linear(s, rng, "val.mean", config.value_hidden.back(), 1, 0.5);
  detail::add_linear(s, rng, "val.logstd", config.value_hidden.back(), 1, 0.1, -2.0);
  detail::add_mlp(s, rng, "cls", config.latent_dim, config.value_hidden);
  detail::add_linear(s, rng, "cls.out", config.value_hidden.back(), 1, 0.5);
  const auto K = static_cast<std::size_t>(config.prior_components);
  const auto d = static_cast<std::size_t>(config.latent_dim);
  s.add("prior.logits", Tensor({K}, 0.0));
  Tensor means({K, d});
  for (auto& v : means.values()) v = rng.normal();
  s.add("prior.means", std::move(means));
  s.add("prior.logstd", Tensor({K, d}, 0.0));
  return p;
}

// ---------------------------------------------------------------------------
// Batches

struct Batch {
  Tensor inputs;   // [n, input_dim]
  Tensor actions;  // [n, action_dim]
  std::vector<std::optional<double>> returns;
  std::vector<double> failure_labels;  // 1 = failure episode
  std::vector<bool> expert;

  std::size_t size() const { return expert.size(); }
};

struct FrameRef {
  const Trajectory* trajectory = nullptr;
  std::size_t step = 0;
};

inline Batch make_batch(std::span<const FrameRef> frames, int input_dim) {
  Batch b;
  const std::size_t n = frames.size();
  b.inputs = Tensor({n, static_cast<std::size_t>(input_dim)});
  b.actions = Tensor({n, Action::kDim});
  for (std::size_t i = 0; i < n; ++i) {
    const Trajectory& t = *frames[i].trajectory;
    const Step& s = t.steps.at(frames[i].step);
    const std::size_t expected = s.observation.pixels.size() + s.observation.kinematics.joint_angles.size() + 3;
    if (expected != static_cast<std::size_t>(input_dim)) {
      throw ShapeError("make_batch: observation yields " + std::to_string(expected) + " features, model expects " +
                       std::to_string(input_dim));
    }
    write_features(s.observation, b.inputs.data() + i * input_dim);
    b.actions.at(i, 0) = s.action.base_forward;
    b.actions.at(i, 1) = s.action.base_turn;
    b.actions.at(i, 2) = s.action.wrist_rate;
    b.actions.at(i, 3) = s.action.terminate;
    b.returns.push_back(t.labeled() ? std::optional<double>(t.returns[frames[i].step]) : std::nullopt);
    b.failure_labels.push_back(t.outcome.is_failure() ? 1.0 : 0.0);
    b.expert.push_back(t.provenance.is_expert());
  }
  return b;
}

// ---------------------------------------------------------------------------
// Noise

/// Standard-normal noise for reparameterized samples; a default-constructed
/// source yields zeros.
class Noise {
 public:
  Noise() = default;
  explicit Noise(CounterRng rng) : rng_(rng) {}
  static Noise zeros() { return Noise(); }

  Tensor draw(const grad::Shape& shape) {
    Tensor t(shape);
    if (rng_) {
      for (auto& v : t.values()) v = rng_->normal();
    }
    return t;
  }

 private:
  std::optional<CounterRng> rng_;
};

// ---------------------------------------------------------------------------
// Forward graph

inline Var linear(Tape& tape, grad::ParamStore& store, const std::string& name, Var x) {
  return grad::add(grad::matmul(x, tape.param(store, name + ".w")), tape.param(store, name + ".b"));
}

inline Var mlp(Tape& tape, grad::ParamStore& store, const std::string& prefix, std::size_t layers, Var x) {
  for (std::size_t i = 0; i < layers; ++i) x = grad::relu(linear(tape, store, prefix + "." + std::to_string(i), x));
  return x;
}

struct Encoding {
  Var mean;     // [n, latent]
  Var log_std;  // [n, latent], clamped
};

inline Encoding encode(Tape& tape, ModelParams& p, Var inputs) {
  if (inputs.shape().size() != 2 || inputs.shape()[1] != static_cast<std::size_t>(p.config.input_dim)) {
    throw ShapeError("encode: expected inputs [n, " + std::to_string(p.config.input_dim) + "], got " +
                     grad::shape_str(inputs.shape()));
  }
  Var h = mlp(tape, p.store, "enc", p.config.encoder_hidden.size(), inputs);
  return {linear(tape, p.store, "enc.mean", h),
          grad::clamp(linear(tape, p.store, "enc.logstd", h), kLogStdMin, kLogStdMax)};
}

inline Var action_head(Tape& tape, ModelParams& p, Var z) {
  return linear(tape, p.store, "act.out", mlp(tape, p.store, "act", p.config.action_hidden.size(), z));
}

struct ValueOut {
  Var mean;     // [n, 1]
  Var log_std;  // [n, 1], clamped
};

inline ValueOut value_head(Tape& tape, ModelParams& p, Var z) {
  Var h = mlp(tape, p.store, "val", p.config.value_hidden.size(), z);
  return {linear(tape, p.store, "val.mean", h),
          grad::clamp(linear(tape, p.store, "val.logstd", h), kLogStdMin, kLogStdMax)};
}

inline Var classifier_head(Tape& tape, ModelParams& p, Var z) {
  return linear(tape, p.store, "cls.out", mlp(tape, p.store, "cls", p.config.value_hidden.size(), z));
}

struct Prior {
  Var logits;   // [K]
  Var means;    // [K, d]
  Var log_std;  // [K, d], clamped
};

inline Prior prior_vars(Tape& tape, ModelParams& p) {
  return {tape.param(p.store, "prior.logits"), tape.param(p.store, "prior.means"),
          grad::clamp(tape.param(p.store, "prior.logstd"), kLogStdMin, kLogStdMax)};
}

/// log r(z) for each row of z [n, d] -> [n].
inline Var mixture_log_prob(Var z, const Prior& prior) {
  Var log_weights = grad::sub(prior.logits, grad::log_sum_exp(prior.logits));
  Var comp = grad::pairwise_diag_gaussian_log_prob(z, prior.means, prior.log_std);
  return grad::log_sum_exp(grad::add(comp, log_weights));
}

/// Sum over rows of log p(z|s) - log r(z) for one latent sample.
inline Var kl_sample_sum(Var z, const Encoding& enc, const Prior& prior) {
  return grad::sum(grad::sub(grad::diag_gaussian_log_prob(z, enc.mean, enc.log_std), mixture_log_prob(z, prior)));
}

/// Sampled KL(p(z|s) || r(z)), averaged over `samples` draws and the rows.
inline Var kl_estimate(Tape& tape, const Encoding& enc, const Prior& prior, int samples, Noise& noise) {
  const grad::Shape shape = enc.mean.shape();
  Var total = tape.constant(Tensor::scalar(0.0));
  for (int s = 0; s < samples; ++s) {
    Var z = grad::gaussian_reparam_sample(enc.mean, enc.log_std, noise.draw(shape));
    total = grad::add(total, kl_sample_sum(z, enc, prior));
  }
  return grad::scale(total, 1.0 / (static_cast<double>(samples) * static_cast<double>(shape[0])));
}

// ---------------------------------------------------------------------------
// Losses

namespace detail {

inline void require_nonempty(const Batch& b, const char* op) {
  if (b.size() == 0) throw DomainError(std::string(op) + ": empty batch");
}

inline void require_expert(const Batch& b) {
  for (bool e : b.expert) {
    if (!e) throw DomainError("loss_bc: batch contains policy-rollout frames; the BC loss uses expert demonstrations only");
  }
}

inline Tensor return_targets(const Batch& b) {
  Tensor t({b.size(), 1});
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (!b.returns[i]) throw DomainError("loss_value: frame " + std::to_string(i) + " has no return label");
    t[i] = *b.returns[i];
  }
  return t;
}

inline Tensor failure_targets(const Batch& b) {
  Tensor t({b.size(), 1});
  for (std::size_t i = 0; i < b.size(); ++i) t[i] = b.failure_labels[i];
  return t;
}

/// Per-sample loss sums over S latent draws sharing one encoding.
struct SampledTerms {
  Var bc_sum;     // sum over samples, rows, action dims
  Var head_sum;   // value Huber or classifier BCE, summed
  Var kl_sum;     // sum over samples and rows
};

enum class Head { None, Value, Classifier };

inline SampledTerms sampled_terms(Tape& tape, ModelParams& p, const Encoding& enc, const Prior* prior,
                                  const Batch& b, bool with_bc, Head head, Noise& noise) {
  const grad::Shape shape = enc.mean.shape();
  Var zero = tape.constant(Tensor::scalar(0.0));
  SampledTerms t{zero, zero, zero};
  std::optional<Var> actions, targets;
  if (with_bc) actions = tape.constant(b.actions);
  if (head == Head::Value) targets = tape.constant(return_targets(b));
  if (head == Head::Classifier) targets = tape.constant(failure_targets(b));
  for (int s = 0; s < p.config.mc_samples; ++s) {
    Var z = grad::gaussian_reparam_sample(enc.mean, enc.log_std, noise.draw(shape));
    if (with_bc) t.bc_sum = grad::add(t.bc_sum, grad::sum(grad::huber(grad::sub(*actions, action_head(tape, p, z)))));
    if (head == Head::Value) {
      const ValueOut v = value_head(tape, p, z);
      Var v_hat = grad::gaussian_reparam_sample(v.mean, v.log_std, noise.draw({shape[0], 1}));
      t.head_sum = grad::add(t.head_sum, grad::sum(grad::huber(grad::sub(*targets, v_hat))));
    }
    if (head == Head::Classifier) {
      Var logit = classifier_head(tape, p, z);
      Var bce = grad::sub(grad::softplus(logit), grad::mul(*targets, logit));
      t.head_sum = grad::add(t.head_sum, grad::sum(bce));
    }
    if (prior) t.kl_sum = grad::add(t.kl_sum, kl_sample_sum(z, enc, *prior));
  }
  return t;
}

inline double per_sample(const ModelParams& p, std::size_t rows) {
  return 1.0 / (static_cast<double>(p.config.mc_samples) * static_cast<double>(rows));
}

}  // namespace detail

/// Monte-Carlo Huber loss between demonstrated and decoded actions.
inline Var loss_bc(Tape& tape, ModelParams& p, const Batch& b, Noise& noise) {
  detail::require_nonempty(b, "loss_bc");
  detail::require_expert(b);
  const Encoding enc = encode(tape, p, tape.constant(b.inputs));
  auto t = detail::sampled_terms(tape, p, enc, nullptr, b, true, detail::Head::None, noise);
  return grad::scale(t.bc_sum, detail::per_sample(p, b.size()));
}

/// Monte-Carlo Huber loss between sampled values and return labels.
inline Var loss_value(Tape& tape, ModelParams& p, const Batch& b, Noise& noise) {
  detail::require_nonempty(b, "loss_value");
  const Encoding enc = encode(tape, p, tape.constant(b.inputs));
  auto t = detail::sampled_terms(tape, p, enc, nullptr, b, false, detail::Head::Value, noise);
  return grad::scale(t.head_sum, detail::per_sample(p, b.size()));
}

inline Var loss_kl(Tape& tape, ModelParams& p, const Batch& b, Noise& noise) {
  detail::require_nonempty(b, "loss_kl");
  const Encoding enc = encode(tape, p, tape.constant(b.inputs));
  return kl_estimate(tape, enc, prior_vars(tape, p), p.config.mc_samples, noise);
}

/// Binary cross-entropy of the failure logit against the episode outcome.
inline Var loss_classifier(Tape& tape, ModelParams& p, const Batch& b, Noise& noise) {
  detail::require_nonempty(b, "loss_classifier");
  const Encoding enc = encode(tape, p, tape.constant(b.inputs));
  auto t = detail::sampled_terms(tape, p, enc, nullptr, b, false, detail::Head::Classifier, noise);
  return grad::scale(t.head_sum, detail::per_sample(p, b.size()));
}

enum class TrainMode { Bcva, Classifier, PolicyOnly };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Bcva: return "bcva";
    case TrainMode::Classifier: return "classifier";
    case TrainMode::PolicyOnly: return "policy";
  }
  return "?";
}

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "bcva") return TrainMode::Bcva;
  if (s == "classifier") return TrainMode::Classifier;
  if (s == "policy") return TrainMode::PolicyOnly;
  throw UsageError("unknown training mode '" + s + "' (expected bcva|classifier|policy)");
}

struct LossTerms {
  Var total;
  double bc = 0.0;
  double head = 0.0;  // value or classifier term, before lambda
  double kl = 0.0;
};

/// L_BC + lambda * L_head + beta * L_KL. The KL term averages over the
/// union of both batches. The head term is skipped when lambda is 0 and the
/// labeled batch may then be empty.
inline LossTerms loss_combined(Tape& tape, ModelParams& p, const Batch& expert, const Batch& labeled,
                               Noise& noise, TrainMode mode = TrainMode::Bcva) {
  detail::require_nonempty(expert, "loss_combined");
  detail::require_expert(expert);
  const double lambda = mode == TrainMode::PolicyOnly ? 0.0 : p.config.lambda;
  const bool use_head = lambda != 0.0;
  if (use_head) detail::require_nonempty(labeled, "loss_combined");
  const bool use_kl = p.config.beta != 0.0;
  const Prior prior = prior_vars(tape, p);
  const Prior* prior_ptr = use_kl ? &prior : nullptr;

  const Encoding enc_e = encode(tape, p, tape.constant(expert.inputs));
  auto te = detail::sampled_terms(tape, p, enc_e, prior_ptr, expert, true, detail::Head::None, noise);
  Var kl_sum = te.kl_sum;
  std::size_t kl_rows = expert.size();

  LossTerms out;
  const double inv_e = detail::per_sample(p, expert.size());
  Var bc = grad::scale(te.bc_sum, inv_e);
  Var total = bc;
  out.bc = bc.item();
  if (use_head || (use_kl && labeled.size() > 0)) {
    const auto head = !use_head ? detail::Head::None
                      : mode == TrainMode::Classifier ? detail::Head::Classifier
                                                      : detail::Head::Value;
    const Encoding enc_l = encode(tape, p, tape.constant(labeled.inputs));
    auto tl = detail::sampled_terms(tape, p, enc_l, prior_ptr, labeled, false, head, noise);
    if (use_head) {
      Var h = grad::scale(tl.head_sum, detail::per_sample(p, labeled.size()));
      out.head = h.item();
      total = grad::add(total, grad::scale(h, lambda));
    }
    kl_sum = grad::add(kl_sum, tl.kl_sum);
    kl_rows += labeled.size();
  }
  if (use_kl) {
    Var kl = grad::scale(kl_sum, detail::per_sample(p, kl_rows));
    out.kl = kl.item();
    total = grad::add(total, grad::scale(kl, p.config.beta));
  }
  out.total = total;
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 64;
  int epochs = 10;
  int steps_per_epoch = 100;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_hat = 1e-8;

  void validate() const {
    if (!(lr > 0.0) || batch_size < 1 || epochs < 1 || steps_per_epoch < 1) {
      throw DomainError("train config: lr, batch_size, epochs and steps_per_epoch must be positive");
    }
  }
};

/// Frames available to training, referencing trajectories owned elsewhere.
struct TrainingData {
  std::vector<FrameRef> expert;   // every step of every expert demonstration
  std::vector<FrameRef> labeled;  // every step of every success/failure episode
};

/// Collects frames from datasets that must outlive the result. In Bcva mode
/// only trajectories with return labels enter the labeled pool.
inline TrainingData collect_frames(std::span<const Dataset* const> datasets, TrainMode mode) {
  TrainingData d;
  for (const Dataset* ds : datasets) {
    for (const auto& t : ds->trajectories) {
      const bool expert = t.provenance.is_expert();
      const bool labeled = mode == TrainMode::Bcva ? t.labeled() : t.outcome.is_labelable();
      for (std::size_t i = 0; i < t.steps.size(); ++i) {
        if (expert) d.expert.push_back({&t, i});
        if (labeled) d.labeled.push_back({&t, i});
      }
    }
  }
  return d;
}

struct EpochRecord {
  int epoch = 0;
  double total = 0.0;
  double bc = 0.0;
  double head = 0.0;
  double kl = 0.0;
};

/// Minibatch Adam on loss_combined. Batches are drawn with replacement from
/// a generator seeded by config.seed, so runs are bit-reproducible.
inline std::vector<EpochRecord> train(ModelParams& p, const TrainingData& data, const TrainConfig& config,
                                      TrainMode mode) {
  config.validate();
  if (data.expert.empty()) throw DomainError("train: no expert demonstration frames");
  const bool needs_labeled = mode != TrainMode::PolicyOnly && p.config.lambda != 0.0;
  if (needs_labeled && data.labeled.empty()) throw DomainError("train: no labeled frames");
  CounterRng rng(config.seed, 0x7A1);
  std::vector<EpochRecord> curve;
  const auto bs = static_cast<std::size_t>(config.batch_size);
  std::vector<FrameRef> ebuf(bs), lbuf;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochRecord rec{epoch};
    for (int s = 0; s < config.steps_per_epoch; ++s) {
      for (auto& f : ebuf) f = data.expert[rng.below(data.expert.size())];
      lbuf.clear();
      if (!data.labeled.empty() && (needs_labeled || p.config.beta != 0.0)) {
        for (std::size_t i = 0; i < bs; ++i) lbuf.push_back(data.labeled[rng.below(data.labeled.size())]);
      }
      const Batch eb = make_batch(ebuf, p.config.input_dim);
      const Batch lb = make_batch(lbuf, p.config.input_dim);
      Noise noise(rng.fork(static_cast<std::uint64_t>(epoch) * 1000003u + static_cast<std::uint64_t>(s)));
      Tape tape;
      const LossTerms terms = loss_combined(tape, p, eb, lb, noise, mode);
      grad::backward(tape, terms.total, p.store);
      grad::adam_step(p.store, config.lr, config.beta1, config.beta2, config.eps_hat);
      rec.total += terms.total.item();
      rec.bc += terms.bc;
      rec.head += terms.head;
      rec.kl += terms.kl;
    }
    const double inv = 1.0 / config.steps_per_epoch;
    rec.total *= inv;
    rec.bc *= inv;
    rec.head *= inv;
    rec.kl *= inv;
    curve.push_back(rec);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Inference

struct Prediction {
  Action action;
  double value = 0.0;
  double failure_prob = 0.0;
};

namespace detail {

/// y = x W + b on a row-major batch without recording a tape.
inline std::vector<double> dense(const grad::ParamStore& s, const std::string& name, const std::vector<double>& x,
                                 std::size_t rows, bool relu) {
  const Tensor& W = s.at(name + ".w").value;
  const Tensor& B = s.at(name + ".b").value;
  const std::size_t in = W.dim(0), out = W.dim(1);
  std::vector<double> y(rows * out);
  for (std::size_t r = 0; r < rows; ++r) {
    double* yr = y.data() + r * out;
    for (std::size_t j = 0; j < out; ++j) yr[j] = 0.0;
    const double* xr = x.data() + r * in;
    for (std::size_t k = 0; k < in; ++k) {
      const double xk = xr[k];
      if (xk == 0.0) continue;
      const double* wk = W.data() + k * out;
      for (std::size_t j = 0; j < out; ++j) yr[j] += xk * wk[j];
    }
    for (std::size_t j = 0; j < out; ++j) {
      yr[j] += B[j];
      if (relu && yr[j] < 0.0) yr[j] = 0.0;
    }
  }
  return y;
}

inline std::vector<double> dense_mlp(const grad::ParamStore& s, const std::string& prefix, std::size_t layers,
                                     std::vector<double> x, std::size_t rows) {
  for (std::size_t i = 0; i < layers; ++i) x = dense(s, prefix + "." + std::to_string(i), x, rows, true);
  return x;
}

inline std::vector<double> features(std::span<const Observation* const> obs, int input_dim) {
  std::vector<double> x(obs.size() * static_cast<std::size_t>(input_dim));
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const std::size_t n = obs[i]->pixels.size() + obs[i]->kinematics.joint_angles.size() + 3;
    if (n != static_cast<std::size_t>(input_dim)) {
      throw ShapeError("predict: observation yields " + std::to_string(n) + " features, model expects " +
                       std::to_string(input_dim));
    }
    write_features(*obs[i], x.data() + i * input_dim);
  }
  return x;
}

}  // namespace detail

/// Posterior-mean encoding (mean, clamped log-std) without sampling.
inline std::pair<std::vector<double>, std::vector<double>> encode(const ModelParams& p, const Observation& obs) {
  const Observation* ptr = &obs;
  const auto& s = p.store;
  auto h = detail::dense_mlp(s, "enc", p.config.encoder_hidden.size(),
                             detail::features(std::span(&ptr, 1), p.config.input_dim), 1);
  auto mean = detail::dense(s, "enc.mean", h, 1, false);
  auto log_std = detail::dense(s, "enc.logstd", h, 1, false);
  for (auto& v : log_std) v = std::clamp(v, kLogStdMin, kLogStdMax);
  return {mean, log_std};
}

/// Deterministic inference on the posterior-mean latent; the value is the
/// value head's mean clamped to [-1, 1].
inline std::vector<Prediction> predict_batch(const ModelParams& p, std::span<const Observation* const> obs) {
  const std::size_t n = obs.size();
  if (n == 0) return {};
  const auto& s = p.store;
  const auto& c = p.config;
  auto h = detail::dense_mlp(s, "enc", c.encoder_hidden.size(), detail::features(obs, c.input_dim), n);
  const auto z = detail::dense(s, "enc.mean", h, n, false);
  const auto a = detail::dense(s, "act.out", detail::dense_mlp(s, "act", c.action_hidden.size(), z, n), n, false);
  const auto v = detail::dense(s, "val.mean", detail::dense_mlp(s, "val", c.value_hidden.size(), z, n), n, false);
  const auto l = detail::dense(s, "cls.out", detail::dense_mlp(s, "cls", c.value_hidden.size(), z, n), n, false);
  std::vector<Prediction> out(n);
  const auto ad = static_cast<std::size_t>(c.action_dim);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].action = {a[i * ad + 0], a[i * ad + 1], a[i * ad + 2], std::clamp(a[i * ad + 3], 0.0, 1.0)};
    out[i].value = std::clamp(v[i], -1.0, 1.0);
    out[i].failure_prob = grad::sigmoid_value(l[i]);
  }
  return out;
}

inline Prediction predict(const ModelParams& p, const Observation& obs) {
  const Observation* ptr = &obs;
  return predict_batch(p, std::span(&ptr, 1)).front();
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (all integers and reals little-endian):
//   "BCVACKPT"  u32 version  u64 header_len  header_json
//   u32 param_count
//   per parameter: u32 name_len name  u32 rank  u64 dims[rank]  f64 data[]

inline constexpr char kCheckpointMagic[8] = {'B', 'C', 'V', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string mode = "bcva";
  ObservationSpec spec;
  std::optional<ReturnConfig> labels;
  std::optional<DistanceStats> stats;
  std::int64_t train_steps = 0;

  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

namespace detail {

using nlohmann::json;

inline json config_to_json(const ModelConfig& c) {
  return json{{"input_dim", c.input_dim},       {"latent_dim", c.latent_dim},
              {"encoder_hidden", c.encoder_hidden}, {"action_hidden", c.action_hidden},
              {"value_hidden", c.value_hidden}, {"prior_components", c.prior_components},
              {"mc_samples", c.mc_samples},     {"lambda", c.lambda},
              {"beta", c.beta},                 {"action_dim", c.action_dim}};
}

inline ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.input_dim = j.at("input_dim").get<int>();
  c.latent_dim = j.at("latent_dim").get<int>();
  c.encoder_hidden = j.at("encoder_hidden").get<std::vector<int>>();
  c.action_hidden = j.at("action_hidden").get<std::vector<int>>();
  c.value_hidden = j.at("value_hidden").get<std::vector<int>>();
  c.prior_components = j.at("prior_components").get<int>();
  c.mc_samples = j.at("mc_samples").get<int>();
  c.lambda = j.at("lambda").get<double>();
  c.beta = j.at("beta").get<double>();
  c.action_dim = j.at("action_dim").get<int>();
  return c;
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  const char* take(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) throw FormatError(std::string("checkpoint truncated while reading ") + what);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32(const char* what) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4, what));
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(8, what));
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string checkpoint_bytes(const ModelParams& p, const CheckpointMeta& meta) {
  using detail::json;
  json header{{"format", "bcva-checkpoint"},
              {"config", detail::config_to_json(p.config)},
              {"mode", meta.mode},
              {"spec", {{"width", meta.spec.width}, {"height", meta.spec.height}, {"channels", meta.spec.channels}}},
              {"train_steps", meta.train_steps}};
  header["labels"] = meta.labels ? json{{"metric", std::string(to_string(meta.labels->metric))},
                                        {"gamma", meta.labels->gamma},
                                        {"clamp_delta_at_zero", meta.labels->clamp_delta_at_zero}}
                                 : json(nullptr);
  header["stats"] = meta.stats ? json{{"mu_pixel", meta.stats->mu_pixel},       {"sigma_pixel", meta.stats->sigma_pixel},
                                      {"mu_joint", meta.stats->mu_joint},       {"sigma_joint", meta.stats->sigma_joint},
                                      {"mu_xyz", meta.stats->mu_xyz},           {"sigma_xyz", meta.stats->sigma_xyz}}
                               : json(nullptr);
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, kCheckpointMagic + 8);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, h.size());
  out += h;
  detail::put_u32(out, static_cast<std::uint32_t>(p.store.size()));
  for (const auto& [name, param] : p.store) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(param.value.rank()));
    for (auto d : param.value.shape()) detail::put_u64(out, d);
    for (double v : param.value.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

struct Checkpoint {
  ModelParams params;
  CheckpointMeta meta;
};

/// Parses checkpoint bytes. When `expected` is given the stored ModelConfig
/// must equal it.
inline Checkpoint parse_checkpoint(const std::string& bytes, const std::optional<ModelConfig>& expected = std::nullopt) {
  detail::ByteReader r(bytes);
  if (std::memcmp(r.take(8, "magic"), kCheckpointMagic, 8) != 0) throw FormatError("not a checkpoint file");
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto hlen = r.u64("header length");
  const char* hp = r.take(hlen, "header");
  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(std::string(hp, hlen));
    ck.params.config = detail::config_from_json(header.at("config"));
    ck.meta.mode = header.at("mode").get<std::string>();
    ck.meta.spec.width = header.at("spec").at("width").get<int>();
    ck.meta.spec.height = header.at("spec").at("height").get<int>();
    ck.meta.spec.channels = header.at("spec").at("channels").get<int>();
    ck.meta.train_steps = header.at("train_steps").get<std::int64_t>();
    if (const auto& l = header.at("labels"); !l.is_null()) {
      ck.meta.labels = ReturnConfig{l.at("gamma").get<double>(), parse_metric(l.at("metric").get<std::string>()),
                                    l.at("clamp_delta_at_zero").get<bool>()};
    }
    if (const auto& s = header.at("stats"); !s.is_null()) {
      ck.meta.stats = DistanceStats{s.at("mu_pixel").get<double>(), s.at("sigma_pixel").get<double>(),
                                    s.at("mu_joint").get<double>(), s.at("sigma_joint").get<double>(),
                                    s.at("mu_xyz").get<double>(),   s.at("sigma_xyz").get<double>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  if (expected && !(*expected == ck.params.config)) {
    throw DomainError("checkpoint model config does not match the expected config");
  }
  const ModelParams reference = init_params(ck.params.config, 0);
  const auto count = r.u32("parameter count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nlen = r.u32("parameter name length");
    const std::string name(r.take(nlen, "parameter name"), nlen);
    const auto rank = r.u32("rank");
    grad::Shape shape(rank);
    for (auto& d : shape) d = r.u64("dimension");
    if (!reference.store.contains(name) || reference.store.at(name).value.shape() != shape) {
      throw FormatError("checkpoint parameter '" + name + "' does not match the model config");
    }
    Tensor t(shape);
    for (auto& v : t.values()) v = std::bit_cast<double>(r.u64("parameter data"));
    ck.params.store.add(name, std::move(t));
  }
  if (ck.params.store.size() != reference.store.size()) throw FormatError("checkpoint is missing parameters");
  if (!r.done()) throw FormatError("checkpoint has trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& p, const CheckpointMeta& meta) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    const std::string bytes = checkpoint_bytes(p, meta);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const std::optional<ModelConfig>& expected = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, expected);
}

}  // namespace bcva::net
