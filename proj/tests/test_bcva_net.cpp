#include <gtest/gtest.h>

#include <cmath>

#include "bcva/bcva_net.hpp"
#include "bcva/returns.hpp"
#include "oracles.hpp"

using namespace bcva;
using namespace bcva::net;

namespace {

constexpr ObservationSpec kSpec{2, 2, 1};

ModelConfig small_config() {
  ModelConfig c;
  c.input_dim = input_dim_for(kSpec, 1);
  c.latent_dim = 4;
  c.encoder_hidden = {24, 16};
  c.action_hidden = {16, 16};
  c.value_hidden = {16, 16, 16};
  c.prior_components = 2;
  c.mc_samples = 2;
  return c;
}

void zero_all(ModelParams& p) {
  for (auto& [_, param] : p.store) param.value.fill(0.0);
}

Observation toy_frame(double x, double joint, double shade) {
  Observation o;
  o.pixels.assign(kSpec.pixel_count(), Observation::quantize(shade));
  o.kinematics.joint_angles = {joint};
  o.kinematics.x = x;
  return o;
}

// Episodes drift from x = 0 toward +1 (success) or -1 (failure); the
// demonstrated action steers along the drift.
Dataset toy_dataset(int episodes, std::uint64_t seed, bool experts_only = false) {
  oracle::Rng rng(seed);
  Dataset d;
  d.spec = kSpec;
  for (int e = 0; e < episodes; ++e) {
    const bool expert = experts_only || e % 3 == 0;
    const bool success = expert || oracle::uniform(rng, 0, 1) < 0.5;
    const double dir = success ? 1.0 : -1.0;
    const int len = oracle::uniform_int(rng, 6, 12);
    Trajectory t;
    t.episode_id = "toy-" + std::to_string(e);
    t.provenance = expert ? Provenance::expert() : Provenance::rollout("toy");
    t.outcome = success ? Outcome::success() : Outcome::failure(FailureMode::Collision);
    for (int i = 0; i < len; ++i) {
      const double x = dir * (i + 1.0) / len + oracle::uniform(rng, -0.05, 0.05);
      Step s;
      s.index = i;
      s.observation = toy_frame(x, 0.3 * dir, 0.5 + 0.4 * x);
      s.action = {0.5 * dir, -0.2 * x, 0.1, i + 1 == len ? 1.0 : 0.0};
      t.steps.push_back(s);
    }
    d.trajectories.push_back(t);
  }
  const ReturnConfig rc{0.9, DistanceMetric::Time, true};
  return apply_labels(d, label_dataset(d, rc), rc);
}

Batch batch_of(const Dataset& d, bool experts) {
  std::vector<FrameRef> refs;
  for (const auto& t : d.trajectories) {
    if (t.provenance.is_expert() != experts) continue;
    for (std::size_t i = 0; i < t.steps.size(); ++i) refs.push_back({&t, i});
  }
  return make_batch(refs, input_dim_for(d.spec, 1));
}

TrainConfig quick_train(int epochs = 6) {
  TrainConfig tc;
  tc.lr = 3e-3;
  tc.batch_size = 32;
  tc.epochs = epochs;
  tc.steps_per_epoch = 40;
  tc.seed = 5;
  return tc;
}

// Value-head mean at the posterior-mean latent, before clamping.
double raw_value(ModelParams& p, const Observation& o) {
  const auto z = net::encode(p, o).first;
  Tape t;
  return value_head(t, p, t.constant(Tensor({1, z.size()}, z))).mean.item();
}

}  // namespace

TEST(Encoder, ShapesAndDeterminism) {
  ModelParams p = init_params(small_config(), 1);
  const Dataset d = toy_dataset(4, 1);
  const Batch b = batch_of(d, true);
  Tape t;
  const Encoding e = encode(t, p, t.constant(b.inputs));
  EXPECT_EQ(e.mean.shape(), (grad::Shape{b.size(), 4}));
  EXPECT_EQ(e.log_std.shape(), (grad::Shape{b.size(), 4}));
  const Encoding again = encode(t, p, t.constant(b.inputs));
  EXPECT_EQ(e.mean.value(), again.mean.value());
  EXPECT_THROW(encode(t, p, t.constant(Tensor({1, 3}))), ShapeError);
}

TEST(Encoder, ZeroWeightsGiveBias) {
  ModelParams p = init_params(small_config(), 1);
  zero_all(p);
  p.store.at("enc.logstd.b").value = Tensor({4}, std::vector<double>{-1.0, -0.5, 0.0, 0.25});
  const auto [mean, log_std] = net::encode(p, toy_frame(0.4, 0.2, 0.7));
  for (double m : mean) EXPECT_EQ(m, 0.0);
  EXPECT_EQ(log_std, (std::vector<double>{-1.0, -0.5, 0.0, 0.25}));
}

TEST(Losses, BehaviorCloningHuber) {
  ModelParams p = init_params(small_config(), 2);
  zero_all(p);
  Dataset d = toy_dataset(3, 2, true);
  for (auto& t : d.trajectories) {
    for (auto& s : t.steps) s.action = {0.5, 0.0, 0.0, 0.0};
  }
  Noise noise(CounterRng(3));
  Tape t;
  EXPECT_DOUBLE_EQ(loss_bc(t, p, batch_of(d, true), noise).item(), 0.125);
  for (auto& tr : d.trajectories) {
    for (auto& s : tr.steps) s.action = {};
  }
  EXPECT_EQ(loss_bc(t, p, batch_of(d, true), noise).item(), 0.0);
}

TEST(Losses, BehaviorCloningRejectsRollouts) {
  ModelParams p = init_params(small_config(), 2);
  const Dataset d = toy_dataset(6, 3);
  Noise noise;
  Tape t;
  EXPECT_THROW(loss_bc(t, p, batch_of(d, false), noise), DomainError);
  EXPECT_THROW(loss_bc(t, p, Batch{}, noise), DomainError);
}

TEST(Losses, ValueConstantPredictor) {
  ModelParams p = init_params(small_config(), 4);
  zero_all(p);
  Dataset d = toy_dataset(2, 4, true);
  d.trajectories[0].returns.assign(d.trajectories[0].steps.size(), 1.0);
  d.trajectories[1].returns.assign(d.trajectories[1].steps.size(), -1.0);
  std::vector<FrameRef> refs{{&d.trajectories[0], 0}, {&d.trajectories[1], 0}};
  Noise noise = Noise::zeros();
  Tape t;
  EXPECT_DOUBLE_EQ(loss_value(t, p, make_batch(refs, p.config.input_dim), noise).item(), 0.5);
  d.trajectories[0].returns.clear();
  EXPECT_THROW(loss_value(t, p, make_batch(refs, p.config.input_dim), noise), DomainError);
}

TEST(Losses, ClassifierAtZeroLogit) {
  ModelParams p = init_params(small_config(), 5);
  zero_all(p);
  const Dataset d = toy_dataset(6, 5);
  Noise noise(CounterRng(1));
  Tape t;
  EXPECT_NEAR(loss_classifier(t, p, batch_of(d, false), noise).item(), std::log(2.0), 1e-15);
}

TEST(Losses, CombinedWeighting) {
  EXPECT_DOUBLE_EQ(0.2 + 0.5 * 0.1 + 1e-6 * 1000.0, 0.251);
  const Dataset d = toy_dataset(9, 6);
  const Batch e = batch_of(d, true), l = batch_of(d, false);
  for (auto [lambda, beta] : {std::pair{0.5, 1e-6}, std::pair{2.0, 0.3}, std::pair{0.0, 0.0}}) {
    ModelConfig c = small_config();
    c.lambda = lambda;
    c.beta = beta;
    ModelParams p = init_params(c, 6);
    Noise noise(CounterRng(9));
    Tape t;
    const LossTerms terms = loss_combined(t, p, e, l, noise);
    EXPECT_NEAR(terms.total.item(), terms.bc + lambda * terms.head + beta * terms.kl, 1e-12);
    if (lambda == 0.0 && beta == 0.0) {
      EXPECT_EQ(terms.total.item(), terms.bc);
      Noise same(CounterRng(9));
      Tape u;
      EXPECT_EQ(loss_bc(u, p, e, same).item(), terms.bc);
    }
  }
}

TEST(Losses, KlZeroWhenPosteriorIsPrior) {
  ModelConfig c = small_config();
  c.prior_components = 1;
  ModelParams p = init_params(c, 7);
  zero_all(p);
  // Posterior N(0, 1) everywhere, prior a single N(0, 1) component.
  const Dataset d = toy_dataset(3, 7, true);
  Noise noise(CounterRng(2));
  Tape t;
  EXPECT_NEAR(loss_kl(t, p, batch_of(d, true), noise).item(), 0.0, 1e-12);
}

TEST(Training, BitIdenticalAcrossRuns) {
  const Dataset d = toy_dataset(30, 8);
  const Dataset* ds[] = {&d};
  const TrainingData frames = collect_frames(ds, TrainMode::Bcva);
  auto run = [&] {
    ModelParams p = init_params(small_config(), 3);
    train(p, frames, quick_train(2), TrainMode::Bcva);
    return checkpoint_bytes(p, {});
  };
  EXPECT_EQ(run(), run());
}

TEST(Training, LossHalvesOnToySet) {
  const Dataset d = toy_dataset(200, 9);
  const Dataset* ds[] = {&d};
  ModelParams p = init_params(small_config(), 4);
  const auto curve = train(p, collect_frames(ds, TrainMode::Bcva), quick_train(8), TrainMode::Bcva);
  ASSERT_EQ(curve.size(), 8u);
  EXPECT_LE(curve.back().total, 0.5 * curve.front().total)
      << "epoch 1 " << curve.front().total << ", last " << curve.back().total;
}

TEST(Training, RejectsEmptyData) {
  ModelParams p = init_params(small_config(), 4);
  EXPECT_THROW(train(p, TrainingData{}, quick_train(), TrainMode::Bcva), DomainError);
}

TEST(Predict, ValueSignOnHeldOutTerminalFrames) {
  const Dataset d = toy_dataset(200, 10);
  const Dataset* ds[] = {&d};
  ModelParams p = init_params(small_config(), 5);
  train(p, collect_frames(ds, TrainMode::Bcva), quick_train(10), TrainMode::Bcva);
  const Dataset held = toy_dataset(20, 11);
  for (const auto& t : held.trajectories) {
    const Prediction pr = predict(p, t.steps.back().observation);
    if (t.outcome.is_success()) {
      EXPECT_GT(pr.value, 0.0) << t.episode_id;
    }
    EXPECT_GE(pr.action.terminate, 0.0);
    EXPECT_LE(pr.action.terminate, 1.0);
    EXPECT_LE(std::abs(pr.value), 1.0);
    const Prediction again = predict(p, t.steps.back().observation);
    EXPECT_EQ(again.value, pr.value);
    EXPECT_EQ(again.action, pr.action);
  }
}

TEST(Predict, BatchMatchesSingle) {
  ModelParams p = init_params(small_config(), 6);
  const Dataset d = toy_dataset(2, 12);
  std::vector<const Observation*> obs;
  for (const auto& s : d.trajectories[1].steps) obs.push_back(&s.observation);
  const auto batch = predict_batch(p, obs);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const Prediction one = predict(p, *obs[i]);
    EXPECT_EQ(batch[i].value, one.value);
    EXPECT_EQ(batch[i].failure_prob, one.failure_prob);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ModelParams p = init_params(small_config(), 7);
  CheckpointMeta meta;
  meta.spec = kSpec;
  meta.labels = ReturnConfig{0.95, DistanceMetric::Pixel, true};
  meta.stats = DistanceStats{1, 2, 3, 4, 5, 6};
  meta.train_steps = 123;
  const auto path = std::filesystem::temp_directory_path() / "bcva_net_test.bin";
  save_checkpoint(path, p, meta);
  const Checkpoint ck = load_checkpoint(path, p.config);
  std::filesystem::remove(path);
  EXPECT_EQ(ck.meta, meta);
  const Observation o = toy_frame(0.3, -0.1, 0.2);
  const Prediction a = predict(p, o), b = predict(ck.params, o);
  EXPECT_EQ(a.action, b.action);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.failure_prob, b.failure_prob);
  EXPECT_EQ(checkpoint_bytes(ck.params, ck.meta), checkpoint_bytes(p, meta));
}

TEST(Checkpoint, CorruptionAndMismatchRejected) {
  ModelParams p = init_params(small_config(), 8);
  const std::string bytes = checkpoint_bytes(p, {});
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 5)), FormatError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, 10)), FormatError);
  EXPECT_THROW(parse_checkpoint(bytes + "x"), FormatError);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad_magic), FormatError);
  std::string bad_version = bytes;
  bad_version[8] = 9;
  EXPECT_THROW(parse_checkpoint(bad_version), FormatError);
  ModelConfig other = small_config();
  other.latent_dim = 5;
  EXPECT_THROW(parse_checkpoint(bytes, other), DomainError);
}

TEST(Heads, ShareOneEncoder) {
  // Perturbing an encoder weight moves every head; perturbing one head's
  // weights leaves the others alone.
  ModelParams p = init_params(small_config(), 9);
  const Observation o = toy_frame(0.5, 0.2, 0.6);
  const Prediction base = predict(p, o);
  const double base_value = raw_value(p, o);
  ModelParams enc = p;
  for (auto& v : enc.store.at("enc.0.w").value.values()) v *= 1.5;
  const Prediction e = predict(enc, o);
  EXPECT_NE(raw_value(enc, o), base_value);
  EXPECT_NE(e.failure_prob, base.failure_prob);
  EXPECT_NE(e.action.base_forward, base.action.base_forward);
  ModelParams val = p;
  for (auto& v : val.store.at("val.mean.w").value.values()) v += 0.3;
  const Prediction w = predict(val, o);
  EXPECT_NE(raw_value(val, o), base_value);
  EXPECT_EQ(w.failure_prob, base.failure_prob);
  EXPECT_EQ(w.action, base.action);
}
