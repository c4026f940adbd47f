#include <gtest/gtest.h>

#include <sstream>

#include "bcva/helpgate.hpp"
#include "oracles.hpp"

using namespace bcva;

namespace {

std::optional<std::size_t> first_fire(const std::vector<double>& v, double eps, int nu) {
  GateState s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const GateUpdate u = gate_update(s, v[i], {eps, nu, GateSignal::ValueHead});
    s = u.state;
    if (u.fire) return i;
  }
  return std::nullopt;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

EpisodeTrace trace(const std::string& id, Outcome o, std::vector<double> v) { return {id, o, std::move(v)}; }

}  // namespace

TEST(Gate, InterruptedRunRestartsCount) {
  std::vector<double> v(19, -0.2);
  v.push_back(0.0);
  v.insert(v.end(), 20, -0.2);
  EXPECT_EQ(first_fire(v, -0.15, 20), 39u);
  EXPECT_EQ(evaluate_episode(v, {-0.15, 20, GateSignal::ValueHead}).first_fire_index, 39u);
}

TEST(Gate, ConstantTraces) {
  EXPECT_EQ(first_fire(std::vector<double>(50, -1.0), -0.15, 20), 19u);
  EXPECT_FALSE(first_fire(std::vector<double>(50, 1.0), -0.15, 20));
  const EpisodeGate never = evaluate_episode(std::vector<double>(50, 1.0), {-0.15, 20, GateSignal::ValueHead});
  EXPECT_FALSE(never.fired);
  EXPECT_FALSE(never.first_fire_index);
  EXPECT_FALSE(first_fire({0.0, 0.3, 0.01}, -0.01, 1));
  EXPECT_EQ(first_fire({-0.5, 0.3}, -0.15, 1), 0u);
}

TEST(Gate, ThresholdIsInclusive) {
  EXPECT_EQ(first_fire({-0.15, -0.15}, -0.15, 2), 1u);
  EXPECT_FALSE(first_fire({-0.15, -0.1499}, -0.15, 2));
}

TEST(Gate, SaturatedCounterKeepsFiring) {
  GateState s;
  const GateConfig g{-0.1, 3, GateSignal::ValueHead};
  int fires = 0;
  for (int i = 0; i < 10; ++i) {
    const auto u = gate_update(s, -1.0, g);
    s = u.state;
    fires += u.fire;
    EXPECT_LE(s.consecutive_below, 3);
  }
  EXPECT_EQ(fires, 8);
}

TEST(Gate, InvalidInputs) {
  EXPECT_THROW(evaluate_episode({}, {}), DomainError);
  EXPECT_THROW(gate_update({}, 0.0, {0.0, 0, GateSignal::ValueHead}), DomainError);
  EXPECT_EQ(classifier_gate_signal(0.7), -0.7);
}

TEST(Gate, StreamingMatchesWindowDefinition) {
  oracle::Rng rng(3);
  for (const auto& e : oracle::random_traces(rng, 500, 40)) {
    for (int nu : {1, 2, 5, 9}) {
      for (double eps : {-0.3, -0.15, 0.0}) {
        const auto f = first_fire(e.values, eps, nu);
        EXPECT_EQ(f.has_value(), oracle::gate_fires(e.values, eps, nu));
        EXPECT_EQ(evaluate_episode(e.values, {eps, nu, GateSignal::ValueHead}).first_fire_index, f);
      }
    }
  }
}

TEST(Confusion, Ratios) {
  const ConfusionMatrix m{86, 14, 70, 20};
  EXPECT_DOUBLE_EQ(*m.precision(), 0.86);
  EXPECT_DOUBLE_EQ(*m.recall(), 86.0 / 106.0);
  EXPECT_DOUBLE_EQ(*m.accuracy(), 156.0 / 190.0);
  EXPECT_FALSE(ConfusionMatrix({0, 0, 5, 3}).precision());
  EXPECT_EQ(ConfusionMatrix({0, 0, 5, 3}).recall(), 0.0);
  EXPECT_FALSE(ConfusionMatrix({0, 0, 5, 3}).f1());
  EXPECT_EQ(ConfusionMatrix({0, 2, 5, 3}).f1(), 0.0);
  EXPECT_FALSE(ConfusionMatrix{}.accuracy());
}

TEST(Sweep, MatchesBruteForceCells) {
  oracle::Rng rng(50);
  const auto traces = oracle::random_traces(rng, 50, 30);
  const std::vector<double> eps{-0.3, -0.15, 0.0};
  const std::vector<int> nus{1, 5, 10};
  const SweepResult s = sweep(traces, eps, nus);
  ASSERT_EQ(s.cells.size(), 9u);
  std::optional<double> max_f1;
  for (std::size_t i = 0; i < nus.size(); ++i) {
    for (std::size_t j = 0; j < eps.size(); ++j) {
      const SweepCell& c = s.cell(i, j);
      const oracle::Cell o = oracle::score_cell(traces, eps[j], nus[i]);
      EXPECT_EQ(c.nu, nus[i]);
      EXPECT_EQ(c.epsilon, eps[j]);
      EXPECT_EQ(c.matrix, (ConfusionMatrix{o.tp, o.fp, o.tn, o.fn}));
      EXPECT_EQ(c.precision, o.precision);
      EXPECT_EQ(c.recall, o.recall);
      EXPECT_EQ(c.f1, o.f1);
      EXPECT_EQ(c.accuracy, o.accuracy);
      // Every labelable episode lands in exactly one quadrant.
      const auto labelable = std::count_if(traces.begin(), traces.end(),
                                           [](const EpisodeTrace& e) { return e.outcome.is_labelable(); });
      EXPECT_EQ(c.matrix.total(), labelable);
      if (o.f1 && (!max_f1 || *o.f1 > *max_f1)) max_f1 = o.f1;
    }
  }
  ASSERT_TRUE(s.best);
  const SweepCell& b = s.cells[*s.best];
  EXPECT_EQ(b.f1, max_f1);
  for (const auto& c : s.cells) {
    if (c.f1 != max_f1) continue;
    EXPECT_TRUE(c.nu > b.nu || (c.nu == b.nu && c.epsilon <= b.epsilon));
  }
}

TEST(Sweep, TieBreaksSmallerNuThenLargerEpsilon) {
  // Both traces clear every cell identically, so every cell ties.
  const std::vector<EpisodeTrace> traces{trace("f", Outcome::failure(FailureMode::Timeout), std::vector<double>(40, -1.0)),
                                         trace("s", Outcome::success(), std::vector<double>(40, 1.0))};
  const SweepResult s = sweep(traces, {-0.3, -0.2, -0.1}, {10, 5, 20});
  ASSERT_TRUE(s.best);
  EXPECT_EQ(s.cells[*s.best].nu, 5);
  EXPECT_EQ(s.cells[*s.best].epsilon, -0.1);
  EXPECT_EQ(s.cells[*s.best].f1, 1.0);
}

TEST(Sweep, HelpEpisodesSkippedAndErrors) {
  const std::vector<EpisodeTrace> traces{trace("h", Outcome::asked_for_help(), {}),
                                         trace("s", Outcome::success(), {0.5})};
  const SweepResult s = sweep(traces, {-0.1}, {1});
  EXPECT_EQ(s.cells[0].matrix.total(), 1);
  EXPECT_THROW(sweep(traces, {}, {1}), DomainError);
  EXPECT_THROW(sweep(traces, {-0.1}, {}), DomainError);
  EXPECT_THROW(sweep({trace("e", Outcome::success(), {})}, {-0.1}, {1}), DomainError);
}

TEST(Sweep, Monotonicity) {
  oracle::Rng rng(8);
  const auto traces = oracle::random_traces(rng, 200, 50);
  const auto eps = hundredths_grid(-60, 20, 5);
  const std::vector<int> nus{1, 2, 4, 8, 16};
  const SweepResult s = sweep(traces, eps, nus);
  for (std::size_t i = 0; i < nus.size(); ++i) {
    for (std::size_t j = 0; j < eps.size(); ++j) {
      const auto& c = s.cell(i, j).matrix;
      if (j + 1 < eps.size()) {
        EXPECT_LE(c.tp + c.fp, s.cell(i, j + 1).matrix.tp + s.cell(i, j + 1).matrix.fp);
      }
      if (i + 1 < nus.size()) {
        EXPECT_GE(c.tp + c.fp, s.cell(i + 1, j).matrix.tp + s.cell(i + 1, j).matrix.fp);
      }
      EXPECT_EQ(c.tp + c.fn, s.cell(0, 0).matrix.tp + s.cell(0, 0).matrix.fn);
    }
  }
}

TEST(Grids, Defaults) {
  EXPECT_EQ(default_value_epsilons(), (std::vector<double>{-0.4, -0.35, -0.3, -0.25, -0.2, -0.15, -0.1, -0.05}));
  EXPECT_EQ(default_classifier_epsilons().front(), -0.95);
  EXPECT_EQ(default_classifier_epsilons().back(), -0.5);
  EXPECT_EQ(default_nus(), (std::vector<int>{5, 10, 15, 20, 25, 30}));
}

TEST(Heatmap, RowsAndBestMarker) {
  oracle::Rng rng(9);
  const auto traces = oracle::random_traces(rng, 50, 30);
  const SweepResult s = sweep(traces, {-0.3, -0.15, 0.0}, {1, 5, 10});
  const auto rows = lines(heatmap_csv(s));
  ASSERT_EQ(rows.size(), 10u);
  EXPECT_EQ(rows[0], kHeatmapHeader);
  int marked = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) marked += rows[i].back() == '1';
  EXPECT_EQ(marked, 1);
  EXPECT_EQ(rows[1 + *s.best].back(), '1');
  EXPECT_EQ(heatmap_csv(sweep(traces, {-0.3, -0.15, 0.0}, {1, 5, 10})), heatmap_csv(s));
}

TEST(Heatmap, EmptyPrecisionField) {
  // Nothing fires at this threshold: no predicted positives.
  const std::vector<EpisodeTrace> traces{trace("f", Outcome::failure(FailureMode::Collision), {0.5, 0.5}),
                                         trace("s", Outcome::success(), {0.5})};
  const auto rows = lines(heatmap_csv(sweep(traces, {-0.1}, {1})));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1], "-0.1,1,0,0,1,1,,0,,0.5,0");
}

TEST(Heatmap, ExportIsByteIdentical) {
  oracle::Rng rng(10);
  const SweepResult s = sweep(oracle::random_traces(rng, 30, 20), default_value_epsilons(), default_nus());
  const auto dir = std::filesystem::temp_directory_path() / "bcva_helpgate_test";
  std::filesystem::create_directories(dir);
  export_heatmap(s, dir / "a.csv");
  export_heatmap(s, dir / "b.csv");
  auto read = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  EXPECT_EQ(read(dir / "a.csv"), read(dir / "b.csv"));
  EXPECT_EQ(read(dir / "a.csv"), heatmap_csv(s));
  std::filesystem::remove_all(dir);
}

TEST(Format, ShortestRoundTrip) {
  EXPECT_EQ(format_number(0.86), "0.86");
  EXPECT_EQ(format_number(-0.15), "-0.15");
  EXPECT_EQ(format_number(1.0), "1");
  EXPECT_EQ(format_number(1.0 / 3.0), "0.3333333333333333");
}
