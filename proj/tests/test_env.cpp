#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>

#include "ptp/binary_io.hpp"
#include "ptp/env.hpp"
#include "ptp/error.hpp"

using namespace ptp;
using namespace ptp::env;

namespace {

constexpr Task kTasks[] = {Task::masked_goal, Task::count_toggle, Task::strategy_commit};

// Grid cells touched by a bilinear splat at (x, y), computed independently.
std::vector<std::size_t> splat_cells(double x, double y, std::size_t g) {
  std::vector<std::size_t> cells;
  const double gu = (x + 1) / 2 * g - 0.5, gv = (y + 1) / 2 * g - 0.5;
  for (int dv = 0; dv < 2; ++dv) {
    for (int du = 0; du < 2; ++du) {
      const long cu = static_cast<long>(std::floor(gu)) + du;
      const long cv = static_cast<long>(std::floor(gv)) + dv;
      if (cu >= 0 && cv >= 0 && cu < static_cast<long>(g) && cv < static_cast<long>(g)) {
        cells.push_back(static_cast<std::size_t>(cv) * g + static_cast<std::size_t>(cu));
      }
    }
  }
  return cells;
}

}  // namespace

TEST(Env, ResetIsDeterministic) {
  Environment env;
  for (Task task : kTasks) {
    auto [s1, o1] = env.reset(task, 42);
    auto [s2, o2] = env.reset(task, 42);
    EXPECT_EQ(s1, s2);
    EXPECT_EQ(o1, o2);
    EXPECT_EQ(o1.reveal, 1.0);
  }
}

TEST(Env, UnknownTaskRejected) {
  Environment env;
  EXPECT_THROW(env.reset(static_cast<Task>(7), 0), ConfigError);
  EXPECT_THROW(parse_task("juggle"), ConfigError);
  for (Task t : kTasks) EXPECT_EQ(parse_task(task_name(t)), t);
}

TEST(Env, MaskedGoalCellsVanishAfterRevealWindow) {
  Environment env;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto [s, o] = env.reset(Task::masked_goal, seed);
    const auto goal_cells = splat_cells(s.goal[0], s.goal[1], 16);
    double at_start = 0;
    for (auto c : goal_cells) at_start += o.grid[c];
    EXPECT_GT(at_start, 0.0);
    for (int t = 0; t < 3; ++t) s = env.step(s, Action{}).state;
    s.pos = {5.0, 5.0};  // keep the agent splat off the grid
    const Observation later = env.observe(s);
    for (auto c : goal_cells) EXPECT_EQ(later.grid[c], 0.0) << "seed " << seed;
    EXPECT_EQ(later.reveal, 0.0);
  }
}

TEST(Env, CountLatentIsUniform) {
  Environment env;
  std::map<int, int> counts;
  const int n = 3000;
  for (int seed = 0; seed < n; ++seed) counts[env.reset(Task::count_toggle, seed).first.count]++;
  ASSERT_EQ(counts.size(), 3u);
  for (int c : {2, 3, 4}) EXPECT_NEAR(counts[c] / double(n), 1.0 / 3.0, 0.05) << c;
}

TEST(Env, ZeroActionKeepsPositionAndClipsLargeActions) {
  Environment env;
  auto [s, o] = env.reset(Task::masked_goal, 3);
  auto r = env.step(s, Action{});
  EXPECT_EQ(r.state.pos, s.pos);
  EXPECT_EQ(r.state.timestep, 1);
  auto big = env.step(s, Action{{5.0, 5.0}, 9.0});
  EXPECT_DOUBLE_EQ(big.state.pos[0], s.pos[0] + 0.2);
  EXPECT_DOUBLE_EQ(big.state.pos[1], s.pos[1] + 0.2);
}

TEST(Env, DoneAtHorizonAndSteppingDoneEpisodeThrows) {
  Environment env;
  auto [s, o] = env.reset(Task::strategy_commit, 1);
  int steps = 0;
  while (!s.done) {
    s = env.step(s, Action{}).state;
    ++steps;
  }
  EXPECT_EQ(steps, 60);
  EXPECT_FALSE(s.success);
  EXPECT_THROW(env.step(s, Action{}), UsageError);
}

TEST(Env, LatentImmutableDuringEpisode) {
  Environment env;
  Rng rng(0);
  for (Task task : kTasks) {
    auto [s, o] = env.reset(task, 17);
    const auto goal = s.goal;
    const int count = s.count, strategy = s.strategy;
    while (!s.done) {
      s = env.step(s, env.expert_action(s, 0.05, rng)).state;
      EXPECT_EQ(s.goal, goal);
      EXPECT_EQ(s.count, count);
      EXPECT_EQ(s.strategy, strategy);
    }
  }
}

TEST(Expert, NoiselessAtGoalIsStill) {
  Environment env;
  Rng rng(1);
  auto [s, o] = env.reset(Task::masked_goal, 5);
  s.visited_center = true;
  s.center_steps = 10;
  s.pos = s.goal;
  const Action a = env.expert_action(s, 0.0, rng);
  EXPECT_EQ(a.displacement[0], 0.0);
  EXPECT_EQ(a.displacement[1], 0.0);
}

TEST(Expert, NoiselessPointsTowardWaypoint) {
  Environment env;
  Rng rng(1);
  auto [s, o] = env.reset(Task::masked_goal, 5);
  s.pos = {0.0, 0.0};
  s.visited_center = true;
  s.center_steps = 10;
  s.goal = {0.5, 0.0};
  const Action a = env.expert_action(s, 0.0, rng);
  // gain times 0.5 exceeds the 0.2 bound, so the step saturates
  EXPECT_DOUBLE_EQ(a.displacement[0], std::min(0.2, env.config().expert_gain * 0.5));
  EXPECT_EQ(a.displacement[1], 0.0);
  s.pos = {0.4, 0.0};
  const Action near = env.expert_action(s, 0.0, rng);
  EXPECT_DOUBLE_EQ(near.displacement[0], env.config().expert_gain * 0.1);
}

TEST(Expert, NoiseIsUnbiased) {
  Environment env;
  auto [s, o] = env.reset(Task::masked_goal, 2);
  s.pos = {0.1, -0.2};  // close enough that the controller output is unclipped
  Rng rng(9);
  const Action clean = env.expert_action(s, 0.0, rng);
  const double sigma = 0.02;
  const int n = 10000;
  double mx = 0, my = 0;
  for (int i = 0; i < n; ++i) {
    const Action a = env.expert_action(s, sigma, rng);
    mx += a.displacement[0];
    my += a.displacement[1];
  }
  EXPECT_NEAR(mx / n, clean.displacement[0], 3 * sigma / 100);
  EXPECT_NEAR(my / n, clean.displacement[1], 3 * sigma / 100);
}

TEST(Expert, SucceedsOnNearlyEverySeed) {
  Environment env;
  for (Task task : kTasks) {
    int ok = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      ok += run_expert_episode(env, task, seed, 0.02).success ? 1 : 0;
    }
    EXPECT_GE(ok, 990) << task_name(task);
  }
}

TEST(Demos, ExactCountAllSuccessful) {
  const auto ds = generate_demos(Task::count_toggle, 5, 1, 0.02);
  ASSERT_EQ(ds.trajectories.size(), 5u);
  for (const auto& t : ds.trajectories) {
    EXPECT_TRUE(t.success);
    EXPECT_NO_THROW(t.validate());
    EXPECT_EQ(t.actions[0], Action{});
  }
  EXPECT_EQ(ds.meta.attempts, 5u + ds.meta.failures);
}

TEST(Demos, HopelessNoiseAborts) {
  EXPECT_THROW(generate_demos(Task::strategy_commit, 20, 0, 5.0), NumericalError);
}

TEST(Demos, RegenerationIsByteIdentical) {
  const auto dir = std::filesystem::temp_directory_path() / "ptp_demo_regen";
  std::filesystem::remove_all(dir);
  save_dataset(generate_demos(Task::masked_goal, 4, 77, 0.02), (dir / "a").string());
  save_dataset(generate_demos(Task::masked_goal, 4, 77, 0.02), (dir / "b").string());
  for (const auto& e : std::filesystem::directory_iterator(dir / "a")) {
    EXPECT_EQ(io::read_file(e.path().string()),
              io::read_file((dir / "b" / e.path().filename()).string()))
        << e.path();
  }
  const auto back = load_dataset((dir / "a").string());
  const auto orig = generate_demos(Task::masked_goal, 4, 77, 0.02);
  ASSERT_EQ(back.trajectories.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(back.trajectories[i].observations, orig.trajectories[i].observations);
    EXPECT_EQ(back.trajectories[i].actions, orig.trajectories[i].actions);
    EXPECT_EQ(back.trajectories[i].states, orig.trajectories[i].states);
  }
  std::filesystem::remove_all(dir);
}

TEST(Demos, GoalNeverVisibleAfterRevealWindow) {
  const auto ds = generate_demos(Task::masked_goal, 30, 4, 0.02);
  for (const auto& traj : ds.trajectories) {
    const auto& goal = traj.states[0].goal;
    for (std::size_t t = 2; t < traj.size(); ++t) {
      // Rendering without the agent must be blank once the goal is hidden.
      EnvState s = traj.states[t];
      s.pos = {5.0, 5.0};
      const Observation o = Environment().observe(s);
      for (auto c : splat_cells(goal[0], goal[1], 16)) EXPECT_EQ(o.grid[c], 0.0);
    }
  }
}

// Two MaskedGoal episodes with different goals but the same agent path are
// indistinguishable once the reveal window has passed.
TEST(Env, HistoryIsRequiredToRecoverGoal) {
  Environment env;
  auto [a, oa] = env.reset(Task::masked_goal, 0);
  EnvState b = a;
  b.goal = {-a.goal[0], -a.goal[1]};
  ASSERT_NE(a.goal, b.goal);
  EXPECT_NE(env.observe(a), env.observe(b));
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const Action act{{0.05 * std::sin(t), 0.04}, t % 3 == 0 ? 1.0 : 0.0};
    a = env.step(a, act).state;
    b = env.step(b, act).state;
    if (a.timestep >= 2) {
      EXPECT_EQ(env.observe(a), env.observe(b)) << "t=" << a.timestep;
    }
  }
}

TEST(Env, StateFlattenRoundTrip) {
  Environment env;
  Rng rng(2);
  for (Task task : kTasks) {
    auto [s, o] = env.reset(task, 99);
    for (int i = 0; i < 7; ++i) s = env.step(s, env.expert_action(s, 0.02, rng)).state;
    EXPECT_EQ(EnvState::unflatten(s.flatten()), s);
  }
}

TEST(Env, CountTogglePressesCountRisingEdges) {
  Environment env;
  auto [s, o] = env.reset(Task::count_toggle, 0);
  const Action press{{0, 0}, 1.0}, hold = press, release{};
  s = env.step(s, press).state;
  s = env.step(s, hold).state;
  EXPECT_EQ(s.presses, 1);
  s = env.step(s, release).state;
  s = env.step(s, press).state;
  EXPECT_EQ(s.presses, 2);
}

TEST(Env, StrategyCommitWrongCorridorFails) {
  Environment env;
  auto [s, o] = env.reset(Task::strategy_commit, 3);
  // Walk straight through the other corridor, then to the goal.
  const std::array<std::array<double, 2>, 3> path{{{-0.6 * s.strategy, -0.4},
                                                    {-0.6 * s.strategy, 0.4},
                                                    {0.0, 0.8}}};
  for (const auto& wp : path) {
    while (!s.done && std::hypot(wp[0] - s.pos[0], wp[1] - s.pos[1]) > 1e-9) {
      const double dx = std::clamp(wp[0] - s.pos[0], -0.1, 0.1);
      const double dy = std::clamp(wp[1] - s.pos[1], -0.1, 0.1);
      s = env.step(s, Action{{dx, dy}, 0}).state;
    }
  }
  EXPECT_TRUE(s.hit_other);
  EXPECT_FALSE(s.success);
}
