#pragma once

#include "swarmnav/env.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace swarmnav {

struct TrajectoryFrame {
  double time = 0.0;
  std::vector<Vec3> positions;   // index 0 leader
  std::vector<Vec3> velocities;
  std::vector<Vec3> detections;  // map-frame obstacle detection points of all UAVs
};

struct Trajectory {
  std::uint64_t seed = 0;
  double dt = 0.1;
  std::vector<TrajectoryFrame> frames;  // frame 0 is the spawn state; a failing final state is not recorded
  Verdict verdict = Verdict::running;
  bool mission_complete = false;
  bool success = false;
  Vec3 leader_start = Vec3::Zero();
  Vec3 goal = Vec3::Zero();
  std::vector<RewardBreakdown> reward_sums;  // per follower, summed over the episode
  int steps = 0;                             // env steps taken, including a failing last one
  std::string fault;

  int length() const { return static_cast<int>(frames.size()); }
  int n_uavs() const { return frames.empty() ? 0 : static_cast<int>(frames.front().positions.size()); }
  /// Per-step reward averaged over followers and steps.
  RewardBreakdown mean_reward() const;
};

/// Maps every follower's view to a velocity command. One instance serves one episode at a time.
class FollowerController {
 public:
  virtual ~FollowerController() = default;
  virtual void reset(std::uint64_t /*seed*/) {}
  virtual std::vector<Vec3> act(std::span<const AgentView> views) = 0;
};

using ControllerFactory = std::function<std::unique_ptr<FollowerController>()>;

struct BaselineParams {
  double k_coh = 0.6;
  double d_coh = 1.5;
  double k_sep = 1.5;
  double d_sep = 2.4;
  double k_rep = 1.0;
  double rep_radius = 2.5;
  double k_alt = 1.0;
  double alt_deadband = 0.1;
  double v_max = 2.0;

  void validate() const;
};

/// Cohesion beyond d_coh, separation within d_sep, APF repulsion and altitude hold toward the
/// neighbours' mean height. Inputs are relative to the ego UAV, map frame.
Vec3 baseline_command(std::span<const RelativeNeighbor> neighbors, std::span<const Vec3> obstacle_offsets,
                      const BaselineParams& params = {});

class BaselineController : public FollowerController {
 public:
  explicit BaselineController(BaselineParams params = {}) : params_(params) {}
  std::vector<Vec3> act(std::span<const AgentView> views) override;

 private:
  BaselineParams params_;
};

/// Followers stay put. Useful as a floor in comparisons.
class HoverController : public FollowerController {
 public:
  std::vector<Vec3> act(std::span<const AgentView> views) override { return std::vector<Vec3>(views.size(), Vec3::Zero()); }
};

Trajectory run_episode(FollowerController& controller, const EnvConfig& config, std::uint64_t seed);

struct MissionProgress {
  double percent = 0.0;
  bool degenerate = false;  // start equals goal; reported as 100
};

double metric_sr(std::span<const Trajectory> trials);
MissionProgress metric_mp(const Trajectory& t);
double metric_fr(const Trajectory& t);
double metric_ms(const Trajectory& t);
/// Steps where any speed or the mean velocity is below 1e-6 are skipped; empty when all are.
std::optional<double> metric_al(const Trajectory& t);
/// Empty when no frame carries detection points.
std::optional<double> metric_mdo(const Trajectory& t);

struct TrialMetrics {
  std::uint64_t seed = 0;
  bool success = false;
  Verdict verdict = Verdict::running;
  int length = 0;
  MissionProgress mp;
  double fr = 0.0;
  double ms = 0.0;
  std::optional<double> al;
  std::optional<double> mdo;
  double mean_reward = 0.0;
  double mean_flocking = 0.0;
};

TrialMetrics trial_metrics(const Trajectory& t);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  int count = 0;
};

/// Population statistics over the values present.
MeanStd mean_std(std::span<const double> values);

struct MetricsReport {
  double sr = 0.0;
  MeanStd mp, fr, ms, al, mdo;
  int trials = 0;
};

MetricsReport aggregate(std::span<const TrialMetrics> trials);

struct BatchResult {
  MetricsReport report;
  std::vector<TrialMetrics> trials;
  std::vector<Trajectory> trajectories;  // filled when requested
};

/// Trials run on seeds base_seed, base_seed+1, ...; results are ordered by seed whatever the thread count.
BatchResult batch_evaluate(const ControllerFactory& factory, const EnvConfig& config, int n_trials,
                           std::uint64_t base_seed, int threads = 1, bool keep_trajectories = false);
BatchResult batch_evaluate(const ControllerFactory& factory, const EnvConfig& config,
                           std::span<const std::uint64_t> seeds, int threads = 1, bool keep_trajectories = false);

/// metric,mean,std,count rows for SR, MP, FR, MS, AL, MDO; AL/MDO rows read "-" when undefined.
void write_metrics_csv(std::ostream& out, const MetricsReport& report, const std::string& label = "");
void write_trials_csv(std::ostream& out, std::span<const TrialMetrics> trials);

/// One JSON object per line: a header line, then one line per frame.
void write_trajectory_jsonl(std::ostream& out, const Trajectory& t);
Trajectory read_trajectory_jsonl(std::istream& in);
/// "SWTR", u32 version, then little-endian float64 payload.
void write_trajectory_binary(std::ostream& out, const Trajectory& t);
Trajectory read_trajectory_binary(std::istream& in);

}  // namespace swarmnav
