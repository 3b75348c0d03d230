#pragma once

#include "swarmnav/leader_planner.hpp"
#include "swarmnav/lidar.hpp"
#include "swarmnav/observation.hpp"
#include "swarmnav/perception.hpp"
#include "swarmnav/reward.hpp"
#include "swarmnav/world.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace swarmnav {

/// truth: simulator neighbor states with Gaussian noise; pipeline: the LiDAR tracker.
enum class PerceptionMode : std::uint8_t { truth, pipeline };

std::string to_string(PerceptionMode mode);
PerceptionMode perception_mode_from_string(const std::string& name);
std::string to_string(EpisodeMode mode);
EpisodeMode episode_mode_from_string(const std::string& name);

struct EnvConfig {
  ScenarioConfig scenario;
  WorldLimits limits;
  LidarParams lidar;
  FilterParams filter;
  ClusterParams cluster;
  EkfParams ekf;
  TruthNoise truth_noise;
  RewardParams reward;
  RrtParams rrt;
  ApfParams apf;
  double replan_period = 1.0;
  PerceptionMode perception = PerceptionMode::truth;
  EpisodeMode mode = EpisodeMode::train;
  double ego_delay = 0.1;
  double lidar_delay = 0.1;
  double neighbor_delay = 0.2;
  int max_neighbors = kDefaultNeighborSlots;
  double leader_lost_window = 3.0;
  double leader_match_radius = 0.5;  // pipeline mode: a track this close to the leader counts as seeing it
  double follow_radius = 10.0;      // success needs every follower this close to the swarm center
  bool empty_mission = false;       // leader hovers for the whole episode

  void validate() const;
};

/// What one follower's controller gets at time t; all of it has passed through the delay lines.
struct AgentView {
  Observation observation;
  std::vector<RelativeNeighbor> neighbors;  // map frame, unsorted
  std::vector<Vec3> obstacle_offsets;       // map-frame offsets of the cell-nearest obstacle returns
  std::optional<UavState> ego;
};

struct StepResult {
  std::vector<RewardBreakdown> rewards;  // per follower
  Verdict verdict = Verdict::running;
  bool terminated = false;  // failure: no bootstrap
  bool truncated = false;   // goal reached or time limit: bootstrap from the next value
  std::string fault;

  bool done() const { return terminated || truncated; }
};

/// One multi-UAV episode. UAV 0 is the leader driven by the planner; the rest take commands.
class SwarmEnv {
 public:
  explicit SwarmEnv(EnvConfig config);

  void reset(std::uint64_t seed);
  StepResult step(std::span<const Vec3> follower_commands);

  const EnvConfig& config() const { return config_; }
  int n_followers() const { return static_cast<int>(uavs_.size()) - 1; }
  int n_uavs() const { return static_cast<int>(uavs_.size()); }
  double time() const { return time_; }
  int steps() const { return steps_; }
  const Scenario& scenario() const { return scenario_; }
  const std::vector<UavState>& uavs() const { return uavs_; }
  const WaypointMission& mission() const { return mission_; }
  const LeaderPlanner& planner() const { return planner_; }
  const std::vector<AgentView>& views() const { return views_; }
  /// Map-frame cell-nearest obstacle returns of every UAV's latest scan.
  const std::vector<Vec3>& detection_points() const { return detections_; }
  const std::vector<PointCloud>& last_clouds() const { return clouds_; }
  const NeighborTracker& tracker(int uav) const { return trackers_[static_cast<std::size_t>(uav)]; }
  /// Current (undelayed) perceived neighbor count per UAV.
  const std::vector<int>& perceived_counts() const { return perceived_; }
  Verdict verdict() const { return verdict_; }
  bool finished() const { return verdict_ != Verdict::running; }
  /// Mission complete, no failure verdict, every follower within follow_radius of the swarm center.
  bool success() const;

 private:
  void sense();
  void build_views();

  EnvConfig config_;
  LidarSensor lidar_;
  LidarSensor obstacle_lidar_;
  Rng rng_;
  Scenario scenario_;
  std::vector<UavState> uavs_;
  WaypointMission mission_;
  LeaderPlanner planner_;
  TerminationMonitor monitor_;
  std::vector<NeighborTracker> trackers_;
  std::vector<DelayLine<UavState>> ego_lines_;
  std::vector<DelayLine<std::vector<RelativeNeighbor>>> neighbor_lines_;
  std::vector<DelayLine<PointCloud>> cloud_lines_;
  std::vector<PointCloud> clouds_;
  std::vector<std::vector<Vec3>> cell_points_;  // per UAV, map frame
  std::vector<Vec3> detections_;
  std::vector<int> perceived_;
  bool leader_seen_ = false;
  std::vector<AgentView> views_;
  double time_ = 0.0;
  int steps_ = 0;
  Verdict verdict_ = Verdict::running;
};

}  // namespace swarmnav
