#pragma once

#include "swarmnav/world.hpp"

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace swarmnav {

/// Which reward groups contribute to the total; a disabled group has weight 0.
struct RewardToggles {
  bool flocking = true;
  bool obstacle = true;
  bool stable = true;
  bool perception = true;
  bool uniform_weights = false;  // every group weight set to 1
};

struct RewardParams {
  double w_flock = 1.5;
  double w_obstacle = 2.0;
  double w_stable = 1.0;
  double w_perception = 1.0;
  double d_sep = 1.6;
  double d_coh = 2.0;
  double r_uav = 0.2;
  double d_prox = 3.0;
  double theta_threshold_deg = 20.0;
  double alpha = 0.1;
  double beta = 0.1;
  double h_recovery = 1.0;
  double collision_penalty = -10.0;
  RewardToggles toggles;

  void validate() const;
  /// Weights after toggles, in the order flock, obstacle, stable, perception.
  struct Weights {
    double flock, obstacle, stable, perception;
  };
  Weights weights() const;
};

struct RewardBreakdown {
  double separation = 0.0;
  double cohesion = 0.0;
  double proximity = 0.0;
  double direction = 0.0;
  double altitude = 0.0;
  double attitude = 0.0;
  double visibility = 0.0;
  double recovery = 0.0;
  double collision = 0.0;
  double total = 0.0;

  /// Recomputes `total` from the terms.
  void compose(const RewardParams& params);
  double flocking() const { return separation + cohesion; }
};

struct FlockingTerms {
  double separation = 0.0;
  double cohesion = 0.0;
};
/// neighbors: truth positions of every other UAV; com over all UAVs including the leader.
FlockingTerms flocking_terms(const Vec3& ego, std::span<const Vec3> neighbors, const Vec3& com,
                             const RewardParams& params);

struct ObstacleTerms {
  double proximity = 0.0;
  double direction = 0.0;
};
/// points: obstacle returns in the map frame; ranges are measured from the ego position.
ObstacleTerms obstacle_terms(const Vec3& ego, const Vec3& ego_velocity, std::span<const Vec3> points,
                             const RewardParams& params);

struct StabilityTerms {
  double altitude = 0.0;
  double attitude = 0.0;
};
StabilityTerms stability_terms(double ego_altitude, double leader_altitude, double up_z, const RewardParams& params);

struct PerceptionTerms {
  double visibility = 0.0;
  double recovery = 0.0;
};
PerceptionTerms perception_terms(int perceived, int universe, double ego_altitude, const RewardParams& params);

enum class Verdict {
  running,
  collision_uav,
  collision_obstacle,
  below_min_alt,
  above_max_alt,
  leader_lost,
  goal_reached,
  truncated,
  controller_fault,
};

std::string to_string(Verdict v);
std::optional<Verdict> verdict_from_string(const std::string& s);
/// Collision, altitude, leader-lost and fault verdicts.
bool is_failure(Verdict v);

enum class EpisodeMode { train, eval };

/// Tracks how long every follower has simultaneously lacked the leader in its perceived set.
class TerminationMonitor {
 public:
  explicit TerminationMonitor(double lost_window = 3.0) : window_(lost_window) {}

  void reset() { lost_since_.reset(); }
  /// Returns true once the leader has been out of every follower's perception for longer than the window.
  bool update(double time, bool any_follower_sees_leader);
  double window() const { return window_; }

 private:
  double window_;
  std::optional<double> lost_since_;
};

struct TerminationInput {
  std::span<const UavState> uavs;
  const ObstacleField* field = nullptr;
  WorldLimits limits;
  double time = 0.0;
  double time_limit = 60.0;
  EpisodeMode mode = EpisodeMode::train;
  bool leader_lost = false;    // from TerminationMonitor
  bool goal_reached = false;
};

/// First matching condition in the order of the Verdict enumeration wins.
Verdict terminate(const TerminationInput& input);

/// Full per-follower breakdown from simulator truth.
struct RewardContext {
  std::span<const UavState> uavs;  // index 0 leader
  int ego = 1;
  std::span<const Vec3> obstacle_points;  // map frame
  int perceived = 0;
  int universe = 0;
  bool collided = false;
};
RewardBreakdown compute_reward(const RewardContext& ctx, const RewardParams& params);

void write_breakdown_csv_header(std::ostream& out);
void write_breakdown_csv_row(std::ostream& out, int step, int uav, const RewardBreakdown& b);

}  // namespace swarmnav
