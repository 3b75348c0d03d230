#pragma once

#include "swarmnav/world.hpp"

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace swarmnav {

struct WaypointMission {
  std::vector<Vec3> waypoints;
  int active_index = 0;
  double arrival_tolerance = 1.0;
  double cruise_speed = 1.0;
  bool complete = false;

  void validate() const;
  bool has_target() const { return !complete && !waypoints.empty(); }
  const Vec3& target() const { return waypoints[static_cast<std::size_t>(active_index)]; }
};

struct RrtParams {
  double window = 10.0;  // sampling radius about the start
  double step = 0.5;
  int max_nodes = 2000;
  double goal_bias = 0.1;
  double r_uav = 0.2;
  double margin = 0.3;

  double clearance() const { return r_uav + margin; }
};

struct ApfParams {
  double k_att = 1.0;
  double k_rep = 0.5;
  double rep_radius = 3.0;
  double lookahead = 1.5;
  double vortex_gain = 0.5;     // tangential share of the repulsion, breaks head-on symmetry
  double altitude_gain = 1.0;   // 1/s
  double max_climb = 0.5;       // m/s

  void validate() const;
};

struct PlanResult {
  std::vector<Vec3> path;
  bool fallback = false;
  std::string warning;
};

/// Horizontal RRT at the start altitude with shortcut smoothing. Obstacle points are projected
/// onto the plane. If the direct segment is free it is returned as is.
PlanResult plan_local_path(const Vec3& start, const Vec3& goal, std::span<const Vec3> obstacle_points,
                           const RrtParams& params, Rng& rng);

/// True when any segment of the polyline passes within `clearance` of an obstacle point (horizontal).
bool path_blocked(std::span<const Vec3> path, std::span<const Vec3> obstacle_points, double clearance);

/// Point `distance` metres further along the polyline from the projection of p.
Vec3 lookahead_point(std::span<const Vec3> path, const Vec3& p, double distance);

Vec3 apf_repulsion(const Vec3& p, std::span<const Vec3> obstacle_points, const ApfParams& params);

/// Horizontal APF combination scaled by cruise_speed / max(|F|, k_att), plus altitude hold.
/// The result never exceeds cruise_speed in norm.
Vec3 apf_command(const UavState& state, std::span<const Vec3> path, std::span<const Vec3> obstacle_points,
                 const ApfParams& params, double cruise_speed, double hold_altitude);

WaypointMission advance_mission(const UavState& state, WaypointMission mission);

/// Replans at a fixed period, when the waypoint changes, or when the current path becomes blocked.
class LeaderPlanner {
 public:
  LeaderPlanner(RrtParams rrt = {}, ApfParams apf = {}, double replan_period = 1.0);

  void reset();
  Vec3 command(const UavState& state, WaypointMission& mission, std::span<const Vec3> obstacle_points, double time,
               Rng& rng);

  const std::vector<Vec3>& path() const { return path_; }
  int replans() const { return replans_; }
  int fallbacks() const { return fallbacks_; }
  const std::string& last_warning() const { return last_warning_; }

 private:
  RrtParams rrt_;
  ApfParams apf_;
  double period_;
  std::vector<Vec3> path_;
  double last_plan_ = -1e300;
  int planned_for_ = -1;
  double hold_altitude_ = 0.0;
  bool have_altitude_ = false;
  int replans_ = 0;
  int fallbacks_ = 0;
  std::string last_warning_;
};

/// {"waypoints": [[x,y,z], ...], "arrival_tolerance": t, "cruise_speed": v}
WaypointMission read_mission_json(std::istream& in);
void write_mission_json(std::ostream& out, const WaypointMission& mission);
/// {"path": [[x,y,z], ...]}
void write_path_json(std::ostream& out, std::span<const Vec3> path);

}  // namespace swarmnav
