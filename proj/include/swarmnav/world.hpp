#pragma once

#include <Eigen/Geometry>

#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace swarmnav {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using UnitQuaternion = Eigen::Quaterniond;
using Rng = std::mt19937_64;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline double deg2rad(double deg) { return deg * kPi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / kPi; }

/// Thrown when an input violates an operation precondition.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when rejection sampling cannot place the requested obstacles.
class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Role : std::uint8_t { leader, follower };

struct UavState {
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  UnitQuaternion orientation = UnitQuaternion::Identity();
  Role role = Role::follower;
  double radius = 0.2;

  double altitude() const { return position.z(); }
};

struct Pillar {
  Vec2 center = Vec2::Zero();
  double radius = 0.5;
  double height = 6.0;
};

struct Bounds {
  Vec3 min = Vec3(-45.0, -45.0, 0.0);
  Vec3 max = Vec3(45.0, 45.0, 8.0);
};

struct ObstacleField {
  std::vector<Pillar> pillars;
  Bounds bounds;
};

struct ScenarioConfig {
  int n_followers = 4;
  std::optional<double> min_gap;   // none: obstacle-free
  int n_pillars = -1;              // <0: derived from min_gap and the map area
  double pillar_radius_min = 0.3;
  double pillar_radius_max = 0.6;
  double pillar_height = 6.0;
  double map_half_extent = 45.0;
  double spawn_clearing = 5.0;     // pillar surface clearance from every spawn cell
  double goal_radius = 30.0;
  double spawn_spacing = 1.6;
  double spawn_altitude = 1.5;
  double uav_radius = 0.2;
  double leader_speed_min = 0.6;
  double leader_speed_max = 1.0;
  std::uint64_t seed = 1;
  double episode_time_limit = 60.0;
  double dt = 0.1;
  bool randomize_yaw = true;
  int max_attempts_per_pillar = 200;

  void validate() const;
};

/// Altitude band and actuation bound shared by every UAV.
struct WorldLimits {
  double v_max = 2.0;
  double min_altitude = 0.3;
  double max_altitude = 4.0;
};

struct Scenario {
  ObstacleField field;
  std::vector<UavState> uavs;  // index 0 is the leader
  Vec3 spawn_center = Vec3::Zero();
  Vec3 goal = Vec3::Zero();
  double leader_speed = 1.0;
};

/// Rotation about +z by yaw (rad).
UnitQuaternion yaw_quaternion(double yaw);
double yaw_of(const UnitQuaternion& q);
/// z-component of the body up-vector expressed in the world frame.
double up_z(const UnitQuaternion& q);

/// Norm-clamps a velocity command to v_max.
Vec3 clamp_command(const Vec3& command, double v_max);

UavState step_kinematics(const UavState& state, const Vec3& command, double dt,
                         double v_max = WorldLimits{}.v_max);

Scenario generate_scenario(const ScenarioConfig& config, std::uint64_t seed);

struct CollisionReport {
  std::vector<std::pair<int, int>> uav_pairs;
  std::vector<int> obstacle_hits;

  bool any() const { return !uav_pairs.empty() || !obstacle_hits.empty(); }
};

CollisionReport check_collisions(std::span<const UavState> states, const ObstacleField& field);

/// Euclidean distance from p to one finite vertical cylinder's surface (negative inside).
double distance_to_pillar(const Vec3& p, const Pillar& pillar);
/// Distance to the nearest pillar surface; +infinity for an empty field.
double distance_to_obstacles(const Vec3& p, const ObstacleField& field);

Vec3 center_of_mass(std::span<const UavState> states);

}  // namespace swarmnav
