#include "swarmnav/world.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace swarmnav {

void ScenarioConfig::validate() const {
  auto fail = [](const std::string& what) { throw ValidationError("scenario: " + what); };
  if (n_followers < 1) fail("n_followers must be >= 1");
  if (!(dt > 0.0)) fail("dt must be > 0");
  if (leader_speed_min > leader_speed_max) fail("leader_speed_min > leader_speed_max");
  if (leader_speed_min < 0.0) fail("leader speeds must be non-negative");
  if (!(goal_radius >= 0.0)) fail("goal_radius must be >= 0");
  if (!(spawn_spacing > 0.0)) fail("spawn_spacing must be > 0");
  if (!(episode_time_limit > 0.0)) fail("episode_time_limit must be > 0");
  if (min_gap && *min_gap < 0.0) fail("min_gap must be >= 0");
  if (pillar_radius_min <= 0.0 || pillar_radius_min > pillar_radius_max) fail("bad pillar radius range");
}

UnitQuaternion yaw_quaternion(double yaw) {
  return UnitQuaternion(Eigen::AngleAxisd(yaw, Vec3::UnitZ()));
}

double yaw_of(const UnitQuaternion& q) {
  const Vec3 forward = q * Vec3::UnitX();
  return std::atan2(forward.y(), forward.x());
}

double up_z(const UnitQuaternion& q) { return (q * Vec3::UnitZ()).z(); }

Vec3 clamp_command(const Vec3& command, double v_max) {
  const double n = command.norm();
  if (n > v_max && n > 0.0) return command * (v_max / n);
  return command;
}

UavState step_kinematics(const UavState& state, const Vec3& command, double dt, double v_max) {
  if (!(dt > 0.0)) throw ValidationError("step_kinematics: dt must be > 0");
  if (!command.allFinite()) throw ValidationError("step_kinematics: non-finite command");
  UavState next = state;
  const Vec3 v = clamp_command(command, v_max);
  next.position = state.position + v * dt;
  next.velocity = v;
  const double horizontal = std::hypot(v.x(), v.y());
  if (horizontal > 0.05) {
    next.orientation = yaw_quaternion(std::atan2(v.y(), v.x()));
  }
  next.orientation.normalize();
  return next;
}

namespace {

std::vector<Vec3> spawn_cells(int n_uavs, double spacing, const Vec3& center) {
  const int side = std::max(3, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n_uavs)))));
  std::vector<Vec3> cells;
  cells.reserve(static_cast<std::size_t>(side * side));
  const double offset = 0.5 * (side - 1);
  for (int i = 0; i < side; ++i) {
    for (int j = 0; j < side; ++j) {
      cells.emplace_back(center.x() + (i - offset) * spacing, center.y() + (j - offset) * spacing,
                         center.z());
    }
  }
  return cells;
}

int auto_pillar_count(const ScenarioConfig& c) {
  const double side = 2.0 * c.map_half_extent;
  const double exclusion = 0.5 * c.min_gap.value_or(0.0) + c.pillar_radius_max;
  return static_cast<int>(std::floor(0.3 * side * side / (kPi * exclusion * exclusion)));
}

}  // namespace

Scenario generate_scenario(const ScenarioConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Scenario sc;
  sc.spawn_center = Vec3(0.0, 0.0, config.spawn_altitude);
  const int n_uavs = config.n_followers + 1;
  auto cells = spawn_cells(n_uavs, config.spawn_spacing, sc.spawn_center);
  std::shuffle(cells.begin(), cells.end(), rng);

  sc.uavs.reserve(static_cast<std::size_t>(n_uavs));
  for (int i = 0; i < n_uavs; ++i) {
    UavState s;
    s.position = cells[static_cast<std::size_t>(i)];
    s.role = i == 0 ? Role::leader : Role::follower;
    s.radius = config.uav_radius;
    const double yaw = config.randomize_yaw ? (2.0 * unit(rng) - 1.0) * kPi : 0.0;
    s.orientation = yaw_quaternion(yaw);
    sc.uavs.push_back(s);
  }

  const double goal_angle = 2.0 * kPi * unit(rng);
  sc.goal = sc.spawn_center +
            config.goal_radius * Vec3(std::cos(goal_angle), std::sin(goal_angle), 0.0);
  sc.leader_speed =
      config.leader_speed_min + (config.leader_speed_max - config.leader_speed_min) * unit(rng);

  const double h = config.map_half_extent;
  sc.field.bounds.min = Vec3(-h, -h, 0.0);
  sc.field.bounds.max = Vec3(h, h, config.pillar_height + 2.0);

  if (config.min_gap) {
    const double gap = *config.min_gap;
    const int target = config.n_pillars >= 0 ? config.n_pillars : auto_pillar_count(config);
    const long budget = static_cast<long>(config.max_attempts_per_pillar) * std::max(target, 1);
    long attempts = 0;
    while (static_cast<int>(sc.field.pillars.size()) < target) {
      if (++attempts > budget) {
        std::ostringstream msg;
        msg << "pillar placement exhausted " << budget << " attempts after "
            << sc.field.pillars.size() << "/" << target << " pillars (min_gap " << gap << ")";
        throw ScenarioError(msg.str());
      }
      Pillar p;
      p.radius = config.pillar_radius_min +
                 (config.pillar_radius_max - config.pillar_radius_min) * unit(rng);
      p.height = config.pillar_height;
      p.center = Vec2((2.0 * unit(rng) - 1.0) * (h - p.radius), (2.0 * unit(rng) - 1.0) * (h - p.radius));
      bool ok = true;
      for (const auto& cell : cells) {
        if ((cell.head<2>() - p.center).norm() - p.radius < config.spawn_clearing) {
          ok = false;
          break;
        }
      }
      if (ok && (sc.goal.head<2>() - p.center).norm() - p.radius < 2.0) ok = false;
      if (ok) {
        for (const auto& q : sc.field.pillars) {
          if ((q.center - p.center).norm() - q.radius - p.radius < gap) {
            ok = false;
            break;
          }
        }
      }
      if (ok) sc.field.pillars.push_back(p);
    }
  }
  return sc;
}

CollisionReport check_collisions(std::span<const UavState> states, const ObstacleField& field) {
  CollisionReport report;
  for (std::size_t i = 0; i < states.size(); ++i) {
    for (std::size_t j = i + 1; j < states.size(); ++j) {
      const double d = (states[i].position - states[j].position).norm();
      if (d < states[i].radius + states[j].radius) {
        report.uav_pairs.emplace_back(static_cast<int>(i), static_cast<int>(j));
      }
    }
    if (distance_to_obstacles(states[i].position, field) < states[i].radius) {
      report.obstacle_hits.push_back(static_cast<int>(i));
    }
  }
  return report;
}

double distance_to_pillar(const Vec3& p, const Pillar& pillar) {
  const double rho = (p.head<2>() - pillar.center).norm();
  const double z = p.z();
  const double dr = rho - pillar.radius;
  const double dz = z > pillar.height ? z - pillar.height : (z < 0.0 ? -z : 0.0);
  if (dr <= 0.0 && dz == 0.0) {
    return -std::min({-dr, pillar.height - z, z});
  }
  if (dr <= 0.0) return dz;
  if (dz == 0.0) return dr;
  return std::hypot(dr, dz);
}

double distance_to_obstacles(const Vec3& p, const ObstacleField& field) {
  double best = kInf;
  for (const auto& pillar : field.pillars) best = std::min(best, distance_to_pillar(p, pillar));
  return best;
}

Vec3 center_of_mass(std::span<const UavState> states) {
  Vec3 c = Vec3::Zero();
  if (states.empty()) return c;
  for (const auto& s : states) c += s.position;
  return c / static_cast<double>(states.size());
}

}  // namespace swarmnav
