#include "swarmnav/reward.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <ostream>

namespace swarmnav {

void RewardParams::validate() const {
  if (!(d_sep > 2.0 * r_uav)) throw ValidationError("reward: d_sep must exceed 2 r_uav");
  if (!(d_prox > r_uav)) throw ValidationError("reward: d_prox must exceed r_uav");
  if (w_flock < 0 || w_obstacle < 0 || w_stable < 0 || w_perception < 0) {
    throw ValidationError("reward: weights must be non-negative");
  }
  if (!(alpha > 0.0) || !(beta > 0.0)) throw ValidationError("reward: alpha and beta must be positive");
}

RewardParams::Weights RewardParams::weights() const {
  Weights w{w_flock, w_obstacle, w_stable, w_perception};
  if (toggles.uniform_weights) w = {1.0, 1.0, 1.0, 1.0};
  if (!toggles.flocking) w.flock = 0.0;
  if (!toggles.obstacle) w.obstacle = 0.0;
  if (!toggles.stable) w.stable = 0.0;
  if (!toggles.perception) w.perception = 0.0;
  return w;
}

void RewardBreakdown::compose(const RewardParams& params) {
  const auto w = params.weights();
  total = w.flock * (separation + cohesion) + w.obstacle * (proximity + direction) +
          w.stable * (altitude + attitude) + w.perception * (visibility + recovery) + collision;
}

FlockingTerms flocking_terms(const Vec3& ego, std::span<const Vec3> neighbors, const Vec3& com,
                             const RewardParams& params) {
  FlockingTerms t;
  const double denom = params.d_sep - 2.0 * params.r_uav;
  for (const Vec3& n : neighbors) {
    const double d = (n - ego).norm();
    if (d < params.d_sep) t.separation -= (params.d_sep - d) / denom;
  }
  const double dc = (ego - com).norm();
  if (dc > params.d_coh) t.cohesion = -(dc - params.d_coh);
  return t;
}

ObstacleTerms obstacle_terms(const Vec3& ego, const Vec3& ego_velocity, std::span<const Vec3> points,
                             const RewardParams& params) {
  ObstacleTerms t;
  if (points.empty()) return t;
  double dmin = kInf;
  const double speed = ego_velocity.norm();
  const double cos_threshold = std::cos(deg2rad(params.theta_threshold_deg));
  for (const Vec3& p : points) {
    const Vec3 ray = p - ego;
    const double d = ray.norm();
    dmin = std::min(dmin, d);
    if (speed <= 0.0 || d <= 0.0 || d >= params.d_prox) continue;
    const double c = ray.dot(ego_velocity) / (d * speed);
    if (c > cos_threshold) t.direction -= (params.d_prox - d) * speed;
  }
  if (dmin < params.d_prox) {
    const double ratio = (params.d_prox - dmin) / (params.d_prox - params.r_uav);
    t.proximity = -std::pow(ratio, 4);
  }
  return t;
}

StabilityTerms stability_terms(double ego_altitude, double leader_altitude, double up_z, const RewardParams& params) {
  const double a = (ego_altitude - leader_altitude) / params.alpha;
  const double b = (up_z - 1.0) / params.beta;
  return {std::exp(-a * a), std::exp(-b * b)};
}

PerceptionTerms perception_terms(int perceived, int universe, double ego_altitude, const RewardParams& params) {
  PerceptionTerms t;
  t.visibility = universe >= 1 ? static_cast<double>(perceived) / static_cast<double>(universe) : 1.0;
  if (perceived == 0) t.recovery = -std::abs(ego_altitude - params.h_recovery);
  return t;
}

std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::running: return "running";
    case Verdict::collision_uav: return "collision_uav";
    case Verdict::collision_obstacle: return "collision_obstacle";
    case Verdict::below_min_alt: return "below_min_alt";
    case Verdict::above_max_alt: return "above_max_alt";
    case Verdict::leader_lost: return "leader_lost";
    case Verdict::goal_reached: return "goal_reached";
    case Verdict::truncated: return "truncated";
    case Verdict::controller_fault: return "controller_fault";
  }
  return "unknown";
}

std::optional<Verdict> verdict_from_string(const std::string& s) {
  for (Verdict v : {Verdict::running, Verdict::collision_uav, Verdict::collision_obstacle, Verdict::below_min_alt,
                    Verdict::above_max_alt, Verdict::leader_lost, Verdict::goal_reached, Verdict::truncated,
                    Verdict::controller_fault}) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

bool is_failure(Verdict v) {
  switch (v) {
    case Verdict::collision_uav:
    case Verdict::collision_obstacle:
    case Verdict::below_min_alt:
    case Verdict::above_max_alt:
    case Verdict::leader_lost:
    case Verdict::controller_fault:
      return true;
    default:
      return false;
  }
}

bool TerminationMonitor::update(double time, bool any_follower_sees_leader) {
  if (any_follower_sees_leader) {
    lost_since_.reset();
    return false;
  }
  if (!lost_since_) lost_since_ = time;
  return time - *lost_since_ > window_ + 1e-9;
}

Verdict terminate(const TerminationInput& in) {
  for (std::size_t i = 0; i < in.uavs.size(); ++i) {
    for (std::size_t j = i + 1; j < in.uavs.size(); ++j) {
      if ((in.uavs[i].position - in.uavs[j].position).norm() < in.uavs[i].radius + in.uavs[j].radius) {
        return Verdict::collision_uav;
      }
    }
  }
  if (in.field) {
    for (const auto& u : in.uavs) {
      if (distance_to_obstacles(u.position, *in.field) < u.radius) return Verdict::collision_obstacle;
    }
  }
  for (const auto& u : in.uavs) {
    if (u.altitude() < in.limits.min_altitude) return Verdict::below_min_alt;
  }
  for (const auto& u : in.uavs) {
    if (u.altitude() > in.limits.max_altitude) return Verdict::above_max_alt;
  }
  if (in.mode == EpisodeMode::eval && in.leader_lost) return Verdict::leader_lost;
  if (in.goal_reached) return Verdict::goal_reached;
  if (in.time >= in.time_limit - 1e-9) return Verdict::truncated;
  return Verdict::running;
}

RewardBreakdown compute_reward(const RewardContext& ctx, const RewardParams& params) {
  const auto& ego = ctx.uavs[static_cast<std::size_t>(ctx.ego)];
  std::vector<Vec3> others;
  others.reserve(ctx.uavs.size());
  for (std::size_t j = 0; j < ctx.uavs.size(); ++j) {
    if (static_cast<int>(j) != ctx.ego) others.push_back(ctx.uavs[j].position);
  }
  const Vec3 com = center_of_mass(ctx.uavs);
  RewardBreakdown b;
  const auto f = flocking_terms(ego.position, others, com, params);
  const auto o = obstacle_terms(ego.position, ego.velocity, ctx.obstacle_points, params);
  const auto s = stability_terms(ego.altitude(), ctx.uavs[0].altitude(), up_z(ego.orientation), params);
  const auto p = perception_terms(ctx.perceived, ctx.universe, ego.altitude(), params);
  b.separation = f.separation;
  b.cohesion = f.cohesion;
  b.proximity = o.proximity;
  b.direction = o.direction;
  b.altitude = s.altitude;
  b.attitude = s.attitude;
  b.visibility = p.visibility;
  b.recovery = p.recovery;
  b.collision = ctx.collided ? params.collision_penalty : 0.0;
  b.compose(params);
  return b;
}

void write_breakdown_csv_header(std::ostream& out) {
  out << "step,uav,separation,cohesion,proximity,direction,altitude,attitude,visibility,recovery,collision,total\n";
}

void write_breakdown_csv_row(std::ostream& out, int step, int uav, const RewardBreakdown& b) {
  out << step << ',' << uav << ',' << b.separation << ',' << b.cohesion << ',' << b.proximity << ','
      << b.direction << ',' << b.altitude << ',' << b.attitude << ',' << b.visibility << ',' << b.recovery << ','
      << b.collision << ',' << b.total << '\n';
}

}  // namespace swarmnav
