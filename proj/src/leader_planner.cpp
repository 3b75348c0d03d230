#include "swarmnav/leader_planner.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>

namespace swarmnav {

void WaypointMission::validate() const {
  if (!(arrival_tolerance > 0.0)) throw ValidationError("mission: arrival_tolerance must be > 0");
  if (!waypoints.empty() && (active_index < 0 || active_index >= static_cast<int>(waypoints.size()))) {
    throw ValidationError("mission: active_index out of range");
  }
  if (!(cruise_speed >= 0.0)) throw ValidationError("mission: cruise_speed must be >= 0");
}

void ApfParams::validate() const {
  if (!(k_att > 0.0) || !(k_rep > 0.0) || !(rep_radius > 0.0)) {
    throw ValidationError("apf: k_att, k_rep and rep_radius must be positive");
  }
  if (!(lookahead > 0.0)) throw ValidationError("apf: lookahead must be positive");
}

namespace {

double segment_point_distance(const Vec2& a, const Vec2& b, const Vec2& p) {
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return (a + t * ab - p).norm();
}

class PlanarObstacles {
 public:
  PlanarObstacles(std::span<const Vec3> points, const Vec2& center, double reach) {
    std::set<std::pair<long, long>> seen;
    for (const auto& p : points) {
      const Vec2 q = p.head<2>();
      if ((q - center).norm() > reach) continue;
      const std::pair<long, long> key{std::lround(q.x() / kCell), std::lround(q.y() / kCell)};
      if (seen.insert(key).second) pts_.push_back(q);
    }
  }

  bool segment_free(const Vec2& a, const Vec2& b, double clearance) const {
    for (const auto& p : pts_) {
      if (segment_point_distance(a, b, p) < clearance) return false;
    }
    return true;
  }

  bool point_free(const Vec2& a, double clearance) const { return segment_free(a, a, clearance); }

 private:
  static constexpr double kCell = 0.1;
  std::vector<Vec2> pts_;
};

Vec2 rotate(const Vec2& v, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * v.x() - s * v.y(), s * v.x() + c * v.y()};
}

}  // namespace

bool path_blocked(std::span<const Vec3> path, std::span<const Vec3> obstacle_points, double clearance) {
  if (path.size() < 2 || obstacle_points.empty()) return false;
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    const Vec2 a = path[i].head<2>(), b = path[i + 1].head<2>();
    for (const auto& p : obstacle_points) {
      if (segment_point_distance(a, b, p.head<2>()) < clearance) return true;
    }
  }
  return false;
}

PlanResult plan_local_path(const Vec3& start, const Vec3& goal, std::span<const Vec3> obstacle_points,
                           const RrtParams& params, Rng& rng) {
  PlanResult result;
  const Vec2 s = start.head<2>();
  const Vec2 g = goal.head<2>();
  const double z = start.z();
  const double clearance = params.clearance();
  auto fallback = [&](const std::string& why) {
    result.path = {start, goal};
    result.fallback = true;
    result.warning = why;
    return result;
  };

  PlanarObstacles all(obstacle_points, s, kInf);
  if (all.segment_free(s, g, clearance)) {
    result.path = {start, goal};
    return result;
  }
  if (!all.point_free(g, clearance)) return fallback("goal lies inside an obstacle clearance region");

  Vec2 target = g;
  if ((g - s).norm() > params.window) {
    const Vec2 dir = (g - s).normalized();
    bool found = false;
    for (int k = 0; k <= 9 && !found; ++k) {
      for (int sign : {1, -1}) {
        const Vec2 candidate = s + params.window * rotate(dir, sign * deg2rad(10.0 * k));
        if (all.point_free(candidate, clearance)) {
          target = candidate;
          found = true;
          break;
        }
        if (k == 0) break;
      }
    }
    if (!found) return fallback("no free boundary point toward the goal");
  }

  const PlanarObstacles local(obstacle_points, s, params.window + 2.0 * params.step + clearance);
  std::vector<Vec2> nodes{s};
  std::vector<int> parent{-1};
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int reached = -1;
  while (static_cast<int>(nodes.size()) < params.max_nodes) {
    Vec2 sample;
    if (unit(rng) < params.goal_bias) {
      sample = target;
    } else {
      const double r = params.window * std::sqrt(unit(rng));
      const double a = 2.0 * kPi * unit(rng);
      sample = s + Vec2(r * std::cos(a), r * std::sin(a));
    }
    int nearest = 0;
    double best = kInf;
    for (int i = 0; i < static_cast<int>(nodes.size()); ++i) {
      const double d = (nodes[static_cast<std::size_t>(i)] - sample).squaredNorm();
      if (d < best) {
        best = d;
        nearest = i;
      }
    }
    const Vec2& from = nodes[static_cast<std::size_t>(nearest)];
    const Vec2 delta = sample - from;
    const double len = delta.norm();
    if (len < 1e-9) continue;
    const Vec2 next = len > params.step ? Vec2(from + delta * (params.step / len)) : sample;
    if (!local.segment_free(from, next, clearance)) continue;
    nodes.push_back(next);
    parent.push_back(nearest);
    const int id = static_cast<int>(nodes.size()) - 1;
    if ((next - target).norm() <= params.step && local.segment_free(next, target, clearance)) {
      nodes.push_back(target);
      parent.push_back(id);
      reached = id + 1;
      break;
    }
  }
  if (reached < 0) return fallback("RRT node budget exhausted");

  std::vector<Vec2> raw;
  for (int i = reached; i >= 0; i = parent[static_cast<std::size_t>(i)]) raw.push_back(nodes[static_cast<std::size_t>(i)]);
  std::reverse(raw.begin(), raw.end());

  // greedy shortcut: from each kept vertex jump to the farthest visible one
  std::vector<Vec2> smooth{raw.front()};
  std::size_t i = 0;
  while (i + 1 < raw.size()) {
    std::size_t j = raw.size() - 1;
    while (j > i + 1 && !local.segment_free(raw[i], raw[j], clearance)) --j;
    smooth.push_back(raw[j]);
    i = j;
  }
  for (const auto& p : smooth) result.path.emplace_back(p.x(), p.y(), z);
  result.path.front() = start;
  if (target == g) result.path.back() = goal;
  return result;
}

Vec3 lookahead_point(std::span<const Vec3> path, const Vec3& p, double distance) {
  if (path.empty()) return p;
  if (path.size() == 1) return path.front();
  std::size_t seg = 0;
  double seg_t = 0.0;
  double best = kInf;
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    const Vec3 ab = path[i + 1] - path[i];
    const double len2 = ab.squaredNorm();
    const double t = len2 > 0.0 ? std::clamp((p - path[i]).dot(ab) / len2, 0.0, 1.0) : 0.0;
    const double d = (path[i] + t * ab - p).squaredNorm();
    if (d < best) {
      best = d;
      seg = i;
      seg_t = t;
    }
  }
  double remaining = distance;
  Vec3 cur = path[seg] + seg_t * (path[seg + 1] - path[seg]);
  for (std::size_t i = seg; i + 1 < path.size(); ++i) {
    const double left = (path[i + 1] - cur).norm();
    if (left >= remaining) return cur + (path[i + 1] - cur) * (remaining / left);
    remaining -= left;
    cur = path[i + 1];
  }
  return path.back();
}

Vec3 apf_repulsion(const Vec3& p, std::span<const Vec3> obstacle_points, const ApfParams& params) {
  constexpr int kSectors = 72;
  std::array<double, kSectors> nearest;
  std::array<Vec2, kSectors> away;
  nearest.fill(kInf);
  for (const auto& q : obstacle_points) {
    const Vec2 d = p.head<2>() - q.head<2>();
    const double r = d.norm();
    if (r >= params.rep_radius || r <= 1e-9) continue;
    double a = std::atan2(-d.y(), -d.x());
    if (a < 0.0) a += 2.0 * kPi;
    const int sector = std::min(kSectors - 1, static_cast<int>(a / (2.0 * kPi / kSectors)));
    if (r < nearest[static_cast<std::size_t>(sector)]) {
      nearest[static_cast<std::size_t>(sector)] = r;
      away[static_cast<std::size_t>(sector)] = d / r;
    }
  }
  Vec2 f = Vec2::Zero();
  for (int k = 0; k < kSectors; ++k) {
    const double r = nearest[static_cast<std::size_t>(k)];
    if (r == kInf) continue;
    f += params.k_rep * (1.0 / r - 1.0 / params.rep_radius) / (r * r) * away[static_cast<std::size_t>(k)];
  }
  return {f.x(), f.y(), 0.0};
}

Vec3 apf_command(const UavState& state, std::span<const Vec3> path, std::span<const Vec3> obstacle_points,
                 const ApfParams& params, double cruise_speed, double hold_altitude) {
  if (path.empty()) throw ValidationError("apf_command: empty path");
  const Vec3 look = lookahead_point(path, state.position, params.lookahead);
  Vec2 to = look.head<2>() - state.position.head<2>();
  Vec2 att_dir = to.norm() > 1e-9 ? Vec2(to.normalized()) : Vec2::Zero();
  const Vec2 att = params.k_att * att_dir;
  const Vec3 rep3 = apf_repulsion(state.position, obstacle_points, params);
  const Vec2 rep = rep3.head<2>();
  Vec2 force = att + rep;
  const double rep_norm = rep.norm();
  if (rep_norm > 0.0 && params.vortex_gain > 0.0 && att_dir.squaredNorm() > 0.0) {
    const Vec2 left(-att_dir.y(), att_dir.x());
    const double cross = att_dir.x() * rep.y() - att_dir.y() * rep.x();
    const double side = cross < -1e-12 ? -1.0 : 1.0;
    force += params.vortex_gain * rep_norm * side * left;
  }
  const Vec2 h = cruise_speed * force / std::max(force.norm(), params.k_att);
  const double vz = std::clamp(params.altitude_gain * (hold_altitude - state.position.z()), -params.max_climb,
                               params.max_climb);
  Vec3 v(h.x(), h.y(), vz);
  const double n = v.norm();
  if (n > cruise_speed && n > 0.0) v *= cruise_speed / n;
  return v;
}

WaypointMission advance_mission(const UavState& state, WaypointMission mission) {
  if (!mission.has_target()) return mission;
  const double d = (state.position.head<2>() - mission.target().head<2>()).norm();
  if (d < mission.arrival_tolerance) {
    if (mission.active_index + 1 < static_cast<int>(mission.waypoints.size())) {
      ++mission.active_index;
    } else {
      mission.complete = true;
    }
  }
  return mission;
}

LeaderPlanner::LeaderPlanner(RrtParams rrt, ApfParams apf, double replan_period)
    : rrt_(rrt), apf_(apf), period_(replan_period) {
  apf_.validate();
}

void LeaderPlanner::reset() {
  path_.clear();
  last_plan_ = -1e300;
  planned_for_ = -1;
  have_altitude_ = false;
  replans_ = 0;
  fallbacks_ = 0;
  last_warning_.clear();
}

Vec3 LeaderPlanner::command(const UavState& state, WaypointMission& mission, std::span<const Vec3> obstacle_points,
                            double time, Rng& rng) {
  if (!have_altitude_) {
    hold_altitude_ = state.position.z();
    have_altitude_ = true;
  }
  mission = advance_mission(state, mission);
  if (!mission.has_target()) {
    const double vz = std::clamp(apf_.altitude_gain * (hold_altitude_ - state.position.z()), -apf_.max_climb,
                                 apf_.max_climb);
    return {0.0, 0.0, std::clamp(vz, -mission.cruise_speed, mission.cruise_speed)};
  }
  const bool stale = time - last_plan_ >= period_ - 1e-9;
  if (path_.empty() || stale || planned_for_ != mission.active_index ||
      path_blocked(path_, obstacle_points, rrt_.r_uav)) {
    Vec3 start = state.position;
    start.z() = hold_altitude_;
    Vec3 goal = mission.target();
    goal.z() = hold_altitude_;
    auto plan = plan_local_path(start, goal, obstacle_points, rrt_, rng);
    if (plan.fallback) {
      ++fallbacks_;
      last_warning_ = plan.warning;
    }
    path_ = std::move(plan.path);
    last_plan_ = time;
    planned_for_ = mission.active_index;
    ++replans_;
  }
  return apf_command(state, path_, obstacle_points, apf_, mission.cruise_speed, hold_altitude_);
}

namespace {

Vec3 vec_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw ValidationError("mission: waypoint must be [x, y, z]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

nlohmann::json vec_to_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

}  // namespace

WaypointMission read_mission_json(std::istream& in) {
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("mission: ") + e.what());
  }
  WaypointMission m;
  const nlohmann::json& wps = j.is_array() ? j : j.at("waypoints");
  for (const auto& w : wps) m.waypoints.push_back(vec_from_json(w));
  if (j.is_object()) {
    m.arrival_tolerance = j.value("arrival_tolerance", m.arrival_tolerance);
    m.cruise_speed = j.value("cruise_speed", m.cruise_speed);
  }
  m.validate();
  return m;
}

void write_mission_json(std::ostream& out, const WaypointMission& mission) {
  nlohmann::json j;
  j["waypoints"] = nlohmann::json::array();
  for (const auto& w : mission.waypoints) j["waypoints"].push_back(vec_to_json(w));
  j["arrival_tolerance"] = mission.arrival_tolerance;
  j["cruise_speed"] = mission.cruise_speed;
  out << j.dump(2) << '\n';
}

void write_path_json(std::ostream& out, std::span<const Vec3> path) {
  nlohmann::json j;
  j["path"] = nlohmann::json::array();
  for (const auto& p : path) j["path"].push_back(vec_to_json(p));
  out << j.dump() << '\n';
}

}  // namespace swarmnav
