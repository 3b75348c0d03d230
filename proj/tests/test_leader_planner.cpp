#include "doctest.h"

#include "swarmnav/leader_planner.hpp"

#include <cmath>
#include <sstream>

using namespace swarmnav;

namespace {

std::vector<Vec3> ring(const Vec2& c, double r, double z0, double z1, double spacing = 0.05) {
  std::vector<Vec3> pts;
  const int n = static_cast<int>(std::ceil(2 * kPi * r / spacing));
  for (int i = 0; i < n; ++i) {
    const double a = 2 * kPi * i / n;
    for (double z = z0; z <= z1 + 1e-9; z += 0.5) pts.emplace_back(c.x() + r * std::cos(a), c.y() + r * std::sin(a), z);
  }
  return pts;
}

// exact horizontal distance from a segment to a vertical cylinder surface
double segment_cylinder_clearance(const Vec3& a, const Vec3& b, const Vec2& c, double r) {
  const Vec2 p = a.head<2>(), q = b.head<2>();
  const Vec2 d = q - p;
  const double t = d.squaredNorm() > 0 ? std::clamp((c - p).dot(d) / d.squaredNorm(), 0.0, 1.0) : 0.0;
  return (p + t * d - c).norm() - r;
}

}  // namespace

TEST_CASE("empty obstacle set gives the straight two-point polyline") {
  Rng rng(1);
  const Vec3 s(0, 0, 1.5), g(25, 3, 1.5);
  const auto plan = plan_local_path(s, g, {}, RrtParams{}, rng);
  CHECK_FALSE(plan.fallback);
  REQUIRE(plan.path.size() == 2);
  CHECK(plan.path[0] == s);
  CHECK(plan.path[1] == g);
}

TEST_CASE("a pillar on the straight line is cleared by r_uav + margin") {
  RrtParams rp;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Vec2 c(4.0, 0.05 * static_cast<double>(seed % 3));
    const auto pts = ring(c, 0.5, 0.0, 6.0);
    const Vec3 s(0, 0, 1.5), g(8, 0, 1.5);
    const auto plan = plan_local_path(s, g, pts, rp, rng);
    REQUIRE_FALSE(plan.fallback);
    REQUIRE(plan.path.size() >= 3);
    CHECK(plan.path.front() == s);
    CHECK(plan.path.back() == g);
    for (std::size_t i = 0; i + 1 < plan.path.size(); ++i) {
      CHECK(segment_cylinder_clearance(plan.path[i], plan.path[i + 1], c, 0.5) >= rp.clearance() - 1e-3);
    }
    CHECK_FALSE(path_blocked(plan.path, pts, rp.clearance() - 1e-3));
  }
}

TEST_CASE("goal outside the window: the path ends on the window boundary") {
  Rng rng(2);
  RrtParams rp;
  const auto pts = ring(Vec2(4, 0), 0.5, 0, 6);
  const auto plan = plan_local_path(Vec3(0, 0, 1.5), Vec3(30, 0, 1.5), pts, rp, rng);
  REQUIRE_FALSE(plan.fallback);
  CHECK(plan.path.back().head<2>().norm() == doctest::Approx(rp.window).epsilon(1e-9));
}

TEST_CASE("goal inside an obstacle falls back with a warning") {
  Rng rng(3);
  const auto pts = ring(Vec2(5, 0), 0.6, 0, 6);
  const Vec3 g(5, 0.1, 1.5);
  const auto plan = plan_local_path(Vec3(0, 0, 1.5), g, pts, RrtParams{}, rng);
  CHECK(plan.fallback);
  CHECK_FALSE(plan.warning.empty());
  CHECK(plan.path.back() == g);
}

TEST_CASE("apf: no obstacles, command is cruise speed toward the lookahead") {
  UavState s;
  s.position = Vec3(0, 0, 1.5);
  std::vector<Vec3> path{Vec3(0, 0, 1.5), Vec3(10, 0, 1.5)};
  const auto v = apf_command(s, path, {}, ApfParams{}, 0.8, 1.5);
  CHECK((v - Vec3(0.8, 0, 0)).norm() < 1e-12);
  CHECK_THROWS_AS(apf_command(s, {}, {}, ApfParams{}, 0.8, 1.5), ValidationError);
}

TEST_CASE("apf: repulsion vanishes at rep_radius and is continuous below it") {
  ApfParams ap;
  const Vec3 p(0, 0, 1.5);
  std::vector<Vec3> at{Vec3(3.0, 0, 1.5)};
  CHECK(apf_repulsion(p, at, ap).norm() == 0.0);
  double prev = 0.0;
  for (double d = 2.999; d > 0.6; d -= 0.001) {
    std::vector<Vec3> q{Vec3(d, 0, 1.5)};
    const double m = apf_repulsion(p, q, ap).norm();
    CHECK(m >= prev);
    CHECK(m - prev < 0.05);
    prev = m;
  }
  std::vector<Vec3> one{Vec3(1.0, 0, 1.5)};
  CHECK(apf_repulsion(p, one, ap).x() == doctest::Approx(-0.5 * (1.0 - 1.0 / 3.0)));
}

TEST_CASE("apf: obstacle dead ahead at 1 m gives a lateral component and slower forward speed") {
  UavState s;
  s.position = Vec3(0, 0, 1.5);
  std::vector<Vec3> path{Vec3(0, 0, 1.5), Vec3(10, 0, 1.5)};
  std::vector<Vec3> pts{Vec3(1.0, 0, 1.5)};
  const auto v = apf_command(s, path, pts, ApfParams{}, 1.0, 1.5);
  CHECK(std::abs(v.y()) > 1e-3);
  CHECK(v.x() < 1.0);
  CHECK(v.x() > 0.0);
}

TEST_CASE("apf command norm never exceeds cruise speed") {
  Rng rng(4);
  std::uniform_real_distribution<double> u(-3, 3);
  ApfParams ap;
  for (int trial = 0; trial < 2000; ++trial) {
    UavState s;
    s.position = Vec3(u(rng), u(rng), 1.5 + u(rng));
    std::vector<Vec3> path{Vec3(u(rng), u(rng), 1.5), Vec3(u(rng) * 5, u(rng) * 5, 1.5)};
    std::vector<Vec3> pts;
    for (int k = 0; k < 10; ++k) pts.emplace_back(u(rng), u(rng), u(rng));
    const double cruise = 0.5 + std::abs(u(rng)) / 3;
    CHECK(apf_command(s, path, pts, ap, cruise, 1.5).norm() <= cruise + 1e-12);
  }
}

TEST_CASE("lookahead walks along the polyline") {
  std::vector<Vec3> path{Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(1, 2, 0)};
  CHECK((lookahead_point(path, Vec3(0, 0.1, 0), 1.5) - Vec3(1, 0.5, 0)).norm() < 1e-12);
  CHECK((lookahead_point(path, Vec3(1, 1.9, 0), 1.5) - Vec3(1, 2, 0)).norm() < 1e-12);
}

TEST_CASE("advance_mission") {
  WaypointMission m;
  m.waypoints = {Vec3(1, 0, 1.5), Vec3(5, 0, 1.5)};
  UavState s;
  s.position = Vec3(0.1, 0, 1.5);
  auto n = advance_mission(s, m);
  CHECK(n.active_index == 1);
  s.position = Vec3(3.9, 0, 1.5);
  CHECK(advance_mission(s, n).active_index == 1);
  CHECK_FALSE(advance_mission(s, n).complete);
  s.position = Vec3(4.1, 0, 7.0);
  n = advance_mission(s, n);
  CHECK(n.complete);
  CHECK(n.active_index == 1);
  CHECK_FALSE(advance_mission(s, WaypointMission{}).complete);
}

TEST_CASE("closed loop with no obstacles reaches every waypoint in bounded time") {
  LeaderPlanner planner;
  WaypointMission m;
  m.waypoints = {Vec3(10, 0, 1.5), Vec3(10, 10, 1.5), Vec3(0, 10, 1.5), Vec3(0, 0, 1.5)};
  m.cruise_speed = 1.0;
  UavState s;
  s.position = Vec3(0, 0, 1.5);
  Rng rng(5);
  double t = 0;
  int steps = 0;
  while (!m.complete && steps < 600) {
    s = step_kinematics(s, planner.command(s, m, {}, t, rng), 0.1);
    t += 0.1;
    ++steps;
  }
  CHECK(m.complete);
  CHECK(t * m.cruise_speed >= 40.0 - 8.0);  // each corner can be cut by at most twice the tolerance
  CHECK(t <= 50.0);
}

TEST_CASE("closed loop through a pillar row keeps clear of the pillars") {
  ObstacleField f;
  for (int k = -3; k <= 3; ++k) f.pillars.push_back({Vec2(8.0, 5.5 * k + 0.3), 0.5, 6.0});
  LeaderPlanner planner;
  WaypointMission m;
  m.waypoints = {Vec3(16, 0, 1.5)};
  UavState s;
  s.position = Vec3(0, 0, 1.5);
  Rng rng(6);
  double min_d = kInf;
  for (int step = 0; step < 400 && !m.complete; ++step) {
    std::vector<Vec3> pts;
    for (const auto& p : f.pillars) {
      if ((p.center - s.position.head<2>()).norm() < 10.0) {
        for (const auto& q : ring(p.center, p.radius, 1.0, 2.0, 0.1)) pts.push_back(q);
      }
    }
    s = step_kinematics(s, planner.command(s, m, pts, 0.1 * step, rng), 0.1);
    min_d = std::min(min_d, distance_to_obstacles(s.position, f));
  }
  CHECK(m.complete);
  CHECK(min_d > 0.2);
}

TEST_CASE("mission JSON round-trip") {
  WaypointMission m;
  m.waypoints = {Vec3(1, 2, 3), Vec3(-4, 5, 1.5)};
  m.arrival_tolerance = 0.5;
  m.cruise_speed = 0.7;
  std::stringstream ss;
  write_mission_json(ss, m);
  const auto r = read_mission_json(ss);
  CHECK(r.waypoints == m.waypoints);
  CHECK(r.arrival_tolerance == 0.5);
  CHECK(r.cruise_speed == 0.7);
  std::stringstream bad("{\"waypoints\": [[1,2]]}");
  CHECK_THROWS_AS(read_mission_json(bad), ValidationError);
  std::ostringstream os;
  write_path_json(os, m.waypoints);
  CHECK(os.str() == "{\"path\":[[1.0,2.0,3.0],[-4.0,5.0,1.5]]}\n");
}
