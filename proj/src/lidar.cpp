#include "swarmnav/lidar.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace swarmnav {

double LidarParams::elevation_deg(int el_index) const {
  if (elevation_rays <= 1) return 0.5 * (elevation_min_deg + elevation_max_deg);
  return elevation_min_deg +
         (elevation_max_deg - elevation_min_deg) * el_index / static_cast<double>(elevation_rays - 1);
}

std::vector<RayHit> occlusion_filter(std::vector<RayHit> hits) {
  if (hits.empty()) return hits;
  int max_ray = 0;
  for (const auto& h : hits) max_ray = std::max(max_ray, h.ray);
  std::vector<int> best(static_cast<std::size_t>(max_ray) + 1, -1);
  for (int i = 0; i < static_cast<int>(hits.size()); ++i) {
    int& b = best[static_cast<std::size_t>(hits[static_cast<std::size_t>(i)].ray)];
    if (b < 0 || hits[static_cast<std::size_t>(i)].range < hits[static_cast<std::size_t>(b)].range) b = i;
  }
  std::vector<RayHit> out;
  for (int b : best) {
    if (b >= 0) out.push_back(hits[static_cast<std::size_t>(b)]);
  }
  return out;
}

std::optional<double> ray_sphere(const Vec3& origin, const Vec3& dir, const Vec3& center, double radius) {
  const Vec3 oc = origin - center;
  const double b = oc.dot(dir);
  const double c = oc.squaredNorm() - radius * radius;
  const double disc = b * b - c;
  if (disc < 0.0) return std::nullopt;
  const double s = std::sqrt(disc);
  const double t0 = -b - s;
  if (t0 > 0.0) return t0;
  const double t1 = -b + s;
  if (t1 > 0.0) return t1;
  return std::nullopt;
}

std::optional<double> ray_pillar(const Vec3& origin, const Vec3& dir, const Pillar& pillar) {
  std::optional<double> best;
  const double ox = origin.x() - pillar.center.x();
  const double oy = origin.y() - pillar.center.y();
  const double a = dir.x() * dir.x() + dir.y() * dir.y();
  if (a > 1e-15) {
    const double b = ox * dir.x() + oy * dir.y();
    const double c = ox * ox + oy * oy - pillar.radius * pillar.radius;
    const double disc = b * b - a * c;
    if (disc >= 0.0) {
      const double s = std::sqrt(disc);
      for (double t : {(-b - s) / a, (-b + s) / a}) {
        if (t <= 0.0) continue;
        const double z = origin.z() + t * dir.z();
        if (z >= 0.0 && z <= pillar.height) {
          best = t;
          break;
        }
      }
    }
  }
  if (std::abs(dir.z()) > 1e-15) {
    const double t = (pillar.height - origin.z()) / dir.z();
    if (t > 0.0 && (!best || t < *best)) {
      const double hx = ox + t * dir.x();
      const double hy = oy + t * dir.y();
      if (hx * hx + hy * hy <= pillar.radius * pillar.radius) best = t;
    }
  }
  return best;
}

std::optional<double> ray_ground(const Vec3& origin, const Vec3& dir) {
  if (dir.z() >= 0.0) return std::nullopt;
  const double t = -origin.z() / dir.z();
  if (t > 0.0) return t;
  return std::nullopt;
}

double elevation_deg_of(const Vec3& v) { return rad2deg(std::atan2(v.z(), std::hypot(v.x(), v.y()))); }

double azimuth_deg_of(const Vec3& v) {
  double a = rad2deg(std::atan2(v.y(), v.x()));
  if (a < 0.0) a += 360.0;
  if (a >= 360.0) a -= 360.0;
  return a;
}

LidarSensor::LidarSensor(LidarParams params) : params_(params) {
  directions_.reserve(static_cast<std::size_t>(params_.ray_count()));
  for (int az = 0; az < params_.azimuth_rays; ++az) {
    const double a = deg2rad(params_.azimuth_deg(az));
    for (int el = 0; el < params_.elevation_rays; ++el) {
      const double e = deg2rad(params_.elevation_deg(el));
      directions_.emplace_back(std::cos(e) * std::cos(a), std::cos(e) * std::sin(a), std::sin(e));
    }
  }
}

namespace {

double incidence_scale(const Vec3& dir_world, const Vec3& normal) {
  const double c = std::clamp(-dir_world.dot(normal), 0.0, 1.0);
  const double c45 = std::cos(deg2rad(45.0));
  return c < c45 ? c / c45 : 1.0;
}

}  // namespace

PointCloud LidarSensor::scan(const WorldSnapshot& world, int sensor_id, Rng& rng) const {
  const auto& self = world.uavs[static_cast<std::size_t>(sensor_id)];
  const Vec3 origin = self.position;
  const Eigen::Matrix3d rot = self.orientation.toRotationMatrix();
  const double reach = params_.range_max + params_.range_sigma * 6.0;

  PointCloud cloud;
  cloud.sensor_position = origin;
  cloud.sensor_orientation = self.orientation;
  cloud.frame_time = world.time;

  std::vector<const Pillar*> pillars;
  if (world.field) {
    for (const auto& p : world.field->pillars) {
      if ((origin.head<2>() - p.center).norm() - p.radius <= reach) pillars.push_back(&p);
    }
  }
  std::vector<int> bodies;
  if (params_.include_uav_bodies) {
    for (int j = 0; j < static_cast<int>(world.uavs.size()); ++j) {
      if (j == sensor_id) continue;
      const auto& u = world.uavs[static_cast<std::size_t>(j)];
      if ((u.position - origin).norm() - u.radius <= reach) bodies.push_back(j);
    }
  }
  const bool ground = params_.include_ground && origin.z() - reach * std::sin(deg2rad(-params_.elevation_min_deg)) < 0.0;
  if (pillars.empty() && bodies.empty() && !ground) return cloud;

  std::vector<RayHit> hits;
  const int n_rays = params_.ray_count();
  std::vector<Vec3> world_dirs(static_cast<std::size_t>(n_rays));
  for (int r = 0; r < n_rays; ++r) {
    const Vec3 d = rot * directions_[static_cast<std::size_t>(r)];
    world_dirs[static_cast<std::size_t>(r)] = d;
    for (const Pillar* p : pillars) {
      if (auto t = ray_pillar(origin, d, *p)) hits.push_back({r, *t, HitKind::pillar, -1});
    }
    for (int j : bodies) {
      const auto& u = world.uavs[static_cast<std::size_t>(j)];
      if (auto t = ray_sphere(origin, d, u.position, u.radius)) hits.push_back({r, *t, HitKind::uav, j});
    }
    if (ground) {
      if (auto t = ray_ground(origin, d)) hits.push_back({r, *t, HitKind::ground, -1});
    }
  }

  std::normal_distribution<double> gauss(0.0, 1.0);
  for (const RayHit& h : occlusion_filter(std::move(hits))) {
    double range = h.range;
    if (params_.range_sigma > 0.0) range += params_.range_sigma * gauss(rng);
    double intensity = h.kind == HitKind::uav ? params_.uav_intensity : params_.env_intensity;
    if (params_.intensity_sigma > 0.0) intensity += params_.intensity_sigma * gauss(rng);
    if (range < params_.range_min || range > params_.range_max) continue;
    const Vec3& dw = world_dirs[static_cast<std::size_t>(h.ray)];
    if (params_.incidence_falloff) {
      const Vec3 hit = origin + h.range * dw;
      Vec3 normal = Vec3::UnitZ();
      if (h.kind == HitKind::uav) {
        normal = (hit - world.uavs[static_cast<std::size_t>(h.uav_id)].position).normalized();
      } else if (h.kind == HitKind::pillar) {
        double best = kInf;
        for (const Pillar* p : pillars) {
          const double side = std::abs((hit.head<2>() - p->center).norm() - p->radius);
          const double top = std::abs(hit.z() - p->height);
          if (side < best) {
            best = side;
            normal = Vec3(hit.x() - p->center.x(), hit.y() - p->center.y(), 0.0).normalized();
          }
          if (top < best) {
            best = top;
            normal = Vec3::UnitZ();
          }
        }
      }
      intensity *= incidence_scale(dw, normal);
    }
    LidarPoint pt;
    pt.position = range * directions_[static_cast<std::size_t>(h.ray)];
    pt.intensity = std::clamp(intensity, 0.0, 255.0);
    pt.timestamp = world.time;
    pt.kind = h.kind;
    pt.uav_id = h.uav_id;
    cloud.points.push_back(pt);
  }
  return cloud;
}

PointCloud scan(const WorldSnapshot& world, int sensor_id, const LidarParams& params, Rng& rng) {
  return LidarSensor(params).scan(world, sensor_id, rng);
}

std::vector<int> visible_neighbors(const WorldSnapshot& world, int sensor_id, const LidarParams& params) {
  std::vector<int> out;
  const auto& self = world.uavs[static_cast<std::size_t>(sensor_id)];
  const UnitQuaternion inv = self.orientation.conjugate();
  for (int j = 0; j < static_cast<int>(world.uavs.size()); ++j) {
    if (j == sensor_id) continue;
    const Vec3 rel = world.uavs[static_cast<std::size_t>(j)].position - self.position;
    const double range = rel.norm();
    if (range < params.range_min || range > params.range_max) continue;
    const double el = elevation_deg_of(inv * rel);
    if (el < params.elevation_min_deg || el > params.elevation_max_deg) continue;
    const Vec3 dir = rel / range;
    bool blocked = false;
    if (world.field) {
      for (const auto& p : world.field->pillars) {
        if (auto t = ray_pillar(self.position, dir, p); t && *t < range) {
          blocked = true;
          break;
        }
      }
    }
    for (int k = 0; k < static_cast<int>(world.uavs.size()) && !blocked; ++k) {
      if (k == sensor_id || k == j) continue;
      const auto& u = world.uavs[static_cast<std::size_t>(k)];
      if (auto t = ray_sphere(self.position, dir, u.position, u.radius); t && *t < range) blocked = true;
    }
    if (!blocked) out.push_back(j);
  }
  return out;
}

void write_cloud_csv(std::ostream& out, const PointCloud& cloud) {
  out << "x,y,z,intensity,t\n";
  for (const auto& p : cloud.points) {
    out << p.position.x() << ',' << p.position.y() << ',' << p.position.z() << ',' << p.intensity << ','
        << p.timestamp << '\n';
  }
}

}  // namespace swarmnav
