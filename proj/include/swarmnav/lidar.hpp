#pragma once

#include "swarmnav/world.hpp"

#include <deque>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

namespace swarmnav {

enum class HitKind : std::uint8_t { uav = 0, pillar = 1, ground = 2 };

struct LidarPoint {
  Vec3 position = Vec3::Zero();  // sensor frame
  double intensity = 0.0;
  double timestamp = 0.0;
  HitKind kind = HitKind::pillar;
  int uav_id = -1;  // struck UAV for kind == uav

  double range() const { return position.norm(); }
};

struct PointCloud {
  std::vector<LidarPoint> points;
  Vec3 sensor_position = Vec3::Zero();
  UnitQuaternion sensor_orientation = UnitQuaternion::Identity();
  double frame_time = 0.0;

  Vec3 to_map(const Vec3& sensor_point) const {
    return sensor_position + sensor_orientation * sensor_point;
  }
};

struct LidarParams {
  int azimuth_rays = 360;
  int elevation_rays = 60;  // inclusive endpoints: 60 rays over [-7, 52] deg is a 1 deg pitch
  double elevation_min_deg = -7.0;
  double elevation_max_deg = 52.0;
  double range_min = 0.05;
  double range_max = 10.0;
  double uav_intensity = 200.0;
  double env_intensity = 50.0;
  double intensity_sigma = 5.0;
  double range_sigma = 0.01;
  bool incidence_falloff = false;  // cosine falloff beyond 45 deg incidence
  bool include_uav_bodies = true;
  bool include_ground = true;

  int ray_count() const { return azimuth_rays * elevation_rays; }
  double azimuth_deg(int az_index) const { return 360.0 * az_index / azimuth_rays; }
  double elevation_deg(int el_index) const;
};

/// Immutable view of the world for one sensing instant.
struct WorldSnapshot {
  std::span<const UavState> uavs;
  const ObstacleField* field = nullptr;
  double time = 0.0;
};

struct RayHit {
  int ray = 0;
  double range = 0.0;
  HitKind kind = HitKind::pillar;
  int uav_id = -1;
};

/// Keeps exactly the minimum-range hit of every ray. Output is ordered by ray index.
std::vector<RayHit> occlusion_filter(std::vector<RayHit> hits);

std::optional<double> ray_sphere(const Vec3& origin, const Vec3& dir, const Vec3& center, double radius);
std::optional<double> ray_pillar(const Vec3& origin, const Vec3& dir, const Pillar& pillar);
std::optional<double> ray_ground(const Vec3& origin, const Vec3& dir);

class LidarSensor {
 public:
  explicit LidarSensor(LidarParams params = {});

  const LidarParams& params() const { return params_; }
  /// Body-frame unit direction of ray index az * elevation_rays + el.
  const Vec3& direction(int ray) const { return directions_[static_cast<std::size_t>(ray)]; }

  PointCloud scan(const WorldSnapshot& world, int sensor_id, Rng& rng) const;

 private:
  LidarParams params_;
  std::vector<Vec3> directions_;
};

PointCloud scan(const WorldSnapshot& world, int sensor_id, const LidarParams& params, Rng& rng);

/// Elevation of a sensor-frame vector in degrees.
double elevation_deg_of(const Vec3& v);
/// Azimuth of a sensor-frame vector in degrees, in [0, 360).
double azimuth_deg_of(const Vec3& v);

/// Ground-truth visibility used by the simulated-truth perception mode: other UAVs whose
/// centers lie in range, inside the vertical FOV and on an unobstructed line of sight.
std::vector<int> visible_neighbors(const WorldSnapshot& world, int sensor_id, const LidarParams& params);

/// CSV with header x,y,z,intensity,t (sensor frame).
void write_cloud_csv(std::ostream& out, const PointCloud& cloud);

/// Fixed-latency buffer: fetch returns the newest payload stamped at or before now - delay.
template <class T>
class DelayLine {
 public:
  explicit DelayLine(double delay = 0.0) : delay_(delay) {}

  double delay() const { return delay_; }
  bool empty() const { return queue_.empty(); }
  void clear() { queue_.clear(); }

  void push(double stamp, T payload) {
    queue_.emplace_back(stamp, std::move(payload));
    // keep only what a future fetch can still return
    while (queue_.size() > 1 && queue_[1].first <= stamp - delay_ + kTolerance) queue_.pop_front();
  }

  std::optional<T> fetch(double now) const {
    const double cutoff = now - delay_ + kTolerance;
    for (auto it = queue_.rbegin(); it != queue_.rend(); ++it) {
      if (it->first <= cutoff) return it->second;
    }
    return std::nullopt;
  }

 private:
  static constexpr double kTolerance = 1e-9;
  double delay_;
  std::deque<std::pair<double, T>> queue_;
};

}  // namespace swarmnav
