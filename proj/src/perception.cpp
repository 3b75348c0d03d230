#include "swarmnav/perception.hpp"

#include "json.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <tuple>
#include <unordered_map>

namespace swarmnav {

std::vector<MapPoint> stack_and_gate(std::span<const PointCloud> clouds, const Vec3& ego_position,
                                     const FilterParams& params) {
  std::vector<MapPoint> out;
  std::size_t total = 0;
  for (const auto& c : clouds) total += c.points.size();
  out.reserve(total);
  for (const auto& cloud : clouds) {
    const Eigen::Matrix3d rot = cloud.sensor_orientation.toRotationMatrix();
    for (const auto& p : cloud.points) {
      const Vec3 m = cloud.sensor_position + rot * p.position;
      const double d = (m - ego_position).norm();
      if (d < params.range_min || d > params.range_max) continue;
      out.push_back({m, p.intensity, p.kind, p.uav_id});
    }
  }
  return out;
}

std::vector<MapPoint> intensity_roi_filter(std::span<const MapPoint> points,
                                           std::span<const TrackedNeighbor> tracks,
                                           const FilterParams& params) {
  std::vector<MapPoint> out;
  const double r2 = params.roi_radius * params.roi_radius;
  for (const auto& p : points) {
    if (p.intensity >= params.intensity_high) {
      out.push_back(p);
      continue;
    }
    for (const auto& t : tracks) {
      if (t.active && (p.position - t.centroid).squaredNorm() <= r2) {
        out.push_back(p);
        break;
      }
    }
  }
  return out;
}

namespace {

struct CellKey {
  std::int64_t x, y, z;
  bool operator==(const CellKey&) const = default;
};

struct CellHash {
  std::size_t operator()(const CellKey& k) const {
    return static_cast<std::size_t>(k.x * 73856093LL ^ k.y * 19349663LL ^ k.z * 83492791LL);
  }
};

class SpatialGrid {
 public:
  SpatialGrid(std::span<const Vec3> points, double cell) : points_(points), cell_(cell) {
    for (int i = 0; i < static_cast<int>(points.size()); ++i) cells_[key(points[static_cast<std::size_t>(i)])].push_back(i);
  }

  void neighbors(int i, double eps, std::vector<int>& out) const {
    out.clear();
    const Vec3& p = points_[static_cast<std::size_t>(i)];
    const CellKey k = key(p);
    const double e2 = eps * eps;
    for (std::int64_t dx = -1; dx <= 1; ++dx) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          auto it = cells_.find({k.x + dx, k.y + dy, k.z + dz});
          if (it == cells_.end()) continue;
          for (int j : it->second) {
            if ((points_[static_cast<std::size_t>(j)] - p).squaredNorm() <= e2) out.push_back(j);
          }
        }
      }
    }
  }

 private:
  CellKey key(const Vec3& p) const {
    return {static_cast<std::int64_t>(std::floor(p.x() / cell_)), static_cast<std::int64_t>(std::floor(p.y() / cell_)),
            static_cast<std::int64_t>(std::floor(p.z() / cell_))};
  }

  std::span<const Vec3> points_;
  double cell_;
  std::unordered_map<CellKey, std::vector<int>, CellHash> cells_;
};

}  // namespace

std::vector<int> dbscan_labels(std::span<const Vec3> points, double epsilon, int core_min_points) {
  if (!(epsilon > 0.0)) throw ValidationError("dbscan: epsilon must be > 0");
  constexpr int kUnvisited = -2;
  constexpr int kNoise = -1;
  const int n = static_cast<int>(points.size());
  std::vector<int> labels(static_cast<std::size_t>(n), kUnvisited);
  if (n == 0) return labels;
  SpatialGrid grid(points, epsilon);
  std::vector<int> neigh;
  std::vector<int> inner;
  std::vector<int> queue;
  int next = 0;
  for (int i = 0; i < n; ++i) {
    if (labels[static_cast<std::size_t>(i)] != kUnvisited) continue;
    grid.neighbors(i, epsilon, neigh);
    if (static_cast<int>(neigh.size()) < core_min_points) {
      labels[static_cast<std::size_t>(i)] = kNoise;
      continue;
    }
    const int c = next++;
    labels[static_cast<std::size_t>(i)] = c;
    queue.assign(neigh.begin(), neigh.end());
    for (std::size_t qi = 0; qi < queue.size(); ++qi) {
      const int q = queue[qi];
      int& lq = labels[static_cast<std::size_t>(q)];
      if (lq == kNoise) lq = c;
      if (lq != kUnvisited) continue;
      lq = c;
      grid.neighbors(q, epsilon, inner);
      if (static_cast<int>(inner.size()) >= core_min_points) queue.insert(queue.end(), inner.begin(), inner.end());
    }
  }
  return labels;
}

int adaptive_min_points(double mean_range, const ClusterParams& params) {
  const double r = std::max(mean_range, 1e-6);
  const double ratio = params.reference_range / r;
  const double scaled = std::round(params.min_points_base * ratio * ratio);
  if (scaled > 1e9) return 1000000000;
  return std::max(params.min_points_floor, static_cast<int>(scaled));
}

std::vector<Cluster> dbscan(std::span<const MapPoint> points, const Vec3& origin, const ClusterParams& params,
                            double intensity_high) {
  std::vector<Vec3> pos;
  pos.reserve(points.size());
  for (const auto& p : points) pos.push_back(p.position);
  const auto labels = dbscan_labels(pos, params.epsilon, params.core_min_points);
  int n_clusters = 0;
  for (int l : labels) n_clusters = std::max(n_clusters, l + 1);
  std::vector<Cluster> candidates(static_cast<std::size_t>(n_clusters));
  for (int i = 0; i < static_cast<int>(labels.size()); ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    if (l < 0) continue;
    auto& c = candidates[static_cast<std::size_t>(l)];
    c.indices.push_back(i);
    c.centroid += pos[static_cast<std::size_t>(i)];
    c.mean_range += (pos[static_cast<std::size_t>(i)] - origin).norm();
    if (points[static_cast<std::size_t>(i)].intensity >= intensity_high) ++c.high_count;
  }
  std::vector<Cluster> out;
  for (auto& c : candidates) {
    const double n = static_cast<double>(c.indices.size());
    c.centroid /= n;
    c.mean_range /= n;
    if (static_cast<int>(c.indices.size()) >= adaptive_min_points(c.mean_range, params)) out.push_back(std::move(c));
  }
  return out;
}

namespace {

Eigen::Matrix<double, 6, 1> track_state(const TrackedNeighbor& t) {
  Eigen::Matrix<double, 6, 1> x;
  x << t.centroid, t.velocity;
  return x;
}

bool repair_covariance(Matrix6& p, double floor) {
  p = (0.5 * (p + p.transpose())).eval();
  Eigen::SelfAdjointEigenSolver<Matrix6> es(p);
  if (es.eigenvalues().minCoeff() >= 0.0) return false;
  Eigen::Matrix<double, 6, 1> ev = es.eigenvalues().cwiseMax(floor);
  p = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  p = (0.5 * (p + p.transpose())).eval();
  return true;
}

}  // namespace

void predict_track(TrackedNeighbor& track, double now, const EkfParams& ekf) {
  const double dt = now - track.last_update;
  if (dt <= 0.0) return;
  Matrix6 f = Matrix6::Identity();
  f.topRightCorner<3, 3>() = dt * Eigen::Matrix3d::Identity();
  const double q = ekf.accel_noise_density;
  Matrix6 qm = Matrix6::Zero();
  qm.topLeftCorner<3, 3>() = (q * dt * dt * dt / 3.0) * Eigen::Matrix3d::Identity();
  qm.topRightCorner<3, 3>() = (q * dt * dt / 2.0) * Eigen::Matrix3d::Identity();
  qm.bottomLeftCorner<3, 3>() = (q * dt * dt / 2.0) * Eigen::Matrix3d::Identity();
  qm.bottomRightCorner<3, 3>() = (q * dt) * Eigen::Matrix3d::Identity();
  const Eigen::Matrix<double, 6, 1> x = f * track_state(track);
  track.centroid = x.head<3>();
  track.velocity = x.tail<3>();
  track.covariance = f * track.covariance * f.transpose() + qm;
  track.covariance = 0.5 * (track.covariance + track.covariance.transpose()).eval();
  track.last_update = now;
}

bool update_track(TrackedNeighbor& track, const Vec3& measurement, const EkfParams& ekf) {
  Eigen::Matrix<double, 3, 6> h = Eigen::Matrix<double, 3, 6>::Zero();
  h.leftCols<3>() = Eigen::Matrix3d::Identity();
  const Eigen::Matrix3d r = ekf.measurement_sigma * ekf.measurement_sigma * Eigen::Matrix3d::Identity();
  const Matrix6& p = track.covariance;
  const Eigen::Matrix3d s = h * p * h.transpose() + r;
  const Eigen::Matrix<double, 6, 3> k = p * h.transpose() * s.inverse();
  const Vec3 innovation = measurement - track.centroid;
  const Eigen::Matrix<double, 6, 1> x = track_state(track) + k * innovation;
  const Matrix6 ikh = Matrix6::Identity() - k * h;
  Matrix6 np = ikh * p * ikh.transpose() + k * r * k.transpose();
  const bool repaired = repair_covariance(np, ekf.covariance_floor);
  track.covariance = np;
  track.centroid = x.head<3>();
  track.velocity = x.tail<3>();
  track.last_innovation = innovation;
  ++track.updates;
  return repaired;
}

AssociationResult associate_and_update(std::span<const Cluster> clusters, std::vector<TrackedNeighbor>& tracks,
                                       double now, const ClusterParams& params, const EkfParams& ekf,
                                       int& next_id) {
  AssociationResult result;
  result.cluster_track.assign(clusters.size(), -1);
  for (auto& t : tracks) {
    if (t.active) predict_track(t, now, ekf);
  }

  std::vector<std::tuple<double, int, int>> pairs;
  for (int c = 0; c < static_cast<int>(clusters.size()); ++c) {
    for (int t = 0; t < static_cast<int>(tracks.size()); ++t) {
      if (!tracks[static_cast<std::size_t>(t)].active) continue;
      const double d = (clusters[static_cast<std::size_t>(c)].centroid - tracks[static_cast<std::size_t>(t)].centroid).norm();
      if (d < params.match_distance) pairs.emplace_back(d, c, t);
    }
  }
  std::sort(pairs.begin(), pairs.end());
  std::vector<char> track_used(tracks.size(), 0);
  for (const auto& [d, c, t] : pairs) {
    if (result.cluster_track[static_cast<std::size_t>(c)] >= 0 || track_used[static_cast<std::size_t>(t)]) continue;
    track_used[static_cast<std::size_t>(t)] = 1;
    auto& track = tracks[static_cast<std::size_t>(t)];
    result.cluster_track[static_cast<std::size_t>(c)] = track.id;
    if (update_track(track, clusters[static_cast<std::size_t>(c)].centroid, ekf)) ++result.covariance_repairs;
    track.last_seen = now;
  }

  const double sm2 = ekf.measurement_sigma * ekf.measurement_sigma;
  const double sv2 = ekf.initial_velocity_sigma * ekf.initial_velocity_sigma;
  for (int c = 0; c < static_cast<int>(clusters.size()); ++c) {
    const auto& cl = clusters[static_cast<std::size_t>(c)];
    if (result.cluster_track[static_cast<std::size_t>(c)] >= 0 || cl.high_count == 0) continue;
    TrackedNeighbor t;
    t.id = next_id++;
    t.centroid = cl.centroid;
    t.covariance = Matrix6::Zero();
    t.covariance.diagonal() << sm2, sm2, sm2, sv2, sv2, sv2;
    t.last_update = now;
    t.last_seen = now;
    t.updates = 1;
    result.cluster_track[static_cast<std::size_t>(c)] = t.id;
    result.spawned.push_back(t.id);
    tracks.push_back(t);
  }

  for (auto& t : tracks) {
    if (t.active && now - t.last_seen > params.inactive_timeout) {
      t.active = false;
      t.validated_since.reset();
      t.high_since.reset();
      result.deactivated.push_back(t.id);
    }
  }
  std::erase_if(tracks, [](const TrackedNeighbor& t) { return !t.active; });
  return result;
}

void validate(std::vector<TrackedNeighbor>& tracks, std::span<const Cluster> clusters,
              std::span<const int> cluster_track, double now, const ClusterParams& params) {
  std::unordered_map<int, double> ratio_of;
  for (std::size_t c = 0; c < clusters.size() && c < cluster_track.size(); ++c) {
    if (cluster_track[c] >= 0) ratio_of[cluster_track[c]] = clusters[c].high_ratio();
  }
  for (auto& t : tracks) {
    if (!t.active) {
      t.validated_since.reset();
      t.high_since.reset();
      continue;
    }
    auto it = ratio_of.find(t.id);
    if (it == ratio_of.end()) {
      t.high_since.reset();
      continue;
    }
    t.high_intensity_ratio = it->second;
    if (it->second >= params.high_ratio) {
      if (!t.high_since) t.high_since = now;
      if (!t.validated_since && now - *t.high_since >= params.validation_time - 1e-9) t.validated_since = now;
    } else {
      t.high_since.reset();
    }
  }
}

NeighborTracker::NeighborTracker(FilterParams filter, ClusterParams cluster, EkfParams ekf)
    : filter_(filter), cluster_(cluster), ekf_(ekf) {}

void NeighborTracker::reset() {
  history_.clear();
  tracks_.clear();
  frame_ = {};
  next_id_ = 0;
  repairs_ = 0;
}

const PerceptionFrame& NeighborTracker::process(const PointCloud& cloud, const Vec3& ego_position) {
  const double now = cloud.frame_time;
  history_.push_back(cloud);
  while (static_cast<int>(history_.size()) > std::max(filter_.stacked_frames, 1)) history_.pop_front();

  frame_ = {};
  frame_.time = now;
  frame_.raw_points = cloud.points.size();
  std::vector<PointCloud> stacked(history_.begin(), history_.end());
  frame_.gated = stack_and_gate(stacked, ego_position, filter_);
  for (auto& t : tracks_) predict_track(t, now, ekf_);
  frame_.filtered = intensity_roi_filter(frame_.gated, tracks_, filter_);
  // during warm-up the size threshold shrinks with the number of clouds actually stacked
  ClusterParams cp = cluster_;
  const int b = std::max(filter_.stacked_frames, 1);
  const int available = static_cast<int>(history_.size());
  if (available < b) cp.min_points_base = std::max(1, static_cast<int>(std::lround(static_cast<double>(cp.min_points_base) * available / b)));
  frame_.clusters = dbscan(frame_.filtered, ego_position, cp, filter_.intensity_high);
  const auto assoc = associate_and_update(frame_.clusters, tracks_, now, cluster_, ekf_, next_id_);
  repairs_ += assoc.covariance_repairs;
  validate(tracks_, frame_.clusters, assoc.cluster_track, now, cluster_);
  frame_.tracks = tracks_;
  return frame_;
}

std::vector<TrackedNeighbor> NeighborTracker::validated() const {
  std::vector<TrackedNeighbor> out;
  for (const auto& t : tracks_) {
    if (t.validated()) out.push_back(t);
  }
  return out;
}

std::vector<RelativeNeighbor> estimate_relative_states(std::span<const UavState> uavs,
                                                       std::span<const int> neighbor_ids, const UavState& ego,
                                                       const TruthNoise& noise, Rng& rng) {
  if (!ego.position.allFinite() || !ego.velocity.allFinite()) {
    throw ValidationError("estimate_relative_states: non-finite ego state");
  }
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto jitter = [&](double sigma) {
    Vec3 e = Vec3::Zero();
    if (sigma > 0.0) {
      const double x = gauss(rng);
      const double y = gauss(rng);
      const double z = gauss(rng);
      e = sigma * Vec3(x, y, z);
    }
    return e;
  };
  std::vector<RelativeNeighbor> out;
  out.reserve(neighbor_ids.size());
  for (int id : neighbor_ids) {
    const auto& n = uavs[static_cast<std::size_t>(id)];
    RelativeNeighbor r;
    r.rel_position = n.position - ego.position + jitter(noise.sigma_position);
    r.rel_velocity = n.velocity - ego.velocity + jitter(noise.sigma_velocity);
    r.truth_id = id;
    out.push_back(r);
  }
  return out;
}

std::vector<RelativeNeighbor> estimate_relative_states(std::span<const TrackedNeighbor> validated,
                                                       const UavState& ego) {
  if (!ego.position.allFinite() || !ego.velocity.allFinite()) {
    throw ValidationError("estimate_relative_states: non-finite ego state");
  }
  std::vector<RelativeNeighbor> out;
  out.reserve(validated.size());
  for (const auto& t : validated) {
    out.push_back({t.centroid - ego.position, t.velocity - ego.velocity, -1});
  }
  return out;
}

void write_track_jsonl(std::ostream& out, int uav_id, const PerceptionFrame& frame) {
  for (const auto& t : frame.tracks) {
    nlohmann::json j;
    j["t"] = frame.time;
    j["uav"] = uav_id;
    j["track"] = t.id;
    j["centroid"] = {t.centroid.x(), t.centroid.y(), t.centroid.z()};
    j["velocity"] = {t.velocity.x(), t.velocity.y(), t.velocity.z()};
    j["high_ratio"] = t.high_intensity_ratio;
    j["validated"] = t.validated();
    j["last_seen"] = t.last_seen;
    out << j.dump() << '\n';
  }
}

}  // namespace swarmnav
