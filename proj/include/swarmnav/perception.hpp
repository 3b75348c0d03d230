#pragma once

#include "swarmnav/lidar.hpp"
#include "swarmnav/world.hpp"

#include <Eigen/Core>

#include <deque>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace swarmnav {

struct FilterParams {
  int stacked_frames = 2;  // B
  double range_min = 0.05;
  double range_max = 10.0;
  double intensity_high = 170.0;
  double roi_radius = 0.3;
};

struct ClusterParams {
  double epsilon = 0.1;
  int min_points_base = 16;       // n_min = 8 * B at the reference range
  double reference_range = 5.0;
  int min_points_floor = 4;
  int core_min_points = 4;        // DBSCAN density parameter, point itself included
  double match_distance = 0.2;
  double inactive_timeout = 0.5;
  double high_ratio = 0.05;
  double validation_time = 0.01;  // tau_on
};

struct EkfParams {
  double accel_noise_density = 2.0;  // continuous white-acceleration spectral density
  double measurement_sigma = 0.02;
  double initial_velocity_sigma = 2.0;
  double covariance_floor = 1e-12;
};

using Matrix6 = Eigen::Matrix<double, 6, 6>;

struct TrackedNeighbor {
  int id = 0;
  Vec3 centroid = Vec3::Zero();  // map frame
  Vec3 velocity = Vec3::Zero();
  Matrix6 covariance = Matrix6::Identity();
  double last_update = 0.0;  // time the state was last propagated
  double last_seen = 0.0;
  double high_intensity_ratio = 0.0;
  std::optional<double> high_since;       // start of the current run of ratio >= rho_high
  std::optional<double> validated_since;
  bool active = true;
  Vec3 last_innovation = Vec3::Zero();
  int updates = 0;

  bool validated() const { return active && validated_since.has_value(); }
};

/// Distance-gated point in the map frame.
struct MapPoint {
  Vec3 position = Vec3::Zero();
  double intensity = 0.0;
  HitKind kind = HitKind::pillar;  // simulator tag, not used by the tracker
  int uav_id = -1;
};

/// Transforms every cloud with its own sensor pose and keeps points whose distance to
/// ego_position lies in [range_min, range_max]. Fewer than B clouds is accepted.
std::vector<MapPoint> stack_and_gate(std::span<const PointCloud> clouds, const Vec3& ego_position,
                                     const FilterParams& params);

/// P_high union P_roi over the active tracks' centroids.
std::vector<MapPoint> intensity_roi_filter(std::span<const MapPoint> points,
                                           std::span<const TrackedNeighbor> tracks,
                                           const FilterParams& params);

/// Plain DBSCAN labels (-1 noise). Clusters are numbered by their lowest-index core point;
/// a border point joins the earliest-numbered cluster with a core point within epsilon.
std::vector<int> dbscan_labels(std::span<const Vec3> points, double epsilon, int core_min_points);

/// Size threshold n_min(r) = max(floor, round(base * (r_ref / r)^2)).
int adaptive_min_points(double mean_range, const ClusterParams& params);

struct Cluster {
  std::vector<int> indices;
  Vec3 centroid = Vec3::Zero();
  double mean_range = 0.0;
  int high_count = 0;

  double high_ratio() const {
    return indices.empty() ? 0.0 : static_cast<double>(high_count) / static_cast<double>(indices.size());
  }
};

/// DBSCAN followed by distance-adaptive size validation (ranges measured from origin).
std::vector<Cluster> dbscan(std::span<const MapPoint> points, const Vec3& origin, const ClusterParams& params,
                            double intensity_high);

struct AssociationResult {
  std::vector<int> cluster_track;  // per cluster: matched track id or -1
  std::vector<int> spawned;        // ids of tracks created this frame
  std::vector<int> deactivated;    // ids of tracks timed out this frame
  int covariance_repairs = 0;
};

/// Predict to `now`, greedy nearest association under match_distance, Kalman update,
/// spawn tracks for seeded unmatched clusters, time out stale tracks.
AssociationResult associate_and_update(std::span<const Cluster> clusters, std::vector<TrackedNeighbor>& tracks,
                                       double now, const ClusterParams& params, const EkfParams& ekf,
                                       int& next_id);

/// Intensity-ratio validation over the clusters associated this frame.
void validate(std::vector<TrackedNeighbor>& tracks, std::span<const Cluster> clusters,
              std::span<const int> cluster_track, double now, const ClusterParams& params);

/// Constant-velocity propagation of one track to `now` (no-op when already there).
void predict_track(TrackedNeighbor& track, double now, const EkfParams& ekf);
/// Position-only Kalman update; returns true when the covariance had to be repaired.
bool update_track(TrackedNeighbor& track, const Vec3& measurement, const EkfParams& ekf);

struct RelativeNeighbor {
  Vec3 rel_position = Vec3::Zero();
  Vec3 rel_velocity = Vec3::Zero();
  int truth_id = -1;  // simulator identity when known

  double range() const { return rel_position.norm(); }
};

/// Per-frame intermediate products, kept for inspection dumps.
struct PerceptionFrame {
  double time = 0.0;
  std::size_t raw_points = 0;
  std::vector<MapPoint> gated;
  std::vector<MapPoint> filtered;
  std::vector<Cluster> clusters;
  std::vector<TrackedNeighbor> tracks;
};

/// One UAV's object tracker: stacking, filtering, clustering, tracking, validation.
class NeighborTracker {
 public:
  NeighborTracker(FilterParams filter = {}, ClusterParams cluster = {}, EkfParams ekf = {});

  void reset();
  /// Feeds one cloud captured at cloud.frame_time with the UAV at ego_position.
  const PerceptionFrame& process(const PointCloud& cloud, const Vec3& ego_position);

  const std::vector<TrackedNeighbor>& tracks() const { return tracks_; }
  std::vector<TrackedNeighbor> validated() const;
  const PerceptionFrame& last_frame() const { return frame_; }
  int covariance_repairs() const { return repairs_; }

 private:
  FilterParams filter_;
  ClusterParams cluster_;
  EkfParams ekf_;
  std::deque<PointCloud> history_;
  std::vector<TrackedNeighbor> tracks_;
  PerceptionFrame frame_;
  int next_id_ = 0;
  int repairs_ = 0;
};

/// Simulated-truth relative states with per-axis Gaussian errors.
struct TruthNoise {
  double sigma_position = 0.02;
  double sigma_velocity = 0.05;
};

std::vector<RelativeNeighbor> estimate_relative_states(std::span<const UavState> uavs,
                                                       std::span<const int> neighbor_ids, const UavState& ego,
                                                       const TruthNoise& noise, Rng& rng);

/// Pipeline relative states straight from validated tracks.
std::vector<RelativeNeighbor> estimate_relative_states(std::span<const TrackedNeighbor> validated,
                                                       const UavState& ego);

/// One JSON object per track for the given frame.
void write_track_jsonl(std::ostream& out, int uav_id, const PerceptionFrame& frame);

}  // namespace swarmnav
