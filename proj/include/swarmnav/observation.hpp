#pragma once

#include "swarmnav/lidar.hpp"
#include "swarmnav/perception.hpp"
#include "swarmnav/world.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

namespace swarmnav {

inline constexpr int kEgoDim = 7;
inline constexpr int kSlotDim = 7;
inline constexpr int kDefaultNeighborSlots = 6;
inline constexpr int kGridChannels = 2;
inline constexpr int kGridAzimuthBins = 72;
inline constexpr int kGridElevationBins = 12;
inline constexpr int kGridCells = kGridAzimuthBins * kGridElevationBins;
inline constexpr int kGridDim = kGridChannels * kGridCells;
inline constexpr int kObservationDim = kEgoDim + kSlotDim * kDefaultNeighborSlots + kGridDim;  // 1777

struct NeighborSlotPolicy {
  int max_neighbors = kDefaultNeighborSlots;  // nearest-first

  int block_size() const { return kSlotDim * max_neighbors; }
};

struct GridParams {
  double elevation_min_deg = -7.0;
  double elevation_max_deg = 52.0;
  double range_max = 10.0;
};

/// Policy input. Grid layout is [channel][azimuth bin][elevation bin], channel 0 proximity,
/// channel 1 occupancy mask; azimuth bin 0 starts at the body +x axis, counter-clockwise.
struct Observation {
  std::array<double, kEgoDim> ego{};
  std::vector<double> neighbors = std::vector<double>(kSlotDim * kDefaultNeighborSlots, 0.0);
  std::vector<double> grid = std::vector<double>(kGridDim, 0.0);
  bool warmup = false;

  static constexpr std::size_t grid_index(int channel, int azimuth, int elevation) {
    return static_cast<std::size_t>((channel * kGridAzimuthBins + azimuth) * kGridElevationBins + elevation);
  }
  std::size_t size() const { return ego.size() + neighbors.size() + grid.size(); }
  /// ego, neighbors, grid concatenated.
  std::vector<double> flatten() const;
};

struct EgoBlock {
  std::array<double, kEgoDim> values{};
  bool warmup = false;
};

/// [vx, vy, vz, qw, qx, qy, qz] of the delayed ego state; zeros and a warm-up flag when absent.
EgoBlock build_ego(const std::optional<UavState>& delayed_state);

/// Nearest-first slots of [dp(3), dv(3), mask]; unused slots are all-zero.
std::vector<double> build_neighbor_block(std::span<const RelativeNeighbor> neighbors,
                                         const NeighborSlotPolicy& policy = {});

int azimuth_bin(double azimuth_deg);
int elevation_bin(double elevation_deg, const GridParams& params = {});

/// Bins sensor-frame obstacle returns. UAV-body and ground returns are skipped.
std::vector<double> build_occupancy_grid(std::span<const LidarPoint> points, const GridParams& params = {});

/// Nearest return per occupancy cell (obstacle returns only), in the sensor frame.
std::vector<LidarPoint> cell_nearest_points(std::span<const LidarPoint> points, const GridParams& params = {});

// Rollout storage: header "SWOB", u32 version, u32 record length, then little-endian float32 records.
inline constexpr std::uint32_t kObservationRecordVersion = 1;
void write_observation_header(std::ostream& out, std::uint32_t record_length);
void write_observation_record(std::ostream& out, const Observation& obs);
/// Returns flattened records; throws std::runtime_error on a malformed stream.
std::vector<std::vector<float>> read_observation_records(std::istream& in);

}  // namespace swarmnav
