#include "swarmnav/observation.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace swarmnav {

std::vector<double> Observation::flatten() const {
  std::vector<double> out;
  out.reserve(size());
  out.insert(out.end(), ego.begin(), ego.end());
  out.insert(out.end(), neighbors.begin(), neighbors.end());
  out.insert(out.end(), grid.begin(), grid.end());
  return out;
}

EgoBlock build_ego(const std::optional<UavState>& delayed_state) {
  EgoBlock block;
  if (!delayed_state) {
    block.warmup = true;
    return block;
  }
  const auto& s = *delayed_state;
  block.values = {s.velocity.x(),    s.velocity.y(),    s.velocity.z(),   s.orientation.w(),
                  s.orientation.x(), s.orientation.y(), s.orientation.z()};
  return block;
}

std::vector<double> build_neighbor_block(std::span<const RelativeNeighbor> neighbors,
                                         const NeighborSlotPolicy& policy) {
  if (policy.max_neighbors < 1) throw ValidationError("neighbor slots: max_neighbors must be >= 1");
  std::vector<double> block(static_cast<std::size_t>(policy.block_size()), 0.0);
  std::vector<std::size_t> order(neighbors.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  // ties broken by position so the result does not depend on input order
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& pa = neighbors[a].rel_position;
    const auto& pb = neighbors[b].rel_position;
    const double ra = pa.squaredNorm();
    const double rb = pb.squaredNorm();
    if (ra != rb) return ra < rb;
    if (pa.x() != pb.x()) return pa.x() < pb.x();
    if (pa.y() != pb.y()) return pa.y() < pb.y();
    return pa.z() < pb.z();
  });
  const std::size_t n = std::min(order.size(), static_cast<std::size_t>(policy.max_neighbors));
  for (std::size_t s = 0; s < n; ++s) {
    const auto& nb = neighbors[order[s]];
    double* slot = block.data() + s * kSlotDim;
    slot[0] = nb.rel_position.x();
    slot[1] = nb.rel_position.y();
    slot[2] = nb.rel_position.z();
    slot[3] = nb.rel_velocity.x();
    slot[4] = nb.rel_velocity.y();
    slot[5] = nb.rel_velocity.z();
    slot[6] = 1.0;
  }
  return block;
}

int azimuth_bin(double azimuth_deg) {
  double a = std::fmod(azimuth_deg, 360.0);
  if (a < 0.0) a += 360.0;
  const int bin = static_cast<int>(std::floor(a / (360.0 / kGridAzimuthBins)));
  return std::clamp(bin, 0, kGridAzimuthBins - 1);
}

int elevation_bin(double elevation_deg, const GridParams& params) {
  const double span = params.elevation_max_deg - params.elevation_min_deg;
  const double width = span / kGridElevationBins;
  const int bin = static_cast<int>(std::floor((elevation_deg - params.elevation_min_deg) / width));
  return std::clamp(bin, 0, kGridElevationBins - 1);
}

namespace {

bool is_obstacle(const LidarPoint& p) { return p.kind == HitKind::pillar; }

bool in_band(const LidarPoint& p, const GridParams& params, double& az, double& el, double& range) {
  range = p.position.norm();
  if (!(range > 0.0)) return false;
  el = elevation_deg_of(p.position);
  if (el < params.elevation_min_deg || el > params.elevation_max_deg) return false;
  az = azimuth_deg_of(p.position);
  return true;
}

}  // namespace

std::vector<double> build_occupancy_grid(std::span<const LidarPoint> points, const GridParams& params) {
  std::vector<double> grid(kGridDim, 0.0);
  std::vector<double> nearest(kGridCells, kInf);
  for (const auto& p : points) {
    if (!is_obstacle(p)) continue;
    double az = 0.0, el = 0.0, range = 0.0;
    if (!in_band(p, params, az, el, range)) continue;
    const std::size_t cell = static_cast<std::size_t>(azimuth_bin(az) * kGridElevationBins + elevation_bin(el, params));
    nearest[cell] = std::min(nearest[cell], range);
  }
  for (int a = 0; a < kGridAzimuthBins; ++a) {
    for (int e = 0; e < kGridElevationBins; ++e) {
      const double d = nearest[static_cast<std::size_t>(a * kGridElevationBins + e)];
      if (d == kInf) continue;
      grid[Observation::grid_index(0, a, e)] = std::clamp(1.0 - d / params.range_max, 0.0, 1.0);
      grid[Observation::grid_index(1, a, e)] = 1.0;
    }
  }
  return grid;
}

std::vector<LidarPoint> cell_nearest_points(std::span<const LidarPoint> points, const GridParams& params) {
  std::vector<int> best(kGridCells, -1);
  std::vector<double> best_range(kGridCells, kInf);
  for (int i = 0; i < static_cast<int>(points.size()); ++i) {
    const auto& p = points[static_cast<std::size_t>(i)];
    if (!is_obstacle(p)) continue;
    double az = 0.0, el = 0.0, range = 0.0;
    if (!in_band(p, params, az, el, range)) continue;
    const std::size_t cell = static_cast<std::size_t>(azimuth_bin(az) * kGridElevationBins + elevation_bin(el, params));
    if (range < best_range[cell]) {
      best_range[cell] = range;
      best[cell] = i;
    }
  }
  std::vector<LidarPoint> out;
  for (int b : best) {
    if (b >= 0) out.push_back(points[static_cast<std::size_t>(b)]);
  }
  return out;
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ostream& out, double v) { put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

bool get_u32(std::istream& in, std::uint32_t& v) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

}  // namespace

void write_observation_header(std::ostream& out, std::uint32_t record_length) {
  out.write("SWOB", 4);
  put_u32(out, kObservationRecordVersion);
  put_u32(out, record_length);
}

void write_observation_record(std::ostream& out, const Observation& obs) {
  for (double v : obs.flatten()) put_f32(out, v);
}

std::vector<std::vector<float>> read_observation_records(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "SWOB", 4) != 0) throw std::runtime_error("observation stream: bad magic");
  std::uint32_t version = 0, length = 0;
  if (!get_u32(in, version) || !get_u32(in, length)) throw std::runtime_error("observation stream: truncated header");
  if (version != kObservationRecordVersion) throw std::runtime_error("observation stream: unsupported version");
  std::vector<std::vector<float>> records;
  while (in.peek() != std::char_traits<char>::eof()) {
    std::vector<float> rec(length);
    for (auto& v : rec) {
      std::uint32_t bits = 0;
      if (!get_u32(in, bits)) throw std::runtime_error("observation stream: truncated record");
      v = std::bit_cast<float>(bits);
    }
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace swarmnav
