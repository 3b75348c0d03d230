#include "swarmnav/rl.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>

namespace swarmnav {

namespace {

constexpr int kInCells = kGridCells;                 // 72 x 12
constexpr int kOutAz = kGridAzimuthBins / 2;         // 36
constexpr int kOutEl = kGridElevationBins / 2;       // 6
constexpr int kOutCells = kOutAz * kOutEl;           // 216

using Mat = Eigen::MatrixXd;
using CMap = Eigen::Map<const Eigen::MatrixXd>;
using MMap = Eigen::Map<Eigen::MatrixXd>;

// source cell per (output cell, 3x3 tap); -1 is zero padding in elevation
template <int Stride>
std::vector<int> tap_table() {
  constexpr int out_az = kGridAzimuthBins / Stride;
  constexpr int out_el = kGridElevationBins / Stride;
  std::vector<int> table(static_cast<std::size_t>(out_az * out_el * 9));
  for (int a = 0; a < out_az; ++a) {
    for (int e = 0; e < out_el; ++e) {
      for (int da = -1; da <= 1; ++da) {
        for (int de = -1; de <= 1; ++de) {
          const int sa = (Stride * a + da + kGridAzimuthBins) % kGridAzimuthBins;
          const int se = Stride * e + de;
          const int k = (da + 1) * 3 + (de + 1);
          table[static_cast<std::size_t>((a * out_el + e) * 9 + k)] =
              (se < 0 || se >= kGridElevationBins) ? -1 : sa * kGridElevationBins + se;
        }
      }
    }
  }
  return table;
}

const std::vector<int>& taps1() {
  static const std::vector<int> t = tap_table<1>();
  return t;
}

const std::vector<int>& taps2() {
  static const std::vector<int> t = tap_table<2>();
  return t;
}

void tanh_inplace(Mat& m) { m = m.array().tanh().matrix(); }

void check_finite(const Mat& m, const char* name, int index) {
  if (!m.allFinite()) throw NonFiniteError(name, index);
}

Mat dtanh(const Mat& upstream, const Mat& activated) {
  return (upstream.array() * (1.0 - activated.array().square())).matrix();
}

}  // namespace

NetworkShape NetworkShape::named(const std::string& name) {
  if (name == "full") return full();
  if (name == "desk") return desk();
  if (name == "tiny") return tiny();
  throw ValidationError("unknown network preset '" + name + "' (full|desk|tiny)");
}

void NetworkShape::validate() const {
  for (int v : {conv1, conv2, features, hidden, shared, head}) {
    if (v < 1) throw ValidationError("network: every width must be >= 1");
  }
}

void ObservationBatch::reserve(std::size_t n) {
  flat_.reserve(n * kFlatInputDim);
  grid_index_.reserve(n);
}

int ObservationBatch::intern(const std::vector<double>& grid) {
  std::size_t h = 1469598103934665603ULL;
  for (double v : grid) {
    h ^= std::bit_cast<std::uint64_t>(v);
    h *= 1099511628211ULL;
  }
  auto& bucket = by_hash_[h];
  for (int id : bucket) {
    if (grids_[static_cast<std::size_t>(id)] == grid) return id;
  }
  grids_.push_back(grid);
  bucket.push_back(static_cast<int>(grids_.size()) - 1);
  return bucket.back();
}

void ObservationBatch::push(std::span<const double> flat, const std::vector<double>& grid) {
  flat_.insert(flat_.end(), flat.begin(), flat.end());
  grid_index_.push_back(intern(grid));
}

void ObservationBatch::add(const Observation& obs) {
  if (obs.neighbors.size() != static_cast<std::size_t>(kSlotDim * kDefaultNeighborSlots) ||
      obs.grid.size() != static_cast<std::size_t>(kGridDim)) {
    throw ValidationError("observation shape must be 7/42/2x72x12");
  }
  std::array<double, kFlatInputDim> flat{};
  std::copy(obs.ego.begin(), obs.ego.end(), flat.begin());
  std::copy(obs.neighbors.begin(), obs.neighbors.end(), flat.begin() + kEgoDim);
  push(flat, obs.grid);
}

ObservationBatch ObservationBatch::subset(std::span<const int> indices) const {
  ObservationBatch out;
  out.reserve(indices.size());
  for (int i : indices) {
    const auto* col = flat_.data() + static_cast<std::size_t>(i) * kFlatInputDim;
    out.push(std::span<const double>(col, kFlatInputDim), grids_[static_cast<std::size_t>(grid_index_[static_cast<std::size_t>(i)])]);
  }
  return out;
}

PolicyNetwork::PolicyNetwork(NetworkShape shape) : shape_(shape) {
  shape_.validate();
  const NetworkShape& s = shape_;
  const std::pair<const char*, std::pair<int, int>> spec[] = {
      {"conv1.w", {s.conv1, kGridChannels * 9}},
      {"conv1.b", {s.conv1, 1}},
      {"conv2.w", {s.conv2, s.conv1 * 9}},
      {"conv2.b", {s.conv2, 1}},
      {"fc.w", {s.features, s.conv2 * kOutCells}},
      {"fc.b", {s.features, 1}},
      {"trunk1.w", {s.hidden, s.features + kFlatInputDim}},
      {"trunk1.b", {s.hidden, 1}},
      {"trunk2.w", {s.shared, s.hidden}},
      {"trunk2.b", {s.shared, 1}},
      {"actor1.w", {s.head, s.shared}},
      {"actor1.b", {s.head, 1}},
      {"actor2.w", {kActionDim, s.head}},
      {"actor2.b", {kActionDim, 1}},
      {"critic1.w", {s.head, s.shared}},
      {"critic1.b", {s.head, 1}},
      {"critic2.w", {1, s.head}},
      {"critic2.b", {1, 1}},
      {"log_std", {kActionDim, 1}},
  };
  std::size_t offset = 0;
  for (const auto& [name, dims] : spec) {
    LayerInfo info{name, dims.first, dims.second, offset};
    offset += info.size();
    layers_.push_back(info);
  }
  params_.assign(offset, 0.0);
}

const LayerInfo& PolicyNetwork::layer(const std::string& name) const {
  for (const auto& l : layers_) {
    if (l.name == name) return l;
  }
  throw ValidationError("network: no layer named " + name);
}

void PolicyNetwork::initialize(Rng& rng, double log_std_init) {
  std::normal_distribution<double> n01(0.0, 1.0);
  for (const auto& l : layers_) {
    double* p = params_.data() + l.offset;
    if (l.name == "log_std") {
      std::fill(p, p + l.size(), log_std_init);
    } else if (l.cols == 1) {
      std::fill(p, p + l.size(), 0.0);
    } else {
      double scale = 1.0 / std::sqrt(static_cast<double>(l.cols));
      if (l.name == "actor2.w") scale *= 0.01;
      for (std::size_t k = 0; k < l.size(); ++k) p[k] = scale * n01(rng);
    }
  }
}

void PolicyNetwork::zero_final_layers() {
  for (const char* name : {"actor2.w", "actor2.b", "critic2.w", "critic2.b"}) {
    const auto& l = layer(name);
    std::fill(params_.begin() + static_cast<std::ptrdiff_t>(l.offset),
              params_.begin() + static_cast<std::ptrdiff_t>(l.offset + l.size()), 0.0);
  }
}

struct PolicyNetwork::Cache {
  Mat x1, a1, x2, a2, flat2, features, z0, h1, h2, ah, ch;
  Eigen::Vector3d raw_log_std;
};

PolicyOutput PolicyNetwork::run(const ObservationBatch& batch, Cache* cache) const {
  const NetworkShape& s = shape_;
  const int U = batch.unique_grids();
  const int B = batch.size();
  if (B == 0) throw ValidationError("network: empty batch");
  auto W = [&](const char* name) {
    const auto& l = layer(name);
    return CMap(params_.data() + l.offset, l.rows, l.cols);
  };

  // conv stage 1: im2col over every unique grid
  const auto& t1 = taps1();
  Mat x1 = Mat::Zero(kGridChannels * 9, static_cast<Eigen::Index>(kInCells) * U);
  for (int u = 0; u < U; ++u) {
    const auto& g = batch.grids()[static_cast<std::size_t>(u)];
    for (int p = 0; p < kInCells; ++p) {
      const Eigen::Index col = static_cast<Eigen::Index>(u) * kInCells + p;
      for (int k = 0; k < 9; ++k) {
        const int src = t1[static_cast<std::size_t>(p * 9 + k)];
        if (src < 0) continue;
        for (int c = 0; c < kGridChannels; ++c) x1(c * 9 + k, col) = g[static_cast<std::size_t>(c * kInCells + src)];
      }
    }
  }
  Mat a1 = W("conv1.w") * x1;
  a1.colwise() += W("conv1.b").col(0);
  tanh_inplace(a1);
  check_finite(a1, "conv1", 0);

  const auto& t2 = taps2();
  Mat x2 = Mat::Zero(s.conv1 * 9, static_cast<Eigen::Index>(kOutCells) * U);
  for (int u = 0; u < U; ++u) {
    for (int p = 0; p < kOutCells; ++p) {
      const Eigen::Index col = static_cast<Eigen::Index>(u) * kOutCells + p;
      for (int k = 0; k < 9; ++k) {
        const int src = t2[static_cast<std::size_t>(p * 9 + k)];
        if (src < 0) continue;
        const Eigen::Index scol = static_cast<Eigen::Index>(u) * kInCells + src;
        for (int c = 0; c < s.conv1; ++c) x2(c * 9 + k, col) = a1(c, scol);
      }
    }
  }
  Mat a2 = W("conv2.w") * x2;
  a2.colwise() += W("conv2.b").col(0);
  tanh_inplace(a2);
  check_finite(a2, "conv2", 1);

  Mat flat2(static_cast<Eigen::Index>(s.conv2) * kOutCells, U);
  for (int u = 0; u < U; ++u) {
    for (int c = 0; c < s.conv2; ++c) {
      flat2.block(static_cast<Eigen::Index>(c) * kOutCells, u, kOutCells, 1) =
          a2.block(c, static_cast<Eigen::Index>(u) * kOutCells, 1, kOutCells).transpose();
    }
  }
  Mat features = W("fc.w") * flat2;
  features.colwise() += W("fc.b").col(0);
  tanh_inplace(features);
  check_finite(features, "fc", 2);

  Mat z0(s.features + kFlatInputDim, B);
  for (int b = 0; b < B; ++b) z0.col(b).head(s.features) = features.col(batch.grid_index()[static_cast<std::size_t>(b)]);
  z0.bottomRows(kFlatInputDim) = batch.flat();

  Mat h1 = W("trunk1.w") * z0;
  h1.colwise() += W("trunk1.b").col(0);
  tanh_inplace(h1);
  check_finite(h1, "trunk1", 3);
  Mat h2 = W("trunk2.w") * h1;
  h2.colwise() += W("trunk2.b").col(0);
  tanh_inplace(h2);
  check_finite(h2, "trunk2", 4);
  Mat ah = W("actor1.w") * h2;
  ah.colwise() += W("actor1.b").col(0);
  tanh_inplace(ah);
  check_finite(ah, "actor1", 5);
  Mat ch = W("critic1.w") * h2;
  ch.colwise() += W("critic1.b").col(0);
  tanh_inplace(ch);
  check_finite(ch, "critic1", 7);

  PolicyOutput out;
  out.mean = W("actor2.w") * ah;
  out.mean.colwise() += W("actor2.b").col(0);
  check_finite(out.mean, "actor2", 6);
  Mat v = W("critic2.w") * ch;
  v.colwise() += W("critic2.b").col(0);
  check_finite(v, "critic2", 8);
  out.value = v.row(0);
  const Eigen::Vector3d raw = W("log_std").col(0);
  if (!raw.allFinite()) throw NonFiniteError("log_std", 9);
  out.log_std = raw.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  out.grid_features = features;

  if (cache) {
    cache->x1 = std::move(x1);
    cache->a1 = std::move(a1);
    cache->x2 = std::move(x2);
    cache->a2 = std::move(a2);
    cache->flat2 = std::move(flat2);
    cache->features = std::move(features);
    cache->z0 = std::move(z0);
    cache->h1 = std::move(h1);
    cache->h2 = std::move(h2);
    cache->ah = std::move(ah);
    cache->ch = std::move(ch);
    cache->raw_log_std = raw;
  }
  return out;
}

PolicyOutput PolicyNetwork::forward(const ObservationBatch& batch) const { return run(batch, nullptr); }

PolicyOutput PolicyNetwork::forward_backward(const ObservationBatch& batch,
                                             const std::function<Upstream(const PolicyOutput&)>& loss,
                                             std::vector<double>& grad) const {
  if (grad.size() != params_.size()) throw ValidationError("network: gradient buffer has the wrong size");
  Cache c;
  PolicyOutput out = run(batch, &c);
  const Upstream up = loss(out);
  const NetworkShape& s = shape_;
  const int U = batch.unique_grids();
  const int B = batch.size();
  auto W = [&](const char* name) {
    const auto& l = layer(name);
    return CMap(params_.data() + l.offset, l.rows, l.cols);
  };
  auto G = [&](const char* name) {
    const auto& l = layer(name);
    return MMap(grad.data() + l.offset, l.rows, l.cols);
  };

  // heads
  G("actor2.w") += up.d_mean * c.ah.transpose();
  G("actor2.b") += up.d_mean.rowwise().sum();
  const Mat dpa = dtanh(W("actor2.w").transpose() * up.d_mean, c.ah);
  G("actor1.w") += dpa * c.h2.transpose();
  G("actor1.b") += dpa.rowwise().sum();
  Mat dh2 = W("actor1.w").transpose() * dpa;

  const Mat dv = up.d_value;
  G("critic2.w") += dv * c.ch.transpose();
  G("critic2.b") += dv.rowwise().sum();
  const Mat dpc = dtanh(W("critic2.w").transpose() * dv, c.ch);
  G("critic1.w") += dpc * c.h2.transpose();
  G("critic1.b") += dpc.rowwise().sum();
  dh2 += W("critic1.w").transpose() * dpc;

  for (int k = 0; k < kActionDim; ++k) {
    const double raw = c.raw_log_std[k];
    if (raw >= kLogStdMin && raw <= kLogStdMax) G("log_std")(k, 0) += up.d_log_std[k];
  }

  // trunk
  const Mat dp2 = dtanh(dh2, c.h2);
  G("trunk2.w") += dp2 * c.h1.transpose();
  G("trunk2.b") += dp2.rowwise().sum();
  const Mat dp1 = dtanh(W("trunk2.w").transpose() * dp2, c.h1);
  G("trunk1.w") += dp1 * c.z0.transpose();
  G("trunk1.b") += dp1.rowwise().sum();
  const Mat dz0 = W("trunk1.w").transpose() * dp1;

  // encoder, once per unique grid
  Mat dfeat = Mat::Zero(s.features, U);
  for (int b = 0; b < B; ++b) dfeat.col(batch.grid_index()[static_cast<std::size_t>(b)]) += dz0.col(b).head(s.features);
  const Mat dpf = dtanh(dfeat, c.features);
  G("fc.w") += dpf * c.flat2.transpose();
  G("fc.b") += dpf.rowwise().sum();
  const Mat dflat2 = W("fc.w").transpose() * dpf;
  Mat da2(s.conv2, static_cast<Eigen::Index>(kOutCells) * U);
  for (int u = 0; u < U; ++u) {
    for (int ch = 0; ch < s.conv2; ++ch) {
      da2.block(ch, static_cast<Eigen::Index>(u) * kOutCells, 1, kOutCells) =
          dflat2.block(static_cast<Eigen::Index>(ch) * kOutCells, u, kOutCells, 1).transpose();
    }
  }
  const Mat dpre2 = dtanh(da2, c.a2);
  G("conv2.w") += dpre2 * c.x2.transpose();
  G("conv2.b") += dpre2.rowwise().sum();
  const Mat dx2 = W("conv2.w").transpose() * dpre2;
  Mat da1 = Mat::Zero(s.conv1, static_cast<Eigen::Index>(kInCells) * U);
  const auto& t2 = taps2();
  for (int u = 0; u < U; ++u) {
    for (int p = 0; p < kOutCells; ++p) {
      const Eigen::Index col = static_cast<Eigen::Index>(u) * kOutCells + p;
      for (int k = 0; k < 9; ++k) {
        const int src = t2[static_cast<std::size_t>(p * 9 + k)];
        if (src < 0) continue;
        const Eigen::Index scol = static_cast<Eigen::Index>(u) * kInCells + src;
        for (int ch = 0; ch < s.conv1; ++ch) da1(ch, scol) += dx2(ch * 9 + k, col);
      }
    }
  }
  const Mat dpre1 = dtanh(da1, c.a1);
  G("conv1.w") += dpre1 * c.x1.transpose();
  G("conv1.b") += dpre1.rowwise().sum();
  return out;
}

Eigen::MatrixXd PolicyNetwork::conv_maps(const std::vector<double>& grid, int stage) const {
  if (stage != 1 && stage != 2) throw ValidationError("conv_maps: stage must be 1 or 2");
  ObservationBatch batch;
  Observation obs;
  obs.grid = grid;
  batch.add(obs);
  Cache c;
  run(batch, &c);
  return stage == 1 ? c.a1 : c.a2;
}

double gaussian_log_prob(const Eigen::Vector3d& action, const Eigen::Vector3d& mean, const Eigen::Vector3d& log_std) {
  double lp = 0.0;
  for (int k = 0; k < kActionDim; ++k) {
    const double z = (action[k] - mean[k]) * std::exp(-log_std[k]);
    lp += -0.5 * z * z - log_std[k] - 0.5 * std::log(2.0 * kPi);
  }
  return lp;
}

double gaussian_entropy(const Eigen::Vector3d& log_std) {
  double h = 0.0;
  for (int k = 0; k < kActionDim; ++k) h += 0.5 * std::log(2.0 * kPi * std::exp(1.0)) + log_std[k];
  return h;
}

}  // namespace swarmnav
