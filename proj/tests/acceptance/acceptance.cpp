// Acceptance runner: one PASS/FAIL line per criterion. `--only 3,5` limits the run.

#include "swarmnav/cli.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace swarmnav;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(double x, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << x;
  return s.str();
}

void note(const std::string& line) { std::cout << "    " << line << std::endl; }

std::size_t ix(int i) { return static_cast<std::size_t>(i); }

// ---------------------------------------------------------------- 1. reward golden suite

Outcome reward_golden() {
  RewardParams rp;
  const Vec3 o = Vec3::Zero();
  std::vector<std::pair<std::string, std::pair<double, double>>> cases;
  auto add = [&](std::string name, double got, double want) { cases.push_back({std::move(name), {got, want}}); };
  std::vector<Vec3> n{Vec3(1.6, 0, 0)};
  add("separation zero at d_sep", flocking_terms(o, n, o, rp).separation, 0.0);
  n = {Vec3(0.4, 0, 0)};
  add("separation -1 at contact", flocking_terms(o, n, o, rp).separation, -1.0);
  add("cohesion zero at d_coh", flocking_terms(o, {}, Vec3(2.0, 0, 0), rp).cohesion, 0.0);
  add("cohesion at 2.5 m", flocking_terms(o, {}, Vec3(2.5, 0, 0), rp).cohesion, -0.5);
  std::vector<Vec3> p{Vec3(3.0, 0, 0)};
  add("proximity zero at d_prox", obstacle_terms(o, Vec3::Zero(), p, rp).proximity, 0.0);
  p = {Vec3(0.2, 0, 0)};
  add("proximity -1 at r_uav", obstacle_terms(o, Vec3::Zero(), p, rp).proximity, -1.0);
  p = {Vec3(2.0, 0, 0)};
  add("direction -1 dead ahead", obstacle_terms(o, Vec3(1, 0, 0), p, rp).direction, -1.0);
  p = {2.0 * Vec3(std::cos(deg2rad(30)), std::sin(deg2rad(30)), 0)};
  add("direction zero outside the cone", obstacle_terms(o, Vec3(1, 0, 0), p, rp).direction, 0.0);
  add("altitude at 0.1 m offset", stability_terms(1.6, 1.5, 1.0, rp).altitude, std::exp(-1.0));
  add("altitude level", stability_terms(1.5, 1.5, 1.0, rp).altitude, 1.0);
  add("attitude upright", stability_terms(1.5, 1.5, 1.0, rp).attitude, 1.0);
  add("recovery at 2.5 m", perception_terms(0, 4, 2.5, rp).recovery, -1.5);
  add("recovery zero at h_recovery", perception_terms(0, 4, 1.0, rp).recovery, 0.0);
  add("visibility all seen", perception_terms(4, 4, 1.5, rp).visibility, 1.0);
  add("visibility one of four", perception_terms(1, 4, 1.5, rp).visibility, 0.25);
  add("visibility nobody to see", perception_terms(0, 0, 2.5, rp).visibility, 1.0);

  Outcome out;
  for (const auto& [name, v] : cases) {
    if (std::abs(v.first - v.second) > 1e-12) {
      out.pass = false;
      note(name + ": got " + fmt(v.first, 17) + " want " + fmt(v.second, 17));
    }
  }

  Rng rng(101);
  std::uniform_real_distribution<double> u(-3, 3);
  std::uniform_int_distribution<int> small(0, 8);
  std::bernoulli_distribution coin(0.1);
  int bad = 0;
  double worst = 0.0;
  const int states = 100000;
  for (int k = 0; k < states; ++k) {
    std::vector<UavState> uavs(ix(2 + k % 6));
    for (auto& s : uavs) {
      s.position = Vec3(u(rng), u(rng), 1.5 + 0.3 * u(rng));
      s.velocity = Vec3(u(rng), u(rng), 0.1 * u(rng)) / 3.0;
      s.orientation = yaw_quaternion(u(rng));
    }
    std::vector<Vec3> pts(ix(small(rng)));
    for (auto& q : pts) q = Vec3(u(rng), u(rng), u(rng));
    const int ego = 1 + k % (static_cast<int>(uavs.size()) - 1);
    const int universe = static_cast<int>(uavs.size()) - 1;
    RewardContext ctx{uavs, ego, pts, small(rng) % (universe + 1), universe, coin(rng)};
    const RewardBreakdown b = compute_reward(ctx, rp);
    const double want = 1.5 * (b.separation + b.cohesion) + 2.0 * (b.proximity + b.direction) +
                        1.0 * (b.altitude + b.attitude) + 1.0 * (b.visibility + b.recovery) + b.collision;
    const double err = std::abs(b.total - want);
    worst = std::max(worst, err);
    bad += err > 1e-12;
  }
  if (bad) out.pass = false;
  out.detail = std::to_string(cases.size()) + " examples, identity on " + std::to_string(states) +
               " states (max err " + fmt(worst, 3) + ", " + std::to_string(bad) + " off)";
  return out;
}

// ---------------------------------------------------------------- 2. GAE oracle

// A_t = sum_l (gamma lambda)^l delta_{t+l}, the sum cut after the first episode end.
std::vector<double> gae_double_sum(const std::vector<double>& r, const std::vector<double>& v,
                                   const std::vector<double>& nv, const std::vector<std::uint8_t>& term,
                                   const std::vector<std::uint8_t>& trunc, double g, double l) {
  const std::size_t n = r.size();
  std::vector<double> adv(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = t; j < n; ++j) {
      const double delta = r[j] + g * nv[j] * (term[j] ? 0.0 : 1.0) - v[j];
      adv[t] += std::pow(g * l, static_cast<double>(j - t)) * delta;
      if (term[j] || trunc[j]) break;
    }
  }
  return adv;
}

Outcome gae_oracle() {
  Rng rng(202);
  std::uniform_real_distribution<double> u(-2.0, 2.0), unit(0.0, 1.0);
  std::uniform_int_distribution<int> len(1, 32);
  std::bernoulli_distribution flag(0.15);
  double worst = 0.0;
  int exact_bad = 0;
  for (int e = 0; e < 1000; ++e) {
    const auto n = static_cast<std::size_t>(len(rng));
    std::vector<double> r(n), v(n), nv(n);
    std::vector<std::uint8_t> term(n), trunc(n);
    for (std::size_t k = 0; k < n; ++k) {
      r[k] = u(rng), v[k] = u(rng), nv[k] = u(rng);
      term[k] = flag(rng);
      trunc[k] = term[k] ? 0 : flag(rng);
    }
    const double g = unit(rng), l = unit(rng);
    const GaeResult res = gae(r, v, nv, term, trunc, g, l);
    const auto want = gae_double_sum(r, v, nv, term, trunc, g, l);
    for (std::size_t k = 0; k < n; ++k) {
      worst = std::max(worst, std::abs(res.advantages[k] - want[k]));
      worst = std::max(worst, std::abs(res.value_targets[k] - (want[k] + v[k])));
    }
    const GaeResult zero = gae(r, v, nv, term, trunc, 0.0, l);
    for (std::size_t k = 0; k < n; ++k) {
      exact_bad += zero.advantages[k] != r[k] - v[k];
      if (term[k]) exact_bad += res.advantages[k] != r[k] - v[k];
    }
  }
  Outcome out;
  out.pass = worst < 1e-9 && exact_bad == 0;
  out.detail = "1000 episodes, max err " + fmt(worst, 3) + ", closed-form mismatches " + std::to_string(exact_bad);
  return out;
}

// ---------------------------------------------------------------- 3. PPO gradient check

Observation random_observation(Rng& rng, bool with_grid) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::bernoulli_distribution coin(0.3);
  Observation o;
  for (auto& x : o.ego) x = u(rng);
  for (auto& x : o.neighbors) x = u(rng);
  if (with_grid) {
    for (int c = 0; c < kGridChannels; ++c) {
      for (int a = 0; a < kGridAzimuthBins; ++a) {
        for (int e = 0; e < kGridElevationBins; ++e) {
          if (coin(rng)) o.grid[Observation::grid_index(c, a, e)] = c == 0 ? 0.5 * (u(rng) + 1.0) : 1.0;
        }
      }
    }
  }
  return o;
}

PpoBatch random_batch(const PolicyNetwork& net, Rng& rng, int n, int grids) {
  std::vector<Observation> pool;
  for (int g = 0; g < grids; ++g) pool.push_back(random_observation(rng, true));
  PpoBatch b;
  for (int i = 0; i < n; ++i) {
    Observation o = random_observation(rng, false);
    o.grid = pool[ix(i % grids)].grid;
    b.observations.add(o);
  }
  const PolicyOutput out = net.forward(b.observations);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> shift(-0.35, 0.35);
  b.actions.resize(3, n);
  b.old_log_prob.resize(n);
  b.old_values.resize(n);
  b.advantages.resize(n);
  b.value_targets.resize(n);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) b.actions(k, i) = out.mean(k, i) + out.std()[k] * n01(rng);
    b.old_log_prob[i] = gaussian_log_prob(b.actions.col(i), out.mean.col(i), out.log_std) + shift(rng);
    b.old_values[i] = out.value[i];
    b.advantages[i] = n01(rng);
    b.value_targets[i] = out.value[i] + n01(rng);
  }
  return b;
}

Outcome gradient_oracle() {
  const auto start = std::chrono::steady_clock::now();
  PpoHyperparams hp;
  hp.c2 = 0.01;
  double worst = 0.0;
  std::size_t params = 0;
  for (int trial = 0; trial < 10; ++trial) {
    PolicyNetwork net(NetworkShape::tiny());
    Rng init(300 + trial);
    net.initialize(init, -0.5);
    params = net.parameter_count();
    Rng rng(400 + trial);
    const PpoBatch batch = random_batch(net, rng, 8 + trial, 1 + trial % 3);
    std::vector<double> grad(net.parameter_count(), 0.0);
    ppo_loss(net, batch, hp, &grad);
    PolicyNetwork probe = net;
    const double h = 1e-5;
    for (std::size_t k = 0; k < net.parameter_count(); ++k) {
      const double keep = probe.params()[k];
      probe.params()[k] = keep + h;
      const double up = ppo_loss(probe, batch, hp).total;
      probe.params()[k] = keep - h;
      const double down = ppo_loss(probe, batch, hp).total;
      probe.params()[k] = keep;
      const double numeric = (up - down) / (2 * h);
      const double rel = std::abs(grad[k] - numeric) / std::max({std::abs(grad[k]), std::abs(numeric), 1e-6});
      worst = std::max(worst, rel);
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  Outcome out;
  out.pass = worst < 1e-4 && params <= 5000 && secs < 60;
  out.detail = std::to_string(params) + " parameters, 10 batches, max rel err " + fmt(worst, 3) + ", " + fmt(secs, 3) + " s";
  return out;
}

// ---------------------------------------------------------------- 4. DBSCAN oracle

// Cores by |N_eps| with the point itself, clusters are core components numbered by their lowest
// core index, non-core points join the earliest cluster holding a core within eps.
std::vector<int> brute_dbscan(const std::vector<Vec3>& pts, double eps, int min_pts) {
  const std::size_t n = pts.size();
  std::vector<std::vector<char>> near(n, std::vector<char>(n, 0));
  std::vector<char> core(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    int count = 0;
    for (std::size_t j = 0; j < n; ++j) {
      near[i][j] = (pts[i] - pts[j]).squaredNorm() <= eps * eps;
      count += near[i][j];
    }
    core[i] = count >= min_pts;
  }
  std::vector<int> label(n, -1);
  int next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!core[i] || label[i] >= 0) continue;
    std::vector<std::size_t> todo{i};
    label[i] = next;
    while (!todo.empty()) {
      const std::size_t a = todo.back();
      todo.pop_back();
      for (std::size_t b = 0; b < n; ++b) {
        if (near[a][b] && core[b] && label[b] < 0) {
          label[b] = next;
          todo.push_back(b);
        }
      }
    }
    ++next;
  }
  std::vector<int> out = label;
  for (std::size_t i = 0; i < n; ++i) {
    if (core[i]) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (core[j] && near[i][j] && (out[i] < 0 || label[j] < out[i])) out[i] = label[j];
    }
  }
  return out;
}

bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) return false;
  std::map<int, int> ab, ba;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if ((a[i] < 0) != (b[i] < 0)) return false;
    if (a[i] < 0) continue;
    if (ab.emplace(a[i], b[i]).first->second != b[i]) return false;
    if (ba.emplace(b[i], a[i]).first->second != a[i]) return false;
  }
  return true;
}

Outcome dbscan_oracle() {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(505);
  std::uniform_int_distribution<int> count(0, 500), blobs_of(1, 6);
  std::uniform_real_distribution<double> u(-1, 1), spread_of(0.01, 0.12);
  int mismatched = 0, clusters = 0;
  for (int set = 0; set < 500; ++set) {
    const int n = count(rng);
    const int blobs = blobs_of(rng);
    std::vector<std::pair<Vec3, double>> centers;
    for (int b = 0; b < blobs; ++b) centers.push_back({Vec3(2 * u(rng), 2 * u(rng), u(rng)), spread_of(rng)});
    std::vector<Vec3> pts;
    for (int i = 0; i < n; ++i) {
      const int b = i % (blobs + 1);
      if (b == blobs) {
        pts.emplace_back(2 * u(rng), 2 * u(rng), u(rng));  // sparse background
      } else {
        const auto& [c, s] = centers[ix(b)];
        pts.push_back(c + s * Vec3(u(rng), u(rng), u(rng)));
      }
    }
    const auto fast = dbscan_labels(pts, 0.1, 4);
    const auto slow = brute_dbscan(pts, 0.1, 4);
    mismatched += !same_partition(fast, slow);
    if (!slow.empty()) clusters += 1 + *std::max_element(slow.begin(), slow.end());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  Outcome out;
  out.pass = mismatched == 0 && secs < 30;
  out.detail = "500 sets, " + std::to_string(clusters) + " clusters, " + std::to_string(mismatched) + " partitions differ, " +
               fmt(secs, 3) + " s";
  return out;
}

// ---------------------------------------------------------------- 5. EKF convergence

Outcome ekf_convergence() {
  EkfParams ekf;
  ClusterParams cp;
  Rng rng(606);
  std::uniform_real_distribution<double> u(-1, 1);
  double worst = 0.0;
  int bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Vec3 v;
    do v = Vec3(u(rng), u(rng), u(rng));
    while (v.norm() > 1.0);
    v *= 2.0;
    const Vec3 p0(3 * u(rng), 3 * u(rng), 1.5 + 0.5 * u(rng));
    std::vector<TrackedNeighbor> tracks;
    int next_id = 0;
    // first measurement opens the track, then 50 updates
    for (int k = 0; k <= 50; ++k) {
      Cluster c;
      c.indices = {0};
      c.high_count = 1;
      c.centroid = p0 + v * (0.1 * k);
      const std::vector<Cluster> frame{c};
      associate_and_update(frame, tracks, 0.1 * k, cp, ekf, next_id);
    }
    if (tracks.size() != 1 || tracks[0].updates != 51) {
      ++bad;
      continue;
    }
    const double err = (tracks[0].velocity - v).norm();
    worst = std::max(worst, err);
    bad += err >= 1e-3;
  }
  Outcome out;
  out.pass = bad == 0;
  out.detail = "100 velocities up to 2 m/s, max error " + fmt(worst, 3) + " m/s";
  return out;
}

// ---------------------------------------------------------------- 6. perception end-to-end

// Sensor-frame ray against a sphere; nearest positive distance.
std::optional<double> hit_sphere(const Vec3& dir, const Vec3& center, double radius) {
  const double b = dir.dot(center);
  const double disc = b * b - (center.squaredNorm() - radius * radius);
  if (disc < 0) return std::nullopt;
  const double t = b - std::sqrt(disc);
  if (t <= 0) return std::nullopt;
  return t;
}

// Whole body inside the vertical FOV and range window, and every ray that would strike it returns it.
bool fully_visible(const LidarSensor& sensor, const PointCloud& cloud, std::span<const UavState> uavs, int i, int j) {
  const LidarParams& lp = sensor.params();
  const Vec3 rel = uavs[ix(i)].orientation.conjugate() * (uavs[ix(j)].position - uavs[ix(i)].position);
  const double radius = uavs[ix(j)].radius;
  const double d = rel.norm();
  if (d - radius < lp.range_min || d + radius > lp.range_max) return false;
  const double half = std::asin(radius / d) * 180.0 / kPi;
  const double el = std::atan2(rel.z(), rel.head<2>().norm()) * 180.0 / kPi;
  if (el - half < lp.elevation_min_deg || el + half > lp.elevation_max_deg) return false;
  int expected = 0;
  for (int r = 0; r < lp.ray_count(); ++r) expected += hit_sphere(sensor.direction(r), rel, radius).has_value();
  int returned = 0;
  for (const auto& p : cloud.points) returned += p.kind == HitKind::uav && p.uav_id == j;
  return expected > 0 && returned == expected;
}

Outcome perception_end_to_end() {
  const auto start = std::chrono::steady_clock::now();
  EnvConfig cfg;
  cfg.scenario.n_followers = 4;
  cfg.mode = EpisodeMode::eval;
  LidarParams lp = cfg.lidar;
  lp.range_sigma = 0.0;
  lp.intensity_sigma = 0.0;
  const LidarSensor sensor(lp);
  const double match = 0.5;
  long truth = 0, detected = 0, validated = 0, correct = 0;
  int frames = 0;
  std::map<int, std::pair<long, long>> by_range;
  for (int s = 0; s < 20; ++s) {
    SwarmEnv env(cfg);
    env.reset(static_cast<std::uint64_t>(600 + s));
    BaselineController flock;
    std::vector<NeighborTracker> trackers(ix(env.n_uavs()), NeighborTracker(cfg.filter, cfg.cluster, cfg.ekf));
    std::vector<std::set<int>> seen_before(ix(env.n_uavs()));
    Rng rng(static_cast<std::uint64_t>(7000 + s));
    // frame 0 only opens tracks; frames 1..50 are scored
    for (int f = 0; f <= 50 && !env.finished(); ++f) {
      const auto& uavs = env.uavs();
      const WorldSnapshot world{uavs, &env.scenario().field, env.time()};
      for (int i = 0; i < env.n_uavs(); ++i) {
        const PointCloud cloud = sensor.scan(world, i, rng);
        auto& tracker = trackers[ix(i)];
        tracker.process(cloud, uavs[ix(i)].position);
        std::set<int> seen;
        for (int j = 0; j < env.n_uavs(); ++j) {
          if (j != i && fully_visible(sensor, cloud, uavs, i, j)) seen.insert(j);
        }
        const auto tracks = tracker.validated();
        if (f > 0) {
          // a neighbour needs two stacked frames in view before it can be validated
          for (int j : seen) {
            if (!seen_before[ix(i)].count(j)) continue;
            bool found = false;
            for (const auto& t : tracks) found = found || (t.centroid - uavs[ix(j)].position).norm() < match;
            ++truth;
            detected += found;
            auto& bin = by_range[static_cast<int>((uavs[ix(j)].position - uavs[ix(i)].position).norm())];
            ++bin.first;
            bin.second += found;
          }
          for (const auto& t : tracks) {
            ++validated;
            bool real = false;
            for (int j = 0; j < env.n_uavs(); ++j) real = real || (j != i && (t.centroid - uavs[ix(j)].position).norm() < match);
            correct += real;
          }
        }
        seen_before[ix(i)] = std::move(seen);
      }
      if (f > 0) ++frames;
      env.step(flock.act(env.views()));
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const double rate = truth ? 100.0 * static_cast<double>(detected) / static_cast<double>(truth) : 0.0;
  const double precision = validated ? 100.0 * static_cast<double>(correct) / static_cast<double>(validated) : 0.0;
  for (const auto& [m, b] : by_range) {
    note("range " + std::to_string(m) + "-" + std::to_string(m + 1) + " m: " + std::to_string(b.second) + "/" +
         std::to_string(b.first) + " detected");
  }
  Outcome out;
  out.pass = frames == 1000 && truth > 0 && detected == truth && precision >= 99.0 && secs < 120;
  out.detail = std::to_string(frames) + " frames, detection " + fmt(rate, 6) + "% (" + std::to_string(detected) + "/" +
               std::to_string(truth) + "), precision " + fmt(precision, 6) + "%, " + fmt(secs, 3) + " s";
  return out;
}

// ---------------------------------------------------------------- 7. metric oracle

struct BruteMetrics {
  double mp = 0, fr = 0, ms = 0, al = 0, mdo = 0;
  bool has_al = false, has_mdo = false;
};

BruteMetrics brute_metrics(const Trajectory& t) {
  BruteMetrics m;
  const Vec3& end = t.frames.back().positions[0];
  const double full = std::sqrt((t.goal - t.leader_start).array().square().sum());
  m.mp = full < 1e-12 ? 100.0 : 100.0 * (full - std::sqrt((t.goal - end).array().square().sum())) / full;
  int al_steps = 0, mdo_steps = 0;
  for (const auto& f : t.frames) {
    const auto n = static_cast<double>(f.positions.size());
    const Vec3 center = std::accumulate(f.positions.begin(), f.positions.end(), Vec3(Vec3::Zero())) / n;
    double far = 0, near = 1e300;
    for (std::size_t a = 0; a < f.positions.size(); ++a) {
      far = std::max(far, (f.positions[a] - center).norm());
      for (std::size_t b = 0; b < f.positions.size(); ++b) {
        if (a != b) near = std::min(near, (f.positions[a] - f.positions[b]).norm());
      }
    }
    m.fr += far;
    m.ms += near;
    const Vec3 mean_v = std::accumulate(f.velocities.begin(), f.velocities.end(), Vec3(Vec3::Zero())) / n;
    bool moving = mean_v.norm() >= 1e-6;
    for (const auto& v : f.velocities) moving = moving && v.norm() >= 1e-6;
    if (moving) {
      double s = 0;
      for (const auto& v : f.velocities) s += v.dot(mean_v) / (v.norm() * mean_v.norm());
      m.al += s / n;
      ++al_steps;
    }
    if (!f.detections.empty()) {
      double closest = 1e300;
      for (const auto& d : f.detections) {
        for (const auto& p : f.positions) closest = std::min(closest, (d - p).norm());
      }
      m.mdo += closest;
      ++mdo_steps;
    }
  }
  const auto frames = static_cast<double>(t.frames.size());
  m.fr /= frames;
  m.ms /= frames;
  m.has_al = al_steps > 0;
  m.has_mdo = mdo_steps > 0;
  if (m.has_al) m.al /= al_steps;
  if (m.has_mdo) m.mdo /= mdo_steps;
  return m;
}

Trajectory random_trajectory(Rng& rng, int n_uavs, int steps) {
  std::uniform_real_distribution<double> u(-5, 5);
  std::uniform_int_distribution<int> k(0, 4);
  std::bernoulli_distribution still(0.05), ok(0.7);
  Trajectory t;
  t.leader_start = Vec3(u(rng), u(rng), 1.5);
  t.goal = Vec3(6 * u(rng), 6 * u(rng), 1.5);
  t.success = ok(rng);
  for (int s = 0; s < steps; ++s) {
    TrajectoryFrame f;
    f.time = 0.1 * s;
    for (int i = 0; i < n_uavs; ++i) {
      f.positions.emplace_back(u(rng), u(rng), 1.5 + 0.1 * u(rng));
      f.velocities.push_back(still(rng) ? Vec3(Vec3::Zero()) : Vec3(0.3 * u(rng), 0.3 * u(rng), 0.02 * u(rng)));
    }
    const int m = k(rng);
    for (int j = 0; j < m; ++j) f.detections.emplace_back(u(rng), u(rng), u(rng));
    t.frames.push_back(std::move(f));
  }
  return t;
}

Trajectory constant(std::vector<Vec3> positions, std::vector<Vec3> velocities, int steps) {
  Trajectory t;
  for (int s = 0; s < steps; ++s) t.frames.push_back({0.1 * s, positions, velocities, {}});
  return t;
}

Outcome metric_oracle() {
  Rng rng(707);
  std::vector<Trajectory> trials;
  double worst = 0.0;
  int structural = 0;
  for (int k = 0; k < 100; ++k) {
    trials.push_back(random_trajectory(rng, 2 + k % 6, 5 + k % 40));
    const Trajectory& t = trials.back();
    const BruteMetrics b = brute_metrics(t);
    worst = std::max({worst, std::abs(metric_mp(t).percent - b.mp), std::abs(metric_fr(t) - b.fr), std::abs(metric_ms(t) - b.ms)});
    const auto al = metric_al(t);
    const auto mdo = metric_mdo(t);
    structural += al.has_value() != b.has_al || mdo.has_value() != b.has_mdo;
    if (al && b.has_al) worst = std::max(worst, std::abs(*al - b.al));
    if (mdo && b.has_mdo) worst = std::max(worst, std::abs(*mdo - b.mdo));
  }
  double sr = 0;
  for (const auto& t : trials) sr += t.success ? 1.0 : 0.0;
  worst = std::max(worst, std::abs(metric_sr(trials) - sr));

  int symmetry_bad = 0;
  // two UAVs 2 m apart flying in formation
  Trajectory pair = constant({Vec3(0, 0, 0), Vec3(2, 0, 0)}, {Vec3(1, 0, 0), Vec3(1, 0, 0)}, 10);
  symmetry_bad += metric_fr(pair) != 1.0;
  symmetry_bad += metric_ms(pair) != 2.0;
  symmetry_bad += !metric_al(pair) || *metric_al(pair) != 1.0;
  symmetry_bad += metric_mdo(pair).has_value();
  // opposite velocities cancel the mean: no alignment defined
  symmetry_bad += metric_al(constant({Vec3(0, 0, 0), Vec3(2, 0, 0)}, {Vec3(1, 0, 0), Vec3(-1, 0, 0)}, 3)).has_value();
  // leader parked on the goal
  Trajectory home = constant({Vec3(10, 0, 1.5), Vec3(0, 0, 1.5)}, {Vec3::Zero(), Vec3::Zero()}, 1);
  home.leader_start = Vec3(0, 0, 1.5);
  home.goal = Vec3(10, 0, 1.5);
  symmetry_bad += metric_mp(home).percent != 100.0;
  home.goal = home.leader_start;
  symmetry_bad += !metric_mp(home).degenerate || metric_mp(home).percent != 100.0;
  std::vector<Trajectory> all_ok(4, pair);
  for (auto& t : all_ok) t.success = true;
  symmetry_bad += metric_sr(all_ok) != 100.0;
  all_ok[0].success = false;
  symmetry_bad += metric_sr(all_ok) != 75.0;

  Outcome out;
  out.pass = worst < 1e-9 && structural == 0 && symmetry_bad == 0;
  out.detail = "100 trajectories, max err " + fmt(worst, 3) + ", definedness mismatches " + std::to_string(structural) +
               ", symmetry failures " + std::to_string(symmetry_bad);
  return out;
}

// ---------------------------------------------------------------- 8. baseline navigation

Outcome baseline_navigation() {
  const auto start = std::chrono::steady_clock::now();
  EnvConfig cfg;
  cfg.scenario.n_followers = 4;
  cfg.mode = EpisodeMode::eval;
  cfg.perception = PerceptionMode::truth;
  const auto factory = [] { return std::make_unique<BaselineController>(); };
  const BatchResult res = batch_evaluate(factory, cfg, 20, 1, 1, true);
  const double floor = 2.0 * cfg.scenario.uav_radius;
  double min_sep = 1e300;
  for (const auto& t : res.trajectories) {
    for (const auto& f : t.frames) {
      for (std::size_t a = 0; a < f.positions.size(); ++a) {
        for (std::size_t b = a + 1; b < f.positions.size(); ++b) min_sep = std::min(min_sep, (f.positions[a] - f.positions[b]).norm());
      }
    }
  }
  double al_min = 1e300;
  for (const auto& t : res.trials) al_min = std::min(al_min, t.al.value_or(-1.0));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  Outcome out;
  out.pass = res.report.sr == 100.0 && res.report.al.count == 20 && res.report.al.mean >= 0.85 && min_sep > floor && secs < 300;
  out.detail = "SR " + fmt(res.report.sr) + "%, AL " + fmt(res.report.al.mean) + " (min trial " + fmt(al_min) +
               "), closest pair at any step " + fmt(min_sep) + " m (> " + fmt(floor) + "), " + fmt(secs, 3) + " s";
  return out;
}

// ---------------------------------------------------------------- 9 and 10. desk-scale learning

struct ProtocolRun {
  double first = 0, last = 0;
  int wins = 0, losses = 0;
  double p = 1.0;
  double flock_initial = 0, flock_trained = 0;
  double sr_initial = 0, sr_trained = 0;
  std::map<std::string, int> verdicts;
  double seconds = 0;
};

// P(X >= wins) for X ~ Binomial(wins + losses, 1/2); ties dropped.
double sign_test(int wins, int losses) {
  const int n = wins + losses;
  if (n == 0) return 1.0;
  double p = 0.0;
  for (int k = wins; k <= n; ++k) p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) - n * std::log(2.0));
  return std::min(1.0, p);
}

double window_mean(const std::vector<UpdateLog>& log, bool head) {
  const int n = std::min<int>(10, static_cast<int>(log.size()));
  double sum = 0;
  int used = 0;
  for (int k = 0; k < n; ++k) {
    const UpdateLog& u = head ? log[ix(k)] : log[log.size() - 1 - ix(k)];
    if (u.episodes > 0) {
      sum += u.mean_return;
      ++used;
    }
  }
  return used ? sum / used : std::nan("");
}

RunConfig desk_protocol(std::uint64_t seed, bool flocking) {
  RunConfig rc;
  rc.seed = seed;
  rc.env.scenario.n_followers = 2;
  rc.env.reward.toggles.flocking = flocking;
  rc.network = "desk";
  rc.hp.envs = 8;
  rc.total_timesteps = 300000;
  rc.single_thread = true;
  return rc;
}

const ProtocolRun& protocol_run(std::uint64_t seed, bool flocking) {
  static std::map<std::pair<std::uint64_t, bool>, ProtocolRun> cache;
  const auto key = std::make_pair(seed, flocking);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  const auto start = std::chrono::steady_clock::now();
  const RunConfig rc = desk_protocol(seed, flocking);
  rc.validate();
  TrainConfig tc = rc.train_config();
  tc.out_dir.clear();
  const TrainResult trained = train(tc);
  const EnvConfig eval = rc.env_config(EpisodeMode::eval);
  const auto run = [&](const PolicyNetwork& net) {
    return batch_evaluate([&] { return std::make_unique<PolicyController>(net, true); }, eval, 20, 1000);
  };
  const BatchResult before = run(trained.initial);
  const BatchResult after = run(trained.network);
  ProtocolRun r;
  r.first = window_mean(trained.log, true);
  r.last = window_mean(trained.log, false);
  for (int k = 0; k < 20; ++k) {
    const double a = after.trials[ix(k)].mean_flocking, b = before.trials[ix(k)].mean_flocking;
    r.flock_trained += a / 20;
    r.flock_initial += b / 20;
    r.wins += a > b;
    r.losses += a < b;
    ++r.verdicts[to_string(after.trials[ix(k)].verdict)];
  }
  r.p = sign_test(r.wins, r.losses);
  r.sr_initial = before.report.sr;
  r.sr_trained = after.report.sr;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::string verdicts;
  for (const auto& [v, n] : r.verdicts) verdicts += " " + v + "=" + std::to_string(n);
  note("seed " + std::to_string(seed) + (flocking ? " full reward" : " no flocking") + ": return " + fmt(r.first) + " -> " +
       fmt(r.last) + ", r_flock " + fmt(r.flock_initial) + " -> " + fmt(r.flock_trained) + " (" + std::to_string(r.wins) +
       " up, " + std::to_string(r.losses) + " down, p " + fmt(r.p, 3) + "), SR " + fmt(r.sr_initial) + " -> " +
       fmt(r.sr_trained) + ", verdicts" + verdicts + ", " + fmt(r.seconds, 4) + " s");
  return cache.emplace(key, r).first->second;
}

Outcome learning_signal() {
  int improved = 0, significant = 0, pooled_wins = 0, pooled_losses = 0;
  double secs = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ProtocolRun& r = protocol_run(seed, true);
    improved += r.last > r.first;
    significant += r.p < 0.05 && r.wins > r.losses;
    pooled_wins += r.wins;
    pooled_losses += r.losses;
    secs += r.seconds;
  }
  const double pooled = sign_test(pooled_wins, pooled_losses);
  Outcome out;
  out.pass = improved >= 4 && significant >= 4 && secs < 3600;
  out.detail = "(a) return improved in " + std::to_string(improved) + "/5 seeds; (b) r_flock sign test p < 0.05 in " +
               std::to_string(significant) + "/5 seeds, pooled " + std::to_string(pooled_wins) + " up " +
               std::to_string(pooled_losses) + " down p " + fmt(pooled, 3) + "; " + fmt(secs, 4) + " s";
  return out;
}

Outcome ablation_direction() {
  double full = 0, ablated = 0, secs = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ProtocolRun& a = protocol_run(seed, true);
    const ProtocolRun& b = protocol_run(seed, false);
    full += a.sr_trained / 5;
    ablated += b.sr_trained / 5;
    secs += a.seconds + b.seconds;
  }
  Outcome out;
  out.pass = ablated < full && secs < 7200;
  out.detail = "desk SR full " + fmt(full) + "% vs no flocking " + fmt(ablated) + "% over 5 seeds, " + fmt(secs, 4) + " s";
  return out;
}

// ---------------------------------------------------------------- 11. determinism

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    files[fs::relative(e.path(), root).string()] = s.str();
  }
  return files;
}

int cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"swarmnav"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err, [](const std::string&) {
    return std::optional<std::string>{};
  });
  if (code != 0) note("swarmnav " + args.front() + " exited " + std::to_string(code) + ": " + err.str());
  return code;
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "swarmnav_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path cfg = root / "quick.toml";
  std::ofstream(cfg) << "[scenario]\nn_followers = 3\nepisode_time_limit = 6.0\n\n[rl]\nnetwork = \"tiny\"\nenvs = 2\n"
                        "rollout = 64\ntotal_timesteps = 768\n";
  const fs::path work = root / "work";
  const fs::path ckpt = root / "policy.swnv";
  const auto commands = [&]() -> std::vector<std::vector<std::string>> {
    const std::string c = cfg.string();
    const auto at = [&](const char* sub) { return (work / sub).string(); };
    return {
        {"train", "--config", c, "--seed", "4", "--single-thread", "--out", at("train")},
        {"eval", "--config", c, "--seed", "4", "--single-thread", "--trials", "3", "--out", at("eval_baseline")},
        {"eval", "--config", c, "--seed", "4", "--single-thread", "--trials", "2", "--checkpoint", ckpt.string(), "--out", at("eval_policy")},
        {"ablate", "--config", c, "--seed", "4", "--single-thread", "--configs", "proposed,no_perception", "--trials", "2",
         "--timesteps", "512", "--out", at("ablate")},
        {"export", "--config", c, "--seed", "4", "--single-thread", "--checkpoint", ckpt.string(), "--out", at("export")},
        {"inspect-perception", "--config", c, "--seed", "4", "--single-thread", "--frames", "5", "--out", at("inspect")},
    };
  };
  std::vector<std::map<std::string, std::string>> runs;
  int failures = 0;
  for (int pass = 0; pass < 2; ++pass) {
    fs::remove_all(work);
    const auto cmds = commands();
    failures += cli(cmds[0]) != 0;
    if (pass == 0 && fs::exists(work / "train" / "policy.swnv")) fs::copy_file(work / "train" / "policy.swnv", ckpt);
    for (std::size_t k = 1; k < cmds.size(); ++k) failures += cli(cmds[k]) != 0;
    runs.push_back(snapshot(work));
  }
  int differing = 0;
  for (const auto& [name, bytes] : runs[0]) {
    auto it = runs[1].find(name);
    if (it == runs[1].end() || it->second != bytes) {
      ++differing;
      note("differs: " + name);
    }
  }
  differing += static_cast<int>(runs[1].size() != runs[0].size());
  fs::remove_all(root);
  Outcome out;
  out.pass = failures == 0 && differing == 0 && runs[0].size() >= 6;
  out.detail = "6 commands twice, " + std::to_string(runs[0].size()) + " files, " + std::to_string(differing) + " differ, " +
               std::to_string(failures) + " command failures";
  return out;
}

struct Criterion {
  int id;
  std::string name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"swarmnav acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "criterion numbers to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "reward golden suite", reward_golden},
      {2, "GAE oracle", gae_oracle},
      {3, "PPO gradient check", gradient_oracle},
      {4, "DBSCAN oracle", dbscan_oracle},
      {5, "EKF convergence", ekf_convergence},
      {6, "perception end-to-end", perception_end_to_end},
      {7, "metric oracle", metric_oracle},
      {8, "baseline collective navigation", baseline_navigation},
      {9, "desk-scale learning signal", learning_signal},
      {10, "ablation direction", ablation_direction},
      {11, "determinism", determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    std::cout << "[" << c.id << "] " << c.name << std::endl;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << c.id << " " << c.name << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
