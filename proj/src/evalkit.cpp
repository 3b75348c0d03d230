#include "swarmnav/evalkit.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <exception>
#include <istream>
#include <mutex>
#include <ostream>
#include <thread>

namespace swarmnav {

namespace {

void accumulate(RewardBreakdown& sum, const RewardBreakdown& r, double scale = 1.0) {
  sum.separation += scale * r.separation;
  sum.cohesion += scale * r.cohesion;
  sum.proximity += scale * r.proximity;
  sum.direction += scale * r.direction;
  sum.altitude += scale * r.altitude;
  sum.attitude += scale * r.attitude;
  sum.visibility += scale * r.visibility;
  sum.recovery += scale * r.recovery;
  sum.collision += scale * r.collision;
  sum.total += scale * r.total;
}

TrajectoryFrame snapshot(const SwarmEnv& env) {
  TrajectoryFrame f;
  f.time = env.time();
  for (const auto& u : env.uavs()) {
    f.positions.push_back(u.position);
    f.velocities.push_back(u.velocity);
  }
  f.detections = env.detection_points();
  return f;
}

}  // namespace

RewardBreakdown Trajectory::mean_reward() const {
  RewardBreakdown m;
  const int n = std::max(steps, 1);
  if (reward_sums.empty()) return m;
  const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(reward_sums.size()));
  for (const auto& r : reward_sums) accumulate(m, r, scale);
  return m;
}

void BaselineParams::validate() const {
  if (k_coh < 0 || k_sep < 0 || k_rep < 0 || k_alt < 0) throw ValidationError("baseline: gains must be >= 0");
  if (!(d_sep > 0) || !(d_coh > 0) || !(rep_radius > 0)) throw ValidationError("baseline: radii must be > 0");
  if (!(v_max > 0)) throw ValidationError("baseline: v_max must be > 0");
}

Vec3 baseline_command(std::span<const RelativeNeighbor> neighbors, std::span<const Vec3> obstacle_offsets,
                      const BaselineParams& params) {
  Vec3 cmd = Vec3::Zero();
  if (!neighbors.empty()) {
    Vec3 centroid = Vec3::Zero();
    for (const auto& n : neighbors) centroid += n.rel_position;
    centroid /= static_cast<double>(neighbors.size());
    Vec3 planar = centroid;
    planar.z() = 0.0;
    if (planar.norm() > params.d_coh) cmd += params.k_coh * planar;
    for (const auto& n : neighbors) {
      Vec3 h = n.rel_position;
      h.z() = 0.0;
      const double d = h.norm();
      if (d < params.d_sep && d > 1e-9) cmd -= params.k_sep * (params.d_sep / d - 1.0) * h / d;
    }
    if (std::abs(centroid.z()) > params.alt_deadband) cmd.z() += params.k_alt * centroid.z();
  }
  if (!obstacle_offsets.empty()) {
    ApfParams apf;
    apf.k_rep = params.k_rep;
    apf.rep_radius = params.rep_radius;
    cmd += apf_repulsion(Vec3::Zero(), obstacle_offsets, apf);
  }
  return clamp_command(cmd, params.v_max);
}

std::vector<Vec3> BaselineController::act(std::span<const AgentView> views) {
  std::vector<Vec3> out;
  out.reserve(views.size());
  for (const auto& v : views) out.push_back(baseline_command(v.neighbors, v.obstacle_offsets, params_));
  return out;
}

Trajectory run_episode(FollowerController& controller, const EnvConfig& config, std::uint64_t seed) {
  SwarmEnv env(config);
  env.reset(seed);
  controller.reset(seed);
  Trajectory traj;
  traj.seed = seed;
  traj.dt = config.scenario.dt;
  traj.leader_start = env.uavs()[0].position;
  traj.goal = env.scenario().goal;
  traj.reward_sums.assign(static_cast<std::size_t>(env.n_followers()), RewardBreakdown{});
  traj.frames.push_back(snapshot(env));
  while (!env.finished()) {
    const auto cmds = controller.act(env.views());
    const StepResult r = env.step(cmds);
    if (!r.fault.empty()) {
      traj.fault = r.fault;
      break;
    }
    ++traj.steps;
    for (std::size_t k = 0; k < r.rewards.size(); ++k) accumulate(traj.reward_sums[k], r.rewards[k]);
    if (!is_failure(r.verdict)) traj.frames.push_back(snapshot(env));
  }
  traj.verdict = env.verdict();
  traj.mission_complete = env.mission().complete;
  traj.success = env.success();
  return traj;
}

double metric_sr(std::span<const Trajectory> trials) {
  if (trials.empty()) throw ValidationError("metric_sr: no trials");
  const auto ok = std::count_if(trials.begin(), trials.end(), [](const Trajectory& t) { return t.success; });
  return 100.0 * static_cast<double>(ok) / static_cast<double>(trials.size());
}

MissionProgress metric_mp(const Trajectory& t) {
  if (t.frames.empty()) throw ValidationError("metric_mp: empty trajectory");
  const double total = (t.leader_start - t.goal).norm();
  if (total < 1e-12) return {100.0, true};
  const double remaining = (t.frames.back().positions[0] - t.goal).norm();
  return {(1.0 - remaining / total) * 100.0, false};
}

double metric_fr(const Trajectory& t) {
  if (t.frames.empty()) throw ValidationError("metric_fr: empty trajectory");
  double sum = 0.0;
  for (const auto& f : t.frames) {
    Vec3 center = Vec3::Zero();
    for (const auto& p : f.positions) center += p;
    center /= static_cast<double>(f.positions.size());
    double far = 0.0;
    for (const auto& p : f.positions) far = std::max(far, (p - center).norm());
    sum += far;
  }
  return sum / static_cast<double>(t.frames.size());
}

double metric_ms(const Trajectory& t) {
  if (t.frames.empty() || t.n_uavs() < 2) throw ValidationError("metric_ms: need >= 2 UAVs and a frame");
  double sum = 0.0;
  for (const auto& f : t.frames) {
    double m = kInf;
    for (std::size_t i = 0; i < f.positions.size(); ++i) {
      for (std::size_t j = i + 1; j < f.positions.size(); ++j) m = std::min(m, (f.positions[i] - f.positions[j]).norm());
    }
    sum += m;
  }
  return sum / static_cast<double>(t.frames.size());
}

std::optional<double> metric_al(const Trajectory& t) {
  if (t.n_uavs() < 2) throw ValidationError("metric_al: need >= 2 UAVs");
  double sum = 0.0;
  int steps = 0;
  for (const auto& f : t.frames) {
    Vec3 avg = Vec3::Zero();
    bool still = false;
    for (const auto& v : f.velocities) {
      avg += v;
      if (v.norm() < 1e-6) still = true;
    }
    avg /= static_cast<double>(f.velocities.size());
    if (still || avg.norm() < 1e-6) continue;
    double c = 0.0;
    for (const auto& v : f.velocities) c += v.dot(avg) / (v.norm() * avg.norm());
    sum += c / static_cast<double>(f.velocities.size());
    ++steps;
  }
  if (steps == 0) return std::nullopt;
  return sum / steps;
}

std::optional<double> metric_mdo(const Trajectory& t) {
  double sum = 0.0;
  int steps = 0;
  for (const auto& f : t.frames) {
    if (f.detections.empty()) continue;
    double m = kInf;
    for (const auto& p : f.positions) {
      for (const auto& o : f.detections) m = std::min(m, (p - o).norm());
    }
    sum += m;
    ++steps;
  }
  if (steps == 0) return std::nullopt;
  return sum / steps;
}

TrialMetrics trial_metrics(const Trajectory& t) {
  TrialMetrics m;
  m.seed = t.seed;
  m.success = t.success;
  m.verdict = t.verdict;
  m.length = t.length();
  m.mp = metric_mp(t);
  m.fr = metric_fr(t);
  if (t.n_uavs() >= 2) {
    m.ms = metric_ms(t);
    m.al = metric_al(t);
  }
  m.mdo = metric_mdo(t);
  const RewardBreakdown r = t.mean_reward();
  m.mean_reward = r.total;
  m.mean_flocking = r.flocking();
  return m;
}

MeanStd mean_std(std::span<const double> values) {
  MeanStd s;
  s.count = static_cast<int>(values.size());
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / static_cast<double>(values.size()));
  return s;
}

MetricsReport aggregate(std::span<const TrialMetrics> trials) {
  if (trials.empty()) throw ValidationError("aggregate: no trials");
  MetricsReport r;
  r.trials = static_cast<int>(trials.size());
  std::vector<double> mp, fr, ms, al, mdo;
  int ok = 0;
  for (const auto& t : trials) {
    ok += t.success ? 1 : 0;
    mp.push_back(t.mp.percent);
    fr.push_back(t.fr);
    ms.push_back(t.ms);
    if (t.al) al.push_back(*t.al);
    if (t.mdo) mdo.push_back(*t.mdo);
  }
  r.sr = 100.0 * ok / static_cast<double>(trials.size());
  r.mp = mean_std(mp);
  r.fr = mean_std(fr);
  r.ms = mean_std(ms);
  r.al = mean_std(al);
  r.mdo = mean_std(mdo);
  return r;
}

BatchResult batch_evaluate(const ControllerFactory& factory, const EnvConfig& config, int n_trials,
                           std::uint64_t base_seed, int threads, bool keep_trajectories) {
  if (n_trials < 1) throw ValidationError("batch_evaluate: n_trials must be >= 1");
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n_trials));
  for (int k = 0; k < n_trials; ++k) seeds[static_cast<std::size_t>(k)] = base_seed + static_cast<std::uint64_t>(k);
  return batch_evaluate(factory, config, seeds, threads, keep_trajectories);
}

BatchResult batch_evaluate(const ControllerFactory& factory, const EnvConfig& config,
                           std::span<const std::uint64_t> seeds, int threads, bool keep_trajectories) {
  if (seeds.empty()) throw ValidationError("batch_evaluate: no seeds");
  const std::size_t n = seeds.size();
  std::vector<Trajectory> trajs(n);
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    auto controller = factory();
    for (std::size_t k = next++; k < n; k = next++) {
      try {
        trajs[k] = run_episode(*controller, config, seeds[k]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const int workers = std::clamp(threads, 1, static_cast<int>(n));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
  BatchResult out;
  for (const auto& t : trajs) out.trials.push_back(trial_metrics(t));
  out.report = aggregate(out.trials);
  if (keep_trajectories) out.trajectories = std::move(trajs);
  return out;
}

namespace {

void put_opt(std::ostream& out, const MeanStd& s) {
  if (s.count == 0) {
    out << "-,-," << s.count;
  } else {
    out << s.mean << ',' << s.std << ',' << s.count;
  }
}

}  // namespace

void write_metrics_csv(std::ostream& out, const MetricsReport& r, const std::string& label) {
  const std::string prefix = label.empty() ? "" : label + ",";
  out << (label.empty() ? "" : "config,") << "metric,mean,std,count\n";
  out << prefix << "SR," << r.sr << ",0," << r.trials << '\n';
  const std::pair<const char*, const MeanStd*> rows[] = {{"MP", &r.mp}, {"FR", &r.fr},  {"MS", &r.ms},
                                                         {"AL", &r.al}, {"MDO", &r.mdo}};
  for (const auto& [name, s] : rows) {
    out << prefix << name << ',';
    put_opt(out, *s);
    out << '\n';
  }
}

void write_trials_csv(std::ostream& out, std::span<const TrialMetrics> trials) {
  out << "seed,success,verdict,length,mp,fr,ms,al,mdo,mean_reward,mean_flocking\n";
  for (const auto& t : trials) {
    out << t.seed << ',' << (t.success ? 1 : 0) << ',' << to_string(t.verdict) << ',' << t.length << ','
        << t.mp.percent << ',' << t.fr << ',' << t.ms << ',';
    if (t.al) out << *t.al;
    else out << '-';
    out << ',';
    if (t.mdo) out << *t.mdo;
    else out << '-';
    out << ',' << t.mean_reward << ',' << t.mean_flocking << '\n';
  }
}

namespace {

nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

nlohmann::json vecs_json(std::span<const Vec3> vs) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& v : vs) a.push_back(vec_json(v));
  return a;
}

Vec3 json_vec(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw std::runtime_error("trajectory: expected a 3-vector");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

std::vector<Vec3> json_vecs(const nlohmann::json& j) {
  std::vector<Vec3> out;
  for (const auto& e : j) out.push_back(json_vec(e));
  return out;
}

nlohmann::json breakdown_json(const RewardBreakdown& b) {
  return {{"separation", b.separation}, {"cohesion", b.cohesion},   {"proximity", b.proximity},
          {"direction", b.direction},   {"altitude", b.altitude},   {"attitude", b.attitude},
          {"visibility", b.visibility}, {"recovery", b.recovery},   {"collision", b.collision},
          {"total", b.total}};
}

RewardBreakdown json_breakdown(const nlohmann::json& j) {
  RewardBreakdown b;
  b.separation = j.at("separation");
  b.cohesion = j.at("cohesion");
  b.proximity = j.at("proximity");
  b.direction = j.at("direction");
  b.altitude = j.at("altitude");
  b.attitude = j.at("attitude");
  b.visibility = j.at("visibility");
  b.recovery = j.at("recovery");
  b.collision = j.at("collision");
  b.total = j.at("total");
  return b;
}

}  // namespace

void write_trajectory_jsonl(std::ostream& out, const Trajectory& t) {
  nlohmann::json head = {{"seed", t.seed},
                         {"dt", t.dt},
                         {"verdict", to_string(t.verdict)},
                         {"mission_complete", t.mission_complete},
                         {"success", t.success},
                         {"leader_start", vec_json(t.leader_start)},
                         {"goal", vec_json(t.goal)},
                         {"frames", t.frames.size()},
                         {"steps", t.steps},
                         {"fault", t.fault}};
  nlohmann::json sums = nlohmann::json::array();
  for (const auto& r : t.reward_sums) sums.push_back(breakdown_json(r));
  head["reward_sums"] = sums;
  out << head.dump() << '\n';
  for (const auto& f : t.frames) {
    nlohmann::json j = {{"t", f.time},
                        {"p", vecs_json(f.positions)},
                        {"v", vecs_json(f.velocities)},
                        {"o", vecs_json(f.detections)}};
    out << j.dump() << '\n';
  }
}

Trajectory read_trajectory_jsonl(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("trajectory: empty stream");
  Trajectory t;
  try {
    const auto head = nlohmann::json::parse(line);
    t.seed = head.at("seed").get<std::uint64_t>();
    t.dt = head.at("dt").get<double>();
    const auto v = verdict_from_string(head.at("verdict").get<std::string>());
    if (!v) throw std::runtime_error("trajectory: unknown verdict");
    t.verdict = *v;
    t.mission_complete = head.at("mission_complete").get<bool>();
    t.success = head.at("success").get<bool>();
    t.leader_start = json_vec(head.at("leader_start"));
    t.goal = json_vec(head.at("goal"));
    t.fault = head.value("fault", "");
    t.steps = head.at("steps").get<int>();
    for (const auto& r : head.at("reward_sums")) t.reward_sums.push_back(json_breakdown(r));
    const auto n = head.at("frames").get<std::size_t>();
    for (std::size_t k = 0; k < n; ++k) {
      if (!std::getline(in, line)) throw std::runtime_error("trajectory: truncated stream");
      const auto j = nlohmann::json::parse(line);
      TrajectoryFrame f;
      f.time = j.at("t").get<double>();
      f.positions = json_vecs(j.at("p"));
      f.velocities = json_vecs(j.at("v"));
      f.detections = json_vecs(j.at("o"));
      t.frames.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("trajectory: ") + e.what());
  }
  return t;
}

namespace {

constexpr std::uint32_t kTrajectoryVersion = 1;

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int k = 0; k < 8; ++k) b[k] = static_cast<char>((v >> (8 * k)) & 0xffu);
  out.write(b, 8);
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void put_vec(std::ostream& out, const Vec3& v) {
  for (int k = 0; k < 3; ++k) put_f64(out, v[k]);
}

void put_vecs(std::ostream& out, std::span<const Vec3> vs) {
  put_u64(out, vs.size());
  for (const auto& v : vs) put_vec(out, v);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("trajectory: truncated binary stream");
  std::uint64_t v = 0;
  for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(b[k]) << (8 * k);
  return v;
}

double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

Vec3 get_vec(std::istream& in) {
  Vec3 v;
  for (int k = 0; k < 3; ++k) v[k] = get_f64(in);
  return v;
}

std::vector<Vec3> get_vecs(std::istream& in) {
  const std::uint64_t n = get_u64(in);
  if (n > (1ULL << 32)) throw std::runtime_error("trajectory: implausible vector count");
  std::vector<Vec3> out;
  out.reserve(static_cast<std::size_t>(n));
  for (std::uint64_t k = 0; k < n; ++k) out.push_back(get_vec(in));
  return out;
}

void put_breakdown(std::ostream& out, const RewardBreakdown& b) {
  for (double v : {b.separation, b.cohesion, b.proximity, b.direction, b.altitude, b.attitude, b.visibility,
                   b.recovery, b.collision, b.total}) {
    put_f64(out, v);
  }
}

RewardBreakdown get_breakdown(std::istream& in) {
  RewardBreakdown b;
  for (double* v : {&b.separation, &b.cohesion, &b.proximity, &b.direction, &b.altitude, &b.attitude,
                    &b.visibility, &b.recovery, &b.collision, &b.total}) {
    *v = get_f64(in);
  }
  return b;
}

}  // namespace

void write_trajectory_binary(std::ostream& out, const Trajectory& t) {
  out.write("SWTR", 4);
  put_u64(out, kTrajectoryVersion);
  put_u64(out, t.seed);
  put_f64(out, t.dt);
  put_u64(out, static_cast<std::uint64_t>(t.verdict));
  put_u64(out, (t.mission_complete ? 1u : 0u) | (t.success ? 2u : 0u));
  put_vec(out, t.leader_start);
  put_vec(out, t.goal);
  put_u64(out, static_cast<std::uint64_t>(t.steps));
  put_u64(out, t.reward_sums.size());
  for (const auto& r : t.reward_sums) put_breakdown(out, r);
  put_u64(out, t.frames.size());
  for (const auto& f : t.frames) {
    put_f64(out, f.time);
    put_vecs(out, f.positions);
    put_vecs(out, f.velocities);
    put_vecs(out, f.detections);
  }
}

Trajectory read_trajectory_binary(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "SWTR") throw std::runtime_error("trajectory: bad magic");
  if (get_u64(in) != kTrajectoryVersion) throw std::runtime_error("trajectory: unsupported version");
  Trajectory t;
  t.seed = get_u64(in);
  t.dt = get_f64(in);
  const std::uint64_t v = get_u64(in);
  if (v > static_cast<std::uint64_t>(Verdict::controller_fault)) throw std::runtime_error("trajectory: bad verdict");
  t.verdict = static_cast<Verdict>(v);
  const std::uint64_t flags = get_u64(in);
  t.mission_complete = (flags & 1u) != 0;
  t.success = (flags & 2u) != 0;
  t.leader_start = get_vec(in);
  t.goal = get_vec(in);
  t.steps = static_cast<int>(get_u64(in));
  const std::uint64_t nr = get_u64(in);
  if (nr > 4096) throw std::runtime_error("trajectory: implausible follower count");
  for (std::uint64_t k = 0; k < nr; ++k) t.reward_sums.push_back(get_breakdown(in));
  const std::uint64_t nf = get_u64(in);
  for (std::uint64_t k = 0; k < nf; ++k) {
    TrajectoryFrame f;
    f.time = get_f64(in);
    f.positions = get_vecs(in);
    f.velocities = get_vecs(in);
    f.detections = get_vecs(in);
    t.frames.push_back(std::move(f));
  }
  return t;
}

}  // namespace swarmnav
