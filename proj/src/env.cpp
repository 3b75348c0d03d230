#include "swarmnav/env.hpp"

#include <algorithm>
#include <cmath>

namespace swarmnav {

std::string to_string(PerceptionMode mode) { return mode == PerceptionMode::truth ? "truth" : "pipeline"; }

PerceptionMode perception_mode_from_string(const std::string& name) {
  if (name == "truth") return PerceptionMode::truth;
  if (name == "pipeline") return PerceptionMode::pipeline;
  throw ValidationError("unknown perception mode '" + name + "' (truth|pipeline)");
}

std::string to_string(EpisodeMode mode) { return mode == EpisodeMode::train ? "train" : "eval"; }

EpisodeMode episode_mode_from_string(const std::string& name) {
  if (name == "train") return EpisodeMode::train;
  if (name == "eval") return EpisodeMode::eval;
  throw ValidationError("unknown episode mode '" + name + "' (train|eval)");
}

void EnvConfig::validate() const {
  scenario.validate();
  reward.validate();
  apf.validate();
  if (scenario.n_followers < 1) throw ValidationError("env: need at least one follower");
  if (max_neighbors < 1) throw ValidationError("env: max_neighbors must be >= 1");
  if (ego_delay < 0 || lidar_delay < 0 || neighbor_delay < 0) throw ValidationError("env: delays must be >= 0");
  if (!(replan_period > 0)) throw ValidationError("env: replan_period must be > 0");
  if (!(leader_lost_window > 0)) throw ValidationError("env: leader_lost_window must be > 0");
  if (!(limits.min_altitude < limits.max_altitude)) throw ValidationError("env: altitude band is empty");
  if (!(limits.v_max > 0)) throw ValidationError("env: v_max must be > 0");
  if (filter.stacked_frames < 1) throw ValidationError("env: stacked_frames must be >= 1");
}

namespace {

LidarParams obstacle_only(LidarParams p) {
  p.include_uav_bodies = false;
  p.include_ground = false;
  return p;
}

std::vector<Vec3> to_map(const PointCloud& cloud, std::span<const LidarPoint> points) {
  std::vector<Vec3> out;
  out.reserve(points.size());
  const Eigen::Matrix3d rot = cloud.sensor_orientation.toRotationMatrix();
  for (const auto& p : points) out.emplace_back(cloud.sensor_position + rot * p.position);
  return out;
}

}  // namespace

SwarmEnv::SwarmEnv(EnvConfig config)
    : config_(std::move(config)),
      lidar_(config_.lidar),
      obstacle_lidar_(obstacle_only(config_.lidar)),
      planner_(config_.rrt, config_.apf, config_.replan_period),
      monitor_(config_.leader_lost_window) {
  config_.validate();
}

void SwarmEnv::reset(std::uint64_t seed) {
  rng_.seed(seed ^ 0x5eedf00dULL);
  scenario_ = generate_scenario(config_.scenario, seed);
  uavs_ = scenario_.uavs;
  mission_ = WaypointMission{};
  if (!config_.empty_mission) mission_.waypoints = {scenario_.goal};
  mission_.cruise_speed = scenario_.leader_speed;
  planner_.reset();
  monitor_.reset();
  const std::size_t n = uavs_.size();
  trackers_.assign(n, NeighborTracker(config_.filter, config_.cluster, config_.ekf));
  ego_lines_.assign(n, DelayLine<UavState>(config_.ego_delay));
  neighbor_lines_.assign(n, DelayLine<std::vector<RelativeNeighbor>>(config_.neighbor_delay));
  cloud_lines_.assign(n, DelayLine<PointCloud>(config_.lidar_delay));
  steps_ = 0;
  verdict_ = Verdict::running;

  // hover in place long enough to fill every delay line before the clock starts
  const double longest = std::max({config_.ego_delay, config_.lidar_delay, config_.neighbor_delay});
  const int warm = static_cast<int>(std::ceil(longest / config_.scenario.dt - 1e-9)) + 1;
  for (int k = warm; k >= 0; --k) {
    time_ = -config_.scenario.dt * k;
    sense();
  }
  time_ = 0.0;
  build_views();
}

void SwarmEnv::sense() {
  const std::size_t n = uavs_.size();
  const WorldSnapshot world{uavs_, &scenario_.field, time_};
  clouds_.assign(n, PointCloud{});
  cell_points_.assign(n, {});
  perceived_.assign(n, 0);
  detections_.clear();
  leader_seen_ = false;
  const Vec3 leader = uavs_[0].position;
  for (std::size_t i = 0; i < n; ++i) {
    const int id = static_cast<int>(i);
    std::vector<RelativeNeighbor> rel;
    if (config_.perception == PerceptionMode::truth) {
      clouds_[i] = obstacle_lidar_.scan(world, id, rng_);
      const auto ids = visible_neighbors(world, id, config_.lidar);
      rel = estimate_relative_states(uavs_, ids, uavs_[i], config_.truth_noise, rng_);
      if (i > 0 && std::find(ids.begin(), ids.end(), 0) != ids.end()) leader_seen_ = true;
    } else {
      clouds_[i] = lidar_.scan(world, id, rng_);
      trackers_[i].process(clouds_[i], uavs_[i].position);
      const auto validated = trackers_[i].validated();
      rel = estimate_relative_states(validated, uavs_[i]);
      if (i > 0) {
        for (const auto& t : validated) {
          if ((t.centroid - leader).norm() < config_.leader_match_radius) leader_seen_ = true;
        }
      }
    }
    perceived_[i] = static_cast<int>(rel.size());
    const auto cells = cell_nearest_points(clouds_[i].points);
    cell_points_[i] = to_map(clouds_[i], cells);
    detections_.insert(detections_.end(), cell_points_[i].begin(), cell_points_[i].end());
    neighbor_lines_[i].push(time_, std::move(rel));
    ego_lines_[i].push(time_, uavs_[i]);
    cloud_lines_[i].push(time_, clouds_[i]);
  }
}

void SwarmEnv::build_views() {
  const std::size_t n = uavs_.size();
  views_.assign(n - 1, AgentView{});
  const NeighborSlotPolicy policy{config_.max_neighbors};
  for (std::size_t i = 1; i < n; ++i) {
    AgentView& v = views_[i - 1];
    v.ego = ego_lines_[i].fetch(time_);
    const EgoBlock eb = build_ego(v.ego);
    v.observation.ego = eb.values;
    v.observation.warmup = eb.warmup;
    if (auto rel = neighbor_lines_[i].fetch(time_)) v.neighbors = std::move(*rel);
    auto block = build_neighbor_block(v.neighbors, policy);
    // the network input is fixed at six slots: fewer are zero-padded, more are cut after the sixth nearest
    block.resize(static_cast<std::size_t>(kSlotDim * kDefaultNeighborSlots), 0.0);
    v.observation.neighbors = std::move(block);
    if (auto cloud = cloud_lines_[i].fetch(time_)) {
      v.observation.grid = build_occupancy_grid(cloud->points);
      const Eigen::Matrix3d rot = cloud->sensor_orientation.toRotationMatrix();
      for (const auto& p : cell_nearest_points(cloud->points)) v.obstacle_offsets.emplace_back(rot * p.position);
    }
  }
}

StepResult SwarmEnv::step(std::span<const Vec3> follower_commands) {
  if (finished()) throw ValidationError("env: step after the episode finished; call reset");
  if (static_cast<int>(follower_commands.size()) != n_followers()) {
    throw ValidationError("env: expected " + std::to_string(n_followers()) + " follower commands");
  }
  StepResult result;
  for (std::size_t k = 0; k < follower_commands.size(); ++k) {
    if (!follower_commands[k].allFinite()) {
      verdict_ = Verdict::controller_fault;
      result.verdict = verdict_;
      result.terminated = true;
      result.fault = "follower " + std::to_string(k + 1) + " issued a non-finite command";
      result.rewards.assign(follower_commands.size(), RewardBreakdown{});
      return result;
    }
  }

  std::vector<Vec3> leader_points;
  if (auto cloud = cloud_lines_[0].fetch(time_)) {
    std::vector<LidarPoint> obstacles;
    for (const auto& p : cloud->points) {
      if (p.kind == HitKind::pillar) obstacles.push_back(p);
    }
    leader_points = to_map(*cloud, obstacles);
  }
  const Vec3 leader_cmd = planner_.command(uavs_[0], mission_, leader_points, time_, rng_);

  const double dt = config_.scenario.dt;
  uavs_[0] = step_kinematics(uavs_[0], leader_cmd, dt, config_.limits.v_max);
  for (std::size_t k = 0; k < follower_commands.size(); ++k) {
    uavs_[k + 1] = step_kinematics(uavs_[k + 1], follower_commands[k], dt, config_.limits.v_max);
  }
  ++steps_;
  time_ = steps_ * dt;
  if (mission_.has_target()) mission_ = advance_mission(uavs_[0], mission_);

  sense();

  const CollisionReport collisions = check_collisions(uavs_, scenario_.field);
  std::vector<bool> collided(uavs_.size(), false);
  for (const auto& [a, b] : collisions.uav_pairs) {
    collided[static_cast<std::size_t>(a)] = true;
    collided[static_cast<std::size_t>(b)] = true;
  }
  for (int i : collisions.obstacle_hits) collided[static_cast<std::size_t>(i)] = true;

  const int universe = n_uavs() - 1;
  result.rewards.reserve(follower_commands.size());
  for (int i = 1; i < n_uavs(); ++i) {
    const RewardContext ctx{uavs_, i, cell_points_[static_cast<std::size_t>(i)],
                            perceived_[static_cast<std::size_t>(i)], universe, collided[static_cast<std::size_t>(i)]};
    result.rewards.push_back(compute_reward(ctx, config_.reward));
  }

  const bool lost = monitor_.update(time_, leader_seen_);
  TerminationInput in;
  in.uavs = uavs_;
  in.field = &scenario_.field;
  in.limits = config_.limits;
  in.time = time_;
  in.time_limit = config_.scenario.episode_time_limit;
  in.mode = config_.mode;
  in.leader_lost = lost;
  in.goal_reached = mission_.complete;
  verdict_ = terminate(in);
  result.verdict = verdict_;
  result.terminated = is_failure(verdict_);
  result.truncated = verdict_ == Verdict::goal_reached || verdict_ == Verdict::truncated;

  build_views();
  return result;
}

bool SwarmEnv::success() const {
  if (!mission_.complete || is_failure(verdict_)) return false;
  const Vec3 c = center_of_mass(uavs_);
  for (std::size_t i = 1; i < uavs_.size(); ++i) {
    if ((uavs_[i].position - c).norm() > config_.follow_radius) return false;
  }
  return true;
}

}  // namespace swarmnav
