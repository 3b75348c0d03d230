#include "swarmnav/cli.hpp"

#include "CLI11.hpp"
#include "json.hpp"
#include "toml.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

namespace swarmnav {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

/// Artifact or filesystem failure; exit code 3.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Every configurable field in file order. C is RunConfig or const RunConfig.
template <class C, class F>
void for_each_field(C& c, F&& f) {
  f("run", "mode", c.mode);
  f("run", "seed", c.seed);
  f("run", "single_thread", c.single_thread);
  f("run", "threads", c.threads);
  f("run", "out", c.out);

  auto& s = c.env.scenario;
  f("scenario", "n_followers", s.n_followers);
  f("scenario", "min_gap", s.min_gap);
  f("scenario", "n_pillars", s.n_pillars);
  f("scenario", "pillar_radius_min", s.pillar_radius_min);
  f("scenario", "pillar_radius_max", s.pillar_radius_max);
  f("scenario", "pillar_height", s.pillar_height);
  f("scenario", "map_half_extent", s.map_half_extent);
  f("scenario", "spawn_clearing", s.spawn_clearing);
  f("scenario", "goal_radius", s.goal_radius);
  f("scenario", "spawn_spacing", s.spawn_spacing);
  f("scenario", "spawn_altitude", s.spawn_altitude);
  f("scenario", "uav_radius", s.uav_radius);
  f("scenario", "leader_speed_min", s.leader_speed_min);
  f("scenario", "leader_speed_max", s.leader_speed_max);
  f("scenario", "episode_time_limit", s.episode_time_limit);
  f("scenario", "dt", s.dt);
  f("scenario", "randomize_yaw", s.randomize_yaw);

  f("limits", "v_max", c.env.limits.v_max);
  f("limits", "min_altitude", c.env.limits.min_altitude);
  f("limits", "max_altitude", c.env.limits.max_altitude);

  f("env", "perception", c.env.perception);
  f("env", "ego_delay", c.env.ego_delay);
  f("env", "lidar_delay", c.env.lidar_delay);
  f("env", "neighbor_delay", c.env.neighbor_delay);
  f("env", "leader_lost_window", c.env.leader_lost_window);
  f("env", "leader_match_radius", c.env.leader_match_radius);
  f("env", "follow_radius", c.env.follow_radius);
  f("env", "replan_period", c.env.replan_period);

  auto& r = c.env.reward;
  f("reward", "w_flock", r.w_flock);
  f("reward", "w_obstacle", r.w_obstacle);
  f("reward", "w_stable", r.w_stable);
  f("reward", "w_perception", r.w_perception);
  f("reward", "d_sep", r.d_sep);
  f("reward", "d_coh", r.d_coh);
  f("reward", "d_prox", r.d_prox);
  f("reward", "theta_threshold_deg", r.theta_threshold_deg);
  f("reward", "alpha", r.alpha);
  f("reward", "beta", r.beta);
  f("reward", "h_recovery", r.h_recovery);
  f("reward", "collision_penalty", r.collision_penalty);
  f("reward", "flocking", r.toggles.flocking);
  f("reward", "obstacle", r.toggles.obstacle);
  f("reward", "stable", r.toggles.stable);
  f("reward", "perception", r.toggles.perception);
  f("reward", "uniform_weights", r.toggles.uniform_weights);

  f("rl", "network", c.network);
  f("rl", "total_timesteps", c.total_timesteps);
  f("rl", "clip", c.hp.clip);
  f("rl", "c1", c.hp.c1);
  f("rl", "c2", c.hp.c2);
  f("rl", "gamma", c.hp.gamma);
  f("rl", "lambda", c.hp.lambda);
  f("rl", "lr", c.hp.lr);
  f("rl", "lr_encoder", c.hp.lr_encoder);
  f("rl", "lr_actor", c.hp.lr_actor);
  f("rl", "lr_critic", c.hp.lr_critic);
  f("rl", "epochs", c.hp.epochs);
  f("rl", "minibatch", c.hp.minibatch);
  f("rl", "rollout", c.hp.rollout);
  f("rl", "envs", c.hp.envs);
  f("rl", "max_grad_norm", c.hp.max_grad_norm);
  f("rl", "reward_scale", c.hp.reward_scale);
  f("rl", "log_std_init", c.log_std_init);
  f("rl", "checkpoint_every", c.checkpoint_every);

  f("eval", "trials", c.eval.trials);
  f("eval", "controller", c.eval.controller);
  f("eval", "checkpoint", c.eval.checkpoint);
  f("eval", "deterministic", c.eval.deterministic);
  f("eval", "trajectories", c.eval.trajectories);

  f("ablate", "configs", c.ablate.configs);

  f("inspect", "frames", c.inspect.frames);
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, res.ptr);
  if (s.find_first_of(".eE") == std::string::npos) s += ".0";
  return s;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    if (ch == '\n') {
      out += "\\n";
      continue;
    }
    out += ch;
  }
  return out + '"';
}

struct Serializer {
  std::vector<std::pair<std::string, std::vector<std::string>>> sections;

  void line(const char* section, std::string text) {
    if (sections.empty() || sections.back().first != section) sections.emplace_back(section, std::vector<std::string>{});
    sections.back().second.push_back(std::move(text));
  }
  template <class T>
  void operator()(const char* section, const char* key, const T& v) {
    const std::string k = std::string(key) + " = ";
    if constexpr (std::is_same_v<T, bool>) {
      line(section, k + (v ? "true" : "false"));
    } else if constexpr (std::is_same_v<T, double>) {
      line(section, k + format_double(v));
    } else if constexpr (std::is_same_v<T, std::optional<double>>) {
      if (v) line(section, k + format_double(*v));
      else line(section, "# " + std::string(key) + " unset");
    } else if constexpr (std::is_integral_v<T>) {
      line(section, k + std::to_string(v));
    } else if constexpr (std::is_same_v<T, std::string>) {
      line(section, k + quote(v));
    } else if constexpr (std::is_same_v<T, PerceptionMode>) {
      line(section, k + quote(to_string(v)));
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      std::string arr = "[";
      for (std::size_t i = 0; i < v.size(); ++i) arr += (i ? ", " : "") + quote(v[i]);
      line(section, k + arr + "]");
    }
  }
};

std::string where(std::string_view source, const toml::source_region& region) {
  std::ostringstream s;
  s << source;
  if (region.begin.line > 0) s << ':' << region.begin.line;
  return s.str();
}

struct TomlReader {
  const toml::table& root;
  std::string_view source;

  template <class T>
  void operator()(const char* section, const char* key, T& v) {
    const toml::node* node = root.at_path(std::string(section) + "." + key).node();
    if (!node) return;
    const std::string name = std::string(section) + "." + key;
    const std::string at = where(source, node->source());
    auto fail = [&](const std::string& what) { throw ConfigError(at + ": " + name + " " + what); };
    if constexpr (std::is_same_v<T, bool>) {
      if (!node->is_boolean()) fail("expects true or false");
      v = *node->value<bool>();
    } else if constexpr (std::is_same_v<T, double> || std::is_same_v<T, std::optional<double>>) {
      if (!node->is_number()) fail("expects a number");
      v = *node->value<double>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!node->is_integer()) fail("expects an integer");
      const std::int64_t raw = *node->value<std::int64_t>();
      if constexpr (std::is_unsigned_v<T>) {
        if (raw < 0) fail("must be >= 0");
      } else {
        if (raw < std::numeric_limits<T>::min() || raw > std::numeric_limits<T>::max()) fail("is out of range");
      }
      v = static_cast<T>(raw);
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!node->is_string()) fail("expects a string");
      v = *node->value<std::string>();
    } else if constexpr (std::is_same_v<T, PerceptionMode>) {
      if (!node->is_string()) fail("expects a string");
      try {
        v = perception_mode_from_string(*node->value<std::string>());
      } catch (const ValidationError& e) {
        fail(e.what());
      }
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      const toml::array* arr = node->as_array();
      if (!arr) fail("expects an array of strings");
      v.clear();
      for (const auto& el : *arr) {
        if (!el.is_string()) fail("expects an array of strings");
        v.push_back(*el.value<std::string>());
      }
    }
  }
};

struct KeyCollector {
  std::map<std::string, std::set<std::string>> keys;
  template <class T>
  void operator()(const char* section, const char* key, const T&) {
    keys[section].insert(key);
  }
};

std::string upper(std::string s) {
  for (char& ch : s) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return s;
}

template <class T>
std::optional<T> parse_number(const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, v);
  if (res.ec != std::errc{} || res.ptr != end) return std::nullopt;
  return v;
}

struct EnvReader {
  const EnvLookup& lookup;

  template <class T>
  void operator()(const char* section, const char* key, T& v) {
    const std::string name = "SWARMNAV_" + upper(section) + "_" + upper(key);
    const auto raw = lookup(name);
    if (!raw) return;
    const std::string& text = *raw;
    auto fail = [&](const std::string& what) { throw ConfigError(name + "=" + text + ": " + what); };
    if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1") v = true;
      else if (text == "false" || text == "0") v = false;
      else fail("expects true or false");
    } else if constexpr (std::is_same_v<T, double>) {
      const auto d = parse_number<double>(text);
      if (!d) fail("expects a number");
      v = *d;
    } else if constexpr (std::is_same_v<T, std::optional<double>>) {
      if (text.empty() || text == "none") {
        v.reset();
      } else {
        const auto d = parse_number<double>(text);
        if (!d) fail("expects a number or none");
        v = *d;
      }
    } else if constexpr (std::is_integral_v<T>) {
      const auto i = parse_number<T>(text);
      if (!i) fail("expects an integer");
      v = *i;
    } else if constexpr (std::is_same_v<T, std::string>) {
      v = text;
    } else if constexpr (std::is_same_v<T, PerceptionMode>) {
      try {
        v = perception_mode_from_string(text);
      } catch (const ValidationError& e) {
        fail(e.what());
      }
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      v.clear();
      std::stringstream ss(text);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!item.empty()) v.push_back(item);
      }
    }
  }
};

const std::vector<std::string> kModes = {"train", "eval", "ablate", "export", "inspect-perception"};

}  // namespace

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names = {"proposed",      "no_flocking",  "no_obstacle",
                                                 "no_stable",     "no_perception", "uniform_weights"};
  return names;
}

RewardToggles ablation_toggles(const std::string& name) {
  RewardToggles t;
  if (name == "proposed") return t;
  if (name == "no_flocking") t.flocking = false;
  else if (name == "no_obstacle") t.obstacle = false;
  else if (name == "no_stable") t.stable = false;
  else if (name == "no_perception") t.perception = false;
  else if (name == "uniform_weights") t.uniform_weights = true;
  else throw ConfigError("unknown ablation configuration '" + name + "'");
  return t;
}

void RunConfig::validate() const {
  if (std::find(kModes.begin(), kModes.end(), mode) == kModes.end()) throw ConfigError("run.mode: unknown mode '" + mode + "'");
  if (threads < 0) throw ConfigError("run.threads must be >= 0");
  if (out.empty()) throw ConfigError("run.out must not be empty");
  try {
    env_config(EpisodeMode::train).validate();
    NetworkShape::named(network);
    hp.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  if (total_timesteps < 1) throw ConfigError("rl.total_timesteps must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("rl.checkpoint_every must be >= 0");
  if (!std::isfinite(log_std_init)) throw ConfigError("rl.log_std_init must be finite");
  if (eval.trials < 1) throw ConfigError("eval.trials must be >= 1");
  if (eval.controller != "baseline" && eval.controller != "hover" && eval.controller != "policy") {
    throw ConfigError("eval.controller must be baseline, hover or policy");
  }
  if (eval.controller == "policy" && eval.checkpoint.empty()) throw ConfigError("eval.controller = policy needs eval.checkpoint");
  if (eval.trajectories != "jsonl" && eval.trajectories != "binary" && eval.trajectories != "none") {
    throw ConfigError("eval.trajectories must be jsonl, binary or none");
  }
  if (ablate.configs.empty()) throw ConfigError("ablate.configs must name at least one configuration");
  std::set<std::string> seen;
  for (const auto& name : ablate.configs) {
    ablation_toggles(name);
    if (!seen.insert(name).second) throw ConfigError("ablate.configs lists '" + name + "' twice");
  }
  if (inspect.frames < 1) throw ConfigError("inspect.frames must be >= 1");
}

int RunConfig::worker_threads() const {
  if (single_thread) return 1;
  if (threads > 0) return threads;
  return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
}

EnvConfig RunConfig::env_config(EpisodeMode m) const {
  EnvConfig e = env;
  e.reward.r_uav = e.scenario.uav_radius;
  e.mode = m;
  return e;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.env = env_config(EpisodeMode::train);
  t.shape = NetworkShape::named(network);
  t.hp = hp;
  t.total_timesteps = total_timesteps;
  t.seed = seed;
  t.log_std_init = log_std_init;
  t.checkpoint_every = checkpoint_every;
  t.out_dir = out;
  t.threads = worker_threads();
  return t;
}

RunConfig parse_run_config(std::string_view text, std::string_view source) {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    throw ConfigError(where(source, e.source()) + ": " + std::string(e.description()));
  }
  RunConfig c;
  KeyCollector known;
  for_each_field(c, known);
  for (const auto& [section, node] : root) {
    const std::string sec(section.str());
    const auto it = known.keys.find(sec);
    if (it == known.keys.end()) throw ConfigError(where(source, node.source()) + ": unknown section [" + sec + "]");
    const toml::table* tbl = node.as_table();
    if (!tbl) throw ConfigError(where(source, node.source()) + ": " + sec + " must be a table");
    for (const auto& [key, value] : *tbl) {
      if (!it->second.count(std::string(key.str()))) {
        throw ConfigError(where(source, value.source()) + ": unknown key " + sec + "." + std::string(key.str()));
      }
    }
  }
  TomlReader reader{root, source};
  for_each_field(c, reader);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path);
}

std::string to_toml(const RunConfig& config) {
  Serializer s;
  for_each_field(config, s);
  std::string out;
  for (const auto& [section, lines] : s.sections) {
    if (!out.empty()) out += '\n';
    out += "[" + section + "]\n";
    for (const auto& l : lines) out += l + '\n';
  }
  return out;
}

void apply_env_overrides(RunConfig& config, const EnvLookup& lookup) {
  EnvReader reader{lookup};
  for_each_field(config, reader);
}

std::optional<std::string> process_env(const std::string& name) {
  if (const char* v = std::getenv(name.c_str())) return std::string(v);
  return std::nullopt;
}

namespace {

ojson vec_json(const Vec3& v) { return ojson::array({v.x(), v.y(), v.z()}); }

ojson points_json(const std::vector<MapPoint>& pts) {
  ojson arr = ojson::array();
  for (const auto& p : pts) arr.push_back({p.position.x(), p.position.y(), p.position.z(), p.intensity});
  return arr;
}

}  // namespace

void write_perception_dump(std::ostream& out, const EnvConfig& config, std::uint64_t seed, int frames) {
  if (frames < 1) throw ValidationError("inspect: frames must be >= 1");
  EnvConfig cfg = config;
  cfg.perception = PerceptionMode::pipeline;
  SwarmEnv env(cfg);
  env.reset(seed);
  BaselineController ctl;
  ojson doc;
  doc["seed"] = seed;
  doc["dt"] = cfg.scenario.dt;
  doc["frames"] = ojson::array();
  for (int f = 0; f < frames; ++f) {
    if (f > 0) {
      if (env.finished()) break;
      env.step(ctl.act(env.views()));
    }
    ojson frame;
    frame["time"] = env.time();
    frame["verdict"] = to_string(env.verdict());
    ojson truth = ojson::array();
    for (const auto& u : env.uavs()) truth.push_back(vec_json(u.position));
    frame["positions"] = truth;
    ojson uavs = ojson::array();
    for (int i = 0; i < env.n_uavs(); ++i) {
      const PointCloud& cloud = env.last_clouds()[static_cast<std::size_t>(i)];
      const NeighborTracker& tracker = env.tracker(i);
      const PerceptionFrame& pf = tracker.last_frame();
      ojson u;
      u["id"] = i;
      ojson raw = ojson::array();
      for (const auto& p : cloud.points) {
        const Vec3 m = cloud.to_map(p.position);
        raw.push_back({m.x(), m.y(), m.z(), p.intensity});
      }
      u["raw"] = raw;
      u["gated"] = points_json(pf.gated);
      u["filtered"] = points_json(pf.filtered);
      ojson clusters = ojson::array();
      for (const auto& c : pf.clusters) {
        clusters.push_back({{"centroid", vec_json(c.centroid)},
                            {"size", c.indices.size()},
                            {"mean_range", c.mean_range},
                            {"high_ratio", c.high_ratio()}});
      }
      u["clusters"] = clusters;
      ojson tracks = ojson::array();
      for (const auto& t : tracker.tracks()) {
        tracks.push_back({{"id", t.id},
                          {"centroid", vec_json(t.centroid)},
                          {"velocity", vec_json(t.velocity)},
                          {"active", t.active},
                          {"validated", t.validated()},
                          {"high_ratio", t.high_intensity_ratio}});
      }
      u["tracks"] = tracks;
      const auto validated = tracker.validated();
      const auto rel = estimate_relative_states(validated, env.uavs()[static_cast<std::size_t>(i)]);
      ojson neighbors = ojson::array();
      for (std::size_t k = 0; k < rel.size(); ++k) {
        neighbors.push_back({{"track", validated[k].id},
                             {"rel_position", vec_json(rel[k].rel_position)},
                             {"rel_velocity", vec_json(rel[k].rel_velocity)}});
      }
      u["validated"] = neighbors;
      uavs.push_back(u);
    }
    frame["uavs"] = uavs;
    doc["frames"].push_back(frame);
  }
  out << doc.dump() << '\n';
}

void write_policy_json(std::ostream& out, const PolicyNetwork& net) {
  ojson doc;
  const NetworkShape& s = net.shape();
  doc["shape"] = {{"conv1", s.conv1}, {"conv2", s.conv2}, {"features", s.features},
                  {"hidden", s.hidden}, {"shared", s.shared}, {"head", s.head}};
  doc["layers"] = ojson::array();
  for (const auto& l : net.manifest()) {
    std::vector<double> values(net.params().begin() + static_cast<std::ptrdiff_t>(l.offset),
                               net.params().begin() + static_cast<std::ptrdiff_t>(l.offset + l.size()));
    doc["layers"].push_back({{"name", l.name}, {"rows", l.rows}, {"cols", l.cols}, {"order", "column-major"}, {"values", values}});
  }
  out << doc.dump() << '\n';
}

void write_scenario_json(std::ostream& out, const Scenario& scenario) {
  ojson doc;
  doc["goal"] = vec_json(scenario.goal);
  doc["spawn_center"] = vec_json(scenario.spawn_center);
  doc["leader_speed"] = scenario.leader_speed;
  doc["bounds"] = {{"min", vec_json(scenario.field.bounds.min)}, {"max", vec_json(scenario.field.bounds.max)}};
  doc["pillars"] = ojson::array();
  for (const auto& p : scenario.field.pillars) {
    doc["pillars"].push_back({{"center", {p.center.x(), p.center.y()}}, {"radius", p.radius}, {"height", p.height}});
  }
  doc["uavs"] = ojson::array();
  for (const auto& u : scenario.uavs) {
    doc["uavs"].push_back({{"position", vec_json(u.position)}, {"yaw", yaw_of(u.orientation)}});
  }
  out << doc.dump() << '\n';
}

namespace {

std::ofstream open_out(const fs::path& path, bool binary = false) {
  std::ofstream f(path, binary ? std::ios::binary : std::ios::out);
  if (!f) throw IoError("cannot write " + path.string());
  return f;
}

fs::path prepare_out(const RunConfig& c) {
  const fs::path dir = c.out;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  auto f = open_out(dir / "config.toml");
  f << to_toml(c);
  return dir;
}

ControllerFactory eval_factory(const RunConfig& c) {
  if (c.eval.controller == "baseline") return [] { return std::make_unique<BaselineController>(); };
  if (c.eval.controller == "hover") return [] { return std::make_unique<HoverController>(); };
  auto net = std::make_shared<PolicyNetwork>(load_checkpoint(c.eval.checkpoint));
  const bool det = c.eval.deterministic;
  const std::uint64_t seed = c.seed;
  return [net, det, seed] { return std::make_unique<PolicyController>(*net, det, seed); };
}

std::vector<std::uint64_t> trial_seeds(const RunConfig& c) {
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(c.eval.trials));
  for (std::size_t k = 0; k < seeds.size(); ++k) seeds[k] = c.seed + k;
  return seeds;
}

int cmd_train(const RunConfig& c, std::ostream& out) {
  prepare_out(c);
  const TrainResult r = train(c.train_config(), [&](const UpdateLog& u) {
    if (u.update % 10 == 0) {
      out << "update " << u.update << " timesteps " << u.timesteps << " mean_step_reward " << u.mean_step_reward << '\n';
    }
  });
  out << "trained " << r.log.size() << " updates; checkpoint " << (fs::path(c.out) / "policy.swnv").string() << '\n';
  return 0;
}

int cmd_eval(const RunConfig& c, std::ostream& out) {
  const ControllerFactory factory = eval_factory(c);
  const fs::path dir = prepare_out(c);
  const auto seeds = trial_seeds(c);
  const bool keep = c.eval.trajectories != "none";
  const BatchResult b = batch_evaluate(factory, c.env_config(EpisodeMode::eval), seeds, c.worker_threads(), keep);
  {
    auto f = open_out(dir / "metrics.csv");
    write_metrics_csv(f, b.report);
  }
  {
    auto f = open_out(dir / "trials.csv");
    write_trials_csv(f, b.trials);
  }
  if (keep) {
    const fs::path tdir = dir / "trajectories";
    fs::create_directories(tdir);
    for (const auto& t : b.trajectories) {
      const bool bin = c.eval.trajectories == "binary";
      auto f = open_out(tdir / ("seed_" + std::to_string(t.seed) + (bin ? ".swtr" : ".jsonl")), bin);
      if (bin) write_trajectory_binary(f, t);
      else write_trajectory_jsonl(f, t);
    }
  }
  out << "SR " << b.report.sr << " over " << b.report.trials << " trials; metrics in " << (dir / "metrics.csv").string()
      << '\n';
  return 0;
}

void put_stat(std::ostream& f, const MeanStd& s) {
  if (s.count == 0) {
    f << ",-,-";
  } else {
    f << ',' << s.mean << ',' << s.std;
  }
}

int cmd_ablate(const RunConfig& c, std::ostream& out, std::ostream& err) {
  const fs::path dir = prepare_out(c);
  auto csv = open_out(dir / "ablation.csv");
  csv << "config,status,SR,MP_mean,MP_std,FR_mean,FR_std,MS_mean,MS_std,AL_mean,AL_std,MDO_mean,MDO_std,mean_flocking\n";
  int failures = 0;
  for (const auto& name : c.ablate.configs) {
    RunConfig sub = c;
    sub.env.reward.toggles = ablation_toggles(name);
    sub.out = (dir / name).string();
    try {
      out << "ablate " << name << ": training\n";
      prepare_out(sub);
      const TrainResult r = train(sub.train_config());
      const PolicyNetwork net = r.network;
      const std::uint64_t seed = c.seed;
      const bool det = c.eval.deterministic;
      const ControllerFactory factory = [&net, det, seed] { return std::make_unique<PolicyController>(net, det, seed); };
      const BatchResult b = batch_evaluate(factory, sub.env_config(EpisodeMode::eval), trial_seeds(c), c.worker_threads());
      double flock = 0.0;
      for (const auto& t : b.trials) flock += t.mean_flocking;
      csv << name << ",ok," << b.report.sr;
      for (const MeanStd* s : {&b.report.mp, &b.report.fr, &b.report.ms, &b.report.al, &b.report.mdo}) put_stat(csv, *s);
      csv << ',' << flock / static_cast<double>(b.trials.size()) << '\n';
      out << "ablate " << name << ": SR " << b.report.sr << '\n';
    } catch (const std::exception& e) {
      ++failures;
      std::string msg = e.what();
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      csv << name << ",failed: " << msg << ",-,-,-,-,-,-,-,-,-,-,-,-\n";
      err << "ablate " << name << " failed: " << e.what() << '\n';
    }
    csv.flush();
  }
  return failures == 0 ? 0 : 4;
}

int cmd_export(const RunConfig& c, std::ostream& out) {
  std::optional<PolicyNetwork> net;
  if (!c.eval.checkpoint.empty()) net = load_checkpoint(c.eval.checkpoint);
  const fs::path dir = prepare_out(c);
  {
    auto f = open_out(dir / "scenario.json");
    write_scenario_json(f, generate_scenario(c.env_config(EpisodeMode::eval).scenario, c.seed));
  }
  if (net) {
    auto f = open_out(dir / "policy.json");
    write_policy_json(f, *net);
  }
  out << "exported to " << dir.string() << '\n';
  return 0;
}

int cmd_inspect(const RunConfig& c, std::ostream& out) {
  const fs::path dir = prepare_out(c);
  auto f = open_out(dir / "perception.json");
  write_perception_dump(f, c.env_config(EpisodeMode::eval), c.seed, c.inspect.frames);
  out << "perception dump in " << (dir / "perception.json").string() << '\n';
  return 0;
}

int dispatch(const RunConfig& c, std::ostream& out, std::ostream& err) {
  if (c.mode == "train") return cmd_train(c, out);
  if (c.mode == "eval") return cmd_eval(c, out);
  if (c.mode == "ablate") return cmd_ablate(c, out, err);
  if (c.mode == "export") return cmd_export(c, out);
  return cmd_inspect(c, out);
}

// Flags shared by every command, resolved after the config file and the environment.
struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool single_thread = false;
  std::optional<int> threads;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "TOML run configuration");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_flag("--single-thread", f.single_thread, "one worker thread (bit-reproducible)");
  cmd->add_option("--threads", f.threads, "worker threads, 0 = all cores");
  cmd->add_option("--out", f.out, "output directory");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err, const EnvLookup& lookup) {
  CLI::App app{"Collective navigation of a LiDAR-only UAV swarm: training, evaluation, ablation, export"};
  app.require_subcommand(1);
  CommonFlags common;

  auto* train_cmd = app.add_subcommand("train", "train the shared follower policy");
  add_common(train_cmd, common);
  std::optional<long long> timesteps;
  train_cmd->add_option("--timesteps", timesteps, "total env steps");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint or a built-in controller");
  add_common(eval_cmd, common);
  std::optional<std::string> checkpoint, baseline;
  std::optional<int> trials;
  auto* ck = eval_cmd->add_option("--checkpoint", checkpoint, "policy checkpoint");
  auto* bl = eval_cmd->add_option("--baseline", baseline, "built-in controller: baseline or hover");
  ck->excludes(bl);
  eval_cmd->add_option("--trials", trials, "number of trials");

  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate reward ablations");
  add_common(ablate_cmd, common);
  std::vector<std::string> configs;
  auto* configs_opt = ablate_cmd->add_option("--configs", configs, "configurations to run")->delimiter(',');
  std::optional<int> ablate_trials;
  std::optional<long long> ablate_steps;
  ablate_cmd->add_option("--trials", ablate_trials, "evaluation trials per configuration");
  ablate_cmd->add_option("--timesteps", ablate_steps, "training env steps per configuration");

  auto* export_cmd = app.add_subcommand("export", "write the scenario layout and optionally a policy as JSON");
  add_common(export_cmd, common);
  std::optional<std::string> export_ck;
  export_cmd->add_option("--checkpoint", export_ck, "policy checkpoint to export");

  auto* inspect_cmd = app.add_subcommand("inspect-perception", "dump every perception stage per frame");
  add_common(inspect_cmd, common);
  std::optional<int> frames;
  inspect_cmd->add_option("--frames", frames, "frames to dump");

  auto* run_cmd = app.add_subcommand("run", "run the mode named in the config file");
  add_common(run_cmd, common);

  auto* config_cmd = app.add_subcommand("config", "configuration helpers");
  config_cmd->require_subcommand(1);
  config_cmd->add_subcommand("print-defaults", "print every default as TOML");
  auto* config_print = config_cmd->add_subcommand("print", "print the resolved configuration");
  add_common(config_print, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (config_cmd->parsed() && config_cmd->got_subcommand("print-defaults")) {
      out << to_toml(RunConfig{});
      return 0;
    }
    RunConfig c = common.config.empty() ? RunConfig{} : load_run_config(common.config);
    apply_env_overrides(c, lookup);
    if (common.seed) c.seed = *common.seed;
    if (common.single_thread) c.single_thread = true;
    if (common.threads) c.threads = *common.threads;
    if (common.out) c.out = *common.out;
    if (train_cmd->parsed()) {
      c.mode = "train";
      if (timesteps) c.total_timesteps = *timesteps;
    } else if (eval_cmd->parsed()) {
      c.mode = "eval";
      if (checkpoint) {
        c.eval.controller = "policy";
        c.eval.checkpoint = *checkpoint;
      }
      if (baseline) {
        if (*baseline != "baseline" && *baseline != "hover") throw ConfigError("--baseline must be baseline or hover");
        c.eval.controller = *baseline;
      }
      if (trials) c.eval.trials = *trials;
    } else if (ablate_cmd->parsed()) {
      c.mode = "ablate";
      if (configs_opt->count() > 0) c.ablate.configs = configs;
      if (ablate_trials) c.eval.trials = *ablate_trials;
      if (ablate_steps) c.total_timesteps = *ablate_steps;
    } else if (export_cmd->parsed()) {
      c.mode = "export";
      if (export_ck) c.eval.checkpoint = *export_ck;
    } else if (inspect_cmd->parsed()) {
      c.mode = "inspect-perception";
      if (frames) c.inspect.frames = *frames;
    }
    c.validate();
    if (config_cmd->parsed()) {
      out << to_toml(c);
      return 0;
    }
    return dispatch(c, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ValidationError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return 3;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return 3;
  } catch (const fs::filesystem_error& e) {
    err << "io error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    err << "runtime fault: " << e.what() << '\n';
    return 4;
  }
}

}  // namespace swarmnav
