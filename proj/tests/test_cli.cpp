#include "doctest.h"

#include "swarmnav/cli.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

using namespace swarmnav;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

Run cli(std::vector<std::string> args, std::map<std::string, std::string> env = {}) {
  args.insert(args.begin(), "swarmnav");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const EnvLookup lookup = [&](const std::string& name) -> std::optional<std::string> {
    const auto it = env.find(name);
    if (it == env.end()) return std::nullopt;
    return it->second;
  };
  Run r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err, lookup);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "swarmnav_cli_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p;
}

const char* kSmoke = R"([scenario]
n_followers = 4
episode_time_limit = 8.0

[rl]
network = "tiny"
envs = 2
rollout = 64
total_timesteps = 1000
)";

}  // namespace

TEST_CASE("default configuration survives a TOML round trip") {
  const std::string text = to_toml(RunConfig{});
  const RunConfig back = parse_run_config(text);
  CHECK(to_toml(back) == text);
  CHECK(back.hp.minibatch == 512);
  CHECK(!back.env.scenario.min_gap);
}

TEST_CASE("edited configuration is a fixed point of parse and serialize") {
  RunConfig c;
  c.seed = 77;
  c.env.scenario.min_gap = 6.0;
  c.env.scenario.dt = 0.05;
  c.hp.lr_actor = 3e-4;
  c.hp.gamma = 0.1 + 0.2;
  c.env.perception = PerceptionMode::pipeline;
  c.env.reward.toggles.flocking = false;
  c.ablate.configs = {"proposed", "uniform_weights"};
  c.eval.checkpoint = "a \"quoted\" path\\x";
  const std::string text = to_toml(c);
  const RunConfig back = parse_run_config(text);
  CHECK(to_toml(back) == text);
  CHECK(back.hp.gamma == c.hp.gamma);
  CHECK(*back.env.scenario.min_gap == 6.0);
  CHECK(*back.hp.lr_actor == 3e-4);
  CHECK(!back.hp.lr_encoder);
  CHECK(back.env.perception == PerceptionMode::pipeline);
  CHECK(back.eval.checkpoint == c.eval.checkpoint);
}

TEST_CASE("unknown keys, sections and mistyped values are rejected with their line") {
  auto message = [](const std::string& text) {
    try {
      parse_run_config(text, "cfg.toml");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message("[rl]\nlr = 0.1\nlearning_rate = 1\n").find("cfg.toml:3") != std::string::npos);
  CHECK(message("[rl]\nlr = 0.1\nlearning_rate = 1\n").find("rl.learning_rate") != std::string::npos);
  CHECK(message("[training]\nx = 1\n").find("unknown section") != std::string::npos);
  CHECK(message("[scenario]\n\nn_followers = \"four\"\n").find("cfg.toml:3") != std::string::npos);
  CHECK(message("[run]\nseed = -4\n").find("run.seed") != std::string::npos);
  CHECK(message("[rl\n").find("cfg.toml:1") != std::string::npos);
  CHECK(message("mode = \"train\"\n").find("unknown section [mode]") != std::string::npos);
  CHECK(message("run = 1\n").find("must be a table") != std::string::npos);
  CHECK(message("[rl]\nlr = 1\n") == "no error");
}

TEST_CASE("environment variables override any key") {
  RunConfig c;
  std::map<std::string, std::string> env{{"SWARMNAV_RL_LR", "0.0005"},
                                         {"SWARMNAV_SCENARIO_N_FOLLOWERS", "7"},
                                         {"SWARMNAV_SCENARIO_MIN_GAP", "5.5"},
                                         {"SWARMNAV_REWARD_FLOCKING", "false"},
                                         {"SWARMNAV_ABLATE_CONFIGS", "proposed,no_stable"},
                                         {"SWARMNAV_ENV_PERCEPTION", "pipeline"}};
  apply_env_overrides(c, [&](const std::string& n) -> std::optional<std::string> {
    if (env.count(n)) return env[n];
    return std::nullopt;
  });
  CHECK(c.hp.lr == 0.0005);
  CHECK(c.env.scenario.n_followers == 7);
  CHECK(*c.env.scenario.min_gap == 5.5);
  CHECK(!c.env.reward.toggles.flocking);
  CHECK(c.ablate.configs == std::vector<std::string>{"proposed", "no_stable"});
  CHECK(c.env.perception == PerceptionMode::pipeline);
  CHECK_THROWS_AS(apply_env_overrides(c, [](const std::string& n) -> std::optional<std::string> {
                    if (n == "SWARMNAV_RL_EPOCHS") return "four";
                    return std::nullopt;
                  }),
                  ConfigError);
}

TEST_CASE("config print-defaults emits parseable TOML") {
  const Run r = cli({"config", "print-defaults"});
  CHECK(r.code == 0);
  CHECK(to_toml(parse_run_config(r.out)) == r.out);
}

TEST_CASE("config errors exit with code 2") {
  const fs::path dir = scratch("errors");
  CHECK(cli({"train", "--config", write_file(dir / "bad.toml", "[rl]\nbogus = 1\n").string()}).code == 2);
  CHECK(cli({"train", "--config", (dir / "missing.toml").string()}).code == 2);
  CHECK(cli({"train", "--checkpoint", "x.swnv"}).code == 2);
  CHECK(cli({"eval", "--checkpoint", "x.swnv", "--baseline", "baseline"}).code == 2);
  CHECK(cli({"eval", "--baseline", "boids"}).code == 2);
  CHECK(cli({"ablate", "--config", write_file(dir / "empty.toml", "[ablate]\nconfigs = []\n").string()}).code == 2);
  CHECK(cli({"ablate", "--configs", "proposed,no_wings"}).code == 2);
  CHECK(cli({"train"}, {{"SWARMNAV_RL_CLIP", "2.0"}}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  const Run r = cli({"train", "--config", (dir / "bad.toml").string()});
  CHECK(r.err.find("bad.toml:2") != std::string::npos);
}

TEST_CASE("smoke training writes a checkpoint, logs and the resolved config") {
  const fs::path dir = scratch("train");
  const fs::path cfg = write_file(dir / "smoke.toml", kSmoke);
  const fs::path out = dir / "nested" / "run";
  const Run r = cli({"train", "--config", cfg.string(), "--out", out.string(), "--single-thread", "--seed", "3"});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(out / "policy.swnv"));
  CHECK(fs::exists(out / "train_log.csv"));
  const RunConfig snap = load_run_config((out / "config.toml").string());
  CHECK(snap.seed == 3);
  CHECK(snap.single_thread);
  CHECK(snap.network == "tiny");
  CHECK(load_checkpoint((out / "policy.swnv").string()).shape() == NetworkShape::tiny());

  const fs::path again = dir / "again";
  REQUIRE(cli({"train", "--config", cfg.string(), "--out", again.string(), "--single-thread", "--seed", "3"}).code == 0);
  CHECK(slurp(out / "train_log.csv") == slurp(again / "train_log.csv"));
  CHECK(slurp(out / "policy.swnv") == slurp(again / "policy.swnv"));

  SUBCASE("a policy trained with four followers runs with eight") {
    const Run e = cli({"eval", "--checkpoint", (out / "policy.swnv").string(), "--trials", "2", "--out", (dir / "eval8").string()},
                      {{"SWARMNAV_SCENARIO_N_FOLLOWERS", "8"}, {"SWARMNAV_SCENARIO_EPISODE_TIME_LIMIT", "3.0"}});
    CHECK(e.code == 0);
    std::ifstream traj(dir / "eval8" / "trajectories" / "seed_1.jsonl");
    std::string header;
    std::getline(traj, header);
    std::string frame;
    std::getline(traj, frame);
    CHECK(nlohmann::json::parse(frame)["p"].size() == 9);
  }
  SUBCASE("export writes the policy and the scenario") {
    REQUIRE(cli({"export", "--checkpoint", (out / "policy.swnv").string(), "--out", (dir / "export").string()}).code == 0);
    const auto policy = nlohmann::json::parse(slurp(dir / "export" / "policy.json"));
    CHECK(policy["layers"].size() == 19);
    CHECK(policy["layers"][0]["name"] == "conv1.w");
    const auto scen = nlohmann::json::parse(slurp(dir / "export" / "scenario.json"));
    CHECK(scen["uavs"].size() == 5);
  }
}

TEST_CASE("baseline evaluation writes an SR row and is byte-identical on repeat") {
  const fs::path dir = scratch("eval");
  const std::vector<std::string> args = {"eval", "--baseline", "baseline", "--trials", "20", "--single-thread"};
  auto with_out = [&](const std::string& name) {
    auto a = args;
    a.push_back("--out");
    a.push_back((dir / name).string());
    return a;
  };
  REQUIRE(cli(with_out("a")).code == 0);
  REQUIRE(cli(with_out("b")).code == 0);
  const std::string metrics = slurp(dir / "a" / "metrics.csv");
  CHECK(metrics.find("\nSR,") != std::string::npos);
  CHECK(metrics == slurp(dir / "b" / "metrics.csv"));
  CHECK(slurp(dir / "a" / "trials.csv") == slurp(dir / "b" / "trials.csv"));
  CHECK(slurp(dir / "a" / "trajectories" / "seed_7.jsonl") == slurp(dir / "b" / "trajectories" / "seed_7.jsonl"));
}

TEST_CASE("corrupt or missing checkpoints exit with code 3") {
  const fs::path dir = scratch("corrupt");
  const fs::path bad = write_file(dir / "bad.swnv", "SWNV garbage");
  const Run r = cli({"eval", "--checkpoint", bad.string(), "--out", (dir / "o").string()});
  CHECK(r.code == 3);
  CHECK(r.err.find("checkpoint") != std::string::npos);
  CHECK(cli({"eval", "--checkpoint", (dir / "none.swnv").string(), "--out", (dir / "o").string()}).code == 3);
  CHECK(cli({"export", "--checkpoint", bad.string(), "--out", (dir / "o").string()}).code == 3);
}

TEST_CASE("unwritable output is an artifact error") {
  const fs::path dir = scratch("unwritable");
  const fs::path file = write_file(dir / "file", "x");
  CHECK(cli({"eval", "--baseline", "hover", "--trials", "1", "--out", (file / "sub").string()}).code == 3);
}

TEST_CASE("ablation emits one row per configuration") {
  const fs::path dir = scratch("ablate");
  const fs::path cfg = write_file(dir / "smoke.toml", kSmoke);
  const Run r = cli({"ablate", "--config", cfg.string(), "--configs", "no_flocking,proposed", "--trials", "2", "--single-thread",
                     "--out", (dir / "o").string()});
  CHECK(r.code == 0);
  std::ifstream in(dir / "o" / "ablation.csv");
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  REQUIRE(lines.size() == 3);
  CHECK(lines[1].rfind("no_flocking,ok,", 0) == 0);
  CHECK(lines[2].rfind("proposed,ok,", 0) == 0);
  CHECK(fs::exists(dir / "o" / "proposed" / "policy.swnv"));
}

TEST_CASE("perception dumps") {
  const fs::path dir = scratch("inspect");
  using nlohmann::json;
  SUBCASE("a world with nothing in range gives empty stages") {
    const fs::path cfg = write_file(dir / "empty.toml", "[scenario]\nn_followers = 1\nspawn_spacing = 20.0\n");
    REQUIRE(cli({"inspect-perception", "--config", cfg.string(), "--frames", "1", "--out", (dir / "e").string()}).code == 0);
    const json d = json::parse(slurp(dir / "e" / "perception.json"));
    REQUIRE(d["frames"].size() == 1);
    for (const auto& u : d["frames"][0]["uavs"]) {
      for (const char* stage : {"raw", "gated", "filtered", "clusters", "tracks", "validated"}) CHECK(u[stage].empty());
    }
  }
  SUBCASE("a neighbour at 2 m is validated by the second frame") {
    const fs::path cfg = write_file(dir / "near.toml", "[scenario]\nn_followers = 1\nspawn_spacing = 2.0\n");
    ScenarioConfig sc;
    sc.n_followers = 1;
    sc.spawn_spacing = 2.0;
    std::uint64_t seed = 1;
    while ((generate_scenario(sc, seed).uavs[0].position - generate_scenario(sc, seed).uavs[1].position).norm() > 2.0 + 1e-9) ++seed;
    const std::vector<std::string> args = {"inspect-perception", "--config",          cfg.string(), "--frames", "3",
                                           "--seed",             std::to_string(seed), "--out"};
    auto a = args, b = args;
    a.push_back((dir / "n1").string());
    b.push_back((dir / "n2").string());
    REQUIRE(cli(a).code == 0);
    REQUIRE(cli(b).code == 0);
    const std::string text = slurp(dir / "n1" / "perception.json");
    CHECK(text == slurp(dir / "n2" / "perception.json"));
    const json d = json::parse(text);
    int first = -1;
    for (int f = 0; f < static_cast<int>(d["frames"].size()) && first < 0; ++f) {
      const auto& v = d["frames"][f]["uavs"][0]["validated"];
      if (!v.empty()) {
        first = f;
        const auto& rp = v[0]["rel_position"];
        const double range = std::sqrt(rp[0].get<double>() * rp[0].get<double>() + rp[1].get<double>() * rp[1].get<double>() +
                                       rp[2].get<double>() * rp[2].get<double>());
        const auto& pos = d["frames"][f]["positions"];
        double truth = 0.0;
        for (int k = 0; k < 3; ++k) truth += std::pow(pos[0][k].get<double>() - pos[1][k].get<double>(), 2);
        CHECK(std::sqrt(truth) == doctest::Approx(2.0).epsilon(0.15));
        CHECK(std::abs(range - std::sqrt(truth)) < 0.3);
      }
    }
    CHECK(first >= 0);
    CHECK(first <= 1);
    CHECK(!d["frames"][0]["uavs"][0]["raw"].empty());
  }
}
