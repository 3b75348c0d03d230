#include "swarmnav/rl.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

namespace swarmnav {

namespace {

void add_terms(RewardBreakdown& acc, const RewardBreakdown& r, double w = 1.0) {
  acc.separation += w * r.separation;
  acc.cohesion += w * r.cohesion;
  acc.proximity += w * r.proximity;
  acc.direction += w * r.direction;
  acc.altitude += w * r.altitude;
  acc.attitude += w * r.attitude;
  acc.visibility += w * r.visibility;
  acc.recovery += w * r.recovery;
  acc.collision += w * r.collision;
  acc.total += w * r.total;
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Eigen::Vector3d sample_action(const Eigen::Vector3d& mean, const Eigen::Vector3d& sd, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::Vector3d a;
  for (int k = 0; k < kActionDim; ++k) a[k] = mean[k] + sd[k] * n01(rng);
  return a;
}

template <class F>
void parallel_for(int n, int threads, const F& body) {
  const int workers = std::clamp(threads, 1, std::max(1, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) body(i);
    });
  }
  for (auto& t : pool) t.join();
}

// one env slot of the vectorized rollout
struct Slot {
  SwarmEnv env;
  std::uint64_t seed_stream;
  long episode = 0;
  std::vector<double> returns;  // per follower, current episode
  StepResult result;
  bool faulted = false;
  std::string fault;

  Slot(const EnvConfig& cfg, std::uint64_t stream) : env(cfg), seed_stream(stream) {}

  void start() {
    env.reset(mix(seed_stream + static_cast<std::uint64_t>(episode)));
    ++episode;
    returns.assign(static_cast<std::size_t>(env.n_followers()), 0.0);
  }
};

}  // namespace

void write_training_log_header(std::ostream& out) {
  out << "update,timesteps,episodes,mean_return,mean_step_reward,loss_total,clip_objective,value_loss,entropy,"
         "approx_kl,clip_fraction,separation,cohesion,proximity,direction,altitude,attitude,visibility,recovery,"
         "collision,faults\n";
}

void write_training_log_row(std::ostream& out, const UpdateLog& row) {
  std::ostringstream s;
  s << std::setprecision(10);
  s << row.update << ',' << row.timesteps << ',' << row.episodes << ',';
  if (row.episodes > 0) {
    s << row.mean_return;
  } else {
    s << '-';
  }
  const auto& l = row.loss;
  const auto& r = row.reward_means;
  s << ',' << row.mean_step_reward << ',' << l.total << ',' << l.clip_objective << ',' << l.value_loss << ','
    << l.entropy << ',' << l.approx_kl << ',' << l.clip_fraction << ',' << r.separation << ',' << r.cohesion << ','
    << r.proximity << ',' << r.direction << ',' << r.altitude << ',' << r.attitude << ',' << r.visibility << ','
    << r.recovery << ',' << r.collision << ',' << row.faults << '\n';
  out << s.str();
}

TrainResult train(const TrainConfig& config, const UpdateCallback& on_update) {
  config.env.validate();
  config.hp.validate();
  config.shape.validate();
  if (config.total_timesteps < 1) throw ValidationError("train: total_timesteps must be >= 1");
  if (config.checkpoint_every < 0) throw ValidationError("train: checkpoint_every must be >= 0");
  const PpoHyperparams& hp = config.hp;

  Rng rng(mix(config.seed));
  TrainResult result{PolicyNetwork(config.shape), PolicyNetwork(config.shape), {}};
  PolicyNetwork& net = result.network;
  net.initialize(rng, config.log_std_init);
  result.initial = net;
  Adam adam(net.parameter_count(), hp.adam_beta1, hp.adam_beta2, hp.adam_eps);
  const std::vector<double> rates = parameter_rates(net, hp);

  std::ofstream log_file;
  std::filesystem::path out_dir;
  if (!config.out_dir.empty()) {
    out_dir = config.out_dir;
    std::filesystem::create_directories(out_dir);
    log_file.open(out_dir / "train_log.csv");
    if (!log_file) throw std::runtime_error("train: cannot write " + (out_dir / "train_log.csv").string());
    write_training_log_header(log_file);
  }

  std::vector<Slot> slots;
  slots.reserve(static_cast<std::size_t>(hp.envs));
  for (int e = 0; e < hp.envs; ++e) {
    slots.emplace_back(config.env, mix(config.seed ^ mix(static_cast<std::uint64_t>(e) + 1)) << 20);
    slots.back().start();
  }
  const int followers = slots.front().env.n_followers();
  const int streams = hp.envs * followers;
  const int T = hp.rollout;
  const long long steps_per_update = static_cast<long long>(hp.envs) * T;
  const long long n_updates = std::max<long long>(1, config.total_timesteps / steps_per_update);

  auto gather = [&](ObservationBatch& batch) {
    batch.reserve(static_cast<std::size_t>(streams));
    for (auto& s : slots) {
      for (const auto& v : s.env.views()) batch.add(v.observation);
    }
  };

  long long timesteps = 0;
  std::vector<double> grad(net.parameter_count());
  for (long long u = 1; u <= n_updates; ++u) {
    // sample-major layout: index = t * streams + stream
    const std::size_t N = static_cast<std::size_t>(T) * static_cast<std::size_t>(streams);
    PpoBatch batch;
    batch.observations.reserve(N);
    batch.actions.resize(kActionDim, static_cast<Eigen::Index>(N));
    batch.old_log_prob.resize(static_cast<Eigen::Index>(N));
    batch.old_values.resize(static_cast<Eigen::Index>(N));
    std::vector<double> rewards(N), next_values(N);
    std::vector<std::uint8_t> term(N, 0), trunc(N, 0);
    UpdateLog row;
    row.update = static_cast<int>(u);
    double return_sum = 0.0;
    double step_reward_sum = 0.0;

    for (int t = 0; t < T; ++t) {
      ObservationBatch obs;
      gather(obs);
      const PolicyOutput out = net.forward(obs);
      const Eigen::Vector3d sd = out.std();
      std::vector<std::vector<Vec3>> commands(slots.size());
      for (int k = 0; k < streams; ++k) {
        const std::size_t i = static_cast<std::size_t>(t) * static_cast<std::size_t>(streams) + static_cast<std::size_t>(k);
        const Eigen::Vector3d mu = out.mean.col(k);
        const Eigen::Vector3d a = sample_action(mu, sd, rng);
        batch.actions.col(static_cast<Eigen::Index>(i)) = a;
        batch.old_log_prob[static_cast<Eigen::Index>(i)] = gaussian_log_prob(a, mu, out.log_std);
        batch.old_values[static_cast<Eigen::Index>(i)] = out.value[k];
        commands[static_cast<std::size_t>(k / followers)].push_back(a);
      }
      for (int k = 0; k < streams; ++k) {
        const auto& v = slots[static_cast<std::size_t>(k / followers)].env.views()[static_cast<std::size_t>(k % followers)];
        batch.observations.add(v.observation);
      }

      parallel_for(hp.envs, config.threads, [&](int e) {
        Slot& s = slots[static_cast<std::size_t>(e)];
        s.faulted = false;
        try {
          s.result = s.env.step(commands[static_cast<std::size_t>(e)]);
          if (!s.result.fault.empty() || s.result.rewards.size() != static_cast<std::size_t>(followers)) {
            s.faulted = true;
            s.fault = s.result.fault;
          }
        } catch (const std::exception& ex) {
          s.faulted = true;
          s.fault = ex.what();
        }
      });

      // bootstrap values for streams whose episode was cut short, from their final observation
      ObservationBatch finals;
      std::vector<int> final_streams;
      for (int e = 0; e < hp.envs; ++e) {
        Slot& s = slots[static_cast<std::size_t>(e)];
        if (s.faulted || !s.result.truncated || s.result.terminated) continue;
        for (int f = 0; f < followers; ++f) {
          finals.add(s.env.views()[static_cast<std::size_t>(f)].observation);
          final_streams.push_back(e * followers + f);
        }
      }
      std::vector<double> final_value(static_cast<std::size_t>(streams), 0.0);
      if (finals.size() > 0) {
        const PolicyOutput fo = net.forward(finals);
        for (std::size_t j = 0; j < final_streams.size(); ++j) final_value[static_cast<std::size_t>(final_streams[j])] = fo.value[static_cast<Eigen::Index>(j)];
      }

      for (int e = 0; e < hp.envs; ++e) {
        Slot& s = slots[static_cast<std::size_t>(e)];
        const bool done = s.faulted || s.result.done() || s.env.finished();
        for (int f = 0; f < followers; ++f) {
          const int k = e * followers + f;
          const std::size_t i = static_cast<std::size_t>(t) * static_cast<std::size_t>(streams) + static_cast<std::size_t>(k);
          double r = 0.0;
          if (!s.faulted) {
            const RewardBreakdown& br = s.result.rewards[static_cast<std::size_t>(f)];
            r = br.total;
            add_terms(row.reward_means, br);
          }
          step_reward_sum += r;
          rewards[i] = r * hp.reward_scale;
          s.returns[static_cast<std::size_t>(f)] += r;
          if (s.faulted || s.result.terminated) {
            term[i] = 1;
          } else if (s.result.truncated) {
            trunc[i] = 1;
            next_values[i] = final_value[static_cast<std::size_t>(k)];
          }
        }
        if (done) {
          if (s.faulted) {
            ++row.faults;
          } else {
            for (double ret : s.returns) return_sum += ret;
            row.episodes += followers;
          }
          try {
            s.start();
          } catch (const std::exception&) {
            ++row.faults;
            s.start();
          }
        }
      }
      timesteps += hp.envs;
    }

    // bootstrap the rollout tail and link next values inside each stream
    {
      ObservationBatch tail;
      gather(tail);
      const PolicyOutput out = net.forward(tail);
      for (int t = 0; t < T; ++t) {
        for (int k = 0; k < streams; ++k) {
          const std::size_t i = static_cast<std::size_t>(t) * static_cast<std::size_t>(streams) + static_cast<std::size_t>(k);
          if (term[i] || trunc[i]) continue;
          next_values[i] = t + 1 < T ? batch.old_values[static_cast<Eigen::Index>(i + static_cast<std::size_t>(streams))]
                                     : out.value[k];
        }
      }
    }

    batch.advantages.resize(static_cast<Eigen::Index>(N));
    batch.value_targets.resize(static_cast<Eigen::Index>(N));
    {
      std::vector<double> r(T), v(T), nv(T);
      std::vector<std::uint8_t> d(T), c(T);
      for (int k = 0; k < streams; ++k) {
        for (int t = 0; t < T; ++t) {
          const std::size_t i = static_cast<std::size_t>(t) * static_cast<std::size_t>(streams) + static_cast<std::size_t>(k);
          r[static_cast<std::size_t>(t)] = rewards[i];
          v[static_cast<std::size_t>(t)] = batch.old_values[static_cast<Eigen::Index>(i)];
          nv[static_cast<std::size_t>(t)] = next_values[i];
          d[static_cast<std::size_t>(t)] = term[i];
          c[static_cast<std::size_t>(t)] = trunc[i];
        }
        const GaeResult g = gae(r, v, nv, d, c, hp.gamma, hp.lambda);
        for (int t = 0; t < T; ++t) {
          const std::size_t i = static_cast<std::size_t>(t) * static_cast<std::size_t>(streams) + static_cast<std::size_t>(k);
          batch.advantages[static_cast<Eigen::Index>(i)] = g.advantages[static_cast<std::size_t>(t)];
          batch.value_targets[static_cast<Eigen::Index>(i)] = g.value_targets[static_cast<std::size_t>(t)];
        }
      }
    }
    normalize_advantages(std::span<double>(batch.advantages.data(), N));

    const int mb = std::min<int>(hp.minibatch, static_cast<int>(N));
    std::vector<int> order(N);
    PpoLoss mean_loss;
    int minibatches = 0;
    bool aborted = false;
    for (int epoch = 0; epoch < hp.epochs && !aborted; ++epoch) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start + static_cast<std::size_t>(mb) <= N; start += static_cast<std::size_t>(mb)) {
        const PpoBatch minibatch = batch.subset(std::span<const int>(order.data() + start, static_cast<std::size_t>(mb)));
        std::fill(grad.begin(), grad.end(), 0.0);
        PpoLoss l;
        try {
          l = ppo_loss(net, minibatch, hp, &grad);
        } catch (const NonFiniteError&) {
          aborted = true;
          ++row.faults;
          break;
        }
        if (hp.max_grad_norm > 0.0) {
          double sq = 0.0;
          for (double g : grad) sq += g * g;
          const double norm = std::sqrt(sq);
          if (norm > hp.max_grad_norm) {
            const double scale = hp.max_grad_norm / norm;
            for (double& g : grad) g *= scale;
          }
        }
        adam.step(net.params(), grad, hp.lr, rates);
        mean_loss.total += l.total;
        mean_loss.clip_objective += l.clip_objective;
        mean_loss.value_loss += l.value_loss;
        mean_loss.entropy += l.entropy;
        mean_loss.approx_kl += l.approx_kl;
        mean_loss.clip_fraction += l.clip_fraction;
        ++minibatches;
      }
    }
    if (minibatches > 0) {
      const double w = 1.0 / minibatches;
      mean_loss.total *= w;
      mean_loss.clip_objective *= w;
      mean_loss.value_loss *= w;
      mean_loss.entropy *= w;
      mean_loss.approx_kl *= w;
      mean_loss.clip_fraction *= w;
    }

    row.timesteps = timesteps;
    row.loss = mean_loss;
    row.mean_return = row.episodes > 0 ? return_sum / row.episodes : 0.0;
    row.mean_step_reward = step_reward_sum / static_cast<double>(N);
    RewardBreakdown means;
    add_terms(means, row.reward_means, 1.0 / static_cast<double>(N));
    row.reward_means = means;
    result.log.push_back(row);
    if (log_file) {
      write_training_log_row(log_file, row);
      log_file.flush();
    }
    if (!out_dir.empty() && config.checkpoint_every > 0 && u % config.checkpoint_every == 0) {
      save_checkpoint((out_dir / ("checkpoint_" + std::to_string(u) + ".swnv")).string(), net);
    }
    if (on_update) on_update(row);
  }
  if (!out_dir.empty()) save_checkpoint((out_dir / "policy.swnv").string(), net);
  return result;
}

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'W', 'N', 'V'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void put_le(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T get_le(std::istream& in, const char* what) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw CheckpointError(std::string("checkpoint truncated at ") + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& out, const PolicyNetwork& net) {
  out.write(kCheckpointMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  const NetworkShape& s = net.shape();
  for (int v : {s.conv1, s.conv2, s.features, s.hidden, s.shared, s.head}) put_le<std::int32_t>(out, v);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(net.manifest().size()));
  for (const auto& l : net.manifest()) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(l.name.size()));
    out.write(l.name.data(), static_cast<std::streamsize>(l.name.size()));
    put_le<std::int32_t>(out, l.rows);
    put_le<std::int32_t>(out, l.cols);
  }
  put_le<std::uint64_t>(out, net.parameter_count());
  for (double p : net.params()) put_le<float>(out, static_cast<float>(p));
  if (!out) throw CheckpointError("checkpoint write failed");
}

PolicyNetwork read_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError("not a policy checkpoint (bad magic)");
  const auto version = get_le<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  NetworkShape s;
  for (int* v : {&s.conv1, &s.conv2, &s.features, &s.hidden, &s.shared, &s.head}) *v = get_le<std::int32_t>(in, "shape");
  try {
    s.validate();
  } catch (const ValidationError& e) {
    throw CheckpointError(std::string("checkpoint shape invalid: ") + e.what());
  }
  PolicyNetwork net(s);
  const auto layers = get_le<std::uint32_t>(in, "manifest");
  if (layers != net.manifest().size()) {
    throw CheckpointError("manifest mismatch: " + std::to_string(layers) + " layers stored, " +
                          std::to_string(net.manifest().size()) + " expected");
  }
  for (const auto& expected : net.manifest()) {
    const auto len = get_le<std::uint32_t>(in, "layer name");
    if (len > 256) throw CheckpointError("manifest mismatch: layer name length " + std::to_string(len));
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw CheckpointError("checkpoint truncated at layer name");
    const auto rows = get_le<std::int32_t>(in, "layer rows");
    const auto cols = get_le<std::int32_t>(in, "layer cols");
    if (name != expected.name || rows != expected.rows || cols != expected.cols) {
      throw CheckpointError("manifest mismatch: stored " + name + " " + std::to_string(rows) + "x" + std::to_string(cols) +
                            ", expected " + expected.name + " " + std::to_string(expected.rows) + "x" +
                            std::to_string(expected.cols));
    }
  }
  const auto count = get_le<std::uint64_t>(in, "parameter count");
  if (count != net.parameter_count()) {
    throw CheckpointError("manifest mismatch: " + std::to_string(count) + " parameters stored, " +
                          std::to_string(net.parameter_count()) + " expected");
  }
  for (auto& p : net.params()) {
    p = get_le<float>(in, "parameters");
    if (!std::isfinite(p)) throw CheckpointError("checkpoint holds a non-finite parameter");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after checkpoint payload");
  return net;
}

void save_checkpoint(const std::string& path, const PolicyNetwork& net) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  write_checkpoint(out, net);
}

PolicyNetwork load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

PolicyController::PolicyController(PolicyNetwork net, bool deterministic, std::uint64_t seed)
    : net_(std::move(net)), deterministic_(deterministic), base_seed_(seed), rng_(mix(seed)) {}

void PolicyController::reset(std::uint64_t seed) { rng_.seed(mix(base_seed_ ^ mix(seed))); }

std::vector<Vec3> PolicyController::act(std::span<const AgentView> views) {
  std::vector<Vec3> out;
  if (views.empty()) return out;
  ObservationBatch batch;
  batch.reserve(views.size());
  for (const auto& v : views) batch.add(v.observation);
  const PolicyOutput po = net_.forward(batch);
  const Eigen::Vector3d sd = po.std();
  out.reserve(views.size());
  for (int k = 0; k < batch.size(); ++k) {
    const Eigen::Vector3d mu = po.mean.col(k);
    out.push_back(deterministic_ ? mu : sample_action(mu, sd, rng_));
  }
  return out;
}

}  // namespace swarmnav
