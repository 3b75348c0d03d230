#pragma once

#include "swarmnav/evalkit.hpp"
#include "swarmnav/observation.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace swarmnav {

inline constexpr int kActionDim = 3;
inline constexpr int kFlatInputDim = kEgoDim + kSlotDim * kDefaultNeighborSlots;  // 49
inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

/// A forward pass produced inf/nan; `layer` names the first offending layer.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& layer, int index)
      : std::runtime_error("non-finite activation in layer " + std::to_string(index) + " (" + layer + ")"),
        layer_name(layer),
        layer_index(index) {}
  std::string layer_name;
  int layer_index;
};

/// Checkpoint unreadable or its layer manifest does not match.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Channel/width choices. Conv stages are 3x3, stride 1 then 2, circular in azimuth.
struct NetworkShape {
  int conv1 = 16;
  int conv2 = 32;
  int features = 256;
  int hidden = 512;
  int shared = 512;
  int head = 256;

  static NetworkShape full() { return {}; }
  static NetworkShape desk() { return {4, 8, 64, 128, 128, 64}; }
  static NetworkShape tiny() { return {2, 2, 6, 16, 16, 8}; }
  static NetworkShape named(const std::string& name);
  void validate() const;
  bool operator==(const NetworkShape&) const = default;
};

struct LayerInfo {
  std::string name;
  int rows = 0;
  int cols = 0;  // 1 for biases
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

/// Observations laid out for the network: the 49 flat inputs per column and deduplicated grids.
class ObservationBatch {
 public:
  void reserve(std::size_t n);
  void add(const Observation& obs);
  int size() const { return static_cast<int>(grid_index_.size()); }
  int unique_grids() const { return static_cast<int>(grids_.size()); }
  ObservationBatch subset(std::span<const int> indices) const;

  /// 49 x B: ego block then neighbour block per column.
  Eigen::Map<const Eigen::MatrixXd> flat() const { return {flat_.data(), kFlatInputDim, size()}; }
  const std::vector<std::vector<double>>& grids() const { return grids_; }
  const std::vector<int>& grid_index() const { return grid_index_; }

 private:
  int intern(const std::vector<double>& grid);
  void push(std::span<const double> flat, const std::vector<double>& grid);

  std::vector<double> flat_;
  std::vector<std::vector<double>> grids_;
  std::vector<int> grid_index_;
  std::unordered_map<std::size_t, std::vector<int>> by_hash_;
};

struct PolicyOutput {
  Eigen::MatrixXd mean;      // 3 x B
  Eigen::Vector3d log_std;   // clamped
  Eigen::RowVectorXd value;  // 1 x B
  Eigen::MatrixXd grid_features;  // F x unique grids

  Eigen::Vector3d std() const { return log_std.array().exp().matrix(); }
};

/// Actor-critic over one flat parameter vector with hand-written backpropagation.
class PolicyNetwork {
 public:
  explicit PolicyNetwork(NetworkShape shape = NetworkShape::full());

  const NetworkShape& shape() const { return shape_; }
  const std::vector<LayerInfo>& manifest() const { return layers_; }
  std::size_t parameter_count() const { return params_.size(); }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  /// Fan-in scaled Gaussian weights, zero biases; actor output scaled by 0.01.
  void initialize(Rng& rng, double log_std_init = -0.5);
  void zero_final_layers();

  PolicyOutput forward(const ObservationBatch& batch) const;

  struct Upstream {
    Eigen::MatrixXd d_mean;      // 3 x B
    Eigen::Vector3d d_log_std;   // w.r.t. the clamped value
    Eigen::RowVectorXd d_value;  // 1 x B
  };
  /// Runs forward again and accumulates dLoss/dparams into grad (same size as params).
  PolicyOutput forward_backward(const ObservationBatch& batch, const std::function<Upstream(const PolicyOutput&)>& loss,
                                std::vector<double>& grad) const;

  const LayerInfo& layer(const std::string& name) const;
  /// Activation maps of conv stage 1 or 2 for one grid: channels x (azimuth * elevation), azimuth-major.
  Eigen::MatrixXd conv_maps(const std::vector<double>& grid, int stage) const;

 private:
  struct Cache;
  PolicyOutput run(const ObservationBatch& batch, Cache* cache) const;

  NetworkShape shape_;
  std::vector<LayerInfo> layers_;
  std::vector<double> params_;
};

double gaussian_log_prob(const Eigen::Vector3d& action, const Eigen::Vector3d& mean, const Eigen::Vector3d& log_std);
double gaussian_entropy(const Eigen::Vector3d& log_std);

struct PpoHyperparams {
  double clip = 0.1;
  double c1 = 1.0;
  double c2 = 0.001;
  double gamma = 0.99;
  double lambda = 0.95;
  double lr = 1e-3;
  std::optional<double> lr_encoder, lr_actor, lr_critic;  // per-group overrides
  int epochs = 4;
  int minibatch = 4096;
  int rollout = 128;
  int envs = 8;
  double max_grad_norm = 0.5;
  double reward_scale = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> value_targets;
};

/// One stream in time order. next_values[t] is V(o_{t+1}); for a truncated step it is the value of the
/// final observation, for a terminated step it is ignored.
GaeResult gae(std::span<const double> rewards, std::span<const double> values, std::span<const double> next_values,
              std::span<const std::uint8_t> terminated, std::span<const std::uint8_t> truncated, double gamma,
              double lambda);

/// Zero mean, unit population std in place; constant inputs become zeros.
void normalize_advantages(std::span<double> advantages);

struct PpoBatch {
  ObservationBatch observations;
  Eigen::MatrixXd actions;  // 3 x B
  Eigen::VectorXd old_log_prob;
  Eigen::VectorXd old_values;
  Eigen::VectorXd advantages;
  Eigen::VectorXd value_targets;

  int size() const { return observations.size(); }
  PpoBatch subset(std::span<const int> indices) const;
};

struct PpoLoss {
  double total = 0.0;
  double clip_objective = 0.0;  // L_CLIP (to be maximized)
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
};

/// total = -L_CLIP + c1 L_VF - c2 H. With grad non-null, dtotal/dparams is added to it.
PpoLoss ppo_loss(const PolicyNetwork& net, const PpoBatch& batch, const PpoHyperparams& hp,
                 std::vector<double>* grad = nullptr);

/// Max relative error between the analytic gradient and central differences of step h.
double gradient_check(const PolicyNetwork& net, const PpoBatch& batch, const PpoHyperparams& hp, double h = 1e-5);

class Adam {
 public:
  Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  /// lr per parameter from `rates` (same length) or the scalar when rates is empty.
  void step(std::vector<double>& params, const std::vector<double>& grad, double lr,
            std::span<const double> rates = {});
  long steps() const { return t_; }

 private:
  double b1_, b2_, eps_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

/// Learning rate per parameter: encoder layers, actor head plus log-std, critic head; the trunk takes hp.lr.
std::vector<double> parameter_rates(const PolicyNetwork& net, const PpoHyperparams& hp);

struct UpdateLog {
  int update = 0;
  long long timesteps = 0;
  double mean_return = 0.0;  // mean follower return of episodes finished during the update
  int episodes = 0;
  double mean_step_reward = 0.0;
  PpoLoss loss;
  RewardBreakdown reward_means;
  int faults = 0;
};

void write_training_log_header(std::ostream& out);
void write_training_log_row(std::ostream& out, const UpdateLog& row);

struct TrainConfig {
  EnvConfig env;
  NetworkShape shape = NetworkShape::desk();
  PpoHyperparams hp;
  long long total_timesteps = 100000;  // env steps summed over envs
  std::uint64_t seed = 1;
  double log_std_init = -0.5;
  int checkpoint_every = 0;  // updates; 0 writes only the final checkpoint
  std::string out_dir;      // empty: no files
  int threads = 1;
};

struct TrainResult {
  PolicyNetwork network;
  PolicyNetwork initial;  // parameters before the first update
  std::vector<UpdateLog> log;
};

using UpdateCallback = std::function<void(const UpdateLog&)>;

TrainResult train(const TrainConfig& config, const UpdateCallback& on_update = {});

/// "SWNV", u32 version, shape, layer manifest, u64 count, little-endian float32 parameters.
void write_checkpoint(std::ostream& out, const PolicyNetwork& net);
PolicyNetwork read_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const PolicyNetwork& net);
PolicyNetwork load_checkpoint(const std::string& path);

/// Shared-parameter follower policy: every follower runs the same network on its own view.
class PolicyController : public FollowerController {
 public:
  PolicyController(PolicyNetwork net, bool deterministic, std::uint64_t seed = 0);
  void reset(std::uint64_t seed) override;
  std::vector<Vec3> act(std::span<const AgentView> views) override;

 private:
  PolicyNetwork net_;
  bool deterministic_;
  std::uint64_t base_seed_;
  Rng rng_;
};

}  // namespace swarmnav
