#include "swarmnav/rl.hpp"

#include <algorithm>
#include <cmath>

namespace swarmnav {

void PpoHyperparams::validate() const {
  if (!(clip > 0.0 && clip < 1.0)) throw ValidationError("ppo: clip must lie in (0, 1)");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ValidationError("ppo: gamma must lie in [0, 1]");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("ppo: lambda must lie in [0, 1]");
  if (!(c1 >= 0.0) || !(c2 >= 0.0)) throw ValidationError("ppo: c1 and c2 must be >= 0");
  for (double r : {lr, lr_encoder.value_or(0.0), lr_actor.value_or(0.0), lr_critic.value_or(0.0)}) {
    if (!(r >= 0.0) || !std::isfinite(r)) throw ValidationError("ppo: learning rates must be finite and >= 0");
  }
  if (epochs < 1 || minibatch < 1 || rollout < 1 || envs < 1) {
    throw ValidationError("ppo: epochs, minibatch, rollout and envs must be >= 1");
  }
  if (!(max_grad_norm >= 0.0)) throw ValidationError("ppo: max_grad_norm must be >= 0 (0 disables clipping)");
  if (!(reward_scale > 0.0)) throw ValidationError("ppo: reward_scale must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ValidationError("ppo: adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ValidationError("ppo: adam_eps must be > 0");
}

GaeResult gae(std::span<const double> rewards, std::span<const double> values, std::span<const double> next_values,
              std::span<const std::uint8_t> terminated, std::span<const std::uint8_t> truncated, double gamma,
              double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || next_values.size() != n || terminated.size() != n || truncated.size() != n) {
    throw ValidationError("gae: array lengths differ");
  }
  GaeResult out;
  out.advantages.assign(n, 0.0);
  out.value_targets.assign(n, 0.0);
  double running = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    const double live = terminated[k] ? 0.0 : 1.0;
    const double carry = (terminated[k] || truncated[k]) ? 0.0 : 1.0;
    const double delta = rewards[k] + gamma * next_values[k] * live - values[k];
    running = delta + gamma * lambda * carry * running;
    out.advantages[k] = running;
    out.value_targets[k] = running + values[k];
  }
  return out;
}

void normalize_advantages(std::span<double> advantages) {
  if (advantages.empty()) return;
  const double n = static_cast<double>(advantages.size());
  double mean = 0.0;
  for (double a : advantages) mean += a;
  mean /= n;
  double var = 0.0;
  for (double a : advantages) var += (a - mean) * (a - mean);
  const double sd = std::sqrt(var / n);
  for (double& a : advantages) a = sd > 1e-12 ? (a - mean) / sd : 0.0;
}

PpoBatch PpoBatch::subset(std::span<const int> indices) const {
  PpoBatch out;
  out.observations = observations.subset(indices);
  const auto n = static_cast<Eigen::Index>(indices.size());
  out.actions.resize(kActionDim, n);
  out.old_log_prob.resize(n);
  out.old_values.resize(n);
  out.advantages.resize(n);
  out.value_targets.resize(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const int i = indices[static_cast<std::size_t>(k)];
    out.actions.col(k) = actions.col(i);
    out.old_log_prob[k] = old_log_prob[i];
    out.old_values[k] = old_values[i];
    out.advantages[k] = advantages[i];
    out.value_targets[k] = value_targets[i];
  }
  return out;
}

PpoLoss ppo_loss(const PolicyNetwork& net, const PpoBatch& batch, const PpoHyperparams& hp, std::vector<double>* grad) {
  const int B = batch.size();
  if (B == 0) throw ValidationError("ppo_loss: empty batch");
  if (batch.actions.cols() != B || batch.old_log_prob.size() != B || batch.advantages.size() != B ||
      batch.value_targets.size() != B) {
    throw ValidationError("ppo_loss: batch arrays have inconsistent lengths");
  }
  PpoLoss loss;
  auto evaluate = [&](const PolicyOutput& out) {
    PolicyNetwork::Upstream up;
    up.d_mean = Eigen::MatrixXd::Zero(kActionDim, B);
    up.d_value = Eigen::RowVectorXd::Zero(B);
    up.d_log_std = Eigen::Vector3d::Zero();
    const Eigen::Vector3d sd = out.std();
    const double inv_b = 1.0 / B;
    double clip_sum = 0.0, vf_sum = 0.0, kl_sum = 0.0;
    int clipped = 0;
    for (int b = 0; b < B; ++b) {
      const Eigen::Vector3d a = batch.actions.col(b);
      const Eigen::Vector3d mu = out.mean.col(b);
      const double lp = gaussian_log_prob(a, mu, out.log_std);
      const double log_ratio = lp - batch.old_log_prob[b];
      const double r = std::exp(log_ratio);
      const double adv = batch.advantages[b];
      const double unclipped = r * adv;
      const double bounded = std::clamp(r, 1.0 - hp.clip, 1.0 + hp.clip) * adv;
      clip_sum += std::min(unclipped, bounded);
      kl_sum += (r - 1.0) - log_ratio;
      if (std::abs(r - 1.0) > hp.clip) ++clipped;
      // d(-L_CLIP)/d logpi flows only through the unclipped branch when it is the minimum
      const double dlp = unclipped <= bounded ? -adv * r * inv_b : 0.0;
      if (dlp != 0.0) {
        for (int k = 0; k < kActionDim; ++k) {
          const double z = (a[k] - mu[k]) / sd[k];
          up.d_mean(k, b) = dlp * z / sd[k];
          up.d_log_std[k] += dlp * (z * z - 1.0);
        }
      }
      const double diff = out.value[b] - batch.value_targets[b];
      vf_sum += diff * diff;
      up.d_value[b] = hp.c1 * 2.0 * diff * inv_b;
    }
    up.d_log_std.array() -= hp.c2;
    loss.clip_objective = clip_sum * inv_b;
    loss.value_loss = vf_sum * inv_b;
    loss.entropy = gaussian_entropy(out.log_std);
    loss.total = -loss.clip_objective + hp.c1 * loss.value_loss - hp.c2 * loss.entropy;
    loss.approx_kl = kl_sum * inv_b;
    loss.clip_fraction = static_cast<double>(clipped) * inv_b;
    if (!std::isfinite(loss.total)) throw NonFiniteError("loss", static_cast<int>(net.manifest().size()));
    return up;
  };
  if (grad) {
    net.forward_backward(batch.observations, evaluate, *grad);
  } else {
    evaluate(net.forward(batch.observations));
  }
  return loss;
}

double gradient_check(const PolicyNetwork& net, const PpoBatch& batch, const PpoHyperparams& hp, double h) {
  std::vector<double> analytic(net.parameter_count(), 0.0);
  ppo_loss(net, batch, hp, &analytic);
  PolicyNetwork probe = net;
  auto& p = probe.params();
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double saved = p[i];
    p[i] = saved + h;
    const double up = ppo_loss(probe, batch, hp).total;
    p[i] = saved - h;
    const double down = ppo_loss(probe, batch, hp).total;
    p[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double scale = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / scale);
  }
  return worst;
}

Adam::Adam(std::size_t n, double beta1, double beta2, double eps)
    : b1_(beta1), b2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

void Adam::step(std::vector<double>& params, const std::vector<double>& grad, double lr, std::span<const double> rates) {
  if (params.size() != m_.size() || grad.size() != m_.size() || (!rates.empty() && rates.size() != m_.size())) {
    throw ValidationError("adam: size mismatch");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
    const double rate = rates.empty() ? lr : rates[i];
    params[i] -= rate * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

std::vector<double> parameter_rates(const PolicyNetwork& net, const PpoHyperparams& hp) {
  std::vector<double> rates(net.parameter_count(), hp.lr);
  for (const auto& l : net.manifest()) {
    double r = hp.lr;
    if (l.name.starts_with("conv") || l.name.starts_with("fc.")) {
      r = hp.lr_encoder.value_or(hp.lr);
    } else if (l.name.starts_with("actor") || l.name == "log_std") {
      r = hp.lr_actor.value_or(hp.lr);
    } else if (l.name.starts_with("critic")) {
      r = hp.lr_critic.value_or(hp.lr);
    }
    std::fill(rates.begin() + static_cast<std::ptrdiff_t>(l.offset),
              rates.begin() + static_cast<std::ptrdiff_t>(l.offset + l.size()), r);
  }
  return rates;
}

}  // namespace swarmnav
