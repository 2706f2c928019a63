#include "wardrisk/kernel.hpp"

#include <cmath>
#include <string>

#include <Eigen/Cholesky>

#include "wardrisk/errors.hpp"

namespace wardrisk {

Eigen::MatrixXd EpochKernelParams::task_cov() const {
  return task_cov_from_factors(task_factor, task_diag);
}

void EpochKernelParams::validate() const {
  const int d = streams();
  if (d == 0) throw DataError("epoch kernel has zero streams");
  if (task_factor.rows() != d || task_diag.size() != d || noise.size() != d)
    throw DataError("epoch kernel parameter shapes disagree");
  if (!(length_scale > 0.0) || !std::isfinite(length_scale))
    throw DataError("length_scale must be positive and finite");
  if (!mean.allFinite() || !task_factor.allFinite()) throw DataError("non-finite kernel parameter");
  if ((task_diag.array() < 0.0).any()) throw DataError("task_diag must be non-negative");
  if ((noise.array() < kNoiseFloor).any())
    throw DataError("noise below the " + std::to_string(kNoiseFloor) + " nugget floor");
  // PSD check: Cholesky of task_cov + nugget must succeed.
  Eigen::MatrixXd cov = task_cov();
  cov.diagonal().array() += kNoiseFloor;
  if (Eigen::LLT<Eigen::MatrixXd>(cov).info() != Eigen::Success)
    throw DataError("task covariance is not PSD");
}

double se_kernel(double t, double t_prime, double length_scale) {
  return std::exp(se_kernel_log(t, t_prime, length_scale));
}

double se_kernel_log(double t, double t_prime, double length_scale) {
  const double d = t - t_prime;
  return -(d * d) / (2.0 * length_scale * length_scale);
}

Eigen::MatrixXd task_cov_from_factors(const Eigen::MatrixXd& factor, const Eigen::VectorXd& diag) {
  Eigen::MatrixXd cov = factor * factor.transpose();
  cov.diagonal() += diag;
  return cov;
}

Eigen::MatrixXd assemble_covariance(std::span<const ObsPoint> obs, std::span<const int> epoch_labels,
                                    std::span<const EpochKernelParams> epoch_params) {
  const auto n = static_cast<Eigen::Index>(obs.size());
  if (obs.size() != epoch_labels.size()) throw DataError("observation/label count mismatch");
  for (int k : epoch_labels)
    if (k < 0 || static_cast<std::size_t>(k) >= epoch_params.size())
      throw DataError("missing kernel parameters for epoch " + std::to_string(k));

  std::vector<Eigen::MatrixXd> task_covs;
  task_covs.reserve(epoch_params.size());
  for (const EpochKernelParams& p : epoch_params) task_covs.push_back(p.task_cov());

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index a = 0; a < n; ++a) {
    const int k = epoch_labels[static_cast<std::size_t>(a)];
    const EpochKernelParams& p = epoch_params[static_cast<std::size_t>(k)];
    cov(a, a) = task_covs[static_cast<std::size_t>(k)](obs[a].stream_id, obs[a].stream_id) +
                p.noise[obs[a].stream_id];
    for (Eigen::Index b = a + 1; b < n; ++b) {
      if (epoch_labels[static_cast<std::size_t>(b)] != k) continue;  // cross-epoch entries stay exactly 0
      const double v = task_covs[static_cast<std::size_t>(k)](obs[a].stream_id, obs[b].stream_id) *
                       se_kernel(obs[a].time, obs[b].time, p.length_scale);
      cov(a, b) = v;
      cov(b, a) = v;
    }
  }
  return cov;
}

}  // namespace wardrisk
