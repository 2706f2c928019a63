#pragma once

#include <span>

#include <Eigen/Core>

namespace wardrisk {

inline constexpr double kNoiseFloor = 1e-6;
inline constexpr double kDefaultLengthScaleMin = 0.25;   // hours
inline constexpr double kDefaultLengthScaleMax = 500.0;  // hours

// Per-epoch multi-task GP hyper-parameters. The task covariance is kept in
// low-rank-plus-diagonal form (factor * factor^T + diag) so it is PSD by
// construction; per-stream observation noise sits on the matrix diagonal.
struct EpochKernelParams {
  Eigen::VectorXd mean;         // D, standardized units
  Eigen::MatrixXd task_factor;  // D x R
  Eigen::VectorXd task_diag;    // D, >= 0
  double length_scale = 1.0;    // hours, > 0
  Eigen::VectorXd noise;        // D, >= kNoiseFloor

  int streams() const { return static_cast<int>(mean.size()); }
  int rank() const { return static_cast<int>(task_factor.cols()); }
  Eigen::MatrixXd task_cov() const;
  void validate() const;  // throws DataError on invariant violation
};

// Squared-exponential time kernel, exp(-|t-t'|^2 / (2 l^2)).
double se_kernel(double t, double t_prime, double length_scale);
// Log form for tails that underflow exp().
double se_kernel_log(double t, double t_prime, double length_scale);

Eigen::MatrixXd task_cov_from_factors(const Eigen::MatrixXd& factor, const Eigen::VectorXd& diag);

struct ObsPoint {
  int stream_id;
  double time;
};

// Joint covariance of a labeled observation set: task_cov(u,w) * se(t,t')
// within an epoch, exactly zero across epochs, noise added on the diagonal.
Eigen::MatrixXd assemble_covariance(std::span<const ObsPoint> obs, std::span<const int> epoch_labels,
                                    std::span<const EpochKernelParams> epoch_params);

}  // namespace wardrisk
