#pragma once

#include <Eigen/Dense>
#include <vector>

#include "sdfm/model.hpp"
#include "sdfm/state_space.hpp"

namespace sdfm {

struct FilterOutput {
  std::vector<Eigen::Vector4d> pred_mean;   // prior to the period's update
  std::vector<Eigen::Matrix4d> pred_cov;
  std::vector<Eigen::Vector4d> filt_mean;
  std::vector<Eigen::Matrix4d> filt_cov;
  Eigen::VectorXd period_loglik;
  double total_loglik = 0.0;
};

// Smoothed first and second conditional moments given all observations.
// lag_one_cross[t] = E[alpha_t alpha_{t-1}' | Y] for t >= 1 (index 0 unused).
struct SmoothedMoments {
  std::vector<Eigen::Vector4d> mean;
  std::vector<Eigen::Matrix4d> second_moment;
  std::vector<Eigen::Matrix4d> lag_one_cross;
  double total_loglik = 0.0;
};

// Forward pass with the stationary initial prior. Masked observation rows are
// dropped, which is exactly the row-deleted model. The idiosyncratic
// covariance is diagonal, so observations are absorbed one scalar at a time
// with a Joseph-form covariance update.
FilterOutput filter(const StateSpaceSystem& system, const ReturnPanel& panel);

// Fixed-interval smoother (forward pass plus backward recursion).
SmoothedMoments smooth(const StateSpaceSystem& system, const ReturnPanel& panel);

}  // namespace sdfm
