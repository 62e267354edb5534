//
// Copyright 2026 The vflafe Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#ifndef VFLAFE_DP_MECHANISM_H_
#define VFLAFE_DP_MECHANISM_H_

#include <cfloat>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "vflafe/log.h"
#include "vflafe/numerics.h"

namespace vflafe {

// Noise multiplier of the classical Gaussian mechanism:
// sigma = sqrt(2 ln(1.25 / delta)) / epsilon, valid for epsilon in (0, 1).
// This is the smallest compliant value; callers may only raise it.
inline double CalibrateSigma(double epsilon, double delta) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) {
    throw std::invalid_argument("CalibrateSigma: epsilon must be in (0, 1), got " +
                                std::to_string(epsilon));
  }
  if (!(delta > 0.0 && delta < 1.0)) {
    throw std::invalid_argument("CalibrateSigma: delta must be in (0, 1), got " +
                                std::to_string(delta));
  }
  return std::sqrt(2.0 * std::log(1.25 / delta)) / epsilon;
}

// Per-party privacy accounting record.
struct PrivacyParams {
  double epsilon = 0.5;
  double delta = 1e-2;
  double clip_threshold = 1.0;  // t
  double p1 = 1.0;
  double p2 = 0.9987;
  double sigma = 0.0;        // noise multiplier; noise stddev is sigma * 2t
  double delta_prime = 0.0;  // delta / (p1 * p2)

  // Validates the inputs and derives sigma and delta_prime. With
  // allow_large_epsilon, epsilon >= 1 is accepted (with a warning) and the
  // same closed form is applied outside the range it is proven for.
  static PrivacyParams Create(double epsilon, double delta, double clip_threshold,
                              double p1 = 1.0, double p2 = 0.9987,
                              bool allow_large_epsilon = false) {
    PrivacyParams p;
    p.epsilon = epsilon;
    p.delta = delta;
    p.clip_threshold = clip_threshold;
    p.p1 = p1;
    p.p2 = p2;
    if (!(clip_threshold > 0.0)) {
      throw std::invalid_argument("PrivacyParams: clip threshold must be > 0");
    }
    if (!(p1 > 0.0 && p1 <= 1.0) || !(p2 > 0.0 && p2 <= 1.0)) {
      throw std::invalid_argument("PrivacyParams: p1 and p2 must be in (0, 1]");
    }
    if (allow_large_epsilon && epsilon >= 1.0 && std::isfinite(epsilon)) {
      LogWarning("epsilon = " + std::to_string(epsilon) +
                 " is outside (0, 1); the Gaussian-mechanism calibration is "
                 "applied without its usual guarantee");
      if (!(delta > 0.0 && delta < 1.0)) {
        throw std::invalid_argument("PrivacyParams: delta must be in (0, 1)");
      }
      p.sigma = std::sqrt(2.0 * std::log(1.25 / delta)) / epsilon;
    } else {
      p.sigma = CalibrateSigma(epsilon, delta);
    }
    p.delta_prime = delta / (p1 * p2);
    if (!(p.delta_prime < 1.0)) {
      throw std::invalid_argument("PrivacyParams: delta / (p1 * p2) must be < 1");
    }
    return p;
  }

  // Sensitivity estimate implied by clipping: any two clipped rows are at most
  // 2t apart.
  double estimated_sensitivity() const { return 2.0 * clip_threshold; }
  double noise_stddev() const { return sigma * estimated_sensitivity(); }
};

// Scales each row by 1 / max(1, ||row|| / t). Rows inside the ball are left
// untouched; clipped rows are placed a few ulps inside the sphere so that the
// computed norm never exceeds t and computed pairwise distances never exceed
// 2t.
inline Matrix ClipNorm(const Matrix& batch, double t) {
  if (!(t > 0.0)) throw std::invalid_argument("ClipNorm: t must be > 0");
  Matrix out = batch;
  const double target = t * (1.0 - 8.0 * DBL_EPSILON);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    double norm = Norm(row);
    if (norm <= t) continue;
    const double factor = target / norm;
    for (double& v : row) v *= factor;
    while ((norm = Norm(row)) > target) {
      for (double& v : row) v *= 1.0 - 4.0 * DBL_EPSILON;
    }
  }
  return out;
}

// Vector-Jacobian product of ClipNorm at `pre_clip`: rows that were clipped
// get (t / ||h||) (g - h_hat (h_hat . g)); the rest pass through unchanged.
inline Matrix ClipNormBackward(const Matrix& pre_clip, const Matrix& upstream,
                               double t) {
  Matrix out = upstream;
  for (std::size_t i = 0; i < pre_clip.rows(); ++i) {
    auto h = pre_clip.row(i);
    const double norm = Norm(h);
    if (norm <= t) continue;
    auto g = out.row(i);
    const double radial = Dot(h, g) / (norm * norm);
    const double scale = t / norm;
    for (std::size_t j = 0; j < g.size(); ++j) g[j] = scale * (g[j] - radial * h[j]);
  }
  return out;
}

// Adds i.i.d. N(0, (2 t sigma)^2) to every coordinate.
inline Matrix AddNoise(const Matrix& batch, const PrivacyParams& params, Rng& rng) {
  Matrix out = batch;
  const double stddev = params.noise_stddev();
  if (stddev == 0.0) return out;
  for (double& v : out.data()) v += stddev * rng.Normal();
  return out;
}

struct RatioCheckReport {
  double max_violation = -1.0;  // max over events of P[A(x)] - e^eps P[A(x')] - delta
  double worst_threshold = 0.0;
  std::size_t events_checked = 0;
  std::size_t violations = 0;  // events with margin > tolerance

  bool passed() const { return violations == 0; }
};

// Checks P[A(x) in O] <= e^eps P[A(x') in O] + delta for the scalar mechanism
// A(x) = x + N(0, (sigma * 2t)^2) at maximal disparity: x = 0, x' = 2t with
// O = (-inf, o], and the mirrored pair x = 2t, x' = 0 with O = (o, inf).
// Thresholds are a grid of `trials` points plus the analytic worst case. For a
// Gaussian shift the privacy loss is monotone in o, so half-lines contain the
// worst event and the check is exact up to grid coverage.
inline RatioCheckReport MechanismRatioCheck(const PrivacyParams& params,
                                            std::size_t trials,
                                            double tolerance = 1e-9) {
  RatioCheckReport report;
  const double disparity = 2.0 * params.clip_threshold;
  const double scale = params.sigma * disparity;
  const double e_eps = std::exp(params.epsilon);

  // P[center + noise <= o] and P[center + noise > o].
  auto lower = [&](double o, double center) {
    if (scale == 0.0) return o >= center ? 1.0 : 0.0;
    return NormalCdf((o - center) / scale);
  };
  auto upper = [&](double o, double center) {
    if (scale == 0.0) return o >= center ? 0.0 : 1.0;
    return NormalCdf((center - o) / scale);
  };
  auto record = [&](double margin, double o) {
    ++report.events_checked;
    if (margin > report.max_violation) {
      report.max_violation = margin;
      report.worst_threshold = o;
    }
    if (margin > tolerance) ++report.violations;
  };
  auto check = [&](double o) {
    record(lower(o, 0.0) - e_eps * lower(o, disparity) - params.delta, o);
    record(upper(o, disparity) - e_eps * upper(o, 0.0) - params.delta, o);
  };

  const double reach = scale > 0.0 ? 12.0 * scale : 1.0;
  const double lo = -reach;
  const double hi = disparity + reach;
  const std::size_t steps = trials < 2 ? 2 : trials;
  for (std::size_t k = 0; k < steps; ++k) {
    check(lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(steps - 1));
  }
  if (scale > 0.0 && disparity > 0.0) {
    // Stationary point of Phi(o/s) - e^eps Phi((o - D)/s), and its mirror.
    const double o_star =
        (disparity * disparity - 2.0 * params.epsilon * scale * scale) /
        (2.0 * disparity);
    check(o_star);
    check(disparity - o_star);
  }
  return report;
}

}  // namespace vflafe

#endif  // VFLAFE_DP_MECHANISM_H_
