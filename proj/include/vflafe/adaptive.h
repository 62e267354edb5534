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

#ifndef VFLAFE_ADAPTIVE_H_
#define VFLAFE_ADAPTIVE_H_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vflafe/log.h"
#include "vflafe/neural.h"
#include "vflafe/numerics.h"

namespace vflafe {

// Local-sensitivity estimate for one clipped batch.
struct SensitivityEstimate {
  double mu_h = 0.0;     // mean pairwise distance
  double sigma_h = 0.0;  // sample stddev of pairwise distances
  double delta_local = 0.0;
  double p2 = 0.0;
  bool clamped = false;
};

struct DistanceQuantile {
  double mu = 0.0;
  double sigma = 0.0;
  double quantile = 0.0;  // mu + sigma * sqrt(2) * erfinv(2 p - 1)
};

// Gaussian fit (mean, sample stddev) to a distance sample and its p-quantile.
inline DistanceQuantile QuantileFromDistances(std::span<const double> distances,
                                              double p) {
  const SampleMoments m = MeanAndSampleStddev(distances);
  return {m.mean, m.stddev, m.mean + m.stddev * NormalQuantile(p)};
}

inline double MinimumSensitivity(double t) { return 1e-6 * t; }

inline double ClampSensitivity(double value, double t, bool* clamped) {
  const double lo = MinimumSensitivity(t);
  const double hi = 2.0 * t;
  const double v = std::clamp(value, lo, hi);
  if (clamped != nullptr) *clamped = v != value;
  return v;
}

// Upper bound on pairwise embedding distances that holds with probability p2
// under a Gaussian fit, clamped into [1e-6 t, 2t].
inline SensitivityEstimate EstimateLocalSensitivity(const Matrix& batch, double p2,
                                                    double t) {
  if (batch.rows() < 2) {
    throw std::invalid_argument("EstimateLocalSensitivity: need at least 2 rows");
  }
  const std::vector<double> d = PairwiseDistances(batch);
  const DistanceQuantile q = QuantileFromDistances(d, p2);
  SensitivityEstimate est;
  est.mu_h = q.mu;
  est.sigma_h = q.sigma;
  est.p2 = p2;
  est.delta_local = ClampSensitivity(q.quantile, t, &est.clamped);
  return est;
}

// The batch diameter itself, clamped the same way.
inline SensitivityEstimate ExactDiameterSensitivity(const Matrix& batch, double t) {
  if (batch.rows() < 2) {
    throw std::invalid_argument("ExactDiameterSensitivity: need at least 2 rows");
  }
  const std::vector<double> d = PairwiseDistances(batch);
  const SampleMoments m = MeanAndSampleStddev(d);
  SensitivityEstimate est;
  est.mu_h = m.mean;
  est.sigma_h = m.stddev;
  est.p2 = 1.0;
  est.delta_local = ClampSensitivity(*std::max_element(d.begin(), d.end()), t,
                                     &est.clamped);
  return est;
}

inline double RescaleFactor(const SensitivityEstimate& est, double t) {
  return 2.0 * t / est.delta_local;
}

// Multiplies every row by 2t / delta_local.
inline Matrix Rescale(const Matrix& batch, const SensitivityEstimate& est, double t) {
  return batch * RescaleFactor(est, t);
}

namespace internal {

// Maps d loss / d distance (lexicographic j < k order) onto the rows.
inline Matrix DistanceGradientToRows(const Matrix& batch,
                                     std::span<const double> grad_distances,
                                     std::span<const double> distances) {
  Matrix out(batch.rows(), batch.cols());
  std::size_t p = 0;
  for (std::size_t j = 0; j < batch.rows(); ++j) {
    for (std::size_t k = j + 1; k < batch.rows(); ++k, ++p) {
      const double g = grad_distances[p];
      const double d = distances[p];
      if (g == 0.0 || d == 0.0) continue;
      auto hj = batch.row(j);
      auto hk = batch.row(k);
      auto oj = out.row(j);
      auto ok = out.row(k);
      const double s = g / d;
      for (std::size_t c = 0; c < batch.cols(); ++c) {
        const double diff = s * (hj[c] - hk[c]);
        oj[c] += diff;
        ok[c] -= diff;
      }
    }
  }
  return out;
}

}  // namespace internal

// d loss / d batch for y = s(batch) * batch, with s = 2t / estimate. The
// estimate is differentiated through the distance statistics it came from;
// a clamped estimate contributes only the constant-scale term.
inline Matrix RescaleBackward(const Matrix& batch, const Matrix& upstream,
                              const SensitivityEstimate& est, double t) {
  const double s = RescaleFactor(est, t);
  Matrix out = upstream * s;
  if (est.clamped || batch.rows() < 2) return out;
  const std::vector<double> d = PairwiseDistances(batch);
  const double k = static_cast<double>(d.size());
  std::vector<double> grad_q(d.size(), 0.0);
  if (est.p2 >= 1.0) {
    grad_q[static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin())] = 1.0;
  } else {
    const double z = NormalQuantile(est.p2);
    for (std::size_t i = 0; i < d.size(); ++i) {
      grad_q[i] = 1.0 / k;
      if (est.sigma_h > 0.0 && d.size() > 1)
        grad_q[i] += z * (d[i] - est.mu_h) / ((k - 1.0) * est.sigma_h);
    }
  }
  double proj = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) proj += upstream.data()[i] * batch.data()[i];
  const double coef = -proj * s / est.delta_local;
  for (double& g : grad_q) g *= coef;
  out += internal::DistanceGradientToRows(batch, grad_q, d);
  return out;
}

// Moment-matching surrogate for the divergence between the pairwise-distance
// sample and its Gaussian fit: alpha * (skewness^2 + excess_kurtosis^2), with
// population central moments. Zero iff the third and fourth standardized
// moments match a Gaussian. Returns d loss / d distance alongside the loss.
inline LossAndGradient MomentSurrogateFromDistances(std::span<const double> d,
                                                    double alpha) {
  LossAndGradient out;
  out.gradient = Matrix(1, d.size());
  if (alpha == 0.0 || d.size() < 2) return out;
  const double k = static_cast<double>(d.size());
  const double mu = std::accumulate(d.begin(), d.end(), 0.0) / k;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double x : d) {
    const double c = x - mu;
    m2 += c * c;
    m3 += c * c * c;
    m4 += c * c * c * c;
  }
  m2 /= k;
  m3 /= k;
  m4 /= k;
  if (m2 <= 1e-24 * std::max(1.0, mu * mu)) return out;
  const double m2_15 = m2 * std::sqrt(m2);
  const double skew = m3 / m2_15;
  const double exkurt = m4 / (m2 * m2) - 3.0;
  out.loss = alpha * (skew * skew + exkurt * exkurt);
  const double skew_m2 = 1.5 * m3 / (m2_15 * m2);
  const double kurt_m2 = 2.0 * m4 / (m2 * m2 * m2);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double c = d[i] - mu;
    const double dm2 = 2.0 / k * c;
    const double dm3 = 3.0 / k * (c * c - m2);
    const double dm4 = 4.0 / k * (c * c * c - m3);
    const double dskew = dm3 / m2_15 - skew_m2 * dm2;
    const double dkurt = dm4 / (m2 * m2) - kurt_m2 * dm2;
    out.gradient(0, i) = 2.0 * alpha * (skew * dskew + exkurt * dkurt);
  }
  return out;
}

// KL(P_hist || N) where P_hist is a kernel-smoothed histogram of the
// standardized distances over `bins` equal bins on [-4, 4] and N the
// standard normal mass of the same bins. Returns d loss / d distance.
inline LossAndGradient HistogramKlFromDistances(std::span<const double> d,
                                                double alpha, std::size_t bins = 16) {
  LossAndGradient out;
  out.gradient = Matrix(1, d.size());
  if (alpha == 0.0 || d.size() < 2) return out;
  const SampleMoments m = MeanAndSampleStddev(d);
  if (m.stddev <= 1e-12 * std::max(1.0, std::fabs(m.mean))) return out;
  const std::size_t n = d.size();
  const double width = 8.0 / static_cast<double>(bins);
  const double tau = 0.5 * width;
  const double smoothing = 1e-6;
  std::vector<double> edges(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) edges[b] = -4.0 + width * static_cast<double>(b);
  std::vector<double> reference(bins);
  double ref_total = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    reference[b] = NormalCdf(edges[b + 1]) - NormalCdf(edges[b]);
    ref_total += reference[b];
  }
  for (double& r : reference) r /= ref_total;

  std::vector<double> z(n);
  for (std::size_t i = 0; i < n; ++i) z[i] = (d[i] - m.mean) / m.stddev;
  std::vector<double> mass(bins, smoothing);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t b = 0; b < bins; ++b)
      mass[b] += NormalCdf((edges[b + 1] - z[i]) / tau) - NormalCdf((edges[b] - z[i]) / tau);
  const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  std::vector<double> g(bins);
  double kl = 0.0, mean_g = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    const double p = mass[b] / total;
    kl += p * std::log(p / reference[b]);
    g[b] = std::log(p / reference[b]) + 1.0;
    mean_g += p * g[b];
  }
  out.loss = alpha * kl;
  // d KL / d mass_c = (g_c - sum_b p_b g_b) / total.
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  auto pdf = [&](double x) { return inv_sqrt_2pi * std::exp(-0.5 * x * x); };
  std::vector<double> grad_z(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t b = 0; b < bins; ++b) {
      const double dmass =
          (pdf((edges[b] - z[i]) / tau) - pdf((edges[b + 1] - z[i]) / tau)) / tau;
      acc += (g[b] - mean_g) / total * dmass;
    }
    grad_z[i] = alpha * acc;
  }
  // z_k = (d_k - mu) / s with s the sample stddev.
  const double mean_gz = std::accumulate(grad_z.begin(), grad_z.end(), 0.0) /
                         static_cast<double>(n);
  double gz_dot_z = 0.0;
  for (std::size_t i = 0; i < n; ++i) gz_dot_z += grad_z[i] * z[i];
  for (std::size_t i = 0; i < n; ++i) {
    out.gradient(0, i) = (grad_z[i] - mean_gz -
                          z[i] / static_cast<double>(n - 1) * gz_dot_z) / m.stddev;
  }
  return out;
}

enum class DistributionLossKind { kMomentSurrogate, kHistogramKl };

// Distance-distribution loss on a batch and its gradient with respect to the
// batch rows.
inline LossAndGradient DistributionLoss(
    const Matrix& batch, double alpha,
    DistributionLossKind kind = DistributionLossKind::kMomentSurrogate) {
  if (batch.rows() < 4) {
    throw std::invalid_argument("DistributionLoss: need at least 4 rows");
  }
  if (alpha == 0.0) return {0.0, Matrix(batch.rows(), batch.cols())};
  const std::vector<double> d = PairwiseDistances(batch);
  const LossAndGradient in_distance =
      kind == DistributionLossKind::kMomentSurrogate
          ? MomentSurrogateFromDistances(d, alpha)
          : HistogramKlFromDistances(d, alpha);
  return {in_distance.loss,
          internal::DistanceGradientToRows(batch, in_distance.gradient.data(), d)};
}

struct FcmOptions {
  double fuzzifier = 2.0;  // m
  std::size_t max_iter = 100;
  double tolerance = 1e-5;  // on max center movement
};

struct FuzzyAssignment {
  std::vector<int> cluster_ids;
  std::vector<double> confidences;
  std::vector<bool> retained;  // empty means "all retained"

  std::size_t size() const { return cluster_ids.size(); }
  bool is_retained(std::size_t i) const { return retained.empty() || retained[i]; }
  std::size_t retained_count() const {
    if (retained.empty()) return cluster_ids.size();
    return static_cast<std::size_t>(std::count(retained.begin(), retained.end(), true));
  }
};

struct FcmResult {
  FuzzyAssignment assignment;
  Matrix centers;
  Matrix memberships;
  std::vector<double> objective;  // sum u^m d^2 after each membership update
  std::size_t iterations = 0;
  bool degenerate = false;  // all centers coincide; purity is meaningless
};

namespace internal {

// x^p with the common fuzzifier m = 2 (p = 1 or 2) kept off std::pow.
inline double FuzzyPow(double x, double p) {
  if (p == 1.0) return x;
  if (p == 2.0) return x * x;
  return std::pow(x, p);
}

// Memberships for `centers` plus the objective sum u^m d^2 they attain, in
// one pass over the point-center distances.
inline double MembershipsAndObjective(const Matrix& points, const Matrix& centers, double m,
                                      Matrix& u) {
  const std::size_t n = points.rows();
  const std::size_t c = centers.rows();
  const std::size_t dim = points.cols();
  if (u.rows() != n || u.cols() != c) u = Matrix(n, c);
  double d2[64];
  std::vector<double> d2_heap;
  double* d2p = d2;
  if (c > 64) {
    d2_heap.resize(c);
    d2p = d2_heap.data();
  }
  const double power = 1.0 / (m - 1.0);
  double objective = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = points.row(i).data();
    double* ui = u.row(i).data();
    std::size_t coincident = c;
    for (std::size_t j = 0; j < c; ++j) {
      const double* ctr = centers.row(j).data();
      double acc = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double diff = x[k] - ctr[k];
        acc += diff * diff;
      }
      d2p[j] = acc;
      if (acc == 0.0 && coincident == c) coincident = j;
    }
    if (coincident < c) {
      for (std::size_t j = 0; j < c; ++j) ui[j] = j == coincident ? 1.0 : 0.0;
      continue;
    }
    // u_ij = d_ij^(-2/(m-1)) / sum_k d_ik^(-2/(m-1))
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      ui[j] = 1.0 / FuzzyPow(d2p[j], power);
      total += ui[j];
    }
    const double inv_total = 1.0 / total;
    for (std::size_t j = 0; j < c; ++j) {
      ui[j] *= inv_total;
      objective += FuzzyPow(ui[j], m) * d2p[j];
    }
  }
  return objective;
}

}  // namespace internal

// u_ij = 1 / sum_k (|x_i - c_j| / |x_i - c_k|)^(2/(m-1)). A point that
// coincides with a center belongs to it (the lowest such id) with degree 1.
inline Matrix FcmMemberships(const Matrix& points, const Matrix& centers, double m) {
  Matrix u;
  internal::MembershipsAndObjective(points, centers, m, u);
  return u;
}

inline double FcmObjective(const Matrix& points, const Matrix& centers,
                           const Matrix& memberships, double m) {
  double j = 0.0;
  for (std::size_t i = 0; i < points.rows(); ++i) {
    for (std::size_t k = 0; k < centers.rows(); ++k) {
      const double d = Distance(points.row(i), centers.row(k));
      j += std::pow(memberships(i, k), m) * d * d;
    }
  }
  return j;
}

// Hard view of a membership matrix: argmax (ties to the lowest id) and its
// degree.
inline FuzzyAssignment AssignFromMemberships(const Matrix& memberships) {
  FuzzyAssignment a;
  a.cluster_ids.resize(memberships.rows());
  a.confidences.resize(memberships.rows());
  for (std::size_t i = 0; i < memberships.rows(); ++i) {
    auto r = memberships.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < r.size(); ++j)
      if (r[j] > r[best]) best = j;
    a.cluster_ids[i] = static_cast<int>(best);
    a.confidences[i] = r[best];
  }
  return a;
}

// Fuzzy c-means by alternating optimization, seeded from `clusters` distinct
// rows chosen with `rng`.
inline FcmResult Fcm(const Matrix& points, std::size_t clusters,
                     const FcmOptions& options, Rng& rng) {
  if (clusters < 2) throw std::invalid_argument("Fcm: need at least 2 clusters");
  if (!(options.fuzzifier > 1.0)) throw std::invalid_argument("Fcm: fuzzifier must be > 1");
  if (points.rows() < clusters) {
    throw std::invalid_argument("Fcm: " + std::to_string(points.rows()) +
                                " points for " + std::to_string(clusters) + " clusters");
  }
  const std::size_t n = points.rows();
  const double m = options.fuzzifier;

  // D^2 seeding: the first center is a uniform row, each further one a row
  // drawn with probability proportional to its squared distance from the
  // nearest chosen center. Falls back to uniform picks once all remaining
  // rows coincide with a center.
  std::vector<std::size_t> chosen = {static_cast<std::size_t>(rng.UniformInt(n))};
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  while (chosen.size() < clusters) {
    auto last = points.row(chosen.back());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = Distance(points.row(i), last);
      nearest[i] = std::min(nearest[i], d * d);
      total += nearest[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      double target = rng.Uniform() * total;
      for (std::size_t i = 0; i < n && pick == n; ++i) {
        if (nearest[i] == 0.0) continue;
        target -= nearest[i];
        if (target < 0.0) pick = i;
      }
      if (pick == n)  // rounding left the target just past the last row
        for (std::size_t i = n; i-- > 0 && pick == n;)
          if (nearest[i] > 0.0) pick = i;
    } else {
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < n; ++i)
        if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) rest.push_back(i);
      pick = rest[static_cast<std::size_t>(rng.UniformInt(rest.size()))];
    }
    chosen.push_back(pick);
  }
  FcmResult result;
  result.centers = SelectRows(points, chosen);

  const std::size_t dim = points.cols();
  Matrix next(clusters, dim);
  std::vector<double> weight(clusters);
  for (std::size_t iter = 0; iter < options.max_iter; ++iter) {
    result.objective.push_back(
        internal::MembershipsAndObjective(points, result.centers, m, result.memberships));
    std::fill(next.data().begin(), next.data().end(), 0.0);
    std::fill(weight.begin(), weight.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* x = points.row(i).data();
      const double* ui = result.memberships.row(i).data();
      for (std::size_t k = 0; k < clusters; ++k) {
        const double w = internal::FuzzyPow(ui[k], m);
        if (w == 0.0) continue;
        weight[k] += w;
        double* c = next.row(k).data();
        for (std::size_t col = 0; col < dim; ++col) c[col] += w * x[col];
      }
    }
    double max_move = 0.0;
    for (std::size_t k = 0; k < clusters; ++k) {
      auto c = next.row(k);
      if (weight[k] > 0.0) {
        const double inv = 1.0 / weight[k];
        for (double& v : c) v *= inv;
      } else {
        std::copy(result.centers.row(k).begin(), result.centers.row(k).end(), c.begin());
      }
      max_move = std::max(max_move, Distance(c, result.centers.row(k)));
    }
    std::swap(result.centers, next);
    result.iterations = iter + 1;
    if (max_move < options.tolerance) break;
  }
  result.objective.push_back(
      internal::MembershipsAndObjective(points, result.centers, m, result.memberships));
  result.assignment = AssignFromMemberships(result.memberships);

  result.degenerate = true;
  for (std::size_t k = 1; k < clusters && result.degenerate; ++k)
    if (Distance(result.centers.row(k), result.centers.row(0)) > 0.0) result.degenerate = false;
  return result;
}

// Marks rows whose confidence reaches `threshold`.
inline void ApplyConfidenceFilter(FuzzyAssignment& assignment, double threshold) {
  assignment.retained.resize(assignment.confidences.size());
  for (std::size_t i = 0; i < assignment.confidences.size(); ++i)
    assignment.retained[i] = assignment.confidences[i] >= threshold;
}

class InsufficientSamplesError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Fraction of counted rows that carry their cluster's majority label.
inline double Purity(const FuzzyAssignment& assignment, std::span<const int> labels,
                     bool use_mask) {
  if (labels.size() != assignment.size()) {
    throw std::invalid_argument("Purity: label count does not match assignment");
  }
  std::map<int, std::map<int, std::size_t>> counts;
  std::size_t total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (use_mask && !assignment.is_retained(i)) continue;
    ++counts[assignment.cluster_ids[i]][labels[i]];
    ++total;
  }
  if (total == 0) throw InsufficientSamplesError("Purity: insufficient retained samples");
  std::size_t majority = 0;
  for (const auto& [cluster, by_label] : counts) {
    std::size_t best = 0;
    for (const auto& [label, count] : by_label) best = std::max(best, count);
    majority += best;
  }
  return static_cast<double>(majority) / static_cast<double>(total);
}

// Weakly supervised contrastive term on retained rows:
//   loss = -beta / n^2 * sum_{j,k retained, I_j != I_k} ||h_j - h_k||
// over ordered pairs, with n the batch size. Minimizing it pushes embeddings
// from different clusters apart.
inline LossAndGradient ContrastiveLoss(const Matrix& batch,
                                       const FuzzyAssignment& assignment, double beta) {
  if (assignment.size() != batch.rows()) {
    throw std::invalid_argument("ContrastiveLoss: assignment size mismatch");
  }
  LossAndGradient out;
  out.gradient = Matrix(batch.rows(), batch.cols());
  if (assignment.retained_count() < 2) {
    LogWarning("ContrastiveLoss: fewer than 2 retained rows, term skipped");
    return out;
  }
  if (beta == 0.0) return out;
  const double n = static_cast<double>(batch.rows());
  const double scale = -beta / (n * n);
  for (std::size_t j = 0; j < batch.rows(); ++j) {
    if (!assignment.is_retained(j)) continue;
    for (std::size_t k = j + 1; k < batch.rows(); ++k) {
      if (!assignment.is_retained(k)) continue;
      if (assignment.cluster_ids[j] == assignment.cluster_ids[k]) continue;
      const double d = Distance(batch.row(j), batch.row(k));
      out.loss += 2.0 * scale * d;
      if (d == 0.0) continue;
      auto hj = batch.row(j);
      auto hk = batch.row(k);
      auto gj = out.gradient.row(j);
      auto gk = out.gradient.row(k);
      for (std::size_t c = 0; c < batch.cols(); ++c) {
        const double g = 2.0 * scale * (hj[c] - hk[c]) / d;
        gj[c] += g;
        gk[c] -= g;
      }
    }
  }
  return out;
}

}  // namespace vflafe

#endif  // VFLAFE_ADAPTIVE_H_
