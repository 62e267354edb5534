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

// Test-only helpers shared by the unit and acceptance suites.

#ifndef VFLAFE_TESTS_TESTING_H_
#define VFLAFE_TESTS_TESTING_H_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "vflafe/log.h"
#include "vflafe/numerics.h"

namespace vflafe::testing {

// Largest relative error between `analytic` and central differences of
// `loss` around `x`, with relative error taken against max(|numeric|, floor).
inline double MaxFiniteDifferenceError(const std::function<double(const Matrix&)>& loss,
                                       const Matrix& x, const Matrix& analytic,
                                       double step = 1e-5, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Matrix plus = x, minus = x;
    plus.data()[i] += step;
    minus.data()[i] -= step;
    const double numeric = (loss(plus) - loss(minus)) / (2.0 * step);
    const double err = std::fabs(numeric - analytic.data()[i]) /
                       std::max({std::fabs(numeric), std::fabs(analytic.data()[i]), floor});
    worst = std::max(worst, err);
  }
  return worst;
}

// sum_ij a_ij * b_ij
inline double Frobenius(const Matrix& a, const Matrix& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

// Two isotropic Gaussian blobs (unit stddev) whose means are `separation`
// apart along a random direction; labels 0/1 alternate by row.
struct Blobs {
  Matrix points;
  std::vector<int> labels;
};

inline Blobs TwoBlobs(Rng& rng, std::size_t n, std::size_t dim, double separation) {
  std::vector<double> dir(dim);
  for (double& v : dir) v = rng.Normal();
  const double norm = Norm(dir);
  for (double& v : dir) v *= separation / norm;
  Blobs b;
  b.points = Matrix(n, dim);
  b.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    b.labels[i] = static_cast<int>(i % 2);
    const double side = b.labels[i] == 0 ? -0.5 : 0.5;
    for (std::size_t j = 0; j < dim; ++j) b.points(i, j) = side * dir[j] + rng.Normal();
  }
  return b;
}

// Collects warnings for the lifetime of the object.
class WarningCapture {
 public:
  WarningCapture() {
    previous_ = SetWarningSink([this](const std::string& m) { messages.push_back(m); });
  }
  ~WarningCapture() { SetWarningSink(previous_); }
  WarningCapture(const WarningCapture&) = delete;
  WarningCapture& operator=(const WarningCapture&) = delete;

  std::vector<std::string> messages;

 private:
  WarningSink previous_;
};

}  // namespace vflafe::testing

#endif  // VFLAFE_TESTS_TESTING_H_
