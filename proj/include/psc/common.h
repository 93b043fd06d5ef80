// Copyright 2026 The PSC Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef PSC_COMMON_H_
#define PSC_COMMON_H_

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace psc {

using RowMatrixXd =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixXf =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Malformed input: bad shapes, missing files, corrupt headers, bad flags.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical failure while fitting or evaluating on otherwise valid input.
class ComputeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using WarningHandler = std::function<void(std::string_view)>;

// Non-fatal diagnostics go through a process-wide handler. The default writes
// to stderr. Returns the previous handler.
WarningHandler set_warning_handler(WarningHandler handler);
void warn(std::string_view message);

// Shortest decimal text that round-trips to the same double.
std::string format_double(double value);

// Number of worker threads allowed; PSC_THREADS caps it (minimum 1).
int thread_budget();

// Runs fn(i) for i in [0, count) on up to thread_budget() threads. Work is
// split into contiguous chunks, so fn must only touch index-local state.
void parallel_for(std::int64_t count,
                  const std::function<void(std::int64_t)>& fn);

}  // namespace psc

#endif  // PSC_COMMON_H_
