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

#ifndef VFLAFE_LOG_H_
#define VFLAFE_LOG_H_

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <utility>

namespace vflafe {

using WarningSink = std::function<void(const std::string&)>;

namespace internal {

inline std::mutex& WarningMutex() {
  static std::mutex mu;
  return mu;
}

inline WarningSink& CurrentWarningSink() {
  static WarningSink sink = [](const std::string& msg) {
    std::cerr << "[vflafe] warning: " << msg << '\n';
  };
  return sink;
}

}  // namespace internal

inline void LogWarning(const std::string& message) {
  std::lock_guard<std::mutex> lock(internal::WarningMutex());
  internal::CurrentWarningSink()(message);
}

// Replaces the process-wide warning sink; returns the previous one.
inline WarningSink SetWarningSink(WarningSink sink) {
  std::lock_guard<std::mutex> lock(internal::WarningMutex());
  return std::exchange(internal::CurrentWarningSink(), std::move(sink));
}

}  // namespace vflafe

#endif  // VFLAFE_LOG_H_
