#pragma once

#include <chrono>
#include <string>
#include <thread>

#include "sftkit/common.hpp"

namespace sftkit {

// A failure worth retrying: timeouts, refused connections, partial batches.
class TransientError : public ServiceError {
  using ServiceError::ServiceError;
};

// Exponential backoff. Attempts are capped at five by default.
struct RetryPolicy {
  int max_attempts = 5;
  std::chrono::milliseconds initial_backoff{100};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{5000};

  std::chrono::milliseconds backoff_for(int attempt) const {
    double ms = static_cast<double>(initial_backoff.count());
    for (int i = 1; i < attempt; ++i) ms *= multiplier;
    return std::chrono::milliseconds(
        static_cast<long long>(std::min(ms, static_cast<double>(max_backoff.count()))));
  }
};

// Calls fn() until it returns or throws something other than
// TransientError. The last TransientError is rethrown once attempts run out.
template <typename Fn>
auto with_retries(const RetryPolicy& policy, Fn&& fn, int* attempts_used = nullptr) -> decltype(fn()) {
  const int limit = std::max(1, policy.max_attempts);
  for (int attempt = 1;; ++attempt) {
    if (attempts_used) *attempts_used = attempt;
    try {
      return fn();
    } catch (const TransientError&) {
      if (attempt >= limit) throw;
      const auto wait = policy.backoff_for(attempt);
      if (wait.count() > 0) std::this_thread::sleep_for(wait);
    }
  }
}

}  // namespace sftkit
