#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace pairaug {

/// Root of the project exception hierarchy.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bad arguments or records that violate a documented precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Filesystem problems: missing paths, unreadable or unwritable files.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Persisted data whose schema version does not match this build.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// Persisted data whose checksum does not match its contents.
class ChecksumError : public Error {
 public:
  using Error::Error;
};

/// An operation invoked in an order its state machine does not allow.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or shape mismatches inside numeric kernels.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A metric that is undefined for the given inputs (e.g. single-class AUC).
class MetricError : public Error {
 public:
  using Error::Error;
};

namespace detail {
inline void cat_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void cat_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  cat_into(os, rest...);
}
}  // namespace detail

/// Builds a message from heterogeneous parts; used by the check macros.
template <typename... Parts>
std::string cat(const Parts&... parts) {
  std::ostringstream os;
  detail::cat_into(os, parts...);
  return os.str();
}

/// Runs fn(0..n-1) on up to `workers` threads. Tasks must be independent
/// and write only to preassigned slots, so the result is identical to the
/// sequential loop. The first exception wins and is rethrown after join.
inline void parallel_for(int64_t n, int workers, const std::function<void(int64_t)>& fn) {
  if (n <= 0) return;
  const int64_t lanes = std::min<int64_t>(workers, n);
  if (lanes <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::mutex err_mu;
  std::exception_ptr err;
  auto lane = [&] {
    for (int64_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!err) err = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int64_t w = 0; w < lanes; ++w) pool.emplace_back(lane);
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace pairaug

#define PAIRAUG_CHECK(cond, ExType, ...)                    \
  do {                                                      \
    if (!(cond)) throw ExType(::pairaug::cat(__VA_ARGS__)); \
  } while (0)

#define PAIRAUG_VALIDATE(cond, ...) \
  PAIRAUG_CHECK(cond, ::pairaug::ValidationError, __VA_ARGS__)
