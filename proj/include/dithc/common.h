#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dithc {

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

constexpr std::size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }
const char* dtype_name(Dtype d);

template <typename T>
constexpr Dtype dtype_of();
template <>
constexpr Dtype dtype_of<float>() { return Dtype::F32; }
template <>
constexpr Dtype dtype_of<double>() { return Dtype::F64; }

// The two memory tiers: Fast models on-package memory, Slow models DDR.
enum class MemTier : std::uint8_t { Fast = 0, Slow = 1 };
const char* tier_name(MemTier t);

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad shapes, mixed dtypes, invalid configs passed to an API.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// A tier could not satisfy an allocation. Never converted into a silent
// spill into the other tier.
class OutOfTier : public Error {
 public:
  OutOfTier(MemTier tier, std::size_t requested, std::size_t used,
            std::size_t capacity, std::string report = {});
  MemTier tier() const { return tier_; }
  std::size_t requested() const { return requested_; }
  std::size_t used() const { return used_; }
  std::size_t capacity() const { return capacity_; }
  const std::string& report() const { return report_; }

 private:
  MemTier tier_;
  std::size_t requested_, used_, capacity_;
  std::string report_;
};

// Pinned pool slot accounting failure.
class PoolExhausted : public Error {
 public:
  using Error::Error;
};

class TransportError : public Error {
 public:
  using Error::Error;
};

class CollectiveError : public Error {
 public:
  using Error::Error;
};

class PlanMismatch : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

[[noreturn]] void throw_argument(std::string_view what);

#define DITHC_CHECK(cond, msg)                    \
  do {                                            \
    if (!(cond)) ::dithc::throw_argument((msg));  \
  } while (0)

// Warnings go to stderr unless a sink is installed (tests capture them).
using WarningSink = void (*)(const std::string&);
void set_warning_sink(WarningSink sink);
void warn(const std::string& msg);

}  // namespace dithc
