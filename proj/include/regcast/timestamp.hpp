#pragma once

#include <chrono>
#include <compare>
#include <cstdint>
#include <string>
#include <string_view>

namespace regcast {

/// An hour-resolution instant (UTC), stored as hours since 1970-01-01T00.
class Timestamp {
 public:
  constexpr Timestamp() = default;
  constexpr explicit Timestamp(std::int64_t hours_since_epoch) : hours_(hours_since_epoch) {}

  static Timestamp from_ymdh(int year, unsigned month, unsigned day, unsigned hour);
  /// Accepts "YYYYMMDDHH" or "YYYY-MM-DDTHH" (optionally followed by ":MM" etc).
  static Timestamp parse(std::string_view text);

  constexpr std::int64_t hours() const { return hours_; }
  int year() const;
  unsigned month() const;  // 1..12
  unsigned day() const;
  unsigned hour_of_day() const;  // 0..23

  /// "YYYY-MM-DDTHH"
  std::string iso() const;
  /// "YYYYMMDDHH"
  std::string compact() const;

  constexpr Timestamp operator+(std::int64_t h) const { return Timestamp(hours_ + h); }
  constexpr Timestamp operator-(std::int64_t h) const { return Timestamp(hours_ - h); }
  constexpr std::int64_t operator-(Timestamp other) const { return hours_ - other.hours_; }
  constexpr auto operator<=>(const Timestamp&) const = default;

 private:
  std::int64_t hours_ = 0;
};

}  // namespace regcast
