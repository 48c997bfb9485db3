#include "regcast/timestamp.hpp"

#include <charconv>
#include <cstdio>

#include "regcast/error.hpp"

namespace regcast {

namespace {

using std::chrono::days;
using std::chrono::sys_days;
using std::chrono::year_month_day;

year_month_day ymd_of(std::int64_t hours) {
  auto d = std::chrono::floor<days>(std::chrono::hours(hours));
  return year_month_day{sys_days{d}};
}

int parse_int(std::string_view s, std::string_view whole) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw InvalidArgument("cannot parse timestamp '" + std::string(whole) + "'");
  }
  return v;
}

}  // namespace

Timestamp Timestamp::from_ymdh(int year, unsigned month, unsigned day, unsigned hour) {
  year_month_day ymd{std::chrono::year{year}, std::chrono::month{month}, std::chrono::day{day}};
  if (!ymd.ok() || hour > 23) {
    throw InvalidArgument("invalid calendar date " + std::to_string(year) + "-" +
                          std::to_string(month) + "-" + std::to_string(day) + " " +
                          std::to_string(hour) + "h");
  }
  auto d = sys_days{ymd}.time_since_epoch();
  return Timestamp(std::chrono::duration_cast<std::chrono::hours>(d).count() + hour);
}

Timestamp Timestamp::parse(std::string_view text) {
  if (text.size() == 10 && text.find('-') == std::string_view::npos) {
    return from_ymdh(parse_int(text.substr(0, 4), text), parse_int(text.substr(4, 2), text),
                     parse_int(text.substr(6, 2), text), parse_int(text.substr(8, 2), text));
  }
  if (text.size() >= 13 && text[4] == '-' && text[7] == '-' && (text[10] == 'T' || text[10] == ' ')) {
    return from_ymdh(parse_int(text.substr(0, 4), text), parse_int(text.substr(5, 2), text),
                     parse_int(text.substr(8, 2), text), parse_int(text.substr(11, 2), text));
  }
  throw InvalidArgument("cannot parse timestamp '" + std::string(text) +
                        "' (expected YYYYMMDDHH or YYYY-MM-DDTHH)");
}

int Timestamp::year() const { return int(ymd_of(hours_).year()); }
unsigned Timestamp::month() const { return unsigned(ymd_of(hours_).month()); }
unsigned Timestamp::day() const { return unsigned(ymd_of(hours_).day()); }

unsigned Timestamp::hour_of_day() const {
  auto h = hours_ % 24;
  return unsigned(h < 0 ? h + 24 : h);
}

std::string Timestamp::iso() const {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02u", year(), month(), day(), hour_of_day());
  return buf;
}

std::string Timestamp::compact() const {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d%02u%02u%02u", year(), month(), day(), hour_of_day());
  return buf;
}

}  // namespace regcast
