#pragma once

#include <cstdint>
#include <cstdio>
#include <string>

#include "tqs/common.hpp"

namespace tqs {

struct CivilDate {
  int year;
  int month;  // 1..12
  int day;    // 1..31
};

inline bool is_leap_year(int y) {
  return y % 4 == 0 && (y % 100 != 0 || y % 400 == 0);
}

// Days since 1970-01-01 (proleptic Gregorian).
inline int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * static_cast<unsigned>(m + (m > 2 ? -3 : 9)) + 2u) / 5u +
                       static_cast<unsigned>(d) - 1u;
  const unsigned doe = yoe * 365u + yoe / 4u - yoe / 100u + doy;
  return era * 146097 + static_cast<int64_t>(doe) - 719468;
}

inline CivilDate civil_from_days(int64_t z) {
  z += 719468;
  const int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const int64_t y = static_cast<int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  const unsigned d = doy - (153 * mp + 2) / 5 + 1;
  const unsigned m = mp < 10 ? mp + 3 : mp - 9;
  return {static_cast<int>(y + (m <= 2)), static_cast<int>(m), static_cast<int>(d)};
}

// 1-based day of year (1..365 or 366).
inline int day_of_year(const CivilDate& cd) {
  static const int cum[12] = {0, 31, 59, 90, 120, 151, 181, 212, 243, 273, 304, 334};
  int doy = cum[cd.month - 1] + cd.day;
  if (cd.month > 2 && is_leap_year(cd.year)) ++doy;
  return doy;
}

// 0-based slot in a 366-day calendar; slot 59 is Feb 29 and only occurs in
// leap years. Non-leap dates after Feb 28 shift so e.g. Mar 1 is always
// slot 60 regardless of year.
inline int climatology_slot(int64_t day_index) {
  CivilDate cd = civil_from_days(day_index);
  int doy = day_of_year(cd);
  if (!is_leap_year(cd.year) && doy >= 60) ++doy;
  return doy - 1;
}

inline int64_t parse_date(const std::string& s) {
  int y = 0, m = 0, d = 0;
  char extra = 0;
  if (std::sscanf(s.c_str(), "%d-%d-%d%c", &y, &m, &d, &extra) != 3)
    throw ConfigError("bad date '" + s + "', expected YYYY-MM-DD");
  if (m < 1 || m > 12 || d < 1 || d > 31)
    throw ConfigError("date out of range: " + s);
  int64_t z = days_from_civil(y, m, d);
  CivilDate back = civil_from_days(z);
  if (back.year != y || back.month != m || back.day != d)
    throw ConfigError("invalid calendar date: " + s);
  return z;
}

inline std::string format_date(int64_t day_index) {
  CivilDate cd = civil_from_days(day_index);
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02d", cd.year, cd.month, cd.day);
  return buf;
}

}  // namespace tqs
