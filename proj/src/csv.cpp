#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <fmt/os.h>

#include "fedenergy/data.hpp"
#include "fedenergy/errors.hpp"

namespace fedenergy::data {

namespace {

constexpr std::string_view kLoadHeader = "timestamp,house_id,energy_kwh,solar_kwh";
constexpr std::string_view kWeatherHeader =
    "timestamp,humidity,temperature_c,cloud_cover,wind_speed_ms,dew_point_c,precip_intensity";

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::filesystem::path& path, std::size_t line) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || ptr != end) {
    throw IngestionError(fmt::format("{}:{}: '{}' is not a number", path.string(), line, s));
  }
  return v;
}

template <typename RowFn>
void read_csv(const std::filesystem::path& path, std::string_view header, std::size_t columns,
              RowFn&& on_row) {
  std::ifstream f(path);
  if (!f) throw IngestionError(fmt::format("cannot open {}", path.string()));
  std::string line;
  if (!std::getline(f, line)) throw IngestionError(fmt::format("{} is empty", path.string()));
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != header) {
    throw IngestionError(fmt::format("{}: expected header '{}'", path.string(), header));
  }
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_fields(line);
    if (fields.size() != columns) {
      throw IngestionError(fmt::format("{}:{}: expected {} fields, got {}", path.string(), lineno,
                                       columns, fields.size()));
    }
    on_row(fields, lineno);
  }
}

}  // namespace

std::vector<QuarterHourReading> read_load_csv(const std::filesystem::path& path) {
  std::vector<QuarterHourReading> rows;
  read_csv(path, kLoadHeader, 4, [&](const std::vector<std::string>& f, std::size_t line) {
    rows.push_back({parse_timestamp(f[0]), f[1], parse_double(f[2], path, line),
                    parse_double(f[3], path, line)});
  });
  return rows;
}

std::vector<WeatherRecord> read_weather_csv(const std::filesystem::path& path) {
  std::vector<WeatherRecord> rows;
  read_csv(path, kWeatherHeader, 7, [&](const std::vector<std::string>& f, std::size_t line) {
    Weather w;
    w.humidity = parse_double(f[1], path, line);
    w.temperature_c = parse_double(f[2], path, line);
    w.cloud_cover = parse_double(f[3], path, line);
    w.wind_speed_ms = parse_double(f[4], path, line);
    w.dew_point_c = parse_double(f[5], path, line);
    w.precip_intensity = parse_double(f[6], path, line);
    rows.push_back({parse_timestamp(f[0]), w});
  });
  return rows;
}

// Doubles are written in shortest round-trip form so CSV replays are bit-exact.
void write_load_csv(const std::filesystem::path& path,
                    const std::vector<std::vector<HourlyRecord>>& houses) {
  auto out = fmt::output_file(path.string());
  out.print("{}\n", kLoadHeader);
  for (const auto& series : houses) {
    for (const auto& r : series) {
      out.print("{},{},{},{}\n", format_timestamp(r.timestamp), r.house_id, r.energy_kwh,
                r.solar_kwh);
    }
  }
}

void write_weather_csv(const std::filesystem::path& path, std::span<const WeatherRecord> weather) {
  auto out = fmt::output_file(path.string());
  out.print("{}\n", kWeatherHeader);
  for (const auto& r : weather) {
    const auto& w = r.weather;
    out.print("{},{},{},{},{},{},{}\n", format_timestamp(r.timestamp), w.humidity,
              w.temperature_c, w.cloud_cover, w.wind_speed_ms, w.dew_point_c, w.precip_intensity);
  }
}

std::map<std::string, std::vector<HourlyRecord>> ingest_households(
    std::span<const QuarterHourReading> rows, std::span<const WeatherRecord> weather,
    std::ostream* gap_report) {
  std::map<std::string, std::vector<QuarterHourReading>> by_house;
  for (const auto& r : rows) by_house[r.house_id].push_back(r);

  std::map<std::string, std::vector<HourlyRecord>> out;
  for (auto& [id, readings] : by_house) {
    const bool quarter_hourly = std::any_of(readings.begin(), readings.end(), [](const auto& r) {
      return r.timestamp != std::chrono::floor<std::chrono::hours>(r.timestamp);
    });
    std::vector<HourlyRecord> hourly;
    if (quarter_hourly) {
      auto agg = aggregate_hourly(readings);
      if (gap_report) agg.write_gap_report(*gap_report, id);
      hourly = std::move(agg.hours);
    } else {
      std::stable_sort(readings.begin(), readings.end(),
                       [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
      for (std::size_t i = 0; i < readings.size(); ++i) {
        if (i > 0 && readings[i].timestamp == readings[i - 1].timestamp) {
          throw IngestionError(fmt::format("duplicate reading for {} at {}", id,
                                           format_timestamp(readings[i].timestamp)));
        }
        HourlyRecord rec;
        rec.timestamp = readings[i].timestamp;
        rec.house_id = id;
        rec.energy_kwh = readings[i].energy_kwh;
        rec.solar_kwh = readings[i].solar_kwh;
        hourly.push_back(std::move(rec));
      }
    }
    join_weather(hourly, weather);
    for (const auto& rec : hourly) rec.validate();
    out[id] = std::move(hourly);
  }
  return out;
}

}  // namespace fedenergy::data
