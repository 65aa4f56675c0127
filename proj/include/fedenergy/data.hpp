#pragma once

// Household load ingestion, hourly aggregation, sliding-window features,
// feature scaling, Pecan-Street-style splits and a synthetic generator.

#include <array>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedenergy/nn.hpp"

namespace fedenergy::data {

using Timestamp = std::chrono::sys_seconds;

Timestamp parse_timestamp(const std::string& text);
std::string format_timestamp(Timestamp t);

struct QuarterHourReading {
  Timestamp timestamp;
  std::string house_id;
  double energy_kwh = 0.0;
  double solar_kwh = 0.0;
};

struct Weather {
  double humidity = 0.0;     // fraction 0..1
  double temperature_c = 0.0;
  double cloud_cover = 0.0;  // fraction 0..1
  double wind_speed_ms = 0.0;
  double dew_point_c = 0.0;
  double precip_intensity = 0.0;
};

struct WeatherRecord {
  Timestamp timestamp;
  Weather weather;
};

struct HourlyRecord {
  Timestamp timestamp;
  std::string house_id;
  double energy_kwh = 0.0;
  double solar_kwh = 0.0;
  Weather weather;

  // Throws IngestionError on misaligned timestamps, non-finite or out-of-range values.
  void validate() const;
};

struct WindowSpec {
  std::size_t history_hours = 720;
  std::size_t horizon_hours = 1;

  std::size_t feature_dim() const { return 2 * history_hours + kTimeFeatures + kWeatherFeatures; }
  // Number of examples build_examples yields from `n` contiguous hours.
  std::size_t example_count(std::size_t n) const {
    return n + 1 < history_hours + horizon_hours + 1 ? 0 : n - history_hours - horizon_hours + 1;
  }

  static constexpr std::size_t kTimeFeatures = 4;
  static constexpr std::size_t kWeatherFeatures = 6;
};

struct HourlyAggregate {
  std::vector<HourlyRecord> hours;  // energy/solar only; weather left default
  std::vector<Timestamp> dropped_hours;
  std::map<Timestamp, int> quarters_present;  // for dropped hours only

  // One line per dropped hour: "<house> <hour> <present>/4".
  void write_gap_report(std::ostream& out, const std::string& house_id) const;
};

// Sums each hour's four quarter-hour readings; incomplete hours are dropped.
HourlyAggregate aggregate_hourly(std::span<const QuarterHourReading> readings);

// Attaches the matching hour's weather to every record; a missing hour is an error.
void join_weather(std::vector<HourlyRecord>& hourly, std::span<const WeatherRecord> weather);

// Throws ContiguityError naming the first missing hour.
void require_contiguous(std::span<const HourlyRecord> hourly);

// Writes the feature vector for the anchor hour `window.back()`. `window` must
// hold exactly `spec.history_hours` contiguous records. Layout:
//   [0, H)        energy, oldest first
//   [H, 2H)       solar, oldest first
//   2H..2H+3      sin/cos hour-of-day, sin/cos day-of-year
//   2H+4..2H+9    humidity, temperature, cloud cover, wind, dew point, precip
void write_features(std::span<const HourlyRecord> window, const WindowSpec& spec,
                    std::span<double> out);

std::array<double, 4> time_features(Timestamp t);

// One example per anchor with full history and a target `horizon` hours on.
// `stride` keeps every stride-th anchor (1 keeps all).
nn::Dataset build_examples(std::span<const HourlyRecord> hourly, const WindowSpec& spec,
                           std::size_t stride = 1);

class Scaler {
 public:
  static constexpr double kStdFloor = 1e-8;

  Scaler() = default;
  Scaler(nn::Vector mean, nn::Vector stddev);

  std::size_t dim() const { return static_cast<std::size_t>(mean_.size()); }
  const nn::Vector& mean() const { return mean_; }
  const nn::Vector& stddev() const { return std_; }

  void transform_inplace(nn::Matrix& inputs) const;
  void transform_inplace(std::span<double> row) const;
  nn::Dataset transform(const nn::Dataset& data) const;
  nn::Dataset inverse_transform(const nn::Dataset& data) const;

  // Binary file: "FEDS", u8 version, u32 dim, dim f64 means, dim f64 stds, CRC32.
  std::vector<std::uint8_t> encode() const;
  static Scaler decode(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static Scaler load(const std::filesystem::path& path);

  bool bit_equal(const Scaler& other) const;

 private:
  nn::Vector mean_;
  nn::Vector std_;
};

// Population z-score statistics per input column; std floored at kStdFloor.
Scaler fit_scaler(const nn::Dataset& data);

// ---- synthetic households -------------------------------------------------

struct HouseProfile {
  double base_load_kwh = 0.4;
  double morning_peak_kwh = 0.8;
  double evening_peak_kwh = 1.5;
  double cooling_kwh_per_deg = 0.12;
  double heating_kwh_per_deg = 0.06;
  double weekend_factor = 1.15;
  double noise_kwh = 0.12;
  double spike_probability = 0.02;
  double spike_kwh = 2.0;
  double solar_peak_kwh = 4.0;
};

struct SyntheticOptions {
  Timestamp start = parse_timestamp("2019-01-01T00:00:00Z");
  std::optional<double> forced_cloud_cover;
};

struct SyntheticNetwork {
  std::vector<WeatherRecord> weather;
  std::vector<std::vector<HourlyRecord>> houses;  // weather already joined
};

std::string synthetic_house_id(std::size_t index);
HouseProfile synthetic_profile(std::size_t house_index, std::uint64_t seed);

// Day length in hours; sunrise = 12 - L/2, sunset = 12 + L/2 (UTC treated as solar time).
double day_length_hours(Timestamp t);
// Clear-sky solar output for the hour starting at `t`; zero outside daylight.
double clear_sky_solar_kwh(const HouseProfile& profile, Timestamp t);

std::vector<WeatherRecord> generate_weather(std::size_t hours, std::uint64_t seed,
                                            const SyntheticOptions& options = {});
SyntheticNetwork generate_synthetic(std::size_t houses, std::size_t hours, std::uint64_t seed,
                                    const SyntheticOptions& options = {});

// ---- splitting -------------------------------------------------------------

struct TestHouseSplit {
  std::string house_id;
  std::vector<HourlyRecord> warmup;  // first half, also part of base training
  std::vector<HourlyRecord> stream;  // second half, replayed hour by hour
};

struct PecanSplit {
  nn::Dataset base_train;
  std::vector<TestHouseSplit> tests;
};

// Base set = every non-test house in full plus the first half of each test
// house. Throws ConfigError for unknown ids or when no base house remains.
PecanSplit split_pecan_style(const std::vector<std::vector<HourlyRecord>>& houses,
                             const std::vector<std::string>& test_house_ids,
                             const WindowSpec& spec, std::size_t stride = 1);

// ---- CSV -------------------------------------------------------------------

// Load CSV header: timestamp,house_id,energy_kwh,solar_kwh
std::vector<QuarterHourReading> read_load_csv(const std::filesystem::path& path);
// Weather CSV header:
// timestamp,humidity,temperature_c,cloud_cover,wind_speed_ms,dew_point_c,precip_intensity
std::vector<WeatherRecord> read_weather_csv(const std::filesystem::path& path);

void write_load_csv(const std::filesystem::path& path,
                    const std::vector<std::vector<HourlyRecord>>& houses);
void write_weather_csv(const std::filesystem::path& path, std::span<const WeatherRecord> weather);

// Groups load rows by house, aggregates quarter-hour data (hourly rows pass
// through) and joins weather. Dropped hours are appended to `gap_report`.
std::map<std::string, std::vector<HourlyRecord>> ingest_households(
    std::span<const QuarterHourReading> rows, std::span<const WeatherRecord> weather,
    std::ostream* gap_report = nullptr);

}  // namespace fedenergy::data
