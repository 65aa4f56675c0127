// Seeded synthetic households: shared weather station, per-house load shape,
// and rooftop solar following a clear-sky bell attenuated by cloud cover.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <fmt/format.h>

#include "fedenergy/data.hpp"
#include "fedenergy/errors.hpp"
#include "fedenergy/seed.hpp"

namespace fedenergy::data {

using namespace std::chrono;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr std::uint64_t kWeatherSalt = 0x5745415448455221ULL;
constexpr std::uint64_t kProfileSalt = 1;
constexpr std::uint64_t kLoadSalt = 2;

struct Calendar {
  int hour;
  int day_of_year;  // 0-based
  bool weekend;
};

Calendar calendar(Timestamp t) {
  const auto day_point = floor<days>(t);
  const year_month_day ymd{day_point};
  const weekday wd{day_point};
  return {static_cast<int>(duration_cast<hours>(t - day_point).count()),
          static_cast<int>((day_point - sys_days{ymd.year() / January / 1}).count()),
          wd == Saturday || wd == Sunday};
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::string synthetic_house_id(std::size_t index) { return fmt::format("house_{:02d}", index); }

HouseProfile synthetic_profile(std::size_t house_index, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(mix_seed(seed, house_index), kProfileSalt));
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  HouseProfile p;
  p.base_load_kwh = u(0.25, 0.6);
  p.morning_peak_kwh = u(0.4, 1.0);
  p.evening_peak_kwh = u(0.8, 2.0);
  p.cooling_kwh_per_deg = u(0.08, 0.18);
  p.heating_kwh_per_deg = u(0.03, 0.08);
  p.weekend_factor = u(1.05, 1.25);
  p.noise_kwh = u(0.08, 0.18);
  p.spike_probability = 0.02;
  p.spike_kwh = u(1.5, 3.0);
  p.solar_peak_kwh = u(3.0, 6.0);
  return p;
}

double day_length_hours(Timestamp t) {
  const auto c = calendar(t);
  return 12.0 + 2.0 * std::sin(kTwoPi * (c.day_of_year - 80) / 365.0);
}

double clear_sky_solar_kwh(const HouseProfile& profile, Timestamp t) {
  const auto c = calendar(t);
  const double length = day_length_hours(t);
  const double sunrise = 12.0 - length / 2.0;
  const double x = static_cast<double>(c.hour);
  if (x <= sunrise || x >= sunrise + length) return 0.0;
  const double seasonal = 0.8 + 0.2 * std::cos(kTwoPi * (c.day_of_year - 172) / 365.0);
  return profile.solar_peak_kwh * seasonal * std::sin(std::numbers::pi * (x - sunrise) / length);
}

std::vector<WeatherRecord> generate_weather(std::size_t hours_count, std::uint64_t seed,
                                            const SyntheticOptions& options) {
  std::mt19937_64 rng(mix_seed(seed, kWeatherSalt));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<WeatherRecord> out;
  out.reserve(hours_count);
  double temp_noise = 0.0, cloud_state = 0.0, wind_noise = 0.0;
  for (std::size_t i = 0; i < hours_count; ++i) {
    const Timestamp t = options.start + hours{static_cast<long>(i)};
    const auto c = calendar(t);
    temp_noise = 0.95 * temp_noise + 0.6 * normal(rng);
    cloud_state = 0.9 * cloud_state + 0.45 * normal(rng);
    wind_noise = 0.8 * wind_noise + 0.5 * normal(rng);
    const double humidity_noise = 0.04 * normal(rng);
    const double precip_draw = unit(rng);

    Weather w;
    w.temperature_c = 20.0 - 9.0 * std::cos(kTwoPi * (c.day_of_year - 15) / 365.0) +
                      5.0 * std::sin(kTwoPi * (c.hour - 9) / 24.0) + temp_noise;
    const double winter = std::cos(kTwoPi * c.day_of_year / 365.0);  // +1 in January
    w.cloud_cover = options.forced_cloud_cover
                        ? *options.forced_cloud_cover
                        : std::clamp(logistic(1.6 * cloud_state - 0.6 + 0.5 * winter), 0.0, 1.0);
    w.humidity = std::clamp(0.62 + 0.15 * std::cos(kTwoPi * (c.hour - 5) / 24.0) +
                                0.2 * (w.cloud_cover - 0.5) + humidity_noise,
                            0.05, 1.0);
    w.dew_point_c = w.temperature_c - 20.0 * (1.0 - w.humidity);
    w.wind_speed_ms = std::max(0.0, 3.0 + 1.5 * std::sin(kTwoPi * (c.hour - 8) / 24.0) + wind_noise);
    w.precip_intensity =
        w.cloud_cover > 0.85 ? (w.cloud_cover - 0.85) * 20.0 * precip_draw : 0.0;
    out.push_back({t, w});
  }
  return out;
}

SyntheticNetwork generate_synthetic(std::size_t houses, std::size_t hours_count,
                                    std::uint64_t seed, const SyntheticOptions& options) {
  if (houses == 0 || hours_count == 0) throw ConfigError("need at least one house and one hour");
  SyntheticNetwork net;
  net.weather = generate_weather(hours_count, seed, options);
  net.houses.resize(houses);
  for (std::size_t h = 0; h < houses; ++h) {
    const HouseProfile p = synthetic_profile(h, seed);
    std::mt19937_64 rng(mix_seed(mix_seed(seed, h), kLoadSalt));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto& series = net.houses[h];
    series.reserve(hours_count);
    const std::string id = synthetic_house_id(h);
    for (const auto& wr : net.weather) {
      const auto c = calendar(wr.timestamp);
      const double hr = c.hour;
      const double noise = normal(rng);
      const double spike_draw = unit(rng);
      const double spike_size = unit(rng);

      const double morning = p.morning_peak_kwh * std::exp(-(hr - 7.0) * (hr - 7.0) / 2.0) *
                             (c.weekend ? 0.6 : 1.0);
      const double evening = p.evening_peak_kwh * std::exp(-(hr - 19.0) * (hr - 19.0) / 8.0);
      const double hvac = p.cooling_kwh_per_deg * std::max(0.0, wr.weather.temperature_c - 24.0) +
                          p.heating_kwh_per_deg * std::max(0.0, 14.0 - wr.weather.temperature_c);
      double energy = (p.base_load_kwh + morning + evening + hvac) *
                      (c.weekend ? p.weekend_factor : 1.0);
      energy += p.noise_kwh * noise;
      if (spike_draw < p.spike_probability) energy += p.spike_kwh * (0.5 + 0.5 * spike_size);

      HourlyRecord rec;
      rec.timestamp = wr.timestamp;
      rec.house_id = id;
      rec.energy_kwh = std::max(0.0, energy);
      rec.solar_kwh =
          clear_sky_solar_kwh(p, wr.timestamp) * (1.0 - 0.7 * wr.weather.cloud_cover);
      rec.weather = wr.weather;
      series.push_back(std::move(rec));
    }
  }
  return net;
}

}  // namespace fedenergy::data
