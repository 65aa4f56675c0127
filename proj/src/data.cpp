#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <ostream>
#include <set>

#include <fmt/format.h>

#include "bytes.hpp"
#include "fedenergy/data.hpp"
#include "fedenergy/errors.hpp"

namespace fedenergy::data {

using namespace std::chrono;

Timestamp parse_timestamp(const std::string& text) {
  int y, mo, d, h = 0, mi = 0, s = 0;
  char sep = 'T';
  char tail[8] = {0};
  const int n = std::sscanf(text.c_str(), "%4d-%2d-%2d%c%2d:%2d:%2d%7s", &y, &mo, &d, &sep, &h,
                            &mi, &s, tail);
  const std::string_view zone(tail);
  const bool ok = (n == 3) || ((n == 7 || n == 8) && (sep == 'T' || sep == ' '));
  if (!ok || (n == 8 && zone != "Z" && zone != "+00:00")) {
    throw IngestionError(fmt::format("unparseable UTC timestamp '{}'", text));
  }
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)},
                           day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h < 0 || h > 23 || mi < 0 || mi > 59 || s < 0 || s > 59) {
    throw IngestionError(fmt::format("invalid calendar timestamp '{}'", text));
  }
  return Timestamp{sys_days{ymd}} + hours{h} + minutes{mi} + seconds{s};
}

std::string format_timestamp(Timestamp t) {
  const auto day_point = floor<days>(t);
  const year_month_day ymd{day_point};
  const hh_mm_ss hms{t - day_point};
  return fmt::format("{:04d}-{:02d}-{:02d}T{:02d}:{:02d}:{:02d}Z", static_cast<int>(ymd.year()),
                     static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                     hms.hours().count(), hms.minutes().count(), hms.seconds().count());
}

void HourlyRecord::validate() const {
  if (timestamp != floor<hours>(timestamp)) {
    throw IngestionError(fmt::format("{} is not aligned to an hour", format_timestamp(timestamp)));
  }
  const double values[] = {energy_kwh,
                           solar_kwh,
                           weather.humidity,
                           weather.temperature_c,
                           weather.cloud_cover,
                           weather.wind_speed_ms,
                           weather.dew_point_c,
                           weather.precip_intensity};
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw IngestionError(fmt::format("non-finite value at {}", format_timestamp(timestamp)));
    }
  }
  if (weather.humidity < 0.0 || weather.humidity > 1.0 || weather.cloud_cover < 0.0 ||
      weather.cloud_cover > 1.0) {
    throw IngestionError(
        fmt::format("humidity/cloud cover outside [0,1] at {}", format_timestamp(timestamp)));
  }
}

void HourlyAggregate::write_gap_report(std::ostream& out, const std::string& house_id) const {
  for (auto t : dropped_hours) {
    out << house_id << ' ' << format_timestamp(t) << ' ' << quarters_present.at(t) << "/4\n";
  }
}

HourlyAggregate aggregate_hourly(std::span<const QuarterHourReading> readings) {
  std::vector<const QuarterHourReading*> sorted;
  sorted.reserve(readings.size());
  for (const auto& r : readings) {
    const auto minute = duration_cast<minutes>(r.timestamp - floor<hours>(r.timestamp)).count();
    if (r.timestamp != floor<minutes>(r.timestamp) || minute % 15 != 0) {
      throw IngestionError(
          fmt::format("{} is not on a 15-minute boundary", format_timestamp(r.timestamp)));
    }
    if (!std::isfinite(r.energy_kwh) || !std::isfinite(r.solar_kwh) || r.energy_kwh < 0.0 ||
        r.solar_kwh < 0.0) {
      throw IngestionError(fmt::format("invalid reading at {}", format_timestamp(r.timestamp)));
    }
    if (!readings.empty() && r.house_id != readings.front().house_id) {
      throw IngestionError("aggregate_hourly handles one house per call");
    }
    sorted.push_back(&r);
  }
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](auto* a, auto* b) { return a->timestamp < b->timestamp; });

  HourlyAggregate out;
  std::size_t i = 0;
  while (i < sorted.size()) {
    const Timestamp hour = floor<hours>(sorted[i]->timestamp);
    HourlyRecord rec;
    rec.timestamp = hour;
    rec.house_id = sorted[i]->house_id;
    int present = 0;
    for (; i < sorted.size() && floor<hours>(sorted[i]->timestamp) == hour; ++i) {
      if (i > 0 && sorted[i - 1]->timestamp == sorted[i]->timestamp) {
        throw IngestionError(
            fmt::format("duplicate reading at {}", format_timestamp(sorted[i]->timestamp)));
      }
      rec.energy_kwh += sorted[i]->energy_kwh;
      rec.solar_kwh += sorted[i]->solar_kwh;
      ++present;
    }
    if (present == 4) {
      out.hours.push_back(std::move(rec));
    } else {
      out.dropped_hours.push_back(hour);
      out.quarters_present[hour] = present;
    }
  }
  return out;
}

void join_weather(std::vector<HourlyRecord>& hourly, std::span<const WeatherRecord> weather) {
  std::map<Timestamp, const Weather*> by_hour;
  for (const auto& w : weather) by_hour[w.timestamp] = &w.weather;
  for (auto& rec : hourly) {
    auto it = by_hour.find(rec.timestamp);
    if (it == by_hour.end()) {
      throw IngestionError(fmt::format("no weather for {} (house {})",
                                       format_timestamp(rec.timestamp), rec.house_id));
    }
    rec.weather = *it->second;
  }
}

void require_contiguous(std::span<const HourlyRecord> hourly) {
  for (std::size_t i = 1; i < hourly.size(); ++i) {
    if (hourly[i].timestamp != hourly[i - 1].timestamp + hours{1}) {
      throw ContiguityError(fmt::format("hourly series has a gap: {} is missing",
                                        format_timestamp(hourly[i - 1].timestamp + hours{1})));
    }
  }
}

std::array<double, 4> time_features(Timestamp t) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const auto day_point = floor<days>(t);
  const year_month_day ymd{day_point};
  const auto hour = duration_cast<hours>(t - day_point).count();
  const auto doy = (day_point - sys_days{ymd.year() / January / 1}).count();
  const double ha = two_pi * static_cast<double>(hour) / 24.0;
  const double da = two_pi * static_cast<double>(doy) / 365.0;
  return {std::sin(ha), std::cos(ha), std::sin(da), std::cos(da)};
}

void write_features(std::span<const HourlyRecord> window, const WindowSpec& spec,
                    std::span<double> out) {
  const std::size_t h = spec.history_hours;
  if (window.size() != h) {
    throw ShapeError(fmt::format("feature window has {} hours, expected {}", window.size(), h));
  }
  if (out.size() != spec.feature_dim()) {
    throw ShapeError(fmt::format("feature buffer has {} slots, expected {}", out.size(),
                                 spec.feature_dim()));
  }
  for (std::size_t i = 0; i < h; ++i) {
    out[i] = window[i].energy_kwh;
    out[h + i] = window[i].solar_kwh;
  }
  const auto& now = window.back();
  const auto tf = time_features(now.timestamp);
  std::copy(tf.begin(), tf.end(), out.begin() + static_cast<std::ptrdiff_t>(2 * h));
  const auto& w = now.weather;
  const double weather[] = {w.humidity,      w.temperature_c, w.cloud_cover,
                            w.wind_speed_ms, w.dew_point_c,   w.precip_intensity};
  std::copy(std::begin(weather), std::end(weather),
            out.begin() + static_cast<std::ptrdiff_t>(2 * h + WindowSpec::kTimeFeatures));
}

namespace {

std::size_t strided_rows(const WindowSpec& spec, std::size_t hours, std::size_t stride) {
  const std::size_t total = spec.example_count(hours);
  return (total + stride - 1) / stride;
}

// Writes the strided examples of `hourly` into `ds` starting at row `at`.
void fill_examples(std::span<const HourlyRecord> hourly, const WindowSpec& spec,
                   std::size_t stride, nn::Dataset& ds, Eigen::Index at) {
  const std::size_t rows = strided_rows(spec, hourly.size(), stride);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t first = r * stride;  // index of the oldest history hour
    const std::size_t anchor = first + spec.history_hours - 1;
    const auto row = at + static_cast<Eigen::Index>(r);
    write_features(hourly.subspan(first, spec.history_hours), spec,
                   {ds.inputs.row(row).data(), spec.feature_dim()});
    const auto& target = hourly[anchor + spec.horizon_hours];
    ds.targets(row, 0) = target.energy_kwh;
    ds.targets(row, 1) = target.solar_kwh;
  }
}

void check_window_spec(const WindowSpec& spec, std::size_t stride) {
  if (stride == 0) throw ConfigError("stride must be positive");
  if (spec.history_hours == 0 || spec.horizon_hours == 0) {
    throw ConfigError("history and horizon must be positive");
  }
}

}  // namespace

nn::Dataset build_examples(std::span<const HourlyRecord> hourly, const WindowSpec& spec,
                           std::size_t stride) {
  check_window_spec(spec, stride);
  require_contiguous(hourly);
  const std::size_t rows = strided_rows(spec, hourly.size(), stride);
  if (rows == 0) {
    throw ShapeError(fmt::format("{} hours cannot fill a {}-hour window plus {}-hour horizon",
                                 hourly.size(), spec.history_hours, spec.horizon_hours));
  }
  nn::Dataset ds{nn::Matrix(static_cast<Eigen::Index>(rows),
                            static_cast<Eigen::Index>(spec.feature_dim())),
                 nn::Matrix(static_cast<Eigen::Index>(rows), 2)};
  fill_examples(hourly, spec, stride, ds, 0);
  return ds;
}

// ---- Scaler -------------------------------------------------------------------

Scaler::Scaler(nn::Vector mean, nn::Vector stddev) : mean_(std::move(mean)), std_(std::move(stddev)) {
  if (mean_.size() != std_.size()) throw ShapeError("scaler mean/std length mismatch");
  std_ = std_.cwiseMax(kStdFloor);
}

void Scaler::transform_inplace(nn::Matrix& inputs) const {
  if (static_cast<std::size_t>(inputs.cols()) != dim()) {
    throw ShapeError(fmt::format("scaler fitted on {} features, got {}", dim(), inputs.cols()));
  }
  inputs.rowwise() -= mean_.transpose();
  inputs.array().rowwise() /= std_.transpose().array();
}

void Scaler::transform_inplace(std::span<double> row) const {
  if (row.size() != dim()) {
    throw ShapeError(fmt::format("scaler fitted on {} features, got {}", dim(), row.size()));
  }
  for (std::size_t i = 0; i < row.size(); ++i) {
    const auto j = static_cast<Eigen::Index>(i);
    row[i] = (row[i] - mean_(j)) / std_(j);
  }
}

nn::Dataset Scaler::transform(const nn::Dataset& data) const {
  nn::Dataset out = data;
  transform_inplace(out.inputs);
  return out;
}

nn::Dataset Scaler::inverse_transform(const nn::Dataset& data) const {
  if (static_cast<std::size_t>(data.inputs.cols()) != dim()) {
    throw ShapeError("scaler dimension mismatch");
  }
  nn::Dataset out = data;
  out.inputs.array().rowwise() *= std_.transpose().array();
  out.inputs.rowwise() += mean_.transpose();
  return out;
}

std::vector<std::uint8_t> Scaler::encode() const {
  detail::ByteWriter w;
  w.str("FEDS");
  w.u8(1);
  w.u32(static_cast<std::uint32_t>(dim()));
  w.f64s(mean_.data(), dim());
  w.f64s(std_.data(), dim());
  w.crc();
  return w.take();
}

Scaler Scaler::decode(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.str(4) != "FEDS") throw FormatError("not a scaler file (bad magic)");
  if (const auto v = r.u8(); v != 1) throw FormatError(fmt::format("unsupported scaler version {}", v));
  const std::uint32_t dim = r.u32();
  r.need(static_cast<std::size_t>(dim) * 16 + 4);
  detail::check_trailing_crc(bytes.first(r.pos() + static_cast<std::size_t>(dim) * 16 + 4), "scaler");
  nn::Vector mean(dim), stddev(dim);
  r.f64s(mean.data(), dim);
  r.f64s(stddev.data(), dim);
  return Scaler(std::move(mean), std::move(stddev));
}

void Scaler::save(const std::filesystem::path& path) const {
  const auto bytes = encode();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError(fmt::format("cannot write {}", path.string()));
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Scaler Scaler::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError(fmt::format("cannot read {}", path.string()));
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), {});
  return decode(bytes);
}

bool Scaler::bit_equal(const Scaler& other) const { return encode() == other.encode(); }

Scaler fit_scaler(const nn::Dataset& data) {
  data.validate();
  const auto n = static_cast<double>(data.inputs.rows());
  nn::Vector mean = data.inputs.colwise().sum().transpose() / n;
  nn::Vector var = nn::Vector::Zero(data.inputs.cols());
  for (Eigen::Index r = 0; r < data.inputs.rows(); ++r) {
    var += (data.inputs.row(r).transpose() - mean).cwiseAbs2();
  }
  return Scaler(std::move(mean), (var / n).cwiseSqrt());
}

// ---- split ----------------------------------------------------------------------

PecanSplit split_pecan_style(const std::vector<std::vector<HourlyRecord>>& houses,
                             const std::vector<std::string>& test_house_ids,
                             const WindowSpec& spec, std::size_t stride) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < houses.size(); ++i) {
    if (houses[i].empty()) throw ConfigError(fmt::format("house #{} has no data", i));
    index[houses[i].front().house_id] = i;
  }
  std::set<std::size_t> test_idx;
  for (const auto& id : test_house_ids) {
    auto it = index.find(id);
    if (it == index.end()) throw ConfigError(fmt::format("unknown test house id '{}'", id));
    if (!test_idx.insert(it->second).second) {
      throw ConfigError(fmt::format("test house '{}' listed twice", id));
    }
  }
  if (houses.size() < test_idx.size() + 1) {
    throw ConfigError("need at least one non-test house for the base model");
  }

  PecanSplit split;
  std::vector<std::span<const HourlyRecord>> base_series;
  for (std::size_t i = 0; i < houses.size(); ++i) {
    if (!test_idx.contains(i)) base_series.emplace_back(houses[i]);
  }
  // Test houses keep the order they were requested in.
  for (const auto& id : test_house_ids) {
    const auto& series = houses[index[id]];
    const std::size_t half = series.size() / 2;
    TestHouseSplit t;
    t.house_id = id;
    t.warmup.assign(series.begin(), series.begin() + static_cast<std::ptrdiff_t>(half));
    t.stream.assign(series.begin() + static_cast<std::ptrdiff_t>(half), series.end());
    base_series.emplace_back(std::span<const HourlyRecord>(series).first(half));
    split.tests.push_back(std::move(t));
  }

  check_window_spec(spec, stride);
  Eigen::Index rows = 0;
  for (auto s : base_series) {
    require_contiguous(s);
    rows += static_cast<Eigen::Index>(strided_rows(spec, s.size(), stride));
  }
  if (rows == 0) throw ConfigError("base houses are too short to build any example");
  split.base_train.inputs.resize(rows, static_cast<Eigen::Index>(spec.feature_dim()));
  split.base_train.targets.resize(rows, 2);
  Eigen::Index at = 0;
  for (auto s : base_series) {
    fill_examples(s, spec, stride, split.base_train, at);
    at += static_cast<Eigen::Index>(strided_rows(spec, s.size(), stride));
  }
  return split;
}

}  // namespace fedenergy::data
