#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "fedenergy/data.hpp"
#include "fedenergy/errors.hpp"
#include "fedenergy/node.hpp"
#include "test_util.hpp"

using namespace fedenergy;
using namespace fedenergy::data;
using std::chrono::hours;
using std::chrono::minutes;

namespace {

const Timestamp kT0 = parse_timestamp("2019-03-04T00:00:00Z");

std::vector<HourlyRecord> ramp(std::size_t n, Timestamp start = kT0) {
  std::vector<HourlyRecord> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = out[i];
    r.timestamp = start + hours{i};
    r.house_id = "h";
    r.energy_kwh = 1.0 + static_cast<double>(i);
    r.solar_kwh = 1000.0 + static_cast<double>(i);
    r.weather = {0.1 + 1e-4 * static_cast<double>(i), 20.0 + static_cast<double>(i), 0.3,
                 4.0 + static_cast<double>(i), 10.0 - static_cast<double>(i),
                 0.01 * static_cast<double>(i)};
  }
  return out;
}

QuarterHourReading q(Timestamp t, double e, double s = 0.0) { return {t, "h", e, s}; }

}  // namespace

TEST(Timestamps, ParseAndFormat) {
  const auto t = parse_timestamp("2019-07-02T13:00:00Z");
  EXPECT_EQ(format_timestamp(t), "2019-07-02T13:00:00Z");
  EXPECT_EQ(parse_timestamp("2019-07-02 13:00:00+00:00"), t);
  EXPECT_EQ(parse_timestamp("2019-07-02"), t - hours{13});
  EXPECT_THROW(parse_timestamp("yesterday"), IngestionError);
}

TEST(AggregateHourly, SumsFourQuarters) {
  std::vector<QuarterHourReading> r{q(kT0, 0.1), q(kT0 + minutes{15}, 0.2),
                                    q(kT0 + minutes{30}, 0.3), q(kT0 + minutes{45}, 0.4)};
  const auto agg = aggregate_hourly(r);
  ASSERT_EQ(agg.hours.size(), 1u);
  EXPECT_NEAR(agg.hours[0].energy_kwh, 1.0, 1e-12);
  EXPECT_EQ(agg.hours[0].timestamp, kT0);
  EXPECT_TRUE(agg.dropped_hours.empty());
}

TEST(AggregateHourly, IncompleteHourDroppedAndReported) {
  std::vector<QuarterHourReading> r{q(kT0, 0.1), q(kT0 + minutes{15}, 0.2),
                                    q(kT0 + minutes{45}, 0.4)};
  for (int m : {0, 15, 30, 45}) r.push_back(q(kT0 + hours{1} + minutes{m}, 1.0));
  const auto agg = aggregate_hourly(r);
  ASSERT_EQ(agg.hours.size(), 1u);
  EXPECT_EQ(agg.hours[0].timestamp, kT0 + hours{1});
  ASSERT_EQ(agg.dropped_hours.size(), 1u);
  EXPECT_EQ(agg.dropped_hours[0], kT0);
  std::ostringstream report;
  agg.write_gap_report(report, "h");
  EXPECT_NE(report.str().find(format_timestamp(kT0)), std::string::npos);
  EXPECT_NE(report.str().find("3/4"), std::string::npos);
}

TEST(AggregateHourly, EmptyInput) {
  const auto agg = aggregate_hourly({});
  EXPECT_TRUE(agg.hours.empty());
  EXPECT_TRUE(agg.dropped_hours.empty());
  std::ostringstream report;
  agg.write_gap_report(report, "h");
  EXPECT_TRUE(report.str().empty());
}

TEST(AggregateHourly, DuplicateTimestampNamed) {
  std::vector<QuarterHourReading> r{q(kT0, 0.1), q(kT0, 0.2)};
  try {
    aggregate_hourly(r);
    FAIL();
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find(format_timestamp(kT0)), std::string::npos);
  }
}

TEST(AggregateHourly, ConservesEnergy) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  std::vector<QuarterHourReading> r;
  for (int h = 0; h < 48; ++h) {
    for (int m : {0, 15, 30, 45}) {
      if (h % 7 == 3 && m == 30) continue;  // make some hours incomplete
      r.push_back(q(kT0 + hours{h} + minutes{m}, u(rng), u(rng)));
    }
  }
  std::shuffle(r.begin(), r.end(), rng);
  const auto agg = aggregate_hourly(r);
  double in = 0.0, out = 0.0;
  for (const auto& x : r) {
    const auto hour = std::chrono::floor<hours>(x.timestamp);
    if (std::find(agg.dropped_hours.begin(), agg.dropped_hours.end(), hour) ==
        agg.dropped_hours.end()) {
      in += x.energy_kwh;
    }
  }
  for (const auto& h : agg.hours) out += h.energy_kwh;
  EXPECT_NEAR(in, out, 1e-9);
  EXPECT_EQ(agg.hours.size() + agg.dropped_hours.size(), 48u);
}

TEST(BuildExamples, RowCountClosedForm) {
  // Anchors 719 and 720 both have a target inside 727 hours.
  EXPECT_EQ(build_examples(ramp(727), {720, 6}).size(), 2u);
  EXPECT_EQ(build_examples(ramp(726), {720, 6}).size(), 1u);
  for (std::size_t h : {1u, 6u}) {
    for (std::size_t n : {720 + h, 721 + h, std::size_t{800}, std::size_t{1000}}) {
      EXPECT_EQ(build_examples(ramp(n), {720, h}).size(), n - 720 - h + 1) << n << " " << h;
      EXPECT_EQ((WindowSpec{720, h}.example_count(n)), n - 720 - h + 1);
    }
  }
  EXPECT_EQ((WindowSpec{720, 6}.example_count(725)), 0u);
}

TEST(BuildExamples, FeatureDimension) {
  const WindowSpec spec;
  EXPECT_EQ(spec.feature_dim(), 1450u);
  EXPECT_EQ(spec.feature_dim(), 2 * spec.history_hours + 4 + 6);
}

TEST(BuildExamples, GoldenFeatureIndices) {
  const auto series = ramp(722);
  const auto ds = build_examples(series, {720, 1});
  ASSERT_EQ(ds.size(), 2u);
  const auto& anchor = series[719];
  const auto row = ds.inputs.row(0);
  EXPECT_EQ(row(0), series[0].energy_kwh);
  EXPECT_EQ(row(719), anchor.energy_kwh);
  EXPECT_EQ(row(720), series[0].solar_kwh);
  EXPECT_EQ(row(1439), anchor.solar_kwh);
  const double ha = 2 * std::numbers::pi * 23 / 24.0;  // 719 h after midnight -> 23:00
  EXPECT_DOUBLE_EQ(row(1440), std::sin(ha));
  EXPECT_DOUBLE_EQ(row(1441), std::cos(ha));
  const auto tf = time_features(anchor.timestamp);
  EXPECT_EQ(row(1442), tf[2]);
  EXPECT_EQ(row(1443), tf[3]);
  EXPECT_EQ(row(1444), anchor.weather.humidity);
  EXPECT_EQ(row(1445), anchor.weather.temperature_c);
  EXPECT_EQ(row(1446), anchor.weather.cloud_cover);
  EXPECT_EQ(row(1447), anchor.weather.wind_speed_ms);
  EXPECT_EQ(row(1448), anchor.weather.dew_point_c);
  EXPECT_EQ(row(1449), anchor.weather.precip_intensity);
  EXPECT_EQ(ds.targets(0, 0), series[720].energy_kwh);
  EXPECT_EQ(ds.targets(0, 1), series[720].solar_kwh);
}

TEST(BuildExamples, ConstantSeries) {
  auto s = ramp(730);
  for (auto& r : s) r.energy_kwh = r.solar_kwh = 2.5;
  const auto ds = build_examples(s, {720, 6});
  for (Eigen::Index i = 0; i < ds.inputs.rows(); ++i) {
    for (Eigen::Index j = 0; j < 1440; ++j) EXPECT_EQ(ds.inputs(i, j), 2.5);
    EXPECT_EQ(ds.targets(i, 0), 2.5);
  }
}

TEST(BuildExamples, SixAmHourEncoding) {
  const auto tf = time_features(parse_timestamp("2019-05-05T06:00:00Z"));
  EXPECT_EQ(tf[0], 1.0);
  EXPECT_NEAR(tf[1], 6.123233995736766e-17, 1e-30);
  EXPECT_EQ(tf[1], std::cos(2 * std::numbers::pi * 6 / 24));
}

TEST(BuildExamples, DayOfYearEncoding) {
  const auto tf = time_features(parse_timestamp("2019-01-01T00:00:00Z"));
  EXPECT_EQ(tf[2], 0.0);
  EXPECT_EQ(tf[3], 1.0);
  const auto feb = time_features(parse_timestamp("2019-02-01T12:00:00Z"));
  EXPECT_EQ(feb[2], std::sin(2 * std::numbers::pi * 31 / 365.0));
}

TEST(BuildExamples, GapNamesFirstMissingHour) {
  auto s = ramp(800);
  s.erase(s.begin() + 300, s.begin() + 302);
  try {
    build_examples(s, {720, 1});
    FAIL();
  } catch (const ContiguityError& e) {
    EXPECT_NE(std::string(e.what()).find(format_timestamp(kT0 + hours{300})), std::string::npos);
  }
}

TEST(BuildExamples, StrideKeepsEveryNthAnchor) {
  const auto s = ramp(740);
  const auto all = build_examples(s, {720, 1});
  const auto every3 = build_examples(s, {720, 1}, 3);
  ASSERT_EQ(every3.size(), (all.size() + 2) / 3);
  for (std::size_t i = 0; i < every3.size(); ++i) {
    EXPECT_TRUE(every3.inputs.row(i) == all.inputs.row(3 * i));
  }
}

TEST(Scaler, HandComputedColumn) {
  nn::Dataset d{nn::Matrix{{1.0, 7.0}, {2.0, 7.0}, {3.0, 7.0}}, nn::Matrix::Zero(3, 2)};
  const auto s = fit_scaler(d);
  EXPECT_DOUBLE_EQ(s.mean()(0), 2.0);
  EXPECT_DOUBLE_EQ(s.stddev()(0), std::sqrt(2.0 / 3.0));
  EXPECT_EQ(s.stddev()(1), Scaler::kStdFloor);
  const auto t = s.transform(d);
  EXPECT_NEAR(t.inputs(0, 0), -std::sqrt(1.5), 1e-12);
  EXPECT_NEAR(t.inputs(0, 0), -1.2247, 1e-4);
  EXPECT_EQ(t.inputs(1, 0), 0.0);
  EXPECT_NEAR(t.inputs(2, 0), std::sqrt(1.5), 1e-12);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(t.inputs(i, 1), 0.0);
  EXPECT_TRUE(t.targets == d.targets);
}

TEST(Scaler, RoundTripAndMoments) {
  std::mt19937_64 rng(4);
  nn::Dataset d{testutil::random_matrix(200, 6, rng, -50.0, 300.0), testutil::random_matrix(200, 2, rng)};
  const auto s = fit_scaler(d);
  const auto t = s.transform(d);
  const auto back = s.inverse_transform(t);
  EXPECT_LE((back.inputs - d.inputs).cwiseAbs().maxCoeff(), 1e-9);
  for (Eigen::Index c = 0; c < 6; ++c) {
    const double mean = t.inputs.col(c).mean();
    const double var = (t.inputs.col(c).array() - mean).square().mean();
    EXPECT_LT(std::abs(mean), 1e-9);
    EXPECT_NEAR(std::sqrt(var), 1.0, 1e-6);
  }
}

TEST(Scaler, FileRoundTripAndCorruption) {
  std::mt19937_64 rng(4);
  nn::Dataset d{testutil::random_matrix(20, 5, rng), testutil::random_matrix(20, 2, rng)};
  const auto s = fit_scaler(d);
  const auto path = std::filesystem::temp_directory_path() / "fedenergy_scaler_test.feds";
  s.save(path);
  EXPECT_TRUE(Scaler::load(path).bit_equal(s));
  auto bytes = s.encode();
  bytes[10] ^= 0x01;
  EXPECT_THROW(Scaler::decode(bytes), CorruptionError);
  std::filesystem::remove(path);
}

TEST(Synthetic, DeterministicAndValid) {
  const auto a = generate_synthetic(3, 500, 7);
  const auto b = generate_synthetic(3, 500, 7);
  ASSERT_EQ(a.houses.size(), 3u);
  for (std::size_t h = 0; h < 3; ++h) {
    ASSERT_EQ(a.houses[h].size(), 500u);
    EXPECT_EQ(a.houses[h].front().house_id, synthetic_house_id(h));
    for (std::size_t i = 0; i < 500; ++i) {
      const auto& x = a.houses[h][i];
      const auto& y = b.houses[h][i];
      EXPECT_EQ(std::memcmp(&x.energy_kwh, &y.energy_kwh, sizeof(double)), 0);
      EXPECT_EQ(std::memcmp(&x.solar_kwh, &y.solar_kwh, sizeof(double)), 0);
      EXPECT_EQ(x.weather.temperature_c, y.weather.temperature_c);
      EXPECT_NO_THROW(x.validate());
      EXPECT_GE(x.solar_kwh, 0.0);
    }
    require_contiguous(a.houses[h]);
  }
  EXPECT_EQ(synthetic_house_id(0), "house_00");
}

TEST(Synthetic, NoSolarAtNight) {
  const auto net = generate_synthetic(4, 24 * 400, 1);
  for (const auto& house : net.houses) {
    for (const auto& r : house) {
      const auto hod = (r.timestamp - std::chrono::floor<std::chrono::days>(r.timestamp)).count() / 3600;
      if (hod == 0) EXPECT_EQ(r.solar_kwh, 0.0);
      const double len = day_length_hours(r.timestamp);
      // Hours ending before sunrise or starting after sunset.
      if (hod + 1 <= 12.0 - len / 2 || hod >= 12.0 + len / 2) EXPECT_EQ(r.solar_kwh, 0.0);
    }
  }
}

TEST(Synthetic, FullCloudCoverGivesThirtyPercentAtNoon) {
  SyntheticOptions opts;
  opts.forced_cloud_cover = 1.0;
  const auto net = generate_synthetic(2, 24 * 30, 5, opts);
  for (std::size_t h = 0; h < 2; ++h) {
    const auto profile = synthetic_profile(h, 5);
    for (const auto& r : net.houses[h]) {
      const auto hod = (r.timestamp - std::chrono::floor<std::chrono::days>(r.timestamp)).count() / 3600;
      if (hod != 12) continue;
      const double clear = clear_sky_solar_kwh(profile, r.timestamp);
      EXPECT_GT(clear, 0.0);
      EXPECT_NEAR(r.solar_kwh, 0.3 * clear, 1e-12);
    }
  }
}

TEST(Split, PecanShape) {
  const auto net = generate_synthetic(6, 2 * 760 + 20, 2);
  const WindowSpec spec{720, 1};
  const auto split = split_pecan_style(net.houses, {"house_01", "house_04"}, spec);
  ASSERT_EQ(split.tests.size(), 2u);
  EXPECT_EQ(split.tests[0].house_id, "house_01");
  const std::size_t n = net.houses[0].size();
  EXPECT_EQ(split.tests[0].warmup.size(), n / 2);
  EXPECT_EQ(split.tests[0].stream.size(), n - n / 2);
  EXPECT_EQ(split.tests[0].stream.front().timestamp, net.houses[1][n / 2].timestamp);
  const std::size_t expected = 4 * spec.example_count(n) + 2 * spec.example_count(n / 2);
  EXPECT_EQ(split.base_train.size(), expected);
}

TEST(Split, NoTestHousesUsesAll) {
  const auto net = generate_synthetic(3, 800, 2);
  const auto split = split_pecan_style(net.houses, {}, {720, 1});
  EXPECT_TRUE(split.tests.empty());
  EXPECT_EQ(split.base_train.size(), 3 * (WindowSpec{720, 1}.example_count(800)));
}

TEST(Split, UnknownHouseIsConfigError) {
  const auto net = generate_synthetic(3, 800, 2);
  EXPECT_THROW(split_pecan_style(net.houses, {"house_99"}, {720, 1}), ConfigError);
}

TEST(Split, HalfYearStreamGivesThirteenRounds) {
  const std::size_t stream = 8760 - 8760 / 2;
  EXPECT_EQ(stream, 4380u);
  EXPECT_EQ(stream / node::kRoundHours, 13u);
  EXPECT_EQ(stream % node::kRoundHours, 12u);
}

TEST(Csv, RoundTripThroughIngestion) {
  const auto net = generate_synthetic(2, 50, 9);
  const auto dir = std::filesystem::temp_directory_path() / "fedenergy_csv_test";
  std::filesystem::create_directories(dir);
  write_load_csv(dir / "load.csv", net.houses);
  write_weather_csv(dir / "weather.csv", net.weather);
  const auto houses =
      ingest_households(read_load_csv(dir / "load.csv"), read_weather_csv(dir / "weather.csv"));
  ASSERT_EQ(houses.size(), 2u);
  const auto& h0 = houses.at("house_00");
  ASSERT_EQ(h0.size(), 50u);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(h0[i].timestamp, net.houses[0][i].timestamp);
    EXPECT_EQ(h0[i].energy_kwh, net.houses[0][i].energy_kwh);
    EXPECT_EQ(h0[i].solar_kwh, net.houses[0][i].solar_kwh);
    EXPECT_EQ(h0[i].weather.dew_point_c, net.houses[0][i].weather.dew_point_c);
  }
  std::filesystem::remove_all(dir);
}

TEST(Csv, QuarterHourRowsAggregate) {
  const auto dir = std::filesystem::temp_directory_path() / "fedenergy_csv_q";
  std::filesystem::create_directories(dir);
  {
    std::ofstream l(dir / "load.csv");
    l << "timestamp,house_id,energy_kwh,solar_kwh\n";
    const char* ts[] = {"00:00", "00:15", "00:30", "00:45", "01:00", "01:15"};
    for (int i = 0; i < 6; ++i) l << "2019-01-01T" << ts[i] << ":00Z,a," << 0.25 << ",0\n";
    std::ofstream w(dir / "weather.csv");
    w << "timestamp,humidity,temperature_c,cloud_cover,wind_speed_ms,dew_point_c,precip_intensity\n";
    w << "2019-01-01T00:00:00Z,0.5,10,0.2,3,4,0\n";
    w << "2019-01-01T01:00:00Z,0.5,10,0.2,3,4,0\n";
  }
  std::ostringstream gaps;
  const auto houses = ingest_households(read_load_csv(dir / "load.csv"),
                                        read_weather_csv(dir / "weather.csv"), &gaps);
  ASSERT_EQ(houses.at("a").size(), 1u);
  EXPECT_DOUBLE_EQ(houses.at("a")[0].energy_kwh, 1.0);
  EXPECT_NE(gaps.str().find("2019-01-01T01:00:00Z"), std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST(Csv, BadHeaderRejected) {
  const auto path = std::filesystem::temp_directory_path() / "fedenergy_bad.csv";
  {
    std::ofstream l(path);
    l << "time,house,e,s\n";
  }
  EXPECT_THROW(read_load_csv(path), IngestionError);
  std::filesystem::remove(path);
}
