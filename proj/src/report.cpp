#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <fmt/format.h>
#include <fmt/os.h>
#include <nlohmann/json.hpp>

#include "fedenergy/errors.hpp"
#include "fedenergy/sim.hpp"

namespace fedenergy::sim {

namespace {

void check_finite(const RoundReport& r) {
  for (double v : {r.before.energy, r.before.solar, r.before.combined, r.after.energy,
                   r.after.solar, r.after.combined}) {
    if (!std::isfinite(v) || v < 0.0) {
      throw Error(fmt::format("round {} node {}: MAE {} is not a finite nonnegative value",
                              r.round, r.node_id, v));
    }
  }
}

}  // namespace

void write_rounds_csv(const std::filesystem::path& path, std::span<const RoundReport> reports) {
  auto out = fmt::output_file(path.string());
  out.print("round,node,horizon,mae_before,mae_after,mae_energy,mae_solar\n");
  for (const auto& r : reports) {
    check_finite(r);
    out.print("{},{},{},{},{},{},{}\n", r.round, r.node_id, r.horizon, r.before.combined,
              r.after.combined, r.after.energy, r.after.solar);
  }
}

double fraction_improved(std::span<const RoundReport> reports) {
  if (reports.empty()) return 0.0;
  std::size_t n = 0;
  for (const auto& r : reports) n += r.after.combined <= r.before.combined ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(reports.size());
}

void write_summary_json(const std::filesystem::path& path, std::span<const RoundReport> reports) {
  std::map<std::string, std::vector<const RoundReport*>> by_node;
  for (const auto& r : reports) by_node[r.node_id].push_back(&r);

  nlohmann::ordered_json nodes = nlohmann::ordered_json::object();
  for (const auto& [id, rows] : by_node) {
    nlohmann::ordered_json traj = nlohmann::ordered_json::array();
    std::vector<RoundReport> mine;
    for (const auto* r : rows) {
      mine.push_back(*r);
      traj.push_back({{"round", r->round},
                      {"mae_before", r->before.combined},
                      {"mae_after", r->after.combined},
                      {"mae_energy", r->after.energy},
                      {"mae_solar", r->after.solar},
                      {"local_improved", r->local_improved}});
    }
    nodes[id] = {{"fraction_improved", fraction_improved(mine)}, {"rounds", traj}};
  }
  nlohmann::ordered_json doc = {
      {"horizon", reports.empty() ? 0 : reports.front().horizon},
      {"rounds", reports.empty() ? 0 : reports.back().round},
      {"fraction_improved", fraction_improved(reports)},
      {"nodes", nodes},
  };
  std::ofstream out(path);
  if (!out) throw Error(fmt::format("cannot write {}", path.string()));
  out << doc.dump(2) << '\n';
}

void emit_plot_data(const std::filesystem::path& dir, std::span<const RoundReport> reports,
                    const std::map<std::string, std::vector<node::TracePoint>>& traces) {
  if (reports.empty()) throw ConfigError("no round reports to plot");
  std::filesystem::create_directories(dir);

  std::set<std::string> ids;
  std::map<std::uint32_t, std::map<std::string, const RoundReport*>> grid;
  for (const auto& r : reports) {
    ids.insert(r.node_id);
    grid[r.round][r.node_id] = &r;
  }
  auto mae = fmt::output_file((dir / "plot_mae.csv").string());
  mae.print("round");
  for (const auto& id : ids) mae.print(",{0}_before,{0}_after", id);
  mae.print("\n");
  for (const auto& [round, row] : grid) {
    mae.print("{}", round);
    for (const auto& id : ids) {
      auto it = row.find(id);
      if (it == row.end()) {
        mae.print(",,");
      } else {
        mae.print(",{},{}", it->second->before.combined, it->second->after.combined);
      }
    }
    mae.print("\n");
  }

  for (const auto& [id, points] : traces) {
    auto out = fmt::output_file((dir / fmt::format("trace_{}.csv", id)).string());
    out.print("target,predicted_energy,actual_energy,predicted_solar,actual_solar\n");
    for (const auto& p : points) {
      out.print("{},{},{},{},{}\n", data::format_timestamp(p.target), p.predicted_energy,
                p.actual_energy, p.predicted_solar, p.actual_solar);
    }
  }
}

}  // namespace fedenergy::sim
