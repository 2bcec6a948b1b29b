#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "puma/errors.hpp"
#include "puma/experiment.hpp"
#include "puma/metrics.hpp"

namespace {

constexpr int kConfigError = 1;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> repeats;
  std::string out;
  std::string format = "json";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment INI file")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "override [experiment] seed");
  cmd->add_option("--repeats", c.repeats, "override [experiment] repeats");
  cmd->add_option("--out", c.out, "output path (stdout when omitted)");
  cmd->add_option("--format", c.format, "report format")->check(CLI::IsMember({"json", "csv"}));
}

puma::ExperimentConfig load(const Common& c) {
  auto cfg = puma::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.repeats) cfg.repeats = *c.repeats;
  cfg.validate();
  return cfg;
}

void write(const puma::RunReport& report, const Common& c) {
  const auto format = puma::parse_report_format(c.format);
  if (c.out.empty()) {
    if (format == puma::ReportFormat::json) {
      std::cout << report.to_json().dump(2) << '\n';
    } else {
      std::cout << puma::report_to_csv(report);
    }
  } else {
    puma::emit_report(report, c.out, format);
  }
}

/// Mean of each metric per (method, fraction), or per (method, eta) for a
/// sweep, printed to stderr.
void summarize(const puma::RunReport& report, std::ostream& os) {
  struct Acc {
    std::map<std::string, std::pair<double, int>> sums;
    int ok = 0;
    int failed = 0;
  };
  std::map<std::pair<std::string, double>, Acc> groups;
  std::vector<std::pair<std::string, double>> order;
  for (const auto& c : report.cells) {
    const auto eta = c.metrics.find("eta");
    const bool by_eta = report.kind == "sweep" && eta != c.metrics.end();
    const auto key = std::make_pair(c.method, by_eta ? eta->second : c.fraction);
    if (!groups.contains(key)) order.push_back(key);
    auto& g = groups[key];
    if (!c.ok) {
      ++g.failed;
      continue;
    }
    ++g.ok;
    for (const auto& [name, v] : c.metrics) {
      auto& [sum, n] = g.sums[name];
      sum += v;
      ++n;
    }
  }
  static const std::vector<std::string> headline = {
      "accuracy_before", "accuracy_after",    "attack_before", "attack_after",
      "remove_ms",       "recall_at_inspect", "rank_ms",       "ece_before",
      "ece_after",       "eta"};
  os << report.kind << ": " << report.cells.size() << " cells, " << report.failed_cells()
     << " failed\n";
  for (const auto& key : order) {
    const auto& g = groups[key];
    char head[96];
    std::snprintf(head, sizeof head, "  %-18s %s %.4g  ok %d failed %d", key.first.c_str(),
                  report.kind == "sweep" ? "eta" : "fraction", key.second, g.ok, g.failed);
    os << head;
    for (const auto& name : headline) {
      const auto it = g.sums.find(name);
      if (it == g.sums.end()) continue;
      char buf[64];
      std::snprintf(buf, sizeof buf, "  %s %.4g", name.c_str(), it->second.first / it->second.second);
      os << buf;
    }
    os << '\n';
  }
}

int finish(const puma::RunReport& report, const Common& c) {
  write(report, c);
  summarize(report, std::cerr);
  return report.exit_code();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PUMA machine unlearning lab"};
  app.require_subcommand(1);

  Common train_opts;
  int train_repeat = 0;
  auto* train_cmd = app.add_subcommand("train", "train the configured model and save a checkpoint");
  add_common(train_cmd, train_opts);
  train_cmd->add_option("--repeat", train_repeat, "which repeat's data and seeds to use");

  Common remove_opts;
  auto* remove_cmd = app.add_subcommand("remove", "removal battery over methods and fractions");
  add_common(remove_cmd, remove_opts);

  Common attack_opts;
  auto* attack_cmd = app.add_subcommand("attack", "removal battery with the membership attack enabled");
  add_common(attack_cmd, attack_opts);

  Common debug_opts;
  auto* debug_cmd = app.add_subcommand("debug", "rank flipped labels by influence");
  add_common(debug_cmd, debug_opts);

  Common calib_opts;
  auto* calib_cmd = app.add_subcommand("calibrate", "calibration patch on corrupted data");
  add_common(calib_cmd, calib_opts);

  Common sweep_opts;
  std::vector<double> etas;
  auto* sweep_cmd = app.add_subcommand("sweep", "projection-rate sweep");
  add_common(sweep_cmd, sweep_opts);
  sweep_cmd->add_option("--etas", etas, "override [sweep] etas")->delimiter(',');

  Common bench_opts;
  auto* bench_cmd = app.add_subcommand("bench", "wall-clock of PUMA removal against retraining");
  add_common(bench_cmd, bench_opts);

  std::string report_in;
  std::string report_out;
  std::string report_format = "json";
  bool verify = false;
  auto* report_cmd = app.add_subcommand("report", "summarize, convert or re-run a saved report");
  report_cmd->add_option("--in", report_in, "report JSON")->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--out", report_out, "converted report path");
  report_cmd->add_option("--format", report_format, "output format")
      ->check(CLI::IsMember({"json", "csv"}));
  report_cmd->add_flag("--verify", verify,
                       "re-run the echoed config and compare, ignoring timing fields");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  try {
    if (*train_cmd) {
      const auto cfg = load(train_opts);
      const auto [model, ms] = puma::train_base_model(cfg, train_repeat);
      if (train_opts.out.empty()) {
        std::cout << puma::model_to_json(model).dump(2) << '\n';
      } else {
        puma::save_model(model, train_opts.out);
      }
      std::cerr << "trained " << model.spec.param_count() << " parameters in " << ms << " ms\n";
      return 0;
    }
    if (*remove_cmd) return finish(puma::run_removal_experiment(load(remove_opts)), remove_opts);
    if (*attack_cmd) {
      auto cfg = load(attack_opts);
      cfg.attack_enabled = true;
      return finish(puma::run_removal_experiment(cfg), attack_opts);
    }
    if (*debug_cmd) return finish(puma::run_debug_experiment(load(debug_opts)), debug_opts);
    if (*calib_cmd) return finish(puma::run_calibration_experiment(load(calib_opts)), calib_opts);
    if (*sweep_cmd) {
      auto cfg = load(sweep_opts);
      if (!etas.empty()) cfg.eta_grid = etas;
      cfg.validate();
      return finish(puma::run_eta_sweep(cfg), sweep_opts);
    }
    if (*bench_cmd) {
      auto cfg = load(bench_opts);
      cfg.methods = {puma::Method::puma, puma::Method::retrain};
      cfg.attack_enabled = false;
      const auto report = puma::run_removal_experiment(cfg);
      int faster = 0;
      int pairs = 0;
      for (const auto* p : report.select("puma")) {
        for (const auto* r : report.select("retrain", p->fraction)) {
          if (r->repeat != p->repeat || !p->ok || !r->ok) continue;
          ++pairs;
          if (p->metrics.at("remove_ms") < r->metrics.at("remove_ms")) ++faster;
        }
      }
      std::cerr << "puma faster than retrain in " << faster << " of " << pairs << " cells\n";
      return finish(report, bench_opts);
    }
    if (*report_cmd) {
      const auto report = puma::load_report(report_in);
      summarize(report, std::cerr);
      if (!report_out.empty()) {
        puma::emit_report(report, report_out, puma::parse_report_format(report_format));
      }
      if (verify) {
        const auto cfg = puma::config_from_json(report.config);
        puma::RunReport again;
        if (report.kind == "removal") again = puma::run_removal_experiment(cfg);
        else if (report.kind == "debug") again = puma::run_debug_experiment(cfg);
        else if (report.kind == "calibration") again = puma::run_calibration_experiment(cfg);
        else if (report.kind == "sweep") again = puma::run_eta_sweep(cfg);
        else throw puma::ParseError("unknown report kind '" + report.kind + "'");
        const bool same = again.without_timing() == report.without_timing();
        std::cerr << (same ? "re-run matches" : "re-run differs") << '\n';
        return same ? 0 : 3;
      }
      return report.exit_code();
    }
  } catch (const puma::ParseError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const puma::InvalidArgument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const puma::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
