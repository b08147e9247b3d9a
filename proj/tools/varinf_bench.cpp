// varinf_bench: runs the benchmark experiments and writes their reports.
//
//   varinf_bench fit-gaussian [--mixture] [--config c.json] [--seed N] [--out dir] [--formats json,csv,svg]
//   varinf_bench rbf           ...
//   varinf_bench dropout-audit ...
//
// On failure a JSON error record goes to stderr and to <out>/error.json and
// the exit code is nonzero.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "varinf/bench.hpp"

namespace {

using varinf::Json;
namespace bench = varinf::bench;

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string formats = "json,csv,svg";
  bool record_runtime = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "JSON config file");
  cmd->add_option("--seed", o.seed, "master seed (overrides the config)");
  cmd->add_option("--out", o.out, "output directory")->capture_default_str();
  cmd->add_option("--formats", o.formats, "comma list of json,csv,svg")->capture_default_str();
  cmd->add_flag("--record-runtime", o.record_runtime, "write measured runtimes into tables.csv");
}

template <typename Config>
Config load_config(const CommonOptions& o) {
  Config c;
  if (!o.config_path.empty()) {
    const Json j = varinf::read_json(o.config_path);
    from_json(j, c);
  }
  if (o.seed) c.seed = *o.seed;
  if (o.record_runtime) c.record_runtime = true;
  return c;
}

Json error_record(const std::string& command, const std::string& kind, const std::string& message,
                  std::optional<long> step) {
  Json j{{"status", "error"}, {"command", command}, {"kind", kind}, {"message", message}};
  if (step) j["step"] = *step;
  return j;
}

void report_error(const CommonOptions& o, const Json& record) {
  std::cerr << record.dump() << "\n";
  std::error_code ec;
  std::filesystem::create_directories(o.out, ec);
  if (!ec) {
    try {
      varinf::write_text(std::filesystem::path(o.out) / "error.json", record.dump(2) + "\n");
    } catch (const std::exception&) {
      // stderr already carries the record
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational inference benchmark harness"};
  app.require_subcommand(1);

  CommonOptions opts;
  bool mixture = false;
  auto* fit = app.add_subcommand("fit-gaussian", "fit families to a random 8D Gaussian");
  add_common(fit, opts);
  fit->add_flag("--mixture", mixture, "also fit a Gaussian mixture to a bimodal 2D target");
  auto* rbf = app.add_subcommand("rbf", "RBF regression against the exact posterior");
  add_common(rbf, opts);
  auto* audit = app.add_subcommand("dropout-audit", "exact enumeration of an MC-dropout posterior");
  add_common(audit, opts);

  CLI11_PARSE(app, argc, argv);

  std::string command = app.get_subcommands().front()->get_name();
  try {
    const auto formats = bench::parse_formats(opts.formats);
    bench::ExperimentReport report;
    if (command == "fit-gaussian") {
      auto c = load_config<bench::FitGaussianConfig>(opts);
      if (mixture) c.mixture = true;
      report = bench::cmd_fit_gaussian(c);
    } else if (command == "rbf") {
      report = bench::cmd_rbf(load_config<bench::RbfConfig>(opts));
    } else {
      report = bench::cmd_dropout_audit(load_config<bench::DropoutAuditConfig>(opts));
    }
    for (const auto& f : report.families) {
      if (!f.error.empty()) std::cerr << "warning: " << f.label << ": " << f.error << "\n";
    }
    bench::emit_report(report, formats, opts.out);
    std::cout << bench::tables_csv(report);
    return 0;
  } catch (const varinf::TrainingError& e) {
    report_error(opts, error_record(command, e.kind(), e.what(), e.step()));
  } catch (const varinf::Error& e) {
    report_error(opts, error_record(command, e.kind(), e.what(), std::nullopt));
  } catch (const std::exception& e) {
    report_error(opts, error_record(command, "internal", e.what(), std::nullopt));
  }
  return 1;
}
