#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "testdrive/error.hpp"
#include "testdrive/service.hpp"
#include "testdrive/session.hpp"

namespace fs = std::filesystem;
using namespace testdrive;

namespace {

enum Exit { ok = 0, usage = 1, data = 2, runtime = 3 };

int exit_for(const Error& e) {
  switch (e.code()) {
    case Errc::invalid_argument:
      return usage;
    case Errc::data:
    case Errc::not_found:
    case Errc::conflict:
      return data;
    case Errc::io:
      return runtime;
  }
  return runtime;
}

Service* active_service = nullptr;

void on_signal(int) {
  if (active_service) active_service->stop();
}

void print_summary(const std::vector<EstimateRecord>& records) {
  std::printf("%10s %6s %4s %8s %8s %5s %8s %8s  %s\n", "gamma", "N", "K", "p_hat", "true_p", "T", "r_hat", "true_r",
              "flags");
  for (const EstimateRecord& r : records) {
    std::string flags;
    for (std::size_t i = 0; i < r.flags.size(); ++i) flags += (i ? "|" : "") + r.flags[i];
    std::printf("%10.4g %6zu %4zu %8.4f %8.4f %5llu %8.4f %8.4f  %s\n", r.gamma, r.detections, r.samples, r.precision,
                r.true_precision.value_or(NAN), static_cast<unsigned long long>(r.pools_tested), r.recall,
                r.true_recall.value_or(NAN), flags.c_str());
  }
}

int simulate(const SessionInputs& inputs, const std::string& config_path, std::optional<std::uint64_t> seed,
             const fs::path& out) {
  SessionConfig config;
  if (!config_path.empty()) config = parse_config_file(config_path);
  if (seed) config.seed = *seed;
  config.oracle = OracleMode::simulated;
  auto session = Session::start(inputs, config, out);
  for (const std::string& w : session->warnings()) std::cerr << "warning: " << w << "\n";
  SimulatedOracle oracle(load_groundtruth(*inputs.groundtruth, session->manifest()), config.precision_iou,
                         config.pool_iou);
  run_to_completion(*session, oracle);
  export_report(*session, out, true);
  print_summary(session->estimates());
  return ok;
}

int serve(const fs::path& root, const fs::path& state, const std::string& host, int port) {
  if (!fs::is_directory(root)) {
    std::cerr << "error: dataset root " << root << " is not a directory\n";
    return usage;
  }
  Service service({root, state});
  const int bound = service.bind(host, port);
  if (bound < 0) {
    std::cerr << "error: cannot bind " << host << ":" << port << "\n";
    return runtime;
  }
  active_service = &service;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cout << "listening on http://" << host << ":" << bound << std::endl;
  service.listen();
  active_service = nullptr;
  return ok;
}

int report(const fs::path& dir, bool plot) {
  auto session = Session::open(dir);
  for (const std::string& w : session->warnings()) std::cerr << "warning: " << w << "\n";
  export_report(*session, dir, plot);
  print_summary(session->estimates());
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Estimate detector precision and recall from a few yes/no answers."};
  app.require_subcommand(1);

  SessionInputs inputs;
  std::string groundtruth;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  fs::path out;
  auto* sim = app.add_subcommand("simulate", "Run a full session answered from ground truth");
  sim->add_option("--manifest", inputs.manifest, "Image manifest CSV")->required();
  sim->add_option("--detections", inputs.detections, "Detections CSV")->required();
  sim->add_option("--groundtruth", groundtruth, "Ground-truth boxes CSV (drives the simulated oracle)")->required();
  sim->add_option("--config", config_path, "Session config (key = value lines)");
  sim->add_option("--seed", seed, "Override the config seed");
  sim->add_option("--out", out, "Session directory to create")->required();

  fs::path root;
  fs::path state;
  std::string host = "127.0.0.1";
  int port = 8080;
  auto* srv = app.add_subcommand("serve", "Serve the labeling API");
  srv->add_option("--root", root, "Dataset root; request paths resolve against it")->required()->envname("TESTDRIVE_ROOT");
  srv->add_option("--port", port, "TCP port")->envname("TESTDRIVE_PORT")->check(CLI::Range(0, 65535));
  srv->add_option("--host", host, "Bind address");
  srv->add_option("--state", state, "Session directories (default ROOT/sessions)");

  fs::path session_dir;
  bool plot = false;
  auto* rep = app.add_subcommand("report", "Rebuild report.csv from a session directory");
  rep->add_option("--session", session_dir, "Session directory")->required();
  rep->add_flag("--plot", plot, "Also write report.svg");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return usage;
  }

  try {
    if (*sim) {
      inputs.groundtruth = groundtruth;
      return simulate(inputs, config_path, seed, out);
    }
    if (*srv) return serve(root, state, host, port);
    return report(session_dir, plot);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return runtime;
  }
}
