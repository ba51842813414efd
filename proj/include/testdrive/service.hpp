#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "json.hpp"

#include "testdrive/session.hpp"

namespace testdrive {

struct ServiceOptions {
  std::filesystem::path root;   // dataset paths in requests resolve against this
  std::filesystem::path state;  // session directories; defaults to root / "sessions"
};

nlohmann::json to_json(const EstimateRecord& record);

/// JSON/HTTP front end over an in-memory session registry. Each session keeps
/// its directory under `state`; unknown ids are reopened from disk on demand.
class Service {
 public:
  explicit Service(ServiceOptions options);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds to host:port (port 0 picks a free one). Returns the bound port, or -1.
  int bind(const std::string& host, int port);
  /// Serves until stop(); requires a successful bind().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace testdrive
