#include "testdrive/service.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <mutex>
#include <random>

#include "httplib.h"
#include "testdrive/error.hpp"

namespace testdrive {

using nlohmann::json;

namespace {

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json query_json(const Query& q, const Image& image) {
  json members = json::array();
  for (const PatchProvenance& m : q.members) {
    members.push_back({{"image_id", m.image_id}, {"x", m.box.x}, {"y", m.box.y}, {"w", m.box.w}, {"h", m.box.h}});
  }
  return {{"id", q.id},
          {"kind", to_string(q.kind)},
          {"gamma", q.gamma},
          {"gamma_index", q.gamma_index},
          {"ordinal", q.ordinal},
          {"members", members},
          {"image", {{"width", image.width}, {"height", image.height}, {"png_base64", base64_encode(encode_png(image))}}}};
}

std::string value_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  if (v.is_number_float()) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v.get<double>());
    return buf;
  }
  if (v.is_null()) return "";
  if (v.is_array()) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + value_string(v[i]);
    return out;
  }
  fail(Errc::invalid_argument, "unsupported value " + v.dump());
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

int status_for(Errc code) {
  switch (code) {
    case Errc::invalid_argument:
      return 400;
    case Errc::data:
      return 422;
    case Errc::io:
      return 500;
    case Errc::not_found:
      return 404;
    case Errc::conflict:
      return 409;
  }
  return 500;
}

std::string new_id() {
  static std::mutex m;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(m);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(rng()));
  return buf;
}

std::string now_utc() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

bool valid_id(const std::string& id) {
  if (id.empty() || id.size() > 64) return false;
  for (char c : id) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') return false;
  }
  return true;
}

}  // namespace

json to_json(const EstimateRecord& r) {
  return {{"gamma", r.gamma},
          {"N", r.detections},
          {"planned_K", r.planned_samples},
          {"K", r.samples},
          {"fp_hat", r.false_positives},
          {"p_hat", r.precision},
          {"T", r.pools_tested},
          {"positives", r.positives},
          {"pool_size", r.pool_size},
          {"beta_hat", r.prevalence},
          {"complement_size", r.complement_size},
          {"fn_hat", r.false_negatives},
          {"recall_hat", r.recall},
          {"status", to_string(r.status)},
          {"flags", r.flags},
          {"true_p", optional_number(r.true_precision)},
          {"true_r", optional_number(r.true_recall)}};
}

struct Entry {
  std::mutex mutex;
  std::unique_ptr<Session> session;
  std::string created;
};

struct Service::Impl {
  ServiceOptions options;
  httplib::Server server;
  std::mutex registry_mutex;
  std::map<std::string, std::shared_ptr<Entry>> sessions;

  std::shared_ptr<Entry> lookup(const std::string& id) {
    if (!valid_id(id)) return nullptr;
    std::lock_guard lock(registry_mutex);
    auto it = sessions.find(id);
    if (it != sessions.end()) return it->second;
    const auto dir = options.state / id;
    if (!std::filesystem::exists(dir / "config")) return nullptr;
    auto entry = std::make_shared<Entry>();
    entry->session = Session::open(dir);
    entry->created = "restored";
    sessions[id] = entry;
    return entry;
  }

  void routes();
  void create(const httplib::Request& req, httplib::Response& res);
  void next(const httplib::Request& req, httplib::Response& res);
  void answer(const httplib::Request& req, httplib::Response& res);
  void estimates(const httplib::Request& req, httplib::Response& res);
};

void Service::Impl::routes() {
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
  server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const Error& e) {
      send_error(res, status_for(e.code()), e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  });

  server.Get("/sessions", [this](const httplib::Request&, httplib::Response& res) {
    json list = json::array();
    std::lock_guard lock(registry_mutex);
    for (const auto& [id, entry] : sessions) list.push_back({{"id", id}, {"created", entry->created}});
    send_json(res, 200, {{"sessions", list}});
  });
  server.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) { create(req, res); });
  server.Get(R"(/sessions/([^/]+)/next)", [this](const httplib::Request& req, httplib::Response& res) { next(req, res); });
  server.Post(R"(/sessions/([^/]+)/answers)",
              [this](const httplib::Request& req, httplib::Response& res) { answer(req, res); });
  server.Get(R"(/sessions/([^/]+)/estimates)",
             [this](const httplib::Request& req, httplib::Response& res) { estimates(req, res); });
}

void Service::Impl::create(const httplib::Request& req, httplib::Response& res) {
  json body;
  try {
    body = json::parse(req.body);
  } catch (const json::parse_error& e) {
    return send_error(res, 400, std::string("malformed body: ") + e.what());
  }
  if (!body.is_object()) return send_error(res, 400, "body must be a JSON object");

  SessionConfig config;
  SessionInputs inputs;
  try {
    for (const auto& [key, value] : body.items()) {
      if (key == "groundtruth") fail(Errc::invalid_argument, "ground truth is not accepted by the live service");
      if (key == "transform") fail(Errc::invalid_argument, "transform paths are not accepted by the live service");
      set_config_value(config, &inputs, key, value_string(value));
    }
    if (inputs.manifest.empty() || inputs.detections.empty()) {
      fail(Errc::invalid_argument, "body needs 'manifest' and 'detections' paths");
    }
    config.validate();
  } catch (const Error& e) {
    return send_error(res, 400, e.what());
  }
  inputs.manifest = options.root / inputs.manifest;
  inputs.detections = options.root / inputs.detections;

  const std::string id = new_id();
  auto entry = std::make_shared<Entry>();
  try {
    entry->session = Session::start(inputs, config, options.state / id);
  } catch (const Error& e) {
    std::error_code ignored;
    std::filesystem::remove_all(options.state / id, ignored);
    return send_error(res, e.code() == Errc::invalid_argument ? 400 : 422, e.what());
  }
  entry->created = now_utc();
  {
    std::lock_guard lock(registry_mutex);
    sessions[id] = entry;
  }
  json gammas = entry->session->sweep().gammas;
  send_json(res, 201, {{"id", id}, {"gammas", gammas}, {"warnings", entry->session->warnings()}});
}

void Service::Impl::next(const httplib::Request& req, httplib::Response& res) {
  auto entry = lookup(req.matches[1]);
  if (!entry) return send_error(res, 404, "unknown session");
  std::lock_guard lock(entry->mutex);
  Session& s = *entry->session;
  std::optional<std::size_t> g;
  if (req.has_param("gamma")) {
    const std::string text = req.get_param_value("gamma");
    double gamma = 0.0;
    try {
      std::size_t used = 0;
      gamma = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
    } catch (const std::exception&) {
      return send_error(res, 400, "gamma must be a number");
    }
    g = s.gamma_index(gamma);
  } else {
    g = s.first_incomplete();
    if (!g) {
      res.status = 204;
      return;
    }
  }
  const auto q = s.next_query(*g);
  if (!q) {
    res.status = 204;
    return;
  }
  send_json(res, 200, query_json(*q, s.render_query(*q)));
}

void Service::Impl::answer(const httplib::Request& req, httplib::Response& res) {
  auto entry = lookup(req.matches[1]);
  if (!entry) return send_error(res, 404, "unknown session");
  json body;
  try {
    body = json::parse(req.body);
  } catch (const json::parse_error& e) {
    return send_error(res, 400, std::string("malformed body: ") + e.what());
  }
  if (!body.is_object() || !body.contains("query_id") || !body["query_id"].is_string() || !body.contains("label")) {
    return send_error(res, 400, "body needs string 'query_id' and 'label'");
  }
  const json& label = body["label"];
  if (!label.is_number_integer() || (label.get<long long>() != 0 && label.get<long long>() != 1)) {
    return send_error(res, 400, "label must be 0 or 1");
  }
  std::lock_guard lock(entry->mutex);
  const EstimateRecord r =
      entry->session->submit_answer(body["query_id"].get<std::string>(), Label(label.get<int>(), LabelSource::human));
  send_json(res, 200, to_json(r));
}

void Service::Impl::estimates(const httplib::Request& req, httplib::Response& res) {
  auto entry = lookup(req.matches[1]);
  if (!entry) return send_error(res, 404, "unknown session");
  std::lock_guard lock(entry->mutex);
  const Session& s = *entry->session;
  json records = json::array();
  std::size_t complete = 0;
  for (const EstimateRecord& r : s.estimates()) {
    if (r.status == GammaStatus::complete) ++complete;
    records.push_back(to_json(r));
  }
  send_json(res, 200,
            {{"id", req.matches[1]},
             {"estimates", records},
             {"progress", {{"answers", s.log().size()}, {"complete", complete}, {"thresholds", s.sweep().size()}}}});
}

Service::Service(ServiceOptions options) : impl_(std::make_unique<Impl>()) {
  if (options.state.empty()) options.state = options.root / "sessions";
  impl_->options = std::move(options);
  impl_->routes();
}

Service::~Service() { stop(); }

int Service::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  return impl_->server.bind_to_port(host, port) ? port : -1;
}

void Service::listen() { impl_->server.listen_after_bind(); }

void Service::stop() { impl_->server.stop(); }

}  // namespace testdrive
