#include <filesystem>
#include <thread>

#include "doctest.h"
#include "json.hpp"
#include "synthetic.hpp"
#include "testdrive/service.hpp"

// After the Eigen headers: resolv.h, pulled in by httplib, defines _res.
#include "httplib.h"

using namespace testdrive;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Running {
  Service service;
  int port = -1;
  std::thread thread;

  explicit Running(ServiceOptions options) : service(std::move(options)) {
    port = service.bind("127.0.0.1", 0);
    REQUIRE(port > 0);
    thread = std::thread([this] { service.listen(); });
  }
  ~Running() {
    service.stop();
    thread.join();
  }
};

Query query_from(const json& payload) {
  Query q;
  q.id = payload["id"];
  q.kind = payload["kind"] == "recall-pool" ? QueryKind::recall_pool : QueryKind::precision_sample;
  for (const json& m : payload["members"]) {
    q.members.push_back({m["image_id"], {m["x"], m["y"], m["w"], m["h"]}});
  }
  return q;
}

}  // namespace

TEST_CASE("HTTP session lifecycle") {
  const fs::path root = fs::temp_directory_path() / "testdrive_service";
  fs::remove_all(root);
  synthetic::FixtureConfig fc;
  fc.images = 8;
  fc.seed = 4;
  const synthetic::Fixture f = synthetic::write_fixture(root / "data", fc);

  Running server({root, {}});
  httplib::Client cli("127.0.0.1", server.port);
  cli.set_read_timeout(60, 0);
  const auto post = [&](const std::string& path, const json& body) {
    return cli.Post(path, body.dump(), "application/json");
  };

  SUBCASE("bad requests") {
    CHECK(cli.Post("/sessions", "{not json", "application/json")->status == 400);
    CHECK(post("/sessions", json{{"manifest", "data/manifest.csv"}})->status == 400);
    CHECK(post("/sessions", json{{"manifest", "data/manifest.csv"}, {"detections", "data/detections.csv"},
                                 {"groundtruth", "data/groundtruth.csv"}})
              ->status == 400);
    CHECK(post("/sessions", json{{"manifest", "data/manifest.csv"}, {"detections", "data/detections.csv"},
                                 {"colour", "red"}})
              ->status == 400);
    CHECK(post("/sessions", json{{"manifest", "data/missing.csv"}, {"detections", "data/detections.csv"}})->status ==
          422);
    CHECK(cli.Get("/sessions/0123456789abcdef/next")->status == 404);
    CHECK(cli.Get("/sessions/../estimates")->status == 404);
    CHECK(post("/sessions/0123456789abcdef/answers", json{{"query_id", "g0-s0"}, {"label", 1}})->status == 404);
  }

  SUBCASE("answering through the API") {
    const auto created = post("/sessions", json{{"manifest", "data/manifest.csv"},
                                                {"detections", "data/detections.csv"},
                                                {"homogenize", false},
                                                {"sweep_quantiles", 2},
                                                {"seed", 4}});
    REQUIRE(created);
    REQUIRE(created->status == 201);
    CHECK(created->get_header_value("Access-Control-Allow-Origin") == "*");
    const json info = json::parse(created->body);
    const std::string id = info["id"];
    CHECK(id.size() == 16);
    CHECK(info["gammas"].size() >= 1);
    CHECK(json::parse(cli.Get("/sessions")->body)["sessions"].size() == 1);

    const std::string base = "/sessions/" + id;
    const auto first = cli.Get(base + "/next");
    REQUIRE(first->status == 200);
    const json q = json::parse(first->body);
    CHECK(q["kind"] == "precision-sample");
    CHECK(q["image"]["png_base64"].get<std::string>().rfind("iVBOR", 0) == 0);
    CHECK(json::parse(cli.Get(base + "/next")->body)["id"] == q["id"]);
    CHECK(cli.Get(base + "/next?gamma=abc")->status == 400);
    CHECK(cli.Get(base + "/next?gamma=7.5")->status == 404);

    CHECK(post(base + "/answers", json{{"query_id", q["id"]}, {"label", 2}})->status == 400);
    CHECK(post(base + "/answers", json{{"query_id", q["id"]}, {"label", "yes"}})->status == 400);
    CHECK(post(base + "/answers", json{{"query_id", "g0-s999"}, {"label", 1}})->status == 404);
    const auto ok = post(base + "/answers", json{{"query_id", q["id"]}, {"label", 1}});
    REQUIRE(ok->status == 200);
    CHECK(json::parse(ok->body)["K"] == 1);
    CHECK(post(base + "/answers", json{{"query_id", q["id"]}, {"label", 1}})->status == 409);

    const SimulatedOracle oracle(f.truth);
    int answered = 1;
    for (;;) {
      const auto r = cli.Get(base + "/next");
      REQUIRE(r);
      if (r->status == 204) break;
      REQUIRE(r->status == 200);
      const json next = json::parse(r->body);
      const int label = oracle.answer(query_from(next)).value();
      REQUIRE(post(base + "/answers", json{{"query_id", next["id"]}, {"label", label}})->status == 200);
      ++answered;
    }
    const json est = json::parse(cli.Get(base + "/estimates")->body);
    CHECK(est["progress"]["answers"] == answered);
    CHECK(est["progress"]["complete"] == est["progress"]["thresholds"]);
    for (const json& r : est["estimates"]) {
      CHECK(r["status"] == "complete");
      CHECK(r["true_p"].is_null());
      CHECK(r["p_hat"].get<double>() >= 0.0);
    }
    CHECK(cli.Get(base + "/next?gamma=" + info["gammas"][0].dump())->status == 204);

    // A fresh server over the same state directory restores the session.
    Running again({root, {}});
    httplib::Client cli2("127.0.0.1", again.port);
    const auto restored = cli2.Get(base + "/estimates");
    REQUIRE(restored->status == 200);
    CHECK(json::parse(restored->body)["estimates"] == est["estimates"]);
  }
}
