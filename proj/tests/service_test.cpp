#include <filesystem>
#include <fstream>
#include <thread>

#include "afl/error.hpp"
#include "afl/service/codec.hpp"
#include "afl/service/service.hpp"
#include "afl/training/trainer.hpp"
#include "doctest.h"
#include "httplib.h"
#include "support/fixtures.hpp"

using namespace afl;
using namespace afl::service;
using nlohmann::json;
using afl::testing::random_checkpoint;
using afl::testing::TempDir;
using afl::testing::write_fixtures;

namespace {

Response post(Service& s, const json& body) { return s.generate(body.dump()); }

std::string error_field(const Response& r) { return json::parse(r.body)["error"].value("field", ""); }

}  // namespace

TEST_CASE("empty checkpoint directory lists nothing") {
  TempDir d("empty");
  Service s({.checkpoint_dir = d.path});
  auto r = s.list_checkpoints();
  CHECK(r.status == 200);
  CHECK(json::parse(r.body) == json::parse(R"({"checkpoints":[],"rejected":[]})"));
  CHECK(post(s, {{"checkpoint_id", "toy"}}).status == 404);
}

TEST_CASE("checkpoints are listed and described") {
  TempDir d("describe");
  write_fixtures(d.path);
  Service s({.checkpoint_dir = d.path});
  auto list = json::parse(s.list_checkpoints().body);
  REQUIRE(list["checkpoints"].size() == 2);
  auto toy = json::parse(s.describe_checkpoint("toy").body);
  CHECK(toy["kind"] == "points");
  CHECK(toy["modules"].size() == 1);
  CHECK(toy["modules"][0]["default_alpha"] == 0.2);
  auto img = json::parse(s.describe_checkpoint("img").body);
  CHECK(img["kind"] == "image");
  CHECK(img["modules"].size() == 4);
  CHECK(s.describe_checkpoint("nope").status == 404);
}

TEST_CASE("invalid requests name the offending field") {
  TempDir d("validate");
  write_fixtures(d.path);
  Service s({.checkpoint_dir = d.path});
  const std::vector<std::pair<json, std::string>> cases = {
      {json::array(), "body"},
      {{{"seed", 1}}, "checkpoint_id"},
      {{{"checkpoint_id", ""}}, "checkpoint_id"},
      {{{"checkpoint_id", "toy"}, {"seed", -1}}, "seed"},
      {{{"checkpoint_id", "toy"}, {"n_samples", 0}}, "n_samples"},
      {{{"checkpoint_id", "toy"}, {"n_samples", 1025}}, "n_samples"},
      {{{"checkpoint_id", "toy"}, {"n_samples", 2.5}}, "n_samples"},
      {{{"checkpoint_id", "toy"}, {"alpha_global", 1.5}}, "alpha_global"},
      {{{"checkpoint_id", "toy"}, {"alpha_global", -0.1}}, "alpha_global"},
      {{{"checkpoint_id", "toy"}, {"alpha_global", "high"}}, "alpha_global"},
      {{{"checkpoint_id", "toy"}, {"iterations", 9}}, "iterations"},
      {{{"checkpoint_id", "toy"}, {"iterations", -1}}, "iterations"},
      {{{"checkpoint_id", "toy"}, {"alpha_overrides", {{"fb0", 2.0}}}}, "alpha_overrides.fb0"},
      {{{"checkpoint_id", "toy"}, {"alpha_overrides", {{"ghost", 0.5}}}}, "alpha_overrides.ghost"},
      {{{"checkpoint_id", "toy"}, {"colour", 1}}, "colour"},
      {{{"checkpoint_id", "toy"}, {"reference", {{"points", {{0, 0}}}, {"image", "x"}}}}, "reference"},
      {{{"checkpoint_id", "toy"}, {"n_samples", 4}, {"reference", {{"points", {{0, 0}, {1, 1}}}}}}, "reference.points"},
      {{{"checkpoint_id", "toy"}, {"reference", {{"points", {{0, 0, 0}}}}}}, "reference.points"},
      {{{"checkpoint_id", "toy"}, {"reference", {{"image", "AAAA"}}}}, "reference.image"},
      {{{"checkpoint_id", "img"}, {"reference", {{"image", "@@@"}}}}, "base64"},
      {{{"checkpoint_id", "img"}, {"reference", {{"image", base64_encode("not a png")}}}}, "reference.image"},
      {{{"checkpoint_id", "toy"}, {"reference", {{"sample_id", "abc"}}}}, "reference.sample_id"},
  };
  for (const auto& [body, fieldname] : cases) {
    CAPTURE(body.dump());
    auto r = post(s, body);
    CHECK(r.status == 400);
    CHECK(error_field(r) == fieldname);
  }
  auto bad = s.generate("{not json");
  CHECK(bad.status == 400);
  CHECK(error_field(bad) == "body");
  auto missing = post(s, {{"checkpoint_id", "toy"}, {"reference", {{"sample_id", "0000:1"}}}});
  CHECK(missing.status == 404);
}

TEST_CASE("canonical request form round trips") {
  GenerateRequest r;
  r.checkpoint_id = "toy";
  r.seed = 77;
  r.n_samples = 2;
  r.alpha_global = 0.35;
  r.alpha_overrides = {{"fb0", 0.0}};
  r.iterations = 3;
  r.reference_points = Tensor({1, 2}, {0.25, -0.5});
  auto back = parse_request(json::parse(request_json(r).dump()));
  CHECK(request_json(back).dump() == request_json(r).dump());
}

TEST_CASE("zero gain reproduces the baseline") {
  TempDir d("alpha0");
  write_fixtures(d.path);
  Service s({.checkpoint_dir = d.path});
  for (const char* id : {"toy", "img"}) {
    auto r = json::parse(post(s, {{"checkpoint_id", id}, {"alpha_global", 0.0}, {"iterations", 3}, {"n_samples", 5}}).body);
    CHECK(r["outputs"] == r["baseline"]);
    CHECK(r["trace"].size() == 4);
  }
  // png output hides corrections below one 8-bit level, so check on points
  auto on = json::parse(post(s, {{"checkpoint_id", "toy"}, {"alpha_global", 1.0}, {"n_samples", 5}}).body);
  CHECK(on["outputs"] != on["baseline"]);
}

TEST_CASE("points output matches direct generation") {
  TempDir d("direct");
  write_fixtures(d.path);
  Service s({.checkpoint_dir = d.path});
  auto snap = s.snapshot();
  const auto& c = *snap->checkpoints.at("toy");
  GenerateRequest r;
  r.checkpoint_id = "toy";
  r.seed = 9;
  r.n_samples = 6;
  r.iterations = 2;
  auto out = generate(c, r, nullptr);
  feedback::LoopConfig lc;
  lc.iterations = 2;
  auto tr = feedback::afl_generate(c.ckpt.model, request_latent(c.ckpt.model.g, r), lc);
  for (int i = 0; i < 6; ++i) {
    CHECK(out["outputs"][i][0].get<double>() == tr.final().at(i, 0));
    CHECK(out["outputs"][i][1].get<double>() == tr.final().at(i, 1));
  }
}

TEST_CASE("identical requests give identical bytes, also concurrently over http") {
  TempDir d("determinism");
  write_fixtures(d.path);
  Service s({.checkpoint_dir = d.path});
  const json body = {{"checkpoint_id", "img"}, {"seed", 5}, {"n_samples", 4}, {"iterations", 2}};
  const auto first = post(s, body);
  REQUIRE(first.status == 200);
  CHECK(post(s, body).body == first.body);

  BackgroundServer server(s, "127.0.0.1", 0);
  std::vector<std::string> got(4);
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      httplib::Client cli("127.0.0.1", server.port());
      cli.set_read_timeout(60, 0);
      auto res = cli.Post("/generate", body.dump(), "application/json");
      if (res && res->status == 200) got[t] = res->body;
    });
  }
  for (auto& th : threads) th.join();
  for (const auto& g : got) CHECK(g == first.body);
}

TEST_CASE("http routes") {
  TempDir d("routes");
  write_fixtures(d.path);
  Service s({.checkpoint_dir = d.path});
  BackgroundServer server(s, "127.0.0.1", 0);
  httplib::Client cli("127.0.0.1", server.port());
  auto health = cli.Get("/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(json::parse(health->body)["checkpoints"] == 2);
  CHECK(cli.Get("/checkpoints/toy")->status == 200);
  CHECK(cli.Get("/checkpoints/zzz")->status == 404);
  auto gen = cli.Post("/generate", R"({"checkpoint_id":"toy","n_samples":3,"iterations":1})", "application/json");
  REQUIRE(gen);
  CHECK(gen->status == 200);
  const auto id = json::parse(gen->body)["trace"][1].get<std::string>();
  auto tr = cli.Get("/traces/" + id);
  CHECK(tr->status == 200);
  CHECK(json::parse(tr->body)["outputs"].size() == 3);
  CHECK(cli.Post("/generate", "[]", "application/json")->status == 400);

  training::save_checkpoint(random_checkpoint(nets::build_toy_pair(8), 8), d.path / "toy2.afl");
  CHECK(cli.Get("/checkpoints/toy2")->status == 404);
  CHECK(cli.Post("/reload", "", "application/json")->status == 200);
  CHECK(cli.Get("/checkpoints/toy2")->status == 200);
}

TEST_CASE("references steer the loop") {
  TempDir d("reference");
  write_fixtures(d.path);
  Service s({.checkpoint_dir = d.path});
  auto first = json::parse(post(s, {{"checkpoint_id", "toy"}, {"n_samples", 4}}).body);
  const std::string sample = first["trace"][0].get<std::string>() + ":2";
  auto by_sample = post(s, {{"checkpoint_id", "toy"}, {"n_samples", 4}, {"reference", {{"sample_id", sample}}}});
  REQUIRE(by_sample.status == 200);
  auto j = json::parse(by_sample.body);
  CHECK(j["metric_vs_reference"].is_number());
  const auto p = first["baseline"][2];
  auto by_point = json::parse(post(s, {{"checkpoint_id", "toy"}, {"n_samples", 4}, {"reference", {{"points", {p}}}}}).body);
  CHECK(by_point["outputs"] == j["outputs"]);
  CHECK(by_point["metric_vs_reference"] == j["metric_vs_reference"]);
  CHECK(post(s, {{"checkpoint_id", "toy"}, {"reference", {{"sample_id", first["trace"][0].get<std::string>() + ":9"}}}})
            .status == 400);

  RgbImage img{16, 16, std::vector<uint8_t>(16 * 16 * 3, 200)};
  auto by_image = post(s, {{"checkpoint_id", "img"}, {"n_samples", 2}, {"reference", {{"image", base64_encode(encode_png(img))}}}});
  CHECK(by_image.status == 200);
  RgbImage wrong{8, 8, std::vector<uint8_t>(8 * 8 * 3, 0)};
  CHECK(error_field(post(s, {{"checkpoint_id", "img"}, {"reference", {{"image", base64_encode(encode_png(wrong))}}}})) ==
        "reference.image");
}

TEST_CASE("trace store evicts least recently used") {
  TraceStore store(2);
  store.put("a", Tensor({1}, {1.0}));
  store.put("b", Tensor({1}, {2.0}));
  CHECK(store.get("a"));
  store.put("c", Tensor({1}, {3.0}));
  CHECK(store.get("a"));
  CHECK_FALSE(store.get("b"));
  CHECK(store.size() == 2);
  CHECK_THROWS_AS(TraceStore(0), ConfigError);

  TempDir d("lru");
  write_fixtures(d.path);
  Service s({.checkpoint_dir = d.path, .lru_capacity = 2});
  auto one = json::parse(post(s, {{"checkpoint_id", "toy"}, {"iterations", 1}}).body);
  post(s, {{"checkpoint_id", "toy"}, {"iterations", 1}, {"seed", 2}});
  CHECK(s.trace(one["trace"][0]).status == 404);
}

TEST_CASE("corrupted checkpoints are reported, the rest still served") {
  TempDir d("corrupt");
  write_fixtures(d.path);
  {
    std::fstream f(d.path / "img.afl", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    f.put('\x7f');
  }
  std::ofstream(d.path / "junk.afl") << "hello";
  Service s({.checkpoint_dir = d.path});
  auto list = json::parse(s.list_checkpoints().body);
  CHECK(list["checkpoints"].size() == 1);
  CHECK(list["rejected"].size() == 2);
  CHECK(post(s, {{"checkpoint_id", "toy"}}).status == 200);
  CHECK(post(s, {{"checkpoint_id", "img"}}).status == 404);
}

TEST_CASE("base64 and png codecs") {
  for (std::string s : {"", "f", "fo", "foo", "foob", "fooba", "foobar"}) CHECK(base64_decode(base64_encode(s)) == s);
  CHECK(base64_encode("foobar") == "Zm9vYmFy");
  CHECK(base64_encode("fo") == "Zm8=");
  CHECK_THROWS_AS(base64_decode("Zm9"), ValidationError);

  RgbImage img{5, 3, {}};
  for (int i = 0; i < 5 * 3 * 3; ++i) img.pixels.push_back(static_cast<uint8_t>(i * 17));
  auto back = decode_png(encode_png(img));
  CHECK(back.width == 5);
  CHECK(back.height == 3);
  CHECK(back.pixels == img.pixels);

  Tensor batch({5, 3, 2, 2});
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = (i % 2) ? 1.0 : -1.0;
  auto grid = image_grid(batch);
  CHECK(grid.width == 6);
  CHECK(grid.height == 4);
  CHECK(image_tensor(RgbImage{1, 1, {255, 0, 128}})[0] == doctest::Approx(1.0));
  CHECK(to_byte(-1.0) == 0);
  CHECK(to_byte(1.0) == 255);
  CHECK(to_byte(7.0) == 255);
}
