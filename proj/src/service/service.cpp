#include "afl/service/service.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <set>

#include "afl/error.hpp"
#include "afl/eval/metrics.hpp"
#include "afl/service/codec.hpp"
#include "afl/training/trainer.hpp"

namespace afl::service {

namespace {

using ojson = nlohmann::ordered_json;

const nlohmann::json& field(const nlohmann::json& body, const char* name) { return body.at(name); }

int64_t integer_field(const nlohmann::json& v, const std::string& name, int64_t lo, int64_t hi) {
  if (!v.is_number_integer()) throw ValidationError(name, name + " must be an integer");
  if (v.is_number_unsigned() && v.get<uint64_t>() > static_cast<uint64_t>(hi)) {
    throw ValidationError(name, name + " must be at most " + std::to_string(hi));
  }
  const int64_t x = v.get<int64_t>();
  if (x < lo || x > hi) {
    throw ValidationError(name, name + " must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  return x;
}

double alpha_field(const nlohmann::json& v, const std::string& name) {
  if (!v.is_number()) throw ValidationError(name, name + " must be a number");
  const double a = v.get<double>();
  if (!(a >= 0.0 && a <= 1.0)) throw ValidationError(name, name + " must lie in [0, 1]");
  return a;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

bool is_image(const feedback::AflModel& m) { return m.d.sample_shape().size() == 3; }

ojson format_outputs(const feedback::AflModel& m, const Tensor& y) {
  if (is_image(m)) {
    const auto grid = image_grid(y);
    const int64_t tile = y.dim(2);
    ojson o;
    o["format"] = "png";
    o["encoding"] = "base64";
    o["tile"] = tile;
    o["cols"] = grid.width / tile;
    o["rows"] = grid.height / tile;
    o["count"] = y.dim(0);
    o["data"] = base64_encode(encode_png(grid));
    return o;
  }
  ojson pts = ojson::array();
  const int64_t d = y.dim(1);
  for (int64_t i = 0; i < y.dim(0); ++i) {
    ojson row = ojson::array();
    for (int64_t k = 0; k < d; ++k) row.push_back(y[i * d + k]);
    pts.push_back(std::move(row));
  }
  return pts;
}

Tensor row_of(const Tensor& t, int64_t row) {
  Shape s = t.shape();
  s[0] = 1;
  const int64_t w = static_cast<int64_t>(t.size()) / t.dim(0);
  Tensor out(s);
  std::copy_n(t.values().begin() + row * w, w, out.values().begin());
  return out;
}

// Reference samples in the discriminator's input space, or nothing.
std::optional<Tensor> resolve_reference(const feedback::AflModel& m, const GenerateRequest& r, TraceStore* traces) {
  const Shape& sample = m.d.sample_shape();
  if (r.reference_points) {
    const Tensor& p = *r.reference_points;
    if (is_image(m)) throw ValidationError("reference.points", "point references need a 2-D checkpoint");
    if (p.dim(1) != sample[0]) throw ValidationError("reference.points", "points must have " + std::to_string(sample[0]) + " coordinates");
    return p;
  }
  if (r.reference_image) {
    if (!is_image(m)) throw ValidationError("reference.image", "image references need an image checkpoint");
    const auto img = decode_png(base64_decode(*r.reference_image));
    if (img.width != sample[2] || img.height != sample[1]) {
      throw ValidationError("reference.image", "image must be " + std::to_string(sample[2]) + "x" + std::to_string(sample[1]));
    }
    return image_tensor(img);
  }
  if (r.reference_sample) {
    const auto& id = *r.reference_sample;
    const auto colon = id.rfind(':');
    if (colon == std::string::npos) throw ValidationError("reference.sample_id", "sample ids look like <trace id>:<row>");
    int64_t row = 0;
    try {
      std::size_t used = 0;
      row = std::stoll(id.substr(colon + 1), &used);
      if (used != id.size() - colon - 1) throw std::invalid_argument("row");
    } catch (const std::exception&) {
      throw ValidationError("reference.sample_id", "sample row must be an integer");
    }
    std::optional<Tensor> stored = traces ? traces->get(id.substr(0, colon)) : std::nullopt;
    if (!stored) throw NotFoundError("trace '" + id.substr(0, colon) + "' is unknown or was evicted");
    if (row < 0 || row >= stored->dim(0)) throw ValidationError("reference.sample_id", "sample row out of range");
    if (Shape(stored->shape().begin() + 1, stored->shape().end()) != sample) {
      throw ValidationError("reference.sample_id", "sample comes from a checkpoint of another shape");
    }
    return row_of(*stored, row);
  }
  return std::nullopt;
}

Response error_response(int status, const std::string& code, const std::string& message,
                        const std::optional<std::string>& field_name = std::nullopt) {
  ojson e;
  e["code"] = code;
  if (field_name) e["field"] = *field_name;
  e["message"] = message;
  ojson body;
  body["error"] = e;
  return {status, body.dump() + "\n"};
}

Response ok(const ojson& j) { return {200, j.dump() + "\n"}; }

}  // namespace

GenerateRequest parse_request(const nlohmann::json& body) {
  if (!body.is_object()) throw ValidationError("body", "request body must be a JSON object");
  static const std::set<std::string> known = {"checkpoint_id", "seed", "n_samples", "alpha_global",
                                              "alpha_overrides", "iterations", "reference"};
  for (const auto& [k, _] : body.items())
    if (!known.count(k)) throw ValidationError(k, "unknown field '" + k + "'");
  GenerateRequest r;
  if (!body.contains("checkpoint_id")) throw ValidationError("checkpoint_id", "checkpoint_id is required");
  const auto& id = field(body, "checkpoint_id");
  if (!id.is_string() || id.get<std::string>().empty()) {
    throw ValidationError("checkpoint_id", "checkpoint_id must be a non-empty string");
  }
  r.checkpoint_id = id.get<std::string>();
  if (body.contains("seed")) {
    const auto& s = field(body, "seed");
    if (!s.is_number_integer() || (!s.is_number_unsigned() && s.get<int64_t>() < 0)) {
      throw ValidationError("seed", "seed must be a non-negative integer");
    }
    r.seed = s.get<uint64_t>();
  }
  if (body.contains("n_samples")) r.n_samples = integer_field(field(body, "n_samples"), "n_samples", 1, kMaxSamples);
  if (body.contains("alpha_global")) r.alpha_global = alpha_field(field(body, "alpha_global"), "alpha_global");
  if (body.contains("iterations")) {
    r.iterations = static_cast<int>(integer_field(field(body, "iterations"), "iterations", 0, kMaxIterations));
  }
  if (body.contains("alpha_overrides")) {
    const auto& o = field(body, "alpha_overrides");
    if (!o.is_object()) throw ValidationError("alpha_overrides", "alpha_overrides must be an object");
    for (const auto& [k, v] : o.items()) r.alpha_overrides[k] = alpha_field(v, "alpha_overrides." + k);
  }
  if (body.contains("reference") && !body.at("reference").is_null()) {
    const auto& ref = body.at("reference");
    if (!ref.is_object() || ref.size() != 1) {
      throw ValidationError("reference", "reference must be an object with exactly one of points, image, sample_id");
    }
    if (ref.contains("points")) {
      const auto& pts = ref.at("points");
      if (!pts.is_array() || pts.empty()) throw ValidationError("reference.points", "points must be a non-empty array");
      if (pts.size() != 1 && static_cast<int64_t>(pts.size()) != r.n_samples) {
        throw ValidationError("reference.points", "give one point or one point per sample");
      }
      const std::size_t dim = pts.at(0).is_array() ? pts.at(0).size() : 0;
      if (dim == 0) throw ValidationError("reference.points", "points must be arrays of numbers");
      Tensor t({static_cast<int64_t>(pts.size()), static_cast<int64_t>(dim)});
      for (std::size_t i = 0; i < pts.size(); ++i) {
        const auto& p = pts.at(i);
        if (!p.is_array() || p.size() != dim) throw ValidationError("reference.points", "points must all have the same length");
        for (std::size_t k = 0; k < dim; ++k) {
          if (!p.at(k).is_number() || !std::isfinite(p.at(k).get<double>())) {
            throw ValidationError("reference.points", "coordinates must be finite numbers");
          }
          t[i * dim + k] = p.at(k).get<double>();
        }
      }
      r.reference_points = std::move(t);
    } else if (ref.contains("image")) {
      if (!ref.at("image").is_string()) throw ValidationError("reference.image", "image must be a base64 PNG string");
      r.reference_image = ref.at("image").get<std::string>();
    } else if (ref.contains("sample_id")) {
      if (!ref.at("sample_id").is_string()) throw ValidationError("reference.sample_id", "sample_id must be a string");
      r.reference_sample = ref.at("sample_id").get<std::string>();
    } else {
      throw ValidationError("reference." + ref.begin().key(), "unknown reference kind '" + ref.begin().key() + "'");
    }
  }
  return r;
}

nlohmann::ordered_json request_json(const GenerateRequest& r) {
  ojson j;
  j["checkpoint_id"] = r.checkpoint_id;
  j["seed"] = r.seed;
  j["n_samples"] = r.n_samples;
  j["alpha_global"] = r.alpha_global;
  ojson o = ojson::object();
  for (const auto& [k, v] : r.alpha_overrides) o[k] = v;
  j["alpha_overrides"] = o;
  j["iterations"] = r.iterations;
  if (r.reference_points) {
    ojson pts = ojson::array();
    const auto& t = *r.reference_points;
    for (int64_t i = 0; i < t.dim(0); ++i) {
      ojson row = ojson::array();
      for (int64_t k = 0; k < t.dim(1); ++k) row.push_back(t.at(i, k));
      pts.push_back(row);
    }
    j["reference"] = {{"points", pts}};
  } else if (r.reference_image) {
    j["reference"] = {{"image", *r.reference_image}};
  } else if (r.reference_sample) {
    j["reference"] = {{"sample_id", *r.reference_sample}};
  }
  return j;
}

Tensor request_latent(const nets::Network& g, const GenerateRequest& r) {
  Rng rng(r.seed, "service:latent");
  return training::sample_latent(g, rng, r.n_samples);
}

std::shared_ptr<const Snapshot> load_snapshot(const std::filesystem::path& dir) {
  auto snap = std::make_shared<Snapshot>();
  if (dir.empty() || !std::filesystem::is_directory(dir)) return snap;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".afl") continue;
    const std::string id = entry.path().stem().string();
    try {
      auto lc = std::make_shared<LoadedCheckpoint>();
      lc->id = id;
      lc->ckpt = training::load_checkpoint(entry.path());
      snap->checkpoints[id] = std::move(lc);
    } catch (const Error& e) {
      snap->rejected[id] = e.what();
    }
  }
  return snap;
}

TraceStore::TraceStore(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("trace store capacity must be positive");
}

void TraceStore::put(const std::string& id, Tensor value) {
  std::lock_guard lock(mu_);
  if (auto it = index_.find(id); it != index_.end()) {
    order_.splice(order_.begin(), order_, it->second);
    it->second->second = std::move(value);
    return;
  }
  order_.emplace_front(id, std::move(value));
  index_[id] = order_.begin();
  while (order_.size() > capacity_) {
    index_.erase(order_.back().first);
    order_.pop_back();
  }
}

std::optional<Tensor> TraceStore::get(const std::string& id) {
  std::lock_guard lock(mu_);
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  order_.splice(order_.begin(), order_, it->second);
  return it->second->second;
}

std::size_t TraceStore::size() const {
  std::lock_guard lock(mu_);
  return order_.size();
}

nlohmann::ordered_json describe(const LoadedCheckpoint& c) {
  const auto& m = c.ckpt.model;
  ojson j;
  j["id"] = c.id;
  j["phase"] = c.ckpt.phase;
  j["kind"] = is_image(m) ? "image" : "points";
  j["sample_shape"] = m.d.sample_shape();
  j["latent_shape"] = m.g.sample_shape();
  ojson mods = ojson::array();
  for (const auto& f : m.modules) {
    ojson d;
    d["name"] = f.name();
    d["variant"] = feedback::variant_name(f.variant());
    d["gen_tap"] = f.binding().gen;
    d["disc_tap"] = f.binding().disc;
    d["tap_shape"] = f.tap_shape();
    d["default_alpha"] = feedback::kDefaultAlpha;
    mods.push_back(d);
  }
  j["modules"] = mods;
  return j;
}

nlohmann::ordered_json generate(const LoadedCheckpoint& c, const GenerateRequest& r, TraceStore* traces) {
  const auto& m = c.ckpt.model;
  const auto names = m.module_names();
  for (const auto& [k, _] : r.alpha_overrides) {
    if (std::find(names.begin(), names.end(), k) == names.end()) {
      throw ValidationError("alpha_overrides." + k, "checkpoint has no feedback module '" + k + "'");
    }
  }
  feedback::LoopConfig lc;
  lc.iterations = r.iterations;
  lc.alpha_global = r.alpha_global;
  lc.alpha_overrides = r.alpha_overrides;
  const Tensor x = request_latent(m.g, r);
  const auto reference = resolve_reference(m, r, traces);
  const feedback::Trace tr =
      reference ? feedback::feedback_switch_generate(m, x, *reference, lc) : feedback::afl_generate(m, x, lc);

  const ojson req = request_json(r);
  const std::string key = req.dump();
  ojson ids = ojson::array();
  for (std::size_t t = 0; t < tr.outputs.size(); ++t) {
    const std::string salted = key + "#" + std::to_string(t);
    const std::string id = hex64(training::fnv1a64(reinterpret_cast<const uint8_t*>(salted.data()), salted.size()));
    if (traces) traces->put(id, tr.outputs[t]);
    ids.push_back(id);
  }
  ojson out;
  out["checkpoint_id"] = c.id;
  out["request"] = req;
  out["model"] = describe(c);
  out["outputs"] = format_outputs(m, tr.final());
  out["baseline"] = format_outputs(m, tr.outputs.front());
  out["trace"] = ids;
  out["metric_vs_reference"] = reference ? ojson(eval::mean_nearest_distance(tr.final(), *reference)) : ojson(nullptr);
  return out;
}

ServiceConfig ServiceConfig::from_env() {
  ServiceConfig c;
  if (const char* d = std::getenv("AFL_CHECKPOINT_DIR")) c.checkpoint_dir = d;
  if (const char* l = std::getenv("AFL_LISTEN")) {
    const std::string s = l;
    const auto colon = s.rfind(':');
    if (colon == std::string::npos) throw ConfigError("AFL_LISTEN must be host:port");
    c.host = s.substr(0, colon);
    try {
      c.port = std::stoi(s.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("AFL_LISTEN port is not a number");
    }
  }
  if (const char* n = std::getenv("AFL_LRU_CAPACITY")) {
    try {
      c.lru_capacity = std::stoul(n);
    } catch (const std::exception&) {
      throw ConfigError("AFL_LRU_CAPACITY is not a number");
    }
  }
  return c;
}

Service::Service(ServiceConfig cfg) : cfg_(std::move(cfg)), traces_(cfg_.lru_capacity) { reload(); }

void Service::reload() {
  auto next = load_snapshot(cfg_.checkpoint_dir);
  std::lock_guard lock(snap_mu_);
  snap_ = std::move(next);
}

std::shared_ptr<const Snapshot> Service::snapshot() const {
  std::lock_guard lock(snap_mu_);
  return snap_;
}

Response Service::list_checkpoints() const {
  const auto snap = snapshot();
  ojson list = ojson::array();
  for (const auto& [id, c] : snap->checkpoints) {
    ojson e;
    e["id"] = id;
    e["phase"] = c->ckpt.phase;
    e["kind"] = is_image(c->ckpt.model) ? "image" : "points";
    e["modules"] = c->ckpt.model.modules.size();
    list.push_back(e);
  }
  ojson rejected = ojson::array();
  for (const auto& [id, err] : snap->rejected) rejected.push_back({{"id", id}, {"error", err}});
  ojson body;
  body["checkpoints"] = list;
  body["rejected"] = rejected;
  return ok(body);
}

Response Service::describe_checkpoint(const std::string& id) const {
  const auto snap = snapshot();
  auto it = snap->checkpoints.find(id);
  if (it == snap->checkpoints.end()) return error_response(404, "not_found", "no checkpoint '" + id + "'");
  return ok(describe(*it->second));
}

Response Service::generate(const std::string& body) {
  try {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("body", "request body is not valid JSON");
    }
    const GenerateRequest r = parse_request(j);
    const auto snap = snapshot();
    auto it = snap->checkpoints.find(r.checkpoint_id);
    if (it == snap->checkpoints.end()) throw NotFoundError("no checkpoint '" + r.checkpoint_id + "'");
    return ok(service::generate(*it->second, r, &traces_));
  } catch (const ValidationError& e) {
    return error_response(400, "invalid_request", e.what(), e.field());
  } catch (const NotFoundError& e) {
    return error_response(404, "not_found", e.what());
  } catch (const std::exception& e) {
    return internal_error(e);
  }
}

Response Service::trace(const std::string& id) {
  auto t = traces_.get(id);
  if (!t) return error_response(404, "not_found", "trace '" + id + "' is unknown or was evicted");
  ojson j;
  j["id"] = id;
  j["shape"] = t->shape();
  if (t->shape().size() == 4) {
    j["outputs"] = base64_encode(encode_png(image_grid(*t)));
  } else {
    ojson pts = ojson::array();
    const int64_t d = t->dim(1);
    for (int64_t i = 0; i < t->dim(0); ++i) {
      ojson row = ojson::array();
      for (int64_t k = 0; k < d; ++k) row.push_back((*t)[i * d + k]);
      pts.push_back(row);
    }
    j["outputs"] = pts;
  }
  return ok(j);
}

Response Service::health() const {
  const auto snap = snapshot();
  ojson j;
  j["status"] = "ok";
  j["checkpoints"] = snap->checkpoints.size();
  j["traces"] = traces_.size();
  return ok(j);
}

Response Service::internal_error(const std::exception& e) {
  std::string id;
  {
    std::lock_guard lock(err_mu_);
    id = "err-" + std::to_string(++error_count_);
  }
  std::fprintf(stderr, "[afl-service] %s: %s\n", id.c_str(), e.what());
  ojson err;
  err["code"] = "internal";
  err["id"] = id;
  ojson body;
  body["error"] = err;
  return {500, body.dump() + "\n"};
}

}  // namespace afl::service
