#pragma once

#include <cstdint>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>

#include "afl/feedback/feedback.hpp"
#include "afl/training/checkpoint.hpp"
#include "json.hpp"

namespace afl::service {

inline constexpr int64_t kMaxSamples = 1024;
inline constexpr int kMaxIterations = 8;

struct GenerateRequest {
  std::string checkpoint_id;
  uint64_t seed = 0;
  int64_t n_samples = 16;
  double alpha_global = feedback::kDefaultAlpha;
  std::map<std::string, double> alpha_overrides;
  int iterations = 1;
  // at most one reference source
  std::optional<Tensor> reference_points;  // [k, 2], k = 1 or n_samples
  std::optional<std::string> reference_image;  // base64 PNG
  std::optional<std::string> reference_sample;  // "<trace id>:<row>"
};

// Validates every field; throws ValidationError naming the first bad field.
GenerateRequest parse_request(const nlohmann::json& body);
// Canonical JSON form; parse_request(request_json(r)) == r.
nlohmann::ordered_json request_json(const GenerateRequest& r);

// Latent batch of a request; shared by the HTTP and command-line paths.
Tensor request_latent(const nets::Network& g, const GenerateRequest& r);

struct LoadedCheckpoint {
  std::string id;
  training::Checkpoint ckpt;
};

// Immutable set of checkpoints served together.
struct Snapshot {
  std::map<std::string, std::shared_ptr<const LoadedCheckpoint>> checkpoints;
  std::map<std::string, std::string> rejected;  // id -> load error
};

// Loads every *.afl file of a directory; ids are file stems.
std::shared_ptr<const Snapshot> load_snapshot(const std::filesystem::path& dir);

// Bounded store of per-iteration outputs, least recently used evicted first.
class TraceStore {
 public:
  explicit TraceStore(std::size_t capacity);
  void put(const std::string& id, Tensor value);
  std::optional<Tensor> get(const std::string& id);
  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }

 private:
  using Entry = std::pair<std::string, Tensor>;
  mutable std::mutex mu_;
  std::size_t capacity_;
  std::list<Entry> order_;
  std::unordered_map<std::string, std::list<Entry>::iterator> index_;
};

nlohmann::ordered_json describe(const LoadedCheckpoint& c);

// The response document of a request against one checkpoint. Used by both
// the server and the command line; `traces` may be null.
nlohmann::ordered_json generate(const LoadedCheckpoint& c, const GenerateRequest& r, TraceStore* traces);

struct ServiceConfig {
  std::filesystem::path checkpoint_dir;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t lru_capacity = 256;

  // AFL_CHECKPOINT_DIR, AFL_LISTEN (host:port), AFL_LRU_CAPACITY
  static ServiceConfig from_env();
};

struct Response {
  int status = 200;
  std::string body;
};

class Service {
 public:
  explicit Service(ServiceConfig cfg);

  // Rescans the checkpoint directory and swaps the snapshot in one step.
  void reload();
  std::shared_ptr<const Snapshot> snapshot() const;

  Response list_checkpoints() const;
  Response describe_checkpoint(const std::string& id) const;
  Response generate(const std::string& body);
  Response trace(const std::string& id);
  Response health() const;

  const ServiceConfig& config() const { return cfg_; }

 private:
  Response internal_error(const std::exception& e);

  ServiceConfig cfg_;
  mutable std::mutex snap_mu_;
  std::shared_ptr<const Snapshot> snap_;
  TraceStore traces_;
  std::mutex err_mu_;
  uint64_t error_count_ = 0;
};

// Blocks serving on the configured address.
void serve(Service& service);
// Binds the listening socket, runs the server on a background thread and
// returns the bound port (0 picks a free one).
class BackgroundServer {
 public:
  BackgroundServer(Service& service, const std::string& host, int port);
  ~BackgroundServer();
  int port() const { return port_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

}  // namespace afl::service
