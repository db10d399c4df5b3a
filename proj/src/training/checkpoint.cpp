#include "afl/training/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "afl/error.hpp"

namespace afl::training {

namespace {

constexpr char kMagic[4] = {'A', 'F', 'L', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint64_t get_u64(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

void quantize(Tensor& t) {
  for (double& e : t.values()) e = static_cast<double>(static_cast<float>(e));
}

void quantize(std::vector<double>& v) {
  for (double& e : v) e = static_cast<double>(static_cast<float>(e));
}

void quantize(nets::Network& n) {
  for (auto& [_, t] : n.params()) quantize(t);
  for (auto& [_, s] : n.running_stats()) {
    quantize(s.mean);
    quantize(s.var);
  }
  for (auto& [_, st] : n.sn_states()) {
    quantize(st.u);
    quantize(st.v);
  }
}

// Named views of every array a network owns, in a fixed order.
struct ArrayRef {
  std::string name;
  Shape shape;
  std::vector<double>* data;
};

std::vector<ArrayRef> arrays_of(nets::Network& n) {
  std::vector<ArrayRef> out;
  for (auto& [k, t] : n.params()) out.push_back({k, t.shape(), &t.values()});
  for (auto& [layer, s] : n.running_stats()) {
    const std::string p = n.name() + "." + layer;
    out.push_back({p + ".running_mean", s.mean.shape(), &s.mean.values()});
    out.push_back({p + ".running_var", s.var.shape(), &s.var.values()});
  }
  for (auto& [w, st] : n.sn_states()) {
    out.push_back({w + ".sn_u", {static_cast<int64_t>(st.u.size())}, &st.u});
    out.push_back({w + ".sn_v", {static_cast<int64_t>(st.v.size())}, &st.v});
  }
  return out;
}

std::vector<nets::Network*> networks_of(feedback::AflModel& m) {
  std::vector<nets::Network*> out{&m.g, &m.d};
  for (auto& f : m.modules) out.push_back(&f.network());
  return out;
}

// Restores running stats and spectral-norm slots so that arrays_of lists the
// same entries as on the saving side.
void prepare(nets::Network& n) {
  n.init(0);
  if (n.spectral_norm()) {
    for (auto& [_, st] : n.sn_states()) st.sigma = 0.0;
  }
}

}  // namespace

uint64_t fnv1a64(const uint8_t* data, std::size_t n) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

void quantize(feedback::AflModel& model) {
  for (auto* n : networks_of(model)) quantize(*n);
}

std::vector<uint8_t> serialize(const Checkpoint& ckpt_in) {
  Checkpoint ckpt = ckpt_in;
  nlohmann::json meta;
  meta["format_version"] = kFormatVersion;
  meta["phase"] = ckpt.phase;
  meta["g"] = ckpt.model.g.descriptor();
  meta["d"] = ckpt.model.d.descriptor();
  meta["taps"] = nlohmann::json::array();
  for (const auto& t : ckpt.taps) meta["taps"].push_back({{"gen", t.gen}, {"disc", t.disc}});
  meta["modules"] = nlohmann::json::array();
  for (const auto& f : ckpt.model.modules) meta["modules"].push_back(f.descriptor());
  meta["training"] = ckpt.meta;

  std::vector<float> payload;
  nlohmann::json index = nlohmann::json::array();
  for (auto* n : networks_of(ckpt.model)) {
    for (auto& a : arrays_of(*n)) {
      index.push_back({{"name", a.name}, {"shape", a.shape}, {"offset", payload.size()}});
      for (double e : *a.data) payload.push_back(static_cast<float>(e));
    }
  }
  meta["arrays"] = index;
  meta["n_values"] = payload.size();

  const std::string text = meta.dump();
  std::vector<uint8_t> out(kMagic, kMagic + 4);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  const std::size_t at = out.size();
  out.resize(at + payload.size() * sizeof(float));
  std::memcpy(out.data() + at, payload.data(), payload.size() * sizeof(float));
  put_u64(out, fnv1a64(out.data(), out.size()));
  return out;
}

Checkpoint deserialize(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 4 + 8 + 8) throw CheckpointError("checkpoint truncated");
  if (std::memcmp(bytes.data(), kMagic, 3) != 0) throw CheckpointError("not a checkpoint file");
  if (bytes[3] != static_cast<uint8_t>(kMagic[3])) {
    throw CheckpointError("unsupported checkpoint format version '" + std::string(1, static_cast<char>(bytes[3])) + "'");
  }
  const std::size_t body = bytes.size() - 8;
  const uint64_t len = get_u64(bytes.data() + 4);
  if (len > body - 12) throw CheckpointError("checkpoint truncated");
  if (get_u64(bytes.data() + body) != fnv1a64(bytes.data(), body)) throw CheckpointError("checkpoint checksum mismatch");

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata unreadable: ") + e.what());
  }
  try {
    if (meta.at("format_version").get<int>() != kFormatVersion) {
      throw CheckpointError("unsupported checkpoint format version " + meta.at("format_version").dump());
    }
    const std::size_t n_values = meta.at("n_values").get<std::size_t>();
    if (body - 12 - len != n_values * sizeof(float)) throw CheckpointError("checkpoint payload size mismatch");
    std::vector<float> payload(n_values);
    std::memcpy(payload.data(), bytes.data() + 12 + len, n_values * sizeof(float));

    Checkpoint c;
    c.phase = meta.at("phase").get<int>();
    c.model.g = nets::Network::from_descriptor(meta.at("g"));
    c.model.d = nets::Network::from_descriptor(meta.at("d"));
    for (const auto& t : meta.at("taps")) c.taps.push_back({t.at("gen").get<std::string>(), t.at("disc").get<std::string>()});
    for (const auto& f : meta.at("modules")) c.model.modules.push_back(feedback::FeedbackModule::from_descriptor(f));
    c.meta = meta.at("training");

    std::map<std::string, std::pair<Shape, std::size_t>> index;
    for (const auto& a : meta.at("arrays")) {
      index[a.at("name").get<std::string>()] = {a.at("shape").get<Shape>(), a.at("offset").get<std::size_t>()};
    }
    std::size_t used = 0;
    for (auto* n : networks_of(c.model)) {
      prepare(*n);
      for (auto& a : arrays_of(*n)) {
        auto it = index.find(a.name);
        if (it == index.end()) throw CheckpointError("checkpoint lacks array '" + a.name + "'");
        const auto& [shape, offset] = it->second;
        if (shape != a.shape) throw CheckpointError("array '" + a.name + "' has shape " + shape_str(shape));
        const std::size_t count = static_cast<std::size_t>(shape_numel(shape));
        if (offset + count > payload.size()) throw CheckpointError("array '" + a.name + "' out of bounds");
        for (std::size_t i = 0; i < count; ++i) (*a.data)[i] = payload[offset + i];
        ++used;
      }
    }
    if (used != index.size()) throw CheckpointError("checkpoint has arrays no network claims");
    for (auto* n : networks_of(c.model)) {
      for (auto& [w, st] : n->sn_states()) {
        double s = 0.0;
        const auto& wt = n->params().at(w);
        const int64_t rows = wt.dim(0), cols = static_cast<int64_t>(wt.size()) / rows;
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t k = 0; k < cols; ++k) s += st.u[r] * wt[r * cols + k] * st.v[k];
        st.sigma = s;
      }
    }
    c.model.check_bindings();
    c.model.set_mode(nets::Mode::kEval);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata malformed: ") + e.what());
  } catch (const CheckpointError&) {
    throw;
  } catch (const Error& e) {
    throw CheckpointError(std::string("checkpoint inconsistent: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write '" + tmp.string() + "'");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot read '" + path.string() + "'");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace afl::training
