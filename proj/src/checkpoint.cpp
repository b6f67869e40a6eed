#include "manet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "manet/errors.hpp"

namespace manet {
namespace {

constexpr char kMagic[8] = {'M', 'A', 'N', 'E', 'T', 'C', 'K', 'P'};

std::uint64_t fnv1a(const char* data, std::size_t size) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

class Writer {
 public:
  template <typename T>
  void put(T value) {
    const char* p = reinterpret_cast<const char*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t size) {
    const char* p = static_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + size);
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  void put_tensor(const torch::Tensor& t) {
    auto c = t.detach().contiguous();
    std::uint8_t code;
    switch (c.scalar_type()) {
      case torch::kFloat32: code = 0; break;
      case torch::kFloat64: code = 1; break;
      case torch::kInt64: code = 2; break;
      default: throw ContractError("checkpoint: unsupported tensor dtype");
    }
    put<std::uint8_t>(code);
    put<std::uint32_t>(static_cast<std::uint32_t>(c.dim()));
    for (auto d : c.sizes()) put<std::int64_t>(d);
    const std::uint64_t nbytes = c.numel() * c.element_size();
    put<std::uint64_t>(nbytes);
    put_bytes(c.data_ptr(), nbytes);
  }
  std::vector<char>& bytes() { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  Reader(const char* data, std::size_t size) : data_(data), size_(size) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)), sizeof(T));
    return value;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    return std::string(take(n), n);
  }
  torch::Tensor get_tensor() {
    const auto code = get<std::uint8_t>();
    torch::ScalarType type;
    switch (code) {
      case 0: type = torch::kFloat32; break;
      case 1: type = torch::kFloat64; break;
      case 2: type = torch::kInt64; break;
      default: throw FormatError("checkpoint: unknown tensor dtype code " + std::to_string(code));
    }
    const auto ndim = get<std::uint32_t>();
    if (ndim > 8) throw FormatError("checkpoint: implausible tensor rank");
    std::vector<int64_t> dims(ndim);
    for (auto& d : dims) {
      d = get<std::int64_t>();
      if (d < 0) throw FormatError("checkpoint: negative tensor dimension");
    }
    const auto nbytes = get<std::uint64_t>();
    auto t = torch::empty(dims, torch::TensorOptions().dtype(type));
    if (nbytes != static_cast<std::uint64_t>(t.numel() * t.element_size())) {
      throw FormatError("checkpoint: tensor byte count does not match its shape");
    }
    std::memcpy(t.data_ptr(), take(nbytes), nbytes);
    return t;
  }
  std::size_t position() const { return pos_; }

 private:
  const char* take(std::size_t n) {
    if (n > size_ - pos_) throw FormatError("checkpoint is truncated");
    const char* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

bool stored(const std::string& name, const Manet& model) {
  return !(name.starts_with("backbone.") && model->backbone().pretrained());
}

}  // namespace

TrainingState make_training_state(const TrainConfig& config) {
  config.validate();
  TrainingState state;
  state.config = config;
  BackboneConfig backbone = config.backbone;
  state.model = make_model(config.model, backbone);
  state.optimizer = std::make_unique<torch::optim::Adam>(state.model->trainable_parameters(),
                                                         torch::optim::AdamOptions(config.lr));
  return state;
}

std::vector<char> serialize_checkpoint(const TrainingState& state) {
  Writer w;
  w.put_bytes(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(to_json(state.config).dump());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(state.epoch));
  w.put<std::uint64_t>(state.step);

  std::vector<std::pair<std::string, torch::Tensor>> tensors;
  for (const auto& p : state.model->named_parameters(true)) {
    if (stored(p.key(), state.model)) tensors.emplace_back(p.key(), p.value());
  }
  for (const auto& b : state.model->named_buffers(true)) {
    if (stored(b.key(), state.model)) tensors.emplace_back(b.key(), b.value());
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.put_string(name);
    w.put_tensor(t);
  }

  std::vector<std::pair<std::string, const torch::optim::AdamParamState*>> moments;
  if (state.optimizer) {
    auto& table = state.optimizer->state();
    for (const auto& p : state.model->named_parameters(true)) {
      auto it = table.find(p.value().unsafeGetTensorImpl());
      if (it != table.end()) {
        moments.emplace_back(p.key(), static_cast<const torch::optim::AdamParamState*>(it->second.get()));
      }
    }
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(moments.size()));
  for (const auto& [name, s] : moments) {
    w.put_string(name);
    w.put<std::int64_t>(s->step());
    w.put_tensor(s->exp_avg());
    w.put_tensor(s->exp_avg_sq());
  }
  const std::uint64_t checksum = fnv1a(w.bytes().data(), w.bytes().size());
  w.put<std::uint64_t>(checksum);
  return std::move(w.bytes());
}

TrainingState deserialize_checkpoint(const std::vector<char>& bytes) {
  if (bytes.size() < sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t) ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a MANet checkpoint (bad magic or too short)");
  }
  Reader header(bytes.data() + sizeof(kMagic), bytes.size() - sizeof(kMagic));
  const auto version = header.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored_checksum;
  std::memcpy(&stored_checksum, bytes.data() + body, sizeof(stored_checksum));
  if (fnv1a(bytes.data(), body) != stored_checksum) throw FormatError("checkpoint is truncated or corrupt");

  Reader r(bytes.data() + sizeof(kMagic), body - sizeof(kMagic));
  r.get<std::uint32_t>();
  TrainConfig config;
  try {
    config = train_config_from_json(nlohmann::json::parse(r.get_string()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config is not valid JSON: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config is invalid: ") + e.what());
  }
  TrainingState state = make_training_state(config);
  state.epoch = static_cast<int>(r.get<std::uint32_t>());
  state.step = r.get<std::uint64_t>();

  std::map<std::string, torch::Tensor> targets;
  for (auto& p : state.model->named_parameters(true)) targets[p.key()] = p.value();
  for (auto& b : state.model->named_buffers(true)) targets[b.key()] = b.value();

  torch::NoGradGuard no_grad;
  const auto count = r.get<std::uint32_t>();
  std::size_t restored = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.get_string();
    auto t = r.get_tensor();
    auto it = targets.find(name);
    if (it == targets.end()) throw FormatError("checkpoint tensor '" + name + "' does not exist in the model");
    if (it->second.sizes() != t.sizes() || it->second.scalar_type() != t.scalar_type()) {
      throw FormatError("checkpoint tensor '" + name + "' has the wrong shape or dtype");
    }
    it->second.copy_(t);
    ++restored;
  }
  std::size_t expected = 0;
  for (const auto& [name, t] : targets) expected += stored(name, state.model) ? 1 : 0;
  if (restored != expected) throw FormatError("checkpoint is missing model tensors");

  std::map<std::string, torch::Tensor> params;
  for (auto& p : state.model->named_parameters(true)) params[p.key()] = p.value();
  const auto moments = r.get<std::uint32_t>();
  auto& table = state.optimizer->state();
  for (std::uint32_t i = 0; i < moments; ++i) {
    const std::string name = r.get_string();
    const auto step = r.get<std::int64_t>();
    auto exp_avg = r.get_tensor();
    auto exp_avg_sq = r.get_tensor();
    auto it = params.find(name);
    if (it == params.end()) throw FormatError("optimizer state for unknown parameter '" + name + "'");
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(step);
    s->exp_avg(exp_avg);
    s->exp_avg_sq(exp_avg_sq);
    table[it->second.unsafeGetTensorImpl()] = std::move(s);
  }
  if (r.position() != body - sizeof(kMagic)) throw FormatError("checkpoint has trailing bytes");
  return state;
}

void save_checkpoint(const TrainingState& state, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(state);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

TrainingState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace manet
