#include "rceg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "rceg/errors.hpp"

namespace rceg {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[value & 0xf];
    value >>= 4;
  }
  return out;
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return fnv1a64(buf.str());
}

namespace {

constexpr char kMagic[4] = {'R', 'C', 'E', 'G'};

class Writer {
 public:
  template <typename T>
  void put(T value) {
    char raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    out_.append(raw, sizeof(T));
  }
  void put_string(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void put_raw(const void* data, std::size_t n) {
    out_.append(static_cast<const char*>(data), n);
  }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  void get_raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw Error(ErrorCode::kCorruption, "checkpoint truncated");
    }
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const ModelState& state) {
  Writer w;
  w.put_raw(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  const auto& c = state.config;
  w.put<std::uint64_t>(c.vocab_size);
  w.put<std::uint64_t>(c.context_length);
  w.put<std::uint64_t>(c.embed_dim);
  w.put<std::uint64_t>(c.num_layers);
  w.put<std::uint64_t>(c.num_heads);
  w.put<std::uint64_t>(c.adapter_rank);
  w.put<double>(c.adapter_scale);
  std::uint8_t flags = 0;
  if (state.has_adapters()) flags |= 1;
  if (state.reward_head) flags |= 2;
  if (state.value_head) flags |= 4;
  w.put<std::uint8_t>(flags);

  const auto& tokens = state.vocab.tokens();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tokens.size()));
  for (const auto& t : tokens) w.put_string(t);

  // tensor_views needs a mutable state; it does not modify anything.
  auto views = tensor_views(const_cast<ModelState&>(state));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(views.size()));
  for (const auto& v : views) {
    w.put_string(v.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v.shape.size()));
    for (auto dim : v.shape) w.put<std::uint64_t>(dim);
    w.put_raw(v.data, v.size() * sizeof(double));
  }
  w.put<std::uint64_t>(fnv1a64(w.str()));
  return std::move(w.str());
}

ModelState deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(ErrorCode::kCorruption, "not an RCEG checkpoint (bad magic)");
  }
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 4, sizeof version);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kVersionMismatch,
                "checkpoint format version " + std::to_string(version) +
                    " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  if (bytes.size() < 16) throw Error(ErrorCode::kCorruption, "checkpoint truncated");
  const auto body = bytes.substr(0, bytes.size() - 8);
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body.size(), sizeof stored);
  if (fnv1a64(body) != stored) {
    throw Error(ErrorCode::kCorruption, "checkpoint checksum mismatch (truncated or corrupted)");
  }

  Reader r(body);
  r.get_raw(&version, 4);  // skip magic
  r.get<std::uint32_t>();
  ModelConfig c;
  c.vocab_size = r.get<std::uint64_t>();
  c.context_length = r.get<std::uint64_t>();
  c.embed_dim = r.get<std::uint64_t>();
  c.num_layers = r.get<std::uint64_t>();
  c.num_heads = r.get<std::uint64_t>();
  c.adapter_rank = r.get<std::uint64_t>();
  c.adapter_scale = r.get<double>();
  const auto flags = r.get<std::uint8_t>();
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::kCorruption, std::string("checkpoint config invalid: ") + e.what());
  }
  if (c.vocab_size > (1u << 24) || c.context_length > (1u << 20) || c.embed_dim > (1u << 16) ||
      c.num_layers > 1024) {
    throw Error(ErrorCode::kCorruption, "checkpoint config out of range");
  }

  std::vector<std::string> tokens(r.get<std::uint32_t>());
  for (auto& t : tokens) t = r.get_string();

  ModelState state = ModelState::zeros(c);
  if (!tokens.empty()) {
    try {
      state.vocab = Vocab::from_tokens(std::move(tokens));
    } catch (const Error& e) {
      throw Error(ErrorCode::kCorruption, std::string("checkpoint vocabulary invalid: ") + e.what());
    }
  }
  if (!(flags & 1)) state.adapters.clear();
  if (flags & 2) state.reward_head = zero_head(c.embed_dim);
  if (flags & 4) state.value_head = zero_head(c.embed_dim);

  auto views = tensor_views(state);
  const auto count = r.get<std::uint32_t>();
  if (count != views.size()) {
    throw Error(ErrorCode::kCorruption, "checkpoint tensor count " + std::to_string(count) +
                                            " does not match config (" +
                                            std::to_string(views.size()) + ")");
  }
  for (auto& v : views) {
    const auto name = r.get_string();
    if (name != v.name) {
      throw Error(ErrorCode::kCorruption, "unexpected tensor '" + name + "', wanted '" + v.name + "'");
    }
    const auto ndim = r.get<std::uint32_t>();
    if (ndim != v.shape.size()) {
      throw Error(ErrorCode::kCorruption, "rank mismatch for tensor " + name);
    }
    for (auto dim : v.shape) {
      if (r.get<std::uint64_t>() != dim) {
        throw Error(ErrorCode::kCorruption, "shape mismatch for tensor " + name);
      }
    }
    r.get_raw(v.data, v.size() * sizeof(double));
  }
  if (r.position() != body.size()) {
    throw Error(ErrorCode::kCorruption, "trailing bytes after tensor table");
  }
  return state;
}

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(state);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "short write for checkpoint " + path.string());
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str());
}

}  // namespace rceg
