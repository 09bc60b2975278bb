#include "dsaa/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "dsaa/digest.hpp"

namespace dsaa {
namespace {

constexpr char kMagic[8] = {'D', 'S', 'A', 'A', 'C', 'K', 'P', 'T'};

template <class T>
void put(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class Reader {
 public:
  Reader(std::string bytes, std::string origin) : buf_(std::move(bytes)), origin_(std::move(origin)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw CheckpointError(origin_ + ": truncated checkpoint");
  }
  std::string buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::string encode_tensors(const Checkpoint& ckpt) {
  std::string out;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put<std::uint64_t>(out, e);
    for (double v : t.data()) put<double>(out, v);
  }
  return out;
}

}  // namespace

const Tensor& Checkpoint::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw CheckpointError("checkpoint has no tensor named '" + name + "'");
  return it->second;
}

void Checkpoint::merge(const Checkpoint& other, const std::string& prefix) {
  for (const auto& [name, t] : other.tensors) {
    if (name.rfind(prefix, 0) == 0) tensors[name] = t;
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string meta = ckpt.metadata.dump();
  put<std::uint64_t>(out, meta.size());
  out += meta;
  out += encode_tensors(ckpt);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write checkpoint " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path.string());

  if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw CheckpointError(path.string() + ": not a checkpoint file (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto meta_len = r.get<std::uint64_t>();
  try {
    ckpt.metadata = nlohmann::json::parse(r.bytes(meta_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(path.string() + ": bad metadata block: " + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
      e = r.get<std::uint64_t>();
      n *= e;
    }
    std::vector<double> values(n);
    for (auto& v : values) v = r.get<double>();
    ckpt.tensors.emplace(name, Tensor::from(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw CheckpointError(path.string() + ": trailing bytes after tensor table");
  return ckpt;
}

std::string checkpoint_digest(const Checkpoint& ckpt) { return digest_of(encode_tensors(ckpt)); }

}  // namespace dsaa
