#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "dsaa/tensor.hpp"

namespace dsaa {

/// Named tensors plus a JSON metadata block.
///
/// On-disk layout (all integers and reals little-endian):
///   8 bytes   magic "DSAACKPT"
///   u32       format version (1)
///   u64       metadata length N, then N bytes of UTF-8 JSON
///   u32       tensor count
///   per tensor, in name order:
///     u32 name length, name bytes, u32 rank, rank x u64 extents,
///     product(extents) x f64 values
/// Names are namespaced with '/', e.g. "encoder/layer1/wq", "dsaa/apa/w1".
struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
  /// Copies every tensor whose name starts with prefix from other.
  void merge(const Checkpoint& other, const std::string& prefix = "");
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Fingerprint of tensor names, shapes and values (metadata excluded).
std::string checkpoint_digest(const Checkpoint& ckpt);

}  // namespace dsaa
