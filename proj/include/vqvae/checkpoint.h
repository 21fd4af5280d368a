#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "vqvae/config.h"
#include "vqvae/tensor.h"
#include "vqvae/trainer.h"

namespace vqvae {

inline constexpr char kCheckpointMagic[4] = {'V', 'Q', 'V', 'K'};
inline constexpr uint32_t kCheckpointVersion = 1;

// Generic container. On disk, all integers and floats are little-endian:
//   "VQVK" | u32 version | str kind | u64 step
//   | u32 n, n x (str key, str value)
//   | u32 n, n x (str name, u32 rank, rank x u64 dim, f32 payload)
//   | u32 n, n x (str name, u64 len, bytes)
// where str is u32 length + bytes. Maps keep every section sorted, so equal
// checkpoints serialize to equal bytes.
struct Checkpoint {
  std::string kind;
  uint64_t step = 0;
  std::map<std::string, std::string> meta;
  std::map<std::string, Tensor> tensors;  // grad and requires_grad are not stored
  std::map<std::string, std::string> blobs;

  bool operator==(const Checkpoint& other) const;
};

std::string SerializeCheckpoint(const Checkpoint& ckpt);
// Throws DataError on bad magic, truncation, trailing bytes or a version
// other than kCheckpointVersion.
Checkpoint ParseCheckpoint(std::string_view bytes, std::string_view origin = "checkpoint");

// Writes to a sibling temporary file and renames it into place.
void SaveCheckpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint LoadCheckpoint(const std::filesystem::path& path);

Checkpoint ToCheckpoint(const VqVaeRun& run);
Checkpoint ToCheckpoint(const PriorRun& run);
// Throw DataError if |ckpt| is of the wrong kind or incomplete.
VqVaeRun VqVaeRunFromCheckpoint(const Checkpoint& ckpt);
PriorRun PriorRunFromCheckpoint(const Checkpoint& ckpt);

}  // namespace vqvae
