#pragma once

// PLY point clouds, pose files and on-disk sample directories.

#include "end2reg/phantom.hpp"

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

namespace end2reg {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PlyEncoding { ascii, binary_little_endian };

// x,y,z as float64; red,green,blue as uint8 when colors are present; int
// label when labels are present.
void save_ply(const std::filesystem::path& path, const PointCloud& cloud,
              PlyEncoding encoding = PlyEncoding::binary_little_endian);

// Accepts float32/float64 coordinates, uint8 or float colors, and skips
// unknown vertex properties. Errors carry the byte offset of the problem.
PointCloud load_ply(const std::filesystem::path& path);

struct PoseRecord {
  RigidTransform transform;
  std::optional<Normalization> normalization;
};

void save_pose(const std::filesystem::path& path, const RigidTransform& t,
               const std::optional<Normalization>& normalization = std::nullopt);
// Rejects rotations that are not orthonormal with det +1 within 1e-6.
PoseRecord load_pose(const std::filesystem::path& path);

// Directory layout: pre.ply, intra.ply, pose.json, landmarks.csv, mask.txt, meta.json.
void write_sample(const std::filesystem::path& dir, const RegistrationSample& sample,
                  const PhantomConfig& config);
RegistrationSample read_sample(const std::filesystem::path& dir);

// manifest.json at the dataset root lists sample directories relative to it.
void write_manifest(const std::filesystem::path& root, const std::vector<std::string>& samples,
                    const PhantomConfig& config);
std::vector<std::filesystem::path> read_manifest(const std::filesystem::path& root);

}  // namespace end2reg
