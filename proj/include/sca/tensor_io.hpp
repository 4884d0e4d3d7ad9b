#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "sca/tensor.hpp"

namespace sca {

// Binary tensor container. Layout:
//   magic "SCAT" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank |
//   rank x u32 dims (little-endian) | payload, row-major, little-endian.
// Round-trips are bit-exact when the stored dtype matches the build scalar;
// a mismatched dtype is converted on load.

void save_scat(const std::filesystem::path& path, const std::vector<std::uint32_t>& dims,
               const scalar* data, std::size_t count);

struct ScatFile {
    std::vector<std::uint32_t> dims;
    std::vector<scalar> data;
};
ScatFile load_scat(const std::filesystem::path& path);

void save_tensor(const std::filesystem::path& path, const Tensor4& t);
Tensor4 load_tensor(const std::filesystem::path& path);

void save_vector(const std::filesystem::path& path, const std::vector<scalar>& v);
std::vector<scalar> load_vector(const std::filesystem::path& path);

}  // namespace sca
