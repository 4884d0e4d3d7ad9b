#include "sca/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace sca {

namespace {

constexpr char kMagic[4] = {'S', 'C', 'A', 'T'};
constexpr std::uint8_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeF64 = 1;

static_assert(std::endian::native == std::endian::little,
              "container serialization assumes a little-endian host");

void write_u32(std::ofstream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::ifstream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

[[noreturn]] void corrupt(const std::filesystem::path& path, const char* what) {
    throw IoError("corrupt container '" + path.string() + "': " + what);
}

}  // namespace

void save_scat(const std::filesystem::path& path, const std::vector<std::uint32_t>& dims,
               const scalar* data, std::size_t count) {
    std::uint64_t expect = 1;
    for (auto d : dims) expect *= d;
    if (expect != count) {
        throw IoError("save_scat: dims product " + std::to_string(expect) +
                      " != element count " + std::to_string(count));
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    os.write(kMagic, 4);
    os.put(char(kVersion));
    os.put(char(kScalarBits == 64 ? kDtypeF64 : kDtypeF32));
    os.put(char(dims.size()));
    for (auto d : dims) write_u32(os, d);
    os.write(reinterpret_cast<const char*>(data),
             std::streamsize(count * sizeof(scalar)));
    if (!os) throw IoError("write failed for '" + path.string() + "'");
}

ScatFile load_scat(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path.string() + "'");
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) corrupt(path, "bad magic");
    int version = is.get();
    if (version != kVersion) corrupt(path, "unsupported version");
    int dtype = is.get();
    if (dtype != kDtypeF32 && dtype != kDtypeF64) corrupt(path, "unknown dtype");
    int rank = is.get();
    if (rank < 0 || rank > 4) corrupt(path, "rank out of range");

    ScatFile out;
    std::uint64_t count = 1;
    for (int i = 0; i < rank; ++i) {
        std::uint32_t d = read_u32(is);
        if (!is) corrupt(path, "truncated header");
        out.dims.push_back(d);
        count *= d;
    }
    if (count > (std::uint64_t(1) << 34)) corrupt(path, "implausible element count");

    const std::size_t elem = dtype == kDtypeF64 ? 8 : 4;
    std::vector<char> raw(count * elem);
    is.read(raw.data(), std::streamsize(raw.size()));
    if (std::size_t(is.gcount()) != raw.size()) corrupt(path, "truncated payload");

    out.data.resize(count);
    if ((dtype == kDtypeF64) == (kScalarBits == 64)) {
        std::memcpy(out.data.data(), raw.data(), raw.size());
    } else if (dtype == kDtypeF64) {
        const double* p = reinterpret_cast<const double*>(raw.data());
        for (std::uint64_t i = 0; i < count; ++i) out.data[i] = scalar(p[i]);
    } else {
        const float* p = reinterpret_cast<const float*>(raw.data());
        for (std::uint64_t i = 0; i < count; ++i) out.data[i] = scalar(p[i]);
    }
    return out;
}

void save_tensor(const std::filesystem::path& path, const Tensor4& t) {
    const auto& s = t.shape();
    save_scat(path,
              {std::uint32_t(s.n), std::uint32_t(s.c), std::uint32_t(s.h), std::uint32_t(s.w)},
              t.data(), t.size());
}

Tensor4 load_tensor(const std::filesystem::path& path) {
    ScatFile f = load_scat(path);
    if (f.dims.size() != 4) {
        throw IoError("'" + path.string() + "': expected rank 4, got rank " +
                      std::to_string(f.dims.size()));
    }
    Tensor4 t(int(f.dims[0]), int(f.dims[1]), int(f.dims[2]), int(f.dims[3]));
    std::memcpy(t.data(), f.data.data(), f.data.size() * sizeof(scalar));
    return t;
}

void save_vector(const std::filesystem::path& path, const std::vector<scalar>& v) {
    save_scat(path, {std::uint32_t(v.size())}, v.data(), v.size());
}

std::vector<scalar> load_vector(const std::filesystem::path& path) {
    ScatFile f = load_scat(path);
    if (f.dims.size() != 1) {
        throw IoError("'" + path.string() + "': expected rank 1, got rank " +
                      std::to_string(f.dims.size()));
    }
    return std::move(f.data);
}

}  // namespace sca
