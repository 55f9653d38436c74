#include "voxpeft/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "voxpeft/errors.hpp"

namespace voxpeft {

namespace fs = std::filesystem;

namespace {

std::uint64_t to_little(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::big) return __builtin_bswap64(v);
    return v;
}

} // namespace

void atomic_write(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw Error("failed writing " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void append_f64_le(std::string& out, std::span<const double> values) {
    std::size_t start = out.size();
    out.resize(start + values.size() * 8);
    char* dst = out.data() + start;
    for (double v : values) {
        auto bits = to_little(std::bit_cast<std::uint64_t>(v));
        std::memcpy(dst, &bits, 8);
        dst += 8;
    }
}

std::vector<double> parse_f64_le(const char* data, std::size_t count) {
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, data + i * 8, 8);
        out[i] = std::bit_cast<double>(to_little(bits));
    }
    return out;
}

} // namespace voxpeft
