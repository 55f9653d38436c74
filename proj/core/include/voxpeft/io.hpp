#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace voxpeft {

// Writes to a sibling temp file, then renames over `path`. Parent
// directories are created as needed.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);

std::string read_file(const std::filesystem::path& path);

// Little-endian f64 encoding, independent of host byte order.
void append_f64_le(std::string& out, std::span<const double> values);
std::vector<double> parse_f64_le(const char* data, std::size_t count);

} // namespace voxpeft
