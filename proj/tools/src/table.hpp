#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace voxpeft::cli {

// Small report table emitted both as CSV and as aligned text.
class Table {
public:
    explicit Table(std::vector<std::string> header) : header_(std::move(header)) {}

    void add(std::vector<std::string> row);
    std::size_t rows() const { return rows_.size(); }

    std::string csv() const;
    // Columns padded to their widest cell; numeric-looking cells right-aligned.
    std::string text() const;

    // Writes <stem>.csv and <stem>.txt atomically.
    void write(const std::filesystem::path& stem) const;

private:
    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

std::string fmt(double value, int precision = 4);
std::string csv_escape(const std::string& cell);

} // namespace voxpeft::cli
