#include "table.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "voxpeft/errors.hpp"
#include "voxpeft/io.hpp"

namespace voxpeft::cli {

namespace {

bool numeric(const std::string& s) {
    if (s.empty()) return false;
    if (s == "inf" || s == "-inf" || s == "nan") return true;
    char* end = nullptr;
    std::strtod(s.c_str(), &end);
    return end != nullptr && *end == '\0';
}

} // namespace

void Table::add(std::vector<std::string> row) {
    if (row.size() != header_.size()) {
        throw ContractError("table row has " + std::to_string(row.size()) + " cells, header has " +
                            std::to_string(header_.size()));
    }
    rows_.push_back(std::move(row));
}

std::string csv_escape(const std::string& cell) {
    if (cell.find_first_of(",\"\n") == std::string::npos) return cell;
    std::string out = "\"";
    for (char c : cell) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string Table::csv() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + csv_escape(cells[i]);
        out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
}

std::string Table::text() const {
    std::vector<std::size_t> width(header_.size());
    for (std::size_t i = 0; i < header_.size(); ++i) width[i] = header_[i].size();
    for (const auto& r : rows_) {
        for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
    }
    std::string out;
    auto line = [&](const std::vector<std::string>& cells, bool head) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            std::string pad(width[i] - cells[i].size(), ' ');
            if (i) out += "  ";
            out += (!head && numeric(cells[i])) ? pad + cells[i] : cells[i] + pad;
        }
        while (!out.empty() && out.back() == ' ') out.pop_back();
        out += '\n';
    };
    line(header_, true);
    std::size_t total = 0;
    for (std::size_t w : width) total += w;
    out += std::string(total + 2 * (width.size() - 1), '-') + '\n';
    for (const auto& r : rows_) line(r, false);
    return out;
}

void Table::write(const std::filesystem::path& stem) const {
    atomic_write(std::filesystem::path(stem.string() + ".csv"), csv());
    atomic_write(std::filesystem::path(stem.string() + ".txt"), text());
}

std::string fmt(double value, int precision) {
    if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
    if (std::isnan(value)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", precision, value);
    return buf;
}

} // namespace voxpeft::cli
