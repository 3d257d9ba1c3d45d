#ifndef IVOL_FIELDS_IO_HPP
#define IVOL_FIELDS_IO_HPP

#include <json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <type_traits>
#include <vector>

#include "ivol/core.hpp"

namespace ivol {

// Shortest round-trip decimal form, so identical doubles always print the
// same bytes regardless of stream state.
inline std::string format_number(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    if (res.ec != std::errc()) throw numeric_error("format_number: conversion failed");
    return std::string(buf, res.ptr);
}

// Comma-separated field emission: a config-hash comment line, a header row,
// then one row per call.  '.' decimal, '\n' line ends, UTF-8 throughout.
class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::string& config_hash,
              const std::vector<std::string>& header) {
        out_.open(path, std::ios::binary);
        if (!out_) throw std::invalid_argument("CsvWriter: cannot open " + path.string());
        out_ << "# config_hash=" << config_hash << "\n";
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (i) out_ << ",";
            out_ << header[i];
        }
        out_ << "\n";
    }

    template <typename... Cells>
    void row(const Cells&... cells) {
        bool first = true;
        (write_cell(cells, first), ...);
        out_ << "\n";
    }

private:
    template <typename T>
    void write_cell(const T& v, bool& first) {
        if (!first) out_ << ",";
        first = false;
        if constexpr (std::is_floating_point_v<T>)
            out_ << format_number(v);
        else
            out_ << v;
    }

    std::ofstream out_;
};

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& doc) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::invalid_argument("write_json_file: cannot open " + path.string());
    out << doc.dump(2) << "\n";
}

} // namespace ivol

#endif
