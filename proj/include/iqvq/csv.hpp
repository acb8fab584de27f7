#pragma once

#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace iqvq {

/// Minimal CSV writer: one header row, then value rows. Values are written
/// with enough digits to round-trip doubles.
class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header) : out_(path) {
        if (!out_) throw std::runtime_error("CsvWriter: cannot open " + path);
        for (std::size_t i = 0; i < header.size(); ++i)
            out_ << header[i] << (i + 1 == header.size() ? '\n' : ',');
        columns_ = header.size();
    }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != columns_) throw std::logic_error("CsvWriter: column count mismatch");
        for (std::size_t i = 0; i < cells.size(); ++i)
            out_ << cells[i] << (i + 1 == cells.size() ? '\n' : ',');
    }

    static std::string num(double v) {
        std::ostringstream ss;
        ss << std::setprecision(17) << v;
        return ss.str();
    }
    static std::string num(int v) { return std::to_string(v); }
    static std::string num(std::uint64_t v) { return std::to_string(v); }

private:
    std::ofstream out_;
    std::size_t columns_ = 0;
};

/// Reads a CSV with a header row into column-addressable string cells.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        throw std::out_of_range("CsvTable: no column named " + name);
    }

    static CsvTable read(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("CsvTable: cannot open " + path);
        CsvTable t;
        std::string line;
        bool first = true;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::vector<std::string> cells;
            std::stringstream ss(line);
            std::string cell;
            while (std::getline(ss, cell, ',')) cells.push_back(cell);
            if (first) {
                t.header = std::move(cells);
                first = false;
            } else {
                t.rows.push_back(std::move(cells));
            }
        }
        return t;
    }
};

}  // namespace iqvq
