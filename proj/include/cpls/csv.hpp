#pragma once

#include "types.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <locale>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

namespace cpls {

/// 17 significant digits, '.' decimal separator whatever the global locale.
inline std::string format_real(double v)
{
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::ostringstream os;
    os.imbue(std::locale::classic());
    os << std::setprecision(17) << v;
    return os.str();
}

/// In-memory CSV table: header row plus data rows, written in insertion order.
class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

    class Row {
    public:
        Row& operator<<(const std::string& s)
        {
            cells_.push_back(s);
            return *this;
        }
        Row& operator<<(const char* s) { return *this << std::string(s); }
        Row& operator<<(bool b) { return *this << std::string(b ? "true" : "false"); }
        Row& operator<<(double v) { return *this << format_real(v); }
        template <class T>
            requires std::is_integral_v<T> && (!std::is_same_v<T, bool>)
        Row& operator<<(T v)
        {
            return *this << std::to_string(v);
        }

    private:
        friend class CsvTable;
        std::vector<std::string> cells_;
    };

    void add(const Row& row)
    {
        detail::require(row.cells_.size() == header_.size(), "csv: row width must match the header");
        rows_.push_back(row.cells_);
    }

    std::size_t size() const noexcept { return rows_.size(); }

    std::string str() const
    {
        std::string out;
        auto line = [&](const std::vector<std::string>& cells) {
            for (std::size_t i = 0; i < cells.size(); ++i) {
                if (i) out += ',';
                out += quote(cells[i]);
            }
            out += '\n';
        };
        line(header_);
        for (const auto& r : rows_) line(r);
        return out;
    }

    void write(const std::string& path) const
    {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open " + path + " for writing");
        f << str();
        if (!f) throw std::runtime_error("write to " + path + " failed");
    }

private:
    static std::string quote(const std::string& s)
    {
        if (s.find_first_of(",\"\n") == std::string::npos) return s;
        std::string q = "\"";
        for (char c : s) {
            if (c == '"') q += '"';
            q += c;
        }
        return q + "\"";
    }

    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

} // namespace cpls
