#pragma once

#include <charconv>
#include <ostream>
#include <string>
#include <vector>

namespace smfg {

// 17 significant digits: enough to round-trip any double.
inline std::string num17(double x) {
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

class CsvWriter {
public:
    explicit CsvWriter(std::ostream& os) : os_(os) {}

    void header(const std::vector<std::string>& cols) {
        for (std::size_t i = 0; i < cols.size(); ++i) os_ << (i ? "," : "") << cols[i];
        os_ << '\n';
    }
    CsvWriter& operator<<(double x) {
        sep();
        os_ << num17(x);
        return *this;
    }
    CsvWriter& operator<<(long long x) {
        sep();
        os_ << x;
        return *this;
    }
    CsvWriter& operator<<(int x) { return *this << static_cast<long long>(x); }
    CsvWriter& operator<<(std::size_t x) { return *this << static_cast<long long>(x); }
    CsvWriter& operator<<(const std::string& s) {
        sep();
        os_ << s;
        return *this;
    }
    void end_row() {
        os_ << '\n';
        first_ = true;
    }

private:
    void sep() {
        if (!first_) os_ << ',';
        first_ = false;
    }
    std::ostream& os_;
    bool first_ = true;
};

}  // namespace smfg
