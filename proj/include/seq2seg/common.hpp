#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace seq2seg {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched or invalid tensor shapes. Messages always name the shapes involved.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// A NaN or Inf was produced; raised at the op that produced it.
struct NumericsError : Error {
    explicit NumericsError(const std::string& msg) : Error(msg) {}
};

// File format / filesystem problems.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Bad config file contents or CLI values.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

using Shape = std::vector<int>;

inline std::string shape_to_string(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

// Number of worker threads the process may use. Reads SEQ2SEG_THREADS once;
// unset or invalid means 1.
int worker_thread_count();

}  // namespace seq2seg
