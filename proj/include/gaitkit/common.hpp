#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gaitkit {

using Shape = std::vector<std::size_t>;

// Base class for everything this library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dimension / rank violations. Messages name the offending axis.
struct ShapeError : Error {
    using Error::Error;
};

// On-disk format violations (bad magic, truncation, extent mismatch).
struct FormatError : Error {
    using Error::Error;
};

// Invalid or inconsistent configuration values.
struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) {
        strides[i - 1] = strides[i] * shape[i];
    }
    return strides;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// Number of worker threads used by the heavy kernels. 0 means "hardware
// default". Resolved once per call site; safe to change between operations.
int& thread_count_ref();

inline void set_thread_count(int n) { thread_count_ref() = n < 0 ? 0 : n; }
inline int thread_count() { return thread_count_ref(); }

inline int& thread_count_ref() {
    static int count = 0;
    return count;
}

}  // namespace gaitkit
