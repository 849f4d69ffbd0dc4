#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace yoga {

// Structured dimension error; message names the offending axis.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// API misuse (e.g. backward before forward).
struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

struct ValueError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Weight/tensor file problems; message names the tensor involved.
struct LoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense rank-4 layout: (batch, channel, height, width), row-major.
struct Shape {
    int64_t n = 0;
    int64_t c = 0;
    int64_t h = 0;
    int64_t w = 0;

    int64_t numel() const { return n * c * h * w; }

    bool operator==(const Shape& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::ostringstream os;
        os << "(" << n << "," << c << "," << h << "," << w << ")";
        return os.str();
    }
};

inline void check_axis(int64_t got, int64_t want, const char* axis, const char* op) {
    if (got != want) {
        std::ostringstream os;
        os << op << ": axis '" << axis << "' mismatch, got " << got << ", expected " << want;
        throw ShapeError(os.str());
    }
}

template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(static_cast<size_t>(s.numel()), fill) {
        if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
            throw ShapeError("Tensor: negative dimension in " + s.str());
        }
    }

    Tensor(Shape s, std::vector<T> values) : shape(s), data(std::move(values)) {
        if (static_cast<int64_t>(data.size()) != s.numel()) {
            throw ShapeError("Tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + s.str());
        }
    }

    static Tensor zeros(Shape s) { return Tensor(s, T(0)); }
    static Tensor full(Shape s, T v) { return Tensor(s, v); }

    Shape shape{};
    std::vector<T> data;
    std::vector<T> grad;  // empty unless gradients requested; same length as data when present

    int64_t numel() const { return shape.numel(); }
    bool empty() const { return data.empty(); }

    T& at(int64_t n, int64_t c, int64_t h, int64_t w) {
        return data[static_cast<size_t>(index(n, c, h, w))];
    }
    const T& at(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return data[static_cast<size_t>(index(n, c, h, w))];
    }

    int64_t index(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return ((n * shape.c + c) * shape.h + h) * shape.w + w;
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }
    T& grad_at(int64_t n, int64_t c, int64_t h, int64_t w) {
        return grad[static_cast<size_t>(index(n, c, h, w))];
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// --- tensor dump format -----------------------------------------------------
//
// Binary: magic "GTEN", u32 version, 4xu32 shape (n,c,h,w), f32 payload,
// little-endian. The text variant is for small tensors and debugging.

namespace detail {
inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline uint32_t get_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw LoadError(std::string("gten: unexpected end of file while reading ") + what);
    }
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}
inline void put_f32(std::ostream& os, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(os, u);
}
inline float get_f32(std::istream& is, const char* what) {
    uint32_t u = get_u32(is, what);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}
}  // namespace detail

inline constexpr uint32_t kGtenVersion = 1;

template <typename T>
void write_gten(std::ostream& os, const Tensor<T>& t) {
    os.write("GTEN", 4);
    detail::put_u32(os, kGtenVersion);
    detail::put_u32(os, static_cast<uint32_t>(t.shape.n));
    detail::put_u32(os, static_cast<uint32_t>(t.shape.c));
    detail::put_u32(os, static_cast<uint32_t>(t.shape.h));
    detail::put_u32(os, static_cast<uint32_t>(t.shape.w));
    for (T v : t.data) detail::put_f32(os, static_cast<float>(v));
}

template <typename T>
Tensor<T> read_gten(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "GTEN", 4) != 0) {
        throw LoadError("gten: bad magic");
    }
    uint32_t version = detail::get_u32(is, "version");
    if (version != kGtenVersion) {
        throw LoadError("gten: unsupported version " + std::to_string(version));
    }
    Shape s;
    s.n = detail::get_u32(is, "shape.n");
    s.c = detail::get_u32(is, "shape.c");
    s.h = detail::get_u32(is, "shape.h");
    s.w = detail::get_u32(is, "shape.w");
    Tensor<T> t(s);
    for (auto& v : t.data) v = static_cast<T>(detail::get_f32(is, "payload"));
    return t;
}

template <typename T>
void write_gten_text(std::ostream& os, const Tensor<T>& t) {
    os << "GTEN v" << kGtenVersion << " " << t.shape.n << " " << t.shape.c << " " << t.shape.h
       << " " << t.shape.w << "\n";
    os << std::setprecision(9);
    for (int64_t n = 0; n < t.shape.n; ++n)
        for (int64_t c = 0; c < t.shape.c; ++c) {
            os << "# n=" << n << " c=" << c << "\n";
            for (int64_t h = 0; h < t.shape.h; ++h) {
                for (int64_t w = 0; w < t.shape.w; ++w) {
                    if (w) os << " ";
                    os << t.at(n, c, h, w);
                }
                os << "\n";
            }
        }
}

}  // namespace yoga
