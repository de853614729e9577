#include "mims/tensor.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mims {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

static void check_shape(const Shape& shape) {
    for (int d : shape) {
        if (d <= 0)
            throw std::invalid_argument("tensor: non-positive extent in shape " + shape_str(shape));
    }
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = std::make_shared<std::vector<real>>(shape_numel(shape_), real(0));
}

Tensor::Tensor(Shape shape, std::vector<real> values) : shape_(std::move(shape)) {
    check_shape(shape_);
    if (shape_numel(shape_) != values.size())
        throw std::invalid_argument("tensor: shape " + shape_str(shape_) + " does not match " +
                                    std::to_string(values.size()) + " values");
    data_ = std::make_shared<std::vector<real>>(std::move(values));
}

Tensor Tensor::full(Shape shape, real value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

Tensor Tensor::reshape(Shape shape) const {
    check_shape(shape);
    if (shape_numel(shape) != size())
        throw std::invalid_argument("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    if (data_) t.data_ = std::make_shared<std::vector<real>>(*data_);
    return t;
}

void Tensor::fill(real value) {
    for (real& v : *data_) v = value;
}

namespace {

void put_u32_le(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32_le(const unsigned char* b) {
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace

std::size_t rtf_byte_size(const Tensor& t) {
    return 4 + 1 + 4 * static_cast<std::size_t>(t.ndim()) + 4 * t.size();
}

void save_rtf(const Tensor& t, std::ostream& out) {
    out.write("RTF1", 4);
    unsigned char nd = static_cast<unsigned char>(t.ndim());
    out.write(reinterpret_cast<const char*>(&nd), 1);
    for (int i = 0; i < t.ndim(); ++i) put_u32_le(out, static_cast<std::uint32_t>(t.dim(i)));
    for (std::size_t i = 0; i < t.size(); ++i) {
        float f = static_cast<float>(t.at(i));
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32_le(out, bits);
    }
}

Tensor load_rtf(std::istream& in, const std::string& name) {
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "RTF1", 4) != 0)
        throw std::runtime_error("rtf: bad magic in " + name);
    unsigned char nd = 0;
    in.read(reinterpret_cast<char*>(&nd), 1);
    if (in.gcount() != 1) throw std::runtime_error("rtf: truncated header in " + name);
    Shape shape(nd);
    for (int i = 0; i < nd; ++i) {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        if (in.gcount() != 4) throw std::runtime_error("rtf: truncated header in " + name);
        std::uint32_t e = get_u32_le(b);
        if (e == 0) throw std::runtime_error("rtf: zero extent in " + name);
        shape[static_cast<std::size_t>(i)] = static_cast<int>(e);
    }
    std::size_t n = shape_numel(shape);
    std::vector<real> values(n);
    std::vector<unsigned char> raw(4 * n);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
        std::size_t expected = 4 + 1 + 4 * static_cast<std::size_t>(nd) + 4 * n;
        throw std::runtime_error("rtf: truncated payload in " + name + ", expected " +
                                 std::to_string(expected) + " bytes total");
    }
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits = get_u32_le(&raw[4 * i]);
        float f;
        std::memcpy(&f, &bits, 4);
        values[i] = static_cast<real>(f);
    }
    return Tensor(std::move(shape), std::move(values));
}

void save_rtf_file(const Tensor& t, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("rtf: cannot open " + path + " for writing");
    save_rtf(t, out);
    if (!out) throw std::runtime_error("rtf: write failed for " + path);
}

Tensor load_rtf_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("rtf: cannot open " + path);
    return load_rtf(in, path);
}

} // namespace mims
