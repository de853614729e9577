#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace mims {

#ifdef MIMS_REAL64
using real = double;
#else
using real = float;
#endif

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of `real`. The shape is fixed at construction;
// reshape() returns a new Tensor sharing the same buffer.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<real> values);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, real value);
    static Tensor ones(Shape shape) { return full(std::move(shape), real(1)); }
    static Tensor scalar(real value) { return full({1}, value); }

    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return data_ ? data_->size() : 0; }
    bool empty() const { return !data_; }

    real* data() { return data_->data(); }
    const real* data() const { return data_->data(); }
    real& at(std::size_t i) { return (*data_)[i]; }
    real at(std::size_t i) const { return (*data_)[i]; }

    Tensor reshape(Shape shape) const; // shares the buffer
    Tensor clone() const;
    void fill(real value);

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

private:
    Shape shape_;
    std::shared_ptr<std::vector<real>> data_;
};

// Raw Tensor File: magic "RTF1", u8 ndim, ndim little-endian u32 extents,
// row-major little-endian float32 payload. Always float32 on disk.
void save_rtf(const Tensor& t, std::ostream& out);
Tensor load_rtf(std::istream& in, const std::string& name);
void save_rtf_file(const Tensor& t, const std::string& path);
Tensor load_rtf_file(const std::string& path);
std::size_t rtf_byte_size(const Tensor& t);

} // namespace mims
