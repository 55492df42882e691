#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "cllab/errors.hpp"

namespace cllab {

enum class DType { F32, F64 };

size_t dtype_size(DType dt);
const char* dtype_name(DType dt);          // "float32" / "float64"
DType dtype_from_name(const std::string&); // throws FormatError on unknown tag

/// Dense row-major tensor holding float32 or float64 scalars.
/// Value semantics; copies are deep.
class Tensor {
  public:
    Tensor() = default;
    Tensor(std::vector<int64_t> shape, DType dt);  // zero-filled

    static Tensor zeros(std::vector<int64_t> shape, DType dt);
    static Tensor full(std::vector<int64_t> shape, double v, DType dt);
    static Tensor from_f32(std::vector<int64_t> shape, std::vector<float> data);
    static Tensor from_f64(std::vector<int64_t> shape, std::vector<double> data);
    static Tensor scalar(double v, DType dt);

    bool defined() const { return numel_ > 0; }
    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t i) const;  // supports negative indices
    int64_t numel() const { return numel_; }
    DType dtype() const { return dtype_; }

    float* f32();
    const float* f32() const;
    double* f64();
    const double* f64() const;

    /// Converting scalar access; slow path for tests and glue code.
    double get(int64_t flat) const;
    void set(int64_t flat, double v);

    Tensor to(DType dt) const;
    Tensor reshaped(std::vector<int64_t> new_shape) const;

    const std::byte* raw() const;
    std::byte* raw();
    size_t byte_size() const { return static_cast<size_t>(numel_) * dtype_size(dtype_); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool bits_equal(const Tensor& o) const;
    bool all_finite() const;

    std::string shape_str() const;

  private:
    std::vector<int64_t> shape_;
    int64_t numel_ = 0;
    DType dtype_ = DType::F32;
    std::vector<float> f32_;
    std::vector<double> f64_;

    void check_dtype(DType dt) const;
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_to_string(const std::vector<int64_t>& shape);

}  // namespace cllab
