#include "cllab/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace cllab {

size_t dtype_size(DType dt) { return dt == DType::F32 ? 4 : 8; }

const char* dtype_name(DType dt) { return dt == DType::F32 ? "float32" : "float64"; }

DType dtype_from_name(const std::string& s) {
    if (s == "float32") return DType::F32;
    if (s == "float64") return DType::F64;
    throw FormatError("unknown dtype tag '" + s + "'");
}

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_to_string(shape));
        n *= d;
    }
    return n;
}

std::string shape_to_string(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<int64_t> shape, DType dt) : shape_(std::move(shape)), dtype_(dt) {
    numel_ = shape_numel(shape_);
    if (dt == DType::F32) {
        f32_.assign(static_cast<size_t>(numel_), 0.0f);
    } else {
        f64_.assign(static_cast<size_t>(numel_), 0.0);
    }
}

Tensor Tensor::zeros(std::vector<int64_t> shape, DType dt) { return Tensor(std::move(shape), dt); }

Tensor Tensor::full(std::vector<int64_t> shape, double v, DType dt) {
    Tensor t(std::move(shape), dt);
    if (dt == DType::F32) {
        std::fill(t.f32_.begin(), t.f32_.end(), static_cast<float>(v));
    } else {
        std::fill(t.f64_.begin(), t.f64_.end(), v);
    }
    return t;
}

Tensor Tensor::from_f32(std::vector<int64_t> shape, std::vector<float> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.numel_ = shape_numel(t.shape_);
    if (static_cast<int64_t>(data.size()) != t.numel_)
        throw ShapeError("from_f32: data length does not match shape " + shape_to_string(t.shape_));
    t.dtype_ = DType::F32;
    t.f32_ = std::move(data);
    return t;
}

Tensor Tensor::from_f64(std::vector<int64_t> shape, std::vector<double> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.numel_ = shape_numel(t.shape_);
    if (static_cast<int64_t>(data.size()) != t.numel_)
        throw ShapeError("from_f64: data length does not match shape " + shape_to_string(t.shape_));
    t.dtype_ = DType::F64;
    t.f64_ = std::move(data);
    return t;
}

Tensor Tensor::scalar(double v, DType dt) { return full({1}, v, dt); }

int64_t Tensor::dim(int64_t i) const {
    int64_t r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw ShapeError("dim index out of range for shape " + shape_str());
    return shape_[static_cast<size_t>(i)];
}

void Tensor::check_dtype(DType dt) const {
    if (dtype_ != dt) throw ContractError("tensor dtype mismatch");
}

float* Tensor::f32() {
    check_dtype(DType::F32);
    return f32_.data();
}
const float* Tensor::f32() const {
    check_dtype(DType::F32);
    return f32_.data();
}
double* Tensor::f64() {
    check_dtype(DType::F64);
    return f64_.data();
}
const double* Tensor::f64() const {
    check_dtype(DType::F64);
    return f64_.data();
}

double Tensor::get(int64_t flat) const {
    return dtype_ == DType::F32 ? static_cast<double>(f32_[static_cast<size_t>(flat)])
                                : f64_[static_cast<size_t>(flat)];
}

void Tensor::set(int64_t flat, double v) {
    if (dtype_ == DType::F32) {
        f32_[static_cast<size_t>(flat)] = static_cast<float>(v);
    } else {
        f64_[static_cast<size_t>(flat)] = v;
    }
}

Tensor Tensor::to(DType dt) const {
    if (dt == dtype_) return *this;
    Tensor out(shape_, dt);
    for (int64_t i = 0; i < numel_; ++i) out.set(i, get(i));
    return out;
}

Tensor Tensor::reshaped(std::vector<int64_t> new_shape) const {
    if (shape_numel(new_shape) != numel_)
        throw ShapeError("reshape " + shape_str() + " -> " + shape_to_string(new_shape) +
                         " changes element count");
    Tensor out = *this;
    out.shape_ = std::move(new_shape);
    return out;
}

const std::byte* Tensor::raw() const {
    return dtype_ == DType::F32 ? reinterpret_cast<const std::byte*>(f32_.data())
                                : reinterpret_cast<const std::byte*>(f64_.data());
}

std::byte* Tensor::raw() {
    return dtype_ == DType::F32 ? reinterpret_cast<std::byte*>(f32_.data())
                                : reinterpret_cast<std::byte*>(f64_.data());
}

bool Tensor::bits_equal(const Tensor& o) const {
    if (dtype_ != o.dtype_ || shape_ != o.shape_) return false;
    return std::memcmp(raw(), o.raw(), byte_size()) == 0;
}

bool Tensor::all_finite() const {
    if (dtype_ == DType::F32) {
        for (float v : f32_)
            if (!std::isfinite(v)) return false;
    } else {
        for (double v : f64_)
            if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

}  // namespace cllab
