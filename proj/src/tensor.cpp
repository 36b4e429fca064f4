#include "iwm/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "iwm/rng.hpp"

namespace iwm {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) {
        if (e <= 0) throw TensorError("non-positive extent in shape " + shape_str(s));
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(Shape shape, Dtype dt) {
    Tensor t;
    t.numel_ = shape_numel(shape);
    t.shape_ = std::move(shape);
    t.dtype_ = dt;
    if (dt == Dtype::F32)
        t.f_.assign(static_cast<size_t>(t.numel_), 0.0f);
    else
        t.d_.assign(static_cast<size_t>(t.numel_), 0.0);
    return t;
}

Tensor Tensor::full(Shape shape, double value, Dtype dt) {
    Tensor t = zeros(std::move(shape), dt);
    t.fill_(value);
    return t;
}

Tensor Tensor::scalar(double value, Dtype dt) { return full({1}, value, dt); }

Tensor Tensor::from_f32(Shape shape, std::vector<float> data) {
    Tensor t;
    t.numel_ = shape_numel(shape);
    if (t.numel_ != static_cast<int64_t>(data.size()))
        throw TensorError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    t.shape_ = std::move(shape);
    t.dtype_ = Dtype::F32;
    t.f_ = std::move(data);
    return t;
}

Tensor Tensor::from_f64(Shape shape, std::vector<double> data) {
    Tensor t;
    t.numel_ = shape_numel(shape);
    if (t.numel_ != static_cast<int64_t>(data.size()))
        throw TensorError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    t.shape_ = std::move(shape);
    t.dtype_ = Dtype::F64;
    t.d_ = std::move(data);
    return t;
}

float* Tensor::f32() {
    if (dtype_ != Dtype::F32) throw TensorError("tensor is not f32");
    return f_.data();
}
const float* Tensor::f32() const {
    if (dtype_ != Dtype::F32) throw TensorError("tensor is not f32");
    return f_.data();
}
double* Tensor::f64() {
    if (dtype_ != Dtype::F64) throw TensorError("tensor is not f64");
    return d_.data();
}
const double* Tensor::f64() const {
    if (dtype_ != Dtype::F64) throw TensorError("tensor is not f64");
    return d_.data();
}

double Tensor::at(int64_t i) const {
    return dtype_ == Dtype::F32 ? static_cast<double>(f_[static_cast<size_t>(i)]) : d_[static_cast<size_t>(i)];
}

void Tensor::set(int64_t i, double v) {
    if (dtype_ == Dtype::F32)
        f_[static_cast<size_t>(i)] = static_cast<float>(v);
    else
        d_[static_cast<size_t>(i)] = v;
}

Tensor Tensor::to(Dtype dt) const {
    if (dt == dtype_) return *this;
    Tensor t = zeros(shape_, dt);
    for (int64_t i = 0; i < numel_; ++i) t.set(i, at(i));
    return t;
}

Tensor Tensor::reshaped(Shape s) const {
    if (shape_numel(s) != numel_)
        throw TensorError("reshape " + shape_str(shape_) + " -> " + shape_str(s) + " changes element count");
    Tensor t = *this;
    t.shape_ = std::move(s);
    return t;
}

bool Tensor::all_finite() const {
    if (dtype_ == Dtype::F32) {
        for (float v : f_)
            if (!std::isfinite(v)) return false;
    } else {
        for (double v : d_)
            if (!std::isfinite(v)) return false;
    }
    return true;
}

uint64_t Tensor::content_hash() const {
    uint64_t h = fnv1a64(shape_.data(), shape_.size() * sizeof(int64_t));
    h = fnv1a64(&dtype_, 1, h);
    if (dtype_ == Dtype::F32) return fnv1a64(f_.data(), f_.size() * sizeof(float), h);
    return fnv1a64(d_.data(), d_.size() * sizeof(double), h);
}

void Tensor::fill_(double v) {
    if (dtype_ == Dtype::F32)
        f_.assign(f_.size(), static_cast<float>(v));
    else
        d_.assign(d_.size(), v);
}

} // namespace iwm
