#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace iwm {

enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

inline const char* dtype_name(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major tensor with value semantics. Exactly one of the two
// storage vectors is populated, matching dtype().
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, Dtype dt = Dtype::F32);
    static Tensor full(Shape shape, double value, Dtype dt = Dtype::F32);
    static Tensor scalar(double value, Dtype dt = Dtype::F32);
    static Tensor from_f32(Shape shape, std::vector<float> data);
    static Tensor from_f64(Shape shape, std::vector<double> data);

    const Shape& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    size_t ndim() const { return shape_.size(); }
    int64_t numel() const { return numel_; }
    Dtype dtype() const { return dtype_; }
    bool defined() const { return numel_ > 0 || !shape_.empty() || !f_.empty() || !d_.empty(); }

    float* f32();
    const float* f32() const;
    double* f64();
    const double* f64() const;

    // dtype-agnostic element access; slow, for tests/oracles/serialization
    double at(int64_t i) const;
    void set(int64_t i, double v);

    Tensor to(Dtype dt) const;
    Tensor reshaped(Shape s) const;

    bool all_finite() const;
    uint64_t content_hash() const;

    void fill_(double v);

private:
    Shape shape_;
    int64_t numel_ = 0;
    Dtype dtype_ = Dtype::F32;
    std::vector<float> f_;
    std::vector<double> d_;
};

struct TensorError : std::runtime_error {
    explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace iwm
