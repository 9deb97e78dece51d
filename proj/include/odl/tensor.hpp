#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace odl::numerics {

using Shape = std::vector<int>;

int shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major 64-bit real tensor. Copies are shallow: they share storage
// and gradient, which is what lets tape closures observe accumulated grads.
// Complex grids bridge to tensors as two real channels.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_vector(Shape shape, std::vector<double> values,
                              bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int size(int dim) const { return impl_->shape[static_cast<std::size_t>(dim)]; }
    int numel() const { return static_cast<int>(impl_->data.size()); }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    std::vector<double>& values() { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }

    // gradient buffer, zero-allocated on first access; same shape as data
    double* grad();
    const double* grad() const;
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    void zero_grad();

    double item() const;  // scalar tensors only

    Tensor clone() const;  // deep copy of values (fresh grad state)

    void check_finite(const char* what) const;  // throws on NaN/Inf

private:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;  // empty until first use
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

}  // namespace odl::numerics
