#include "odl/tensor.hpp"

#include <cmath>

namespace odl::numerics {

int shape_numel(const Shape& s) {
    int n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    for (int d : shape)
        if (d <= 0) throw std::invalid_argument("tensor dim must be positive: " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(static_cast<std::size_t>(shape_numel(t.impl_->shape)), value);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values, bool requires_grad) {
    if (static_cast<int>(values.size()) != shape_numel(shape))
        throw std::invalid_argument("value count does not match shape " + shape_str(shape));
    Tensor t = zeros(shape, requires_grad);
    t.impl_->data = std::move(values);
    return t;
}

double* Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad.data();
}

const double* Tensor::grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad.data();
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
}

double Tensor::item() const {
    if (numel() != 1) throw std::logic_error("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
}

Tensor Tensor::clone() const {
    Tensor t = zeros(impl_->shape, impl_->requires_grad);
    t.impl_->data = impl_->data;
    return t;
}

void Tensor::check_finite(const char* what) const {
    for (double v : impl_->data)
        if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value in ") + what);
}

}  // namespace odl::numerics
