#include "odl/tape.hpp"

#include <stdexcept>

namespace odl::numerics {

void Tape::backward(Tensor& loss) {
    if (loss.numel() != 1)
        throw std::logic_error("backward requires a scalar loss, got " + shape_str(loss.shape()));
    if (spent_)
        throw std::logic_error("backward called twice on the same recorded graph");
    loss.grad()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    spent_ = true;
}

}  // namespace odl::numerics
