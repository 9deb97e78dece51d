#pragma once

#include <functional>
#include <vector>

#include "odl/tensor.hpp"

namespace odl::numerics {

// Reverse-mode tape. Ops append backward closures during the forward pass and
// backward() replays them in exact reverse order. Gradients accumulate
// additively until tensors are explicitly zeroed. One backward per recorded
// graph: a second backward without new forward work is an error.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    void set_recording(bool r) { recording_ = r; }

    void record(std::function<void()> backward_fn) {
        ops_.push_back(std::move(backward_fn));
    }

    std::size_t size() const { return ops_.size(); }

    void backward(Tensor& loss);

    // discard the recorded graph and allow a fresh forward/backward round
    void clear() {
        ops_.clear();
        spent_ = false;
    }

private:
    std::vector<std::function<void()>> ops_;
    bool recording_ = true;
    bool spent_ = false;
};

}  // namespace odl::numerics
