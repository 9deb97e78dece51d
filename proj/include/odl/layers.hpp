#pragma once

#include <string>
#include <utility>
#include <vector>

#include "odl/rng.hpp"
#include "odl/tape.hpp"
#include "odl/tensor.hpp"

namespace odl::numerics {

// Differentiable ops. Inputs/outputs are value tensors; each op records its
// backward closure on the tape when recording is enabled and any input
// requires a gradient. Shapes are strict, there is no broadcasting.

// input [Cin,H,W] or [B,Cin,H,W]; kernel [kh,kw,Cin,Cout]; bias [Cout]
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel,
              const Tensor& bias, int stride, int pad);

// input [B,C,H,W]; per-channel affine; train mode normalizes with batch
// statistics (biased variance, eps inside the sqrt) and updates running stats
// with the given momentum; eval mode normalizes with the running stats.
Tensor batchnorm2d(Tape& tape, const Tensor& input, const Tensor& gamma,
                   const Tensor& beta, Tensor& running_mean, Tensor& running_var,
                   bool train, double eps = 1e-5, double momentum = 0.1);

Tensor relu(Tape& tape, const Tensor& input);     // subgradient at 0 is 0
Tensor sigmoid(Tape& tape, const Tensor& input);
Tensor tanh_act(Tape& tape, const Tensor& input);

// [C,H,W] or [B,C,H,W]; each pixel replicated scale x scale
Tensor upsample_nearest(Tape& tape, const Tensor& input, int scale);

// input [Din] or [B,Din]; weight [Din,Dout]; bias [Dout]
Tensor linear(Tape& tape, const Tensor& input, const Tensor& weight,
              const Tensor& bias);

// [C1,H,W] + [C2,H,W] -> [C1+C2,H,W]; batched variant along axis 1
Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);  // same shape
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);  // Hadamard
Tensor scale(Tape& tape, const Tensor& x, double c);
Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape);

// x [B,C,H,W] scaled per channel by gate [B,C]
Tensor scale_channels(Tape& tape, const Tensor& x, const Tensor& gate);

// Second-order channel descriptor: per sample, spatially mean-centered
// features Fb (C x M, M = H*W) give the covariance Sigma = Fb*Fb^T / M and
// the descriptor z_c = mean over d of Sigma(c,d). Input [B,C,H,W] -> [B,C].
Tensor soca_descriptor(Tape& tape, const Tensor& x);

// covariance of one sample [C,H,W] -> [C,C]; plain helper, not recorded
Tensor channel_covariance(const Tensor& x);

// mean over the leading batch dim of per-sample entrywise L1 norms; inputs of
// rank < 2 are treated as a single sample
Tensor l1_loss(Tape& tape, const Tensor& pred, const Tensor& target);

// mean binary cross entropy of probabilities (already sigmoid outputs)
// against a constant 0/1 label; probs clamped to [1e-7, 1-1e-7] before log
Tensor bce_loss(Tape& tape, const Tensor& prob, double label);

// ---------------------------------------------------------------------------
// Parameterized layers used by the two networks.

struct Conv2d {
    Tensor kernel;  // [kh,kw,Cin,Cout]
    Tensor bias;    // [Cout]
    int stride = 1;
    int pad = 1;

    Conv2d() = default;
    Conv2d(int kh, int kw, int cin, int cout, int stride, int pad, Rng& rng);
    Tensor operator()(Tape& tape, const Tensor& x) const {
        return conv2d(tape, x, kernel, bias, stride, pad);
    }
};

struct BatchNorm2d {
    Tensor gamma, beta;
    Tensor running_mean, running_var;

    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels);
    Tensor operator()(Tape& tape, const Tensor& x, bool train) {
        return batchnorm2d(tape, x, gamma, beta, running_mean, running_var, train);
    }
};

struct LinearLayer {
    Tensor weight;  // [Din,Dout]
    Tensor bias;    // [Dout]

    LinearLayer() = default;
    LinearLayer(int din, int dout, Rng& rng);
    Tensor operator()(Tape& tape, const Tensor& x) const {
        return linear(tape, x, weight, bias);
    }
};

// Named parameter/buffer collection for optimizers and checkpoints. Buffers
// are persistent state that is not optimized (running stats, data scales).
struct ParamRegistry {
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<std::pair<std::string, Tensor>> buffers;

    void param(const std::string& name, const Tensor& t) { params.emplace_back(name, t); }
    void buffer(const std::string& name, const Tensor& t) { buffers.emplace_back(name, t); }

    std::vector<Tensor> param_tensors() const {
        std::vector<Tensor> out;
        out.reserve(params.size());
        for (auto& [n, t] : params) out.push_back(t);
        return out;
    }
};

}  // namespace odl::numerics
