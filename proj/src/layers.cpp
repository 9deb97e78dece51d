#include "odl/layers.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace odl::numerics {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

bool wants_grad(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape.recording()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

// Fill the im2col matrix (M x Kd) for one sample. Column index is
// (ky*kw + kx)*Cin + ci, matching the kernel's [kh,kw,Cin,Cout] layout so the
// kernel reshapes to a (Kd x Cout) matrix without copying.
void im2col(const double* x, int cin, int h, int w, int kh, int kw, int stride,
            int pad, int ho, int wo, RowMat& cols) {
    for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
            int m = oy * wo + ox;
            double* row = cols.data() + static_cast<std::ptrdiff_t>(m) * cols.cols();
            for (int ky = 0; ky < kh; ++ky) {
                int iy = oy * stride - pad + ky;
                for (int kx = 0; kx < kw; ++kx) {
                    int ix = ox * stride - pad + kx;
                    double* dst = row + (ky * kw + kx) * cin;
                    if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                        std::fill(dst, dst + cin, 0.0);
                    } else {
                        for (int ci = 0; ci < cin; ++ci)
                            dst[ci] = x[(static_cast<std::ptrdiff_t>(ci) * h + iy) * w + ix];
                    }
                }
            }
        }
    }
}

// Scatter-add the column-space gradient (M x Kd) back into one sample's input
// gradient; the exact adjoint of im2col.
void col2im_add(const RowMat& dcols, int cin, int h, int w, int kh, int kw,
                int stride, int pad, int ho, int wo, double* dx) {
    for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
            int m = oy * wo + ox;
            const double* row = dcols.data() + static_cast<std::ptrdiff_t>(m) * dcols.cols();
            for (int ky = 0; ky < kh; ++ky) {
                int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                    int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= w) continue;
                    const double* src = row + (ky * kw + kx) * cin;
                    for (int ci = 0; ci < cin; ++ci)
                        dx[(static_cast<std::ptrdiff_t>(ci) * h + iy) * w + ix] += src[ci];
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel,
              const Tensor& bias, int stride, int pad) {
    if (kernel.rank() != 4) throw std::invalid_argument("conv2d: kernel must be [kh,kw,Cin,Cout]");
    if (input.rank() != 3 && input.rank() != 4)
        throw std::invalid_argument("conv2d: input must be [Cin,H,W] or [B,Cin,H,W]");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");

    const bool batched = input.rank() == 4;
    const int b = batched ? input.size(0) : 1;
    const int cin = input.size(batched ? 1 : 0);
    const int h = input.size(batched ? 2 : 1);
    const int w = input.size(batched ? 3 : 2);
    const int kh = kernel.size(0), kw = kernel.size(1);
    const int cout = kernel.size(3);
    if (kernel.size(2) != cin)
        throw std::invalid_argument("conv2d: input channels " + std::to_string(cin) +
                                    " do not match kernel " + std::to_string(kernel.size(2)));
    if (bias.rank() != 1 || bias.size(0) != cout)
        throw std::invalid_argument("conv2d: bias must be [Cout]");

    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (w + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: non-positive output dims");

    Shape out_shape = batched ? Shape{b, cout, ho, wo} : Shape{cout, ho, wo};
    Tensor out = Tensor::zeros(out_shape);

    const int m = ho * wo;
    const int kd = kh * kw * cin;
    const std::ptrdiff_t in_stride = static_cast<std::ptrdiff_t>(cin) * h * w;
    const std::ptrdiff_t out_stride = static_cast<std::ptrdiff_t>(cout) * ho * wo;

    CMapRM wmat(kernel.data(), kd, cout);
    RowMat cols(m, kd), omat(m, cout);
    for (int bi = 0; bi < b; ++bi) {
        im2col(input.data() + bi * in_stride, cin, h, w, kh, kw, stride, pad, ho, wo, cols);
        omat.noalias() = cols * wmat;
        double* y = out.data() + bi * out_stride;
        for (int co = 0; co < cout; ++co) {
            const double bv = bias.data()[co];
            for (int i = 0; i < m; ++i) y[static_cast<std::ptrdiff_t>(co) * m + i] = omat(i, co) + bv;
        }
    }

    if (wants_grad(tape, {&input, &kernel, &bias})) {
        out.set_requires_grad(true);
        Tensor in_c = input, ker_c = kernel, bias_c = bias, out_c = out;
        tape.record([=]() mutable {
            const double* gy = out_c.grad();
            CMapRM wm(ker_c.data(), kd, cout);
            RowMat cols_b(m, kd), gmat(m, cout), dcols(m, kd);
            for (int bi = 0; bi < b; ++bi) {
                for (int co = 0; co < cout; ++co)
                    for (int i = 0; i < m; ++i)
                        gmat(i, co) = gy[bi * out_stride + static_cast<std::ptrdiff_t>(co) * m + i];
                if (ker_c.requires_grad() || bias_c.requires_grad())
                    im2col(in_c.data() + bi * in_stride, cin, h, w, kh, kw, stride, pad, ho, wo, cols_b);
                if (ker_c.requires_grad()) {
                    MapRM dwm(ker_c.grad(), kd, cout);
                    dwm.noalias() += cols_b.transpose() * gmat;
                }
                if (bias_c.requires_grad()) {
                    double* db = bias_c.grad();
                    for (int co = 0; co < cout; ++co) db[co] += gmat.col(co).sum();
                }
                if (in_c.requires_grad()) {
                    dcols.noalias() = gmat * wm.transpose();
                    col2im_add(dcols, cin, h, w, kh, kw, stride, pad, ho, wo,
                               in_c.grad() + bi * in_stride);
                }
            }
        });
    }
    return out;
}

Tensor batchnorm2d(Tape& tape, const Tensor& input, const Tensor& gamma,
                   const Tensor& beta, Tensor& running_mean, Tensor& running_var,
                   bool train, double eps, double momentum) {
    if (input.rank() != 4) throw std::invalid_argument("batchnorm2d: input must be [B,C,H,W]");
    const int b = input.size(0), c = input.size(1), h = input.size(2), w = input.size(3);
    if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
        running_var.numel() != c)
        throw std::invalid_argument("batchnorm2d: per-channel parameter size mismatch");
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(b) * h * w;
    if (train && n < 2)
        throw std::invalid_argument("batchnorm2d: train mode needs at least 2 values per channel");

    const std::ptrdiff_t hw = static_cast<std::ptrdiff_t>(h) * w;
    const std::ptrdiff_t cs = static_cast<std::ptrdiff_t>(c) * hw;

    std::vector<double> mean(c), inv_std(c);
    if (train) {
        for (int ci = 0; ci < c; ++ci) {
            double s = 0.0;
            for (int bi = 0; bi < b; ++bi) {
                const double* x = input.data() + bi * cs + ci * hw;
                for (std::ptrdiff_t i = 0; i < hw; ++i) s += x[i];
            }
            mean[ci] = s / static_cast<double>(n);
        }
        for (int ci = 0; ci < c; ++ci) {
            double s = 0.0;
            for (int bi = 0; bi < b; ++bi) {
                const double* x = input.data() + bi * cs + ci * hw;
                for (std::ptrdiff_t i = 0; i < hw; ++i) {
                    const double d = x[i] - mean[ci];
                    s += d * d;
                }
            }
            const double var = s / static_cast<double>(n);
            inv_std[ci] = 1.0 / std::sqrt(var + eps);
            running_mean.data()[ci] = (1.0 - momentum) * running_mean.data()[ci] + momentum * mean[ci];
            running_var.data()[ci] = (1.0 - momentum) * running_var.data()[ci] + momentum * var;
        }
    } else {
        for (int ci = 0; ci < c; ++ci) {
            mean[ci] = running_mean.data()[ci];
            inv_std[ci] = 1.0 / std::sqrt(running_var.data()[ci] + eps);
        }
    }

    Tensor out = Tensor::zeros(input.shape());
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(b) * cs);
    for (int bi = 0; bi < b; ++bi) {
        for (int ci = 0; ci < c; ++ci) {
            const double* x = input.data() + bi * cs + ci * hw;
            double* y = out.data() + bi * cs + ci * hw;
            double* xh = xhat->data() + bi * cs + ci * hw;
            const double g = gamma.data()[ci], bt = beta.data()[ci];
            const double mu = mean[ci], is = inv_std[ci];
            for (std::ptrdiff_t i = 0; i < hw; ++i) {
                xh[i] = (x[i] - mu) * is;
                y[i] = g * xh[i] + bt;
            }
        }
    }

    if (wants_grad(tape, {&input, &gamma, &beta})) {
        out.set_requires_grad(true);
        Tensor in_c = input, g_c = gamma, b_c = beta, out_c = out;
        auto istd = std::make_shared<std::vector<double>>(inv_std);
        tape.record([=]() mutable {
            const double* gy = out_c.grad();
            for (int ci = 0; ci < c; ++ci) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (int bi = 0; bi < b; ++bi) {
                    const double* gyp = gy + bi * cs + ci * hw;
                    const double* xh = xhat->data() + bi * cs + ci * hw;
                    for (std::ptrdiff_t i = 0; i < hw; ++i) {
                        sum_g += gyp[i];
                        sum_gx += gyp[i] * xh[i];
                    }
                }
                if (g_c.requires_grad()) g_c.grad()[ci] += sum_gx;
                if (b_c.requires_grad()) b_c.grad()[ci] += sum_g;
                if (in_c.requires_grad()) {
                    const double gs = g_c.data()[ci] * (*istd)[ci];
                    if (train) {
                        const double mg = sum_g / static_cast<double>(n);
                        const double mgx = sum_gx / static_cast<double>(n);
                        for (int bi = 0; bi < b; ++bi) {
                            const double* gyp = gy + bi * cs + ci * hw;
                            const double* xh = xhat->data() + bi * cs + ci * hw;
                            double* dx = in_c.grad() + bi * cs + ci * hw;
                            for (std::ptrdiff_t i = 0; i < hw; ++i)
                                dx[i] += gs * (gyp[i] - mg - xh[i] * mgx);
                        }
                    } else {
                        for (int bi = 0; bi < b; ++bi) {
                            const double* gyp = gy + bi * cs + ci * hw;
                            double* dx = in_c.grad() + bi * cs + ci * hw;
                            for (std::ptrdiff_t i = 0; i < hw; ++i) dx[i] += gs * gyp[i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor elementwise(Tape& tape, const Tensor& input, Fwd fwd, Bwd dfrom_y) {
    Tensor out = Tensor::zeros(input.shape());
    const int n = input.numel();
    for (int i = 0; i < n; ++i) out.data()[i] = fwd(input.data()[i]);
    if (wants_grad(tape, {&input})) {
        out.set_requires_grad(true);
        Tensor in_c = input, out_c = out;
        tape.record([=, d = dfrom_y]() mutable {
            const double* gy = out_c.grad();
            const double* y = out_c.data();
            double* dx = in_c.grad();
            for (int i = 0; i < n; ++i) dx[i] += gy[i] * d(y[i]);
        });
    }
    return out;
}

}  // namespace

Tensor relu(Tape& tape, const Tensor& input) {
    return elementwise(
        tape, input, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double y) { return y > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(Tape& tape, const Tensor& input) {
    return elementwise(
        tape, input, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double y) { return y * (1.0 - y); });
}

Tensor tanh_act(Tape& tape, const Tensor& input) {
    return elementwise(
        tape, input, [](double x) { return std::tanh(x); },
        [](double y) { return 1.0 - y * y; });
}

Tensor upsample_nearest(Tape& tape, const Tensor& input, int scale) {
    if (scale < 1) throw std::invalid_argument("upsample_nearest: scale must be >= 1");
    if (input.rank() != 3 && input.rank() != 4)
        throw std::invalid_argument("upsample_nearest: input must be [C,H,W] or [B,C,H,W]");
    const bool batched = input.rank() == 4;
    const int b = batched ? input.size(0) : 1;
    const int c = input.size(batched ? 1 : 0);
    const int h = input.size(batched ? 2 : 1);
    const int w = input.size(batched ? 3 : 2);
    const int oh = h * scale, ow = w * scale;
    Shape out_shape = batched ? Shape{b, c, oh, ow} : Shape{c, oh, ow};
    Tensor out = Tensor::zeros(out_shape);
    const std::ptrdiff_t planes = static_cast<std::ptrdiff_t>(b) * c;
    for (std::ptrdiff_t p = 0; p < planes; ++p) {
        const double* x = input.data() + p * h * w;
        double* y = out.data() + p * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox)
                y[static_cast<std::ptrdiff_t>(oy) * ow + ox] =
                    x[static_cast<std::ptrdiff_t>(oy / scale) * w + ox / scale];
    }
    if (wants_grad(tape, {&input})) {
        out.set_requires_grad(true);
        Tensor in_c = input, out_c = out;
        tape.record([=]() mutable {
            const double* gy = out_c.grad();
            double* dx = in_c.grad();
            for (std::ptrdiff_t p = 0; p < planes; ++p)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox)
                        dx[p * h * w + static_cast<std::ptrdiff_t>(oy / scale) * w + ox / scale] +=
                            gy[p * oh * ow + static_cast<std::ptrdiff_t>(oy) * ow + ox];
        });
    }
    return out;
}

Tensor linear(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2) throw std::invalid_argument("linear: weight must be [Din,Dout]");
    if (input.rank() != 1 && input.rank() != 2)
        throw std::invalid_argument("linear: input must be [Din] or [B,Din]");
    const bool batched = input.rank() == 2;
    const int b = batched ? input.size(0) : 1;
    const int din = input.size(batched ? 1 : 0);
    const int dout = weight.size(1);
    if (weight.size(0) != din)
        throw std::invalid_argument("linear: input width " + std::to_string(din) +
                                    " does not match weight " + std::to_string(weight.size(0)));
    if (bias.rank() != 1 || bias.size(0) != dout)
        throw std::invalid_argument("linear: bias must be [Dout]");

    Shape out_shape = batched ? Shape{b, dout} : Shape{dout};
    Tensor out = Tensor::zeros(out_shape);
    {
        CMapRM x(input.data(), b, din), wm(weight.data(), din, dout);
        MapRM y(out.data(), b, dout);
        y.noalias() = x * wm;
        for (int bi = 0; bi < b; ++bi)
            for (int j = 0; j < dout; ++j) y(bi, j) += bias.data()[j];
    }
    if (wants_grad(tape, {&input, &weight, &bias})) {
        out.set_requires_grad(true);
        Tensor in_c = input, w_c = weight, b_c = bias, out_c = out;
        tape.record([=]() mutable {
            CMapRM gy(out_c.grad(), b, dout);
            if (in_c.requires_grad()) {
                CMapRM wm(w_c.data(), din, dout);
                MapRM dx(in_c.grad(), b, din);
                dx.noalias() += gy * wm.transpose();
            }
            if (w_c.requires_grad()) {
                CMapRM x(in_c.data(), b, din);
                MapRM dw(w_c.grad(), din, dout);
                dw.noalias() += x.transpose() * gy;
            }
            if (b_c.requires_grad()) {
                double* db = b_c.grad();
                for (int j = 0; j < dout; ++j) db[j] += gy.col(j).sum();
            }
        });
    }
    return out;
}

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || (a.rank() != 3 && a.rank() != 4))
        throw std::invalid_argument("concat_channels: inputs must both be rank 3 or rank 4");
    const bool batched = a.rank() == 4;
    const int bn = batched ? a.size(0) : 1;
    if (batched && b.size(0) != bn)
        throw std::invalid_argument("concat_channels: batch mismatch");
    const int c1 = a.size(batched ? 1 : 0), c2 = b.size(batched ? 1 : 0);
    const int h = a.size(batched ? 2 : 1), w = a.size(batched ? 3 : 2);
    if (b.size(batched ? 2 : 1) != h || b.size(batched ? 3 : 2) != w)
        throw std::invalid_argument("concat_channels: spatial dims mismatch");

    Shape out_shape = batched ? Shape{bn, c1 + c2, h, w} : Shape{c1 + c2, h, w};
    Tensor out = Tensor::zeros(out_shape);
    const std::ptrdiff_t hw = static_cast<std::ptrdiff_t>(h) * w;
    for (int bi = 0; bi < bn; ++bi) {
        std::copy_n(a.data() + bi * c1 * hw, c1 * hw, out.data() + bi * (c1 + c2) * hw);
        std::copy_n(b.data() + bi * c2 * hw, c2 * hw, out.data() + bi * (c1 + c2) * hw + c1 * hw);
    }
    if (wants_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        Tensor a_c = a, b_c = b, out_c = out;
        tape.record([=]() mutable {
            const double* gy = out_c.grad();
            for (int bi = 0; bi < bn; ++bi) {
                if (a_c.requires_grad()) {
                    double* da = a_c.grad() + bi * c1 * hw;
                    const double* g = gy + bi * (c1 + c2) * hw;
                    for (std::ptrdiff_t i = 0; i < c1 * hw; ++i) da[i] += g[i];
                }
                if (b_c.requires_grad()) {
                    double* db = b_c.grad() + bi * c2 * hw;
                    const double* g = gy + bi * (c1 + c2) * hw + c1 * hw;
                    for (std::ptrdiff_t i = 0; i < c2 * hw; ++i) db[i] += g[i];
                }
            }
        });
    }
    return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const int n = a.numel();
    for (int i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (wants_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        Tensor a_c = a, b_c = b, out_c = out;
        tape.record([=]() mutable {
            const double* gy = out_c.grad();
            if (a_c.requires_grad()) {
                double* da = a_c.grad();
                for (int i = 0; i < n; ++i) da[i] += gy[i];
            }
            if (b_c.requires_grad()) {
                double* db = b_c.grad();
                for (int i = 0; i < n; ++i) db[i] += gy[i];
            }
        });
    }
    return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const int n = a.numel();
    for (int i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (wants_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        Tensor a_c = a, b_c = b, out_c = out;
        tape.record([=]() mutable {
            const double* gy = out_c.grad();
            if (a_c.requires_grad()) {
                double* da = a_c.grad();
                for (int i = 0; i < n; ++i) da[i] += gy[i] * b_c.data()[i];
            }
            if (b_c.requires_grad()) {
                double* db = b_c.grad();
                for (int i = 0; i < n; ++i) db[i] += gy[i] * a_c.data()[i];
            }
        });
    }
    return out;
}

Tensor scale(Tape& tape, const Tensor& x, double c) {
    Tensor out = Tensor::zeros(x.shape());
    const int n = x.numel();
    for (int i = 0; i < n; ++i) out.data()[i] = c * x.data()[i];
    if (wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor x_c = x, out_c = out;
        tape.record([=]() mutable {
            const double* gy = out_c.grad();
            double* dx = x_c.grad();
            for (int i = 0; i < n; ++i) dx[i] += c * gy[i];
        });
    }
    return out;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw std::invalid_argument("reshape: element count mismatch");
    Tensor out = Tensor::from_vector(std::move(new_shape), x.values());
    if (wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor x_c = x, out_c = out;
        const int n = x.numel();
        tape.record([=]() mutable {
            const double* gy = out_c.grad();
            double* dx = x_c.grad();
            for (int i = 0; i < n; ++i) dx[i] += gy[i];
        });
    }
    return out;
}

Tensor scale_channels(Tape& tape, const Tensor& x, const Tensor& gate) {
    if (x.rank() != 4 || gate.rank() != 2 || gate.size(0) != x.size(0) ||
        gate.size(1) != x.size(1))
        throw std::invalid_argument("scale_channels: need x [B,C,H,W] and gate [B,C]");
    const int b = x.size(0), c = x.size(1);
    const std::ptrdiff_t hw = static_cast<std::ptrdiff_t>(x.size(2)) * x.size(3);
    Tensor out = Tensor::zeros(x.shape());
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            const double g = gate.data()[bi * c + ci];
            const double* xp = x.data() + (static_cast<std::ptrdiff_t>(bi) * c + ci) * hw;
            double* yp = out.data() + (static_cast<std::ptrdiff_t>(bi) * c + ci) * hw;
            for (std::ptrdiff_t i = 0; i < hw; ++i) yp[i] = g * xp[i];
        }
    if (wants_grad(tape, {&x, &gate})) {
        out.set_requires_grad(true);
        Tensor x_c = x, g_c = gate, out_c = out;
        tape.record([=]() mutable {
            const double* gy = out_c.grad();
            for (int bi = 0; bi < b; ++bi)
                for (int ci = 0; ci < c; ++ci) {
                    const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(bi) * c + ci) * hw;
                    if (x_c.requires_grad()) {
                        const double g = g_c.data()[bi * c + ci];
                        double* dx = x_c.grad() + off;
                        for (std::ptrdiff_t i = 0; i < hw; ++i) dx[i] += g * gy[off + i];
                    }
                    if (g_c.requires_grad()) {
                        double s = 0.0;
                        const double* xp = x_c.data() + off;
                        for (std::ptrdiff_t i = 0; i < hw; ++i) s += gy[off + i] * xp[i];
                        g_c.grad()[bi * c + ci] += s;
                    }
                }
        });
    }
    return out;
}

Tensor soca_descriptor(Tape& tape, const Tensor& x) {
    if (x.rank() != 4) throw std::invalid_argument("soca_descriptor: input must be [B,C,H,W]");
    const int b = x.size(0), c = x.size(1);
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(x.size(2)) * x.size(3);
    if (m < 2) throw std::invalid_argument("soca_descriptor: needs at least 2 spatial samples");
    const std::ptrdiff_t cs = static_cast<std::ptrdiff_t>(c) * m;

    Tensor out = Tensor::zeros({b, c});
    // z_c = (1/(C*M)) * sum_m Fb(c,m) * S(m), S(m) = sum_d Fb(d,m)
    std::vector<double> mu(c), s(static_cast<std::size_t>(m));
    for (int bi = 0; bi < b; ++bi) {
        const double* xb = x.data() + bi * cs;
        for (int ci = 0; ci < c; ++ci) {
            double t = 0.0;
            for (std::ptrdiff_t i = 0; i < m; ++i) t += xb[ci * m + i];
            mu[ci] = t / static_cast<double>(m);
        }
        std::fill(s.begin(), s.end(), 0.0);
        for (int ci = 0; ci < c; ++ci)
            for (std::ptrdiff_t i = 0; i < m; ++i) s[static_cast<std::size_t>(i)] += xb[ci * m + i] - mu[ci];
        for (int ci = 0; ci < c; ++ci) {
            double t = 0.0;
            for (std::ptrdiff_t i = 0; i < m; ++i)
                t += (xb[ci * m + i] - mu[ci]) * s[static_cast<std::size_t>(i)];
            out.data()[bi * c + ci] = t / (static_cast<double>(c) * static_cast<double>(m));
        }
    }

    if (wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor x_c = x, out_c = out;
        tape.record([=]() mutable {
            std::vector<double> mu_b(c), s_b(static_cast<std::size_t>(m)),
                t_b(static_cast<std::size_t>(m)), dfb(static_cast<std::size_t>(cs));
            const double inv_cm = 1.0 / (static_cast<double>(c) * static_cast<double>(m));
            for (int bi = 0; bi < b; ++bi) {
                const double* xb = x_c.data() + bi * cs;
                const double* u = out_c.grad() + bi * c;
                for (int ci = 0; ci < c; ++ci) {
                    double t = 0.0;
                    for (std::ptrdiff_t i = 0; i < m; ++i) t += xb[ci * m + i];
                    mu_b[ci] = t / static_cast<double>(m);
                }
                std::fill(s_b.begin(), s_b.end(), 0.0);
                std::fill(t_b.begin(), t_b.end(), 0.0);
                for (int ci = 0; ci < c; ++ci)
                    for (std::ptrdiff_t i = 0; i < m; ++i) {
                        const double fb = xb[ci * m + i] - mu_b[ci];
                        s_b[static_cast<std::size_t>(i)] += fb;
                        t_b[static_cast<std::size_t>(i)] += u[ci] * fb;
                    }
                // d/dFb, then subtract the per-channel mean to undo centering
                for (int ci = 0; ci < c; ++ci) {
                    double rowmean = 0.0;
                    for (std::ptrdiff_t i = 0; i < m; ++i) {
                        const double v =
                            inv_cm * (u[ci] * s_b[static_cast<std::size_t>(i)] + t_b[static_cast<std::size_t>(i)]);
                        dfb[static_cast<std::size_t>(ci * m + i)] = v;
                        rowmean += v;
                    }
                    rowmean /= static_cast<double>(m);
                    double* dx = x_c.grad() + bi * cs + ci * m;
                    for (std::ptrdiff_t i = 0; i < m; ++i)
                        dx[i] += dfb[static_cast<std::size_t>(ci * m + i)] - rowmean;
                }
            }
        });
    }
    return out;
}

Tensor channel_covariance(const Tensor& x) {
    if (x.rank() != 3) throw std::invalid_argument("channel_covariance: input must be [C,H,W]");
    const int c = x.size(0);
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(x.size(1)) * x.size(2);
    Tensor cov = Tensor::zeros({c, c});
    std::vector<double> mu(c);
    for (int ci = 0; ci < c; ++ci) {
        double t = 0.0;
        for (std::ptrdiff_t i = 0; i < m; ++i) t += x.data()[ci * m + i];
        mu[ci] = t / static_cast<double>(m);
    }
    for (int ci = 0; ci < c; ++ci)
        for (int cj = 0; cj < c; ++cj) {
            double t = 0.0;
            for (std::ptrdiff_t i = 0; i < m; ++i)
                t += (x.data()[ci * m + i] - mu[ci]) * (x.data()[cj * m + i] - mu[cj]);
            cov.data()[ci * c + cj] = t / static_cast<double>(m);
        }
    return cov;
}

Tensor l1_loss(Tape& tape, const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape())
        throw std::invalid_argument("l1_loss: shape mismatch " + shape_str(pred.shape()) +
                                    " vs " + shape_str(target.shape()));
    const int batch = pred.rank() >= 2 ? pred.size(0) : 1;
    const int n = pred.numel();
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += std::abs(pred.data()[i] - target.data()[i]);
    Tensor out = Tensor::full({1}, sum / batch);
    if (wants_grad(tape, {&pred, &target})) {
        out.set_requires_grad(true);
        Tensor p_c = pred, t_c = target, out_c = out;
        tape.record([=]() mutable {
            const double g = out_c.grad()[0] / batch;
            for (int i = 0; i < n; ++i) {
                const double d = p_c.data()[i] - t_c.data()[i];
                const double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                if (p_c.requires_grad()) p_c.grad()[i] += g * sgn;
                if (t_c.requires_grad()) t_c.grad()[i] -= g * sgn;
            }
        });
    }
    return out;
}

Tensor bce_loss(Tape& tape, const Tensor& prob, double label) {
    if (label != 0.0 && label != 1.0) throw std::invalid_argument("bce_loss: label must be 0 or 1");
    const int n = prob.numel();
    constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        const double p = std::clamp(prob.data()[i], lo, hi);
        sum += -(label * std::log(p) + (1.0 - label) * std::log(1.0 - p));
    }
    Tensor out = Tensor::full({1}, sum / n);
    if (wants_grad(tape, {&prob})) {
        out.set_requires_grad(true);
        Tensor p_c = prob, out_c = out;
        tape.record([=]() mutable {
            const double g = out_c.grad()[0] / n;
            double* dp = p_c.grad();
            for (int i = 0; i < n; ++i) {
                const double p = std::clamp(p_c.data()[i], lo, hi);
                dp[i] += g * (p - label) / std::max(p * (1.0 - p), 1e-12);
            }
        });
    }
    return out;
}

Conv2d::Conv2d(int kh, int kw, int cin, int cout, int stride_, int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(kh) * kw * cin);
    kernel = Tensor::zeros({kh, kw, cin, cout}, true);
    for (int i = 0; i < kernel.numel(); ++i) kernel.data()[i] = rng.uniform(-bound, bound);
    bias = Tensor::zeros({cout}, true);
}

BatchNorm2d::BatchNorm2d(int channels) {
    gamma = Tensor::full({channels}, 1.0, true);
    beta = Tensor::zeros({channels}, true);
    running_mean = Tensor::zeros({channels});
    running_var = Tensor::full({channels}, 1.0);
}

LinearLayer::LinearLayer(int din, int dout, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(din));
    weight = Tensor::zeros({din, dout}, true);
    for (int i = 0; i < weight.numel(); ++i) weight.data()[i] = rng.uniform(-bound, bound);
    bias = Tensor::zeros({dout}, true);
}

}  // namespace odl::numerics
