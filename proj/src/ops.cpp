#include "dwp/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace dwp {

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

const char* kAxisNames[5] = {"batch axis (0)", "channel axis (1)", "depth axis (2)", "height axis (3)",
                             "width axis (4)"};

struct ConvGeometry {
    std::size_t batch, cin, cout, k;
    std::size_t d, h, w;
    std::size_t od, oh, ow;
    int pad;
    std::size_t rows() const { return cin * k * k * k; }
    std::size_t cols() const { return od * oh * ow; }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& kernels, int padding) {
    if (input.rank() != 5) throw std::invalid_argument("conv3d: input must be rank 5 [N,C,D,H,W], got " + shape_string(input.shape()));
    if (kernels.rank() != 5) throw std::invalid_argument("conv3d: kernels must be rank 5 [Cout,Cin,k,k,k], got " + shape_string(kernels.shape()));
    if (padding < 0) throw std::invalid_argument("conv3d: negative padding");
    const std::size_t k = kernels.dim(2);
    if (kernels.dim(3) != k || kernels.dim(4) != k) {
        throw std::invalid_argument("conv3d: kernels must be cubic, got " + shape_string(kernels.shape()));
    }
    if (kernels.dim(1) != input.dim(1)) {
        throw std::invalid_argument(std::string("conv3d: mismatch on ") + kAxisNames[1] + ": input has " +
                                    std::to_string(input.dim(1)) + ", kernels expect " + std::to_string(kernels.dim(1)));
    }
    ConvGeometry g{input.dim(0), input.dim(1), kernels.dim(0), k, input.dim(2), input.dim(3), input.dim(4), 0, 0, 0, padding};
    std::size_t extents[3] = {g.d, g.h, g.w};
    std::size_t outs[3];
    for (int a = 0; a < 3; ++a) {
        const std::size_t padded = extents[a] + 2 * static_cast<std::size_t>(padding);
        if (padded < k) {
            throw std::invalid_argument(std::string("conv3d: ") + kAxisNames[a + 2] + " extent " +
                                        std::to_string(extents[a]) + " with padding " + std::to_string(padding) +
                                        " is smaller than kernel extent " + std::to_string(k));
        }
        outs[a] = padded - k + 1;
    }
    g.od = outs[0];
    g.oh = outs[1];
    g.ow = outs[2];
    return g;
}

// Valid output range [lo, hi) along one axis for kernel tap `t`.
inline void valid_range(std::size_t out_extent, std::size_t in_extent, std::size_t t, int pad, std::size_t& lo,
                        std::size_t& hi) {
    const long shift = static_cast<long>(t) - pad;
    long l = std::max(0L, -shift);
    long h = std::min(static_cast<long>(out_extent), static_cast<long>(in_extent) - shift);
    if (h < l) h = l;
    lo = static_cast<std::size_t>(l);
    hi = static_cast<std::size_t>(h);
}

// Column block for output depth planes [od0, od1).
template <typename T>
void im2col(const T* in, const ConvGeometry& g, std::size_t od0, std::size_t od1, T* col) {
    const std::size_t plane = g.oh * g.ow;
    const std::size_t cols = (od1 - od0) * plane;
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.cin; ++c) {
        const T* src = in + c * g.d * g.h * g.w;
        for (std::size_t kd = 0; kd < g.k; ++kd) {
            std::size_t d_lo, d_hi;
            valid_range(g.od, g.d, kd, g.pad, d_lo, d_hi);
            for (std::size_t kh = 0; kh < g.k; ++kh) {
                std::size_t h_lo, h_hi;
                valid_range(g.oh, g.h, kh, g.pad, h_lo, h_hi);
                for (std::size_t kw = 0; kw < g.k; ++kw, ++row) {
                    std::size_t w_lo, w_hi;
                    valid_range(g.ow, g.w, kw, g.pad, w_lo, w_hi);
                    T* dst = col + row * cols;
                    std::fill(dst, dst + cols, T(0));
                    if (w_hi <= w_lo) continue;
                    for (std::size_t od = std::max(d_lo, od0); od < std::min(d_hi, od1); ++od) {
                        const std::size_t id = od + kd - g.pad;
                        for (std::size_t oh = h_lo; oh < h_hi; ++oh) {
                            const std::size_t ih = oh + kh - g.pad;
                            const T* s = src + (id * g.h + ih) * g.w + (w_lo + kw - g.pad);
                            std::copy(s, s + (w_hi - w_lo), dst + (od - od0) * plane + oh * g.ow + w_lo);
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, std::size_t od0, std::size_t od1, T* in) {
    const std::size_t plane = g.oh * g.ow;
    const std::size_t cols = (od1 - od0) * plane;
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.cin; ++c) {
        T* dst = in + c * g.d * g.h * g.w;
        for (std::size_t kd = 0; kd < g.k; ++kd) {
            std::size_t d_lo, d_hi;
            valid_range(g.od, g.d, kd, g.pad, d_lo, d_hi);
            for (std::size_t kh = 0; kh < g.k; ++kh) {
                std::size_t h_lo, h_hi;
                valid_range(g.oh, g.h, kh, g.pad, h_lo, h_hi);
                for (std::size_t kw = 0; kw < g.k; ++kw, ++row) {
                    std::size_t w_lo, w_hi;
                    valid_range(g.ow, g.w, kw, g.pad, w_lo, w_hi);
                    if (w_hi <= w_lo) continue;
                    const T* src = col + row * cols;
                    for (std::size_t od = std::max(d_lo, od0); od < std::min(d_hi, od1); ++od) {
                        const std::size_t id = od + kd - g.pad;
                        for (std::size_t oh = h_lo; oh < h_hi; ++oh) {
                            const std::size_t ih = oh + kh - g.pad;
                            T* d = dst + (id * g.h + ih) * g.w + (w_lo + kw - g.pad);
                            const T* s = src + (od - od0) * plane + oh * g.ow + w_lo;
                            for (std::size_t i = 0; i < w_hi - w_lo; ++i) d[i] += s[i];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
AlignedVector<T>& scratch(int slot) {
    thread_local AlignedVector<T> buffers[2];
    return buffers[slot];
}

// Output depth planes per im2col block, sized so a block stays cache resident.
template <typename T>
std::size_t planes_per_block(const ConvGeometry& g) {
    constexpr std::size_t kBlockBytes = 256 * 1024;
    const std::size_t plane_bytes = g.rows() * g.oh * g.ow * sizeof(T);
    return std::clamp<std::size_t>(kBlockBytes / std::max<std::size_t>(plane_bytes, 1), 1, g.od);
}

template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b) throw std::invalid_argument(std::string(what) + ": shape " + shape_string(a) + " vs " + shape_string(b));
}

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernels, int padding, const Tensor<T>* bias) {
    const ConvGeometry g = conv_geometry(input, kernels, padding);
    if (bias && (bias->rank() != 1 || bias->dim(0) != g.cout)) {
        throw std::invalid_argument("conv3d: bias must be [" + std::to_string(g.cout) + "], got " + shape_string(bias->shape()));
    }
    Tensor<T> out({g.batch, g.cout, g.od, g.oh, g.ow});
    const std::size_t plane = g.oh * g.ow;
    const std::size_t block = planes_per_block<T>(g);
    auto& col = scratch<T>(0);
    col.resize(g.rows() * block * plane);
    ConstMapMat<T> kmat(kernels.data(), g.cout, g.rows());
    const std::size_t in_stride = g.cin * g.d * g.h * g.w;
    const std::size_t out_stride = g.cout * g.cols();
    for (std::size_t n = 0; n < g.batch; ++n) {
        for (std::size_t od0 = 0; od0 < g.od; od0 += block) {
            const std::size_t od1 = std::min(g.od, od0 + block);
            const auto ncols = static_cast<Eigen::Index>((od1 - od0) * plane);
            im2col(input.data() + n * in_stride, g, od0, od1, col.data());
            StridedMap<T> omat(out.data() + n * out_stride + od0 * plane, g.cout, ncols,
                               Eigen::OuterStride<>(static_cast<Eigen::Index>(g.cols())));
            omat.noalias() = kmat * ConstMapMat<T>(col.data(), g.rows(), ncols);
        }
        if (bias) {
            MapMat<T> all(out.data() + n * out_stride, g.cout, g.cols());
            for (std::size_t c = 0; c < g.cout; ++c) all.row(c).array() += (*bias)[c];
        }
    }
    return out;
}

template <typename T>
void conv3d_backward(const Tensor<T>& input, const Tensor<T>& kernels, int padding, const Tensor<T>& grad_out,
                     Tensor<T>* grad_input, Tensor<T>* grad_kernels, Tensor<T>* grad_bias) {
    const ConvGeometry g = conv_geometry(input, kernels, padding);
    require_same_shape(grad_out.shape(), Shape{g.batch, g.cout, g.od, g.oh, g.ow}, "conv3d_backward grad_out");
    if (grad_input) require_same_shape(grad_input->shape(), input.shape(), "conv3d_backward grad_input");
    if (grad_kernels) require_same_shape(grad_kernels->shape(), kernels.shape(), "conv3d_backward grad_kernels");
    if (grad_bias) require_same_shape(grad_bias->shape(), Shape{g.cout}, "conv3d_backward grad_bias");

    const std::size_t plane = g.oh * g.ow;
    const std::size_t block = planes_per_block<T>(g);
    auto& col = scratch<T>(0);
    col.resize(g.rows() * block * plane);
    ConstMapMat<T> kmat(kernels.data(), g.cout, g.rows());
    const std::size_t in_stride = g.cin * g.d * g.h * g.w;
    const std::size_t out_stride = g.cout * g.cols();
    for (std::size_t n = 0; n < g.batch; ++n) {
        if (grad_bias) {
            ConstMapMat<T> gmat(grad_out.data() + n * out_stride, g.cout, g.cols());
            for (std::size_t c = 0; c < g.cout; ++c) (*grad_bias)[c] += gmat.row(c).sum();
        }
        if (!grad_kernels && !grad_input) continue;
        for (std::size_t od0 = 0; od0 < g.od; od0 += block) {
            const std::size_t od1 = std::min(g.od, od0 + block);
            const auto ncols = static_cast<Eigen::Index>((od1 - od0) * plane);
            ConstStridedMap<T> gmat(grad_out.data() + n * out_stride + od0 * plane, g.cout, ncols,
                                    Eigen::OuterStride<>(static_cast<Eigen::Index>(g.cols())));
            if (grad_kernels) {
                im2col(input.data() + n * in_stride, g, od0, od1, col.data());
                MapMat<T> gk(grad_kernels->data(), g.cout, g.rows());
                gk.noalias() += gmat * ConstMapMat<T>(col.data(), g.rows(), ncols).transpose();
            }
            if (grad_input) {
                MapMat<T> gcol(col.data(), g.rows(), ncols);
                gcol.noalias() = kmat.transpose() * gmat;
                col2im_add(col.data(), g, od0, od1, grad_input->data() + n * in_stride);
            }
        }
    }
}

template <typename T>
void leaky_relu_inplace(Tensor<T>& x, T slope) {
    for (auto& v : x.values()) v = v > T(0) ? v : v * slope;
}

template <typename T>
void leaky_relu_backward_inplace(const Tensor<T>& output, Tensor<T>& grad, T slope) {
    require_same_shape(output.shape(), grad.shape(), "leaky_relu_backward");
    for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!(output[i] > T(0))) grad[i] *= slope;
    }
}

template <typename T>
PoolResult<T> max_pool2(const Tensor<T>& input) {
    if (input.rank() != 5) throw std::invalid_argument("max_pool2: input must be rank 5, got " + shape_string(input.shape()));
    for (int a = 2; a < 5; ++a) {
        if (input.dim(a) % 2 != 0) {
            throw std::invalid_argument(std::string("max_pool2: odd extent on ") + kAxisNames[a] + ": " +
                                        shape_string(input.shape()));
        }
    }
    const std::size_t nc = input.dim(0) * input.dim(1);
    const std::size_t d = input.dim(2), h = input.dim(3), w = input.dim(4);
    const std::size_t od = d / 2, oh = h / 2, ow = w / 2;
    PoolResult<T> r{Tensor<T>({input.dim(0), input.dim(1), od, oh, ow}), {}};
    r.argmax.resize(r.output.size());
    std::size_t o = 0;
    for (std::size_t p = 0; p < nc; ++p) {
        const std::size_t base = p * d * h * w;
        for (std::size_t z = 0; z < od; ++z) {
            for (std::size_t y = 0; y < oh; ++y) {
                for (std::size_t x = 0; x < ow; ++x, ++o) {
                    std::size_t best = base + ((2 * z) * h + 2 * y) * w + 2 * x;
                    for (std::size_t dz = 0; dz < 2; ++dz) {
                        for (std::size_t dy = 0; dy < 2; ++dy) {
                            for (std::size_t dx = 0; dx < 2; ++dx) {
                                const std::size_t idx = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * x + dx;
                                if (input[idx] > input[best]) best = idx;
                            }
                        }
                    }
                    r.output[o] = input[best];
                    r.argmax[o] = static_cast<std::uint32_t>(best);
                }
            }
        }
    }
    return r;
}

template <typename T>
Tensor<T> max_pool2_backward(const PoolResult<T>& pooled, const Shape& input_shape, const Tensor<T>& grad_out) {
    require_same_shape(grad_out.shape(), pooled.output.shape(), "max_pool2_backward");
    Tensor<T> g(input_shape);
    for (std::size_t i = 0; i < grad_out.size(); ++i) g[pooled.argmax[i]] += grad_out[i];
    return g;
}

template <typename T>
Tensor<T> upsample2(const Tensor<T>& input) {
    if (input.rank() != 5) throw std::invalid_argument("upsample2: input must be rank 5, got " + shape_string(input.shape()));
    const std::size_t nc = input.dim(0) * input.dim(1);
    const std::size_t d = input.dim(2), h = input.dim(3), w = input.dim(4);
    Tensor<T> out({input.dim(0), input.dim(1), 2 * d, 2 * h, 2 * w});
    T* o = out.data();
    for (std::size_t p = 0; p < nc; ++p) {
        const T* src = input.data() + p * d * h * w;
        for (std::size_t z = 0; z < 2 * d; ++z) {
            for (std::size_t y = 0; y < 2 * h; ++y) {
                const T* row = src + ((z / 2) * h + y / 2) * w;
                for (std::size_t x = 0; x < 2 * w; ++x) *o++ = row[x / 2];
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& grad_out) {
    const std::size_t nc = grad_out.dim(0) * grad_out.dim(1);
    const std::size_t d = grad_out.dim(2) / 2, h = grad_out.dim(3) / 2, w = grad_out.dim(4) / 2;
    Tensor<T> g({grad_out.dim(0), grad_out.dim(1), d, h, w});
    const T* src = grad_out.data();
    for (std::size_t p = 0; p < nc; ++p) {
        T* dst = g.data() + p * d * h * w;
        for (std::size_t z = 0; z < 2 * d; ++z) {
            for (std::size_t y = 0; y < 2 * h; ++y) {
                T* row = dst + ((z / 2) * h + y / 2) * w;
                for (std::size_t x = 0; x < 2 * w; ++x) row[x / 2] += *src++;
            }
        }
    }
    return g;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 5 || b.rank() != 5 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3) ||
        a.dim(4) != b.dim(4)) {
        throw std::invalid_argument("concat_channels: incompatible shapes " + shape_string(a.shape()) + " and " +
                                    shape_string(b.shape()));
    }
    const std::size_t spatial = a.dim(2) * a.dim(3) * a.dim(4);
    const std::size_t ca = a.dim(1), cb = b.dim(1);
    Tensor<T> out({a.dim(0), ca + cb, a.dim(2), a.dim(3), a.dim(4)});
    for (std::size_t n = 0; n < a.dim(0); ++n) {
        T* dst = out.data() + n * (ca + cb) * spatial;
        std::copy_n(a.data() + n * ca * spatial, ca * spatial, dst);
        std::copy_n(b.data() + n * cb * spatial, cb * spatial, dst + ca * spatial);
    }
    return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& grad, std::size_t a_channels) {
    const std::size_t spatial = grad.dim(2) * grad.dim(3) * grad.dim(4);
    const std::size_t c = grad.dim(1);
    if (a_channels == 0 || a_channels >= c) throw std::invalid_argument("split_channels: bad split point");
    Tensor<T> a({grad.dim(0), a_channels, grad.dim(2), grad.dim(3), grad.dim(4)});
    Tensor<T> b({grad.dim(0), c - a_channels, grad.dim(2), grad.dim(3), grad.dim(4)});
    for (std::size_t n = 0; n < grad.dim(0); ++n) {
        const T* src = grad.data() + n * c * spatial;
        std::copy_n(src, a_channels * spatial, a.data() + n * a_channels * spatial);
        std::copy_n(src + a_channels * spatial, (c - a_channels) * spatial, b.data() + n * (c - a_channels) * spatial);
    }
    return {std::move(a), std::move(b)};
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
        throw std::invalid_argument("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                                    shape_string(weight.shape()));
    }
    if (bias.rank() != 1 || bias.dim(0) != weight.dim(0)) throw std::invalid_argument("linear: bad bias shape");
    const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    Tensor<T> out({batch, out_dim});
    MapMat<T> o(out.data(), batch, out_dim);
    o.noalias() = ConstMapMat<T>(x.data(), batch, in) * ConstMapMat<T>(weight.data(), out_dim, in).transpose();
    for (std::size_t r = 0; r < batch; ++r) {
        for (std::size_t c = 0; c < out_dim; ++c) o(r, c) += bias[c];
    }
    return out;
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out, Tensor<T>* grad_x,
                     Tensor<T>* grad_weight, Tensor<T>* grad_bias) {
    const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    require_same_shape(grad_out.shape(), Shape{batch, out_dim}, "linear_backward grad_out");
    ConstMapMat<T> g(grad_out.data(), batch, out_dim);
    if (grad_x) {
        require_same_shape(grad_x->shape(), x.shape(), "linear_backward grad_x");
        MapMat<T>(grad_x->data(), batch, in).noalias() += g * ConstMapMat<T>(weight.data(), out_dim, in);
    }
    if (grad_weight) {
        require_same_shape(grad_weight->shape(), weight.shape(), "linear_backward grad_weight");
        MapMat<T>(grad_weight->data(), out_dim, in).noalias() += g.transpose() * ConstMapMat<T>(x.data(), batch, in);
    }
    if (grad_bias) {
        require_same_shape(grad_bias->shape(), Shape{out_dim}, "linear_backward grad_bias");
        for (std::size_t r = 0; r < batch; ++r) {
            for (std::size_t c = 0; c < out_dim; ++c) (*grad_bias)[c] += g(r, c);
        }
    }
}

#define DWP_INSTANTIATE_OPS(T)                                                                                   \
    template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, int, const Tensor<T>*);                        \
    template void conv3d_backward(const Tensor<T>&, const Tensor<T>&, int, const Tensor<T>&, Tensor<T>*,         \
                                  Tensor<T>*, Tensor<T>*);                                                       \
    template void leaky_relu_inplace(Tensor<T>&, T);                                                             \
    template void leaky_relu_backward_inplace(const Tensor<T>&, Tensor<T>&, T);                                  \
    template PoolResult<T> max_pool2(const Tensor<T>&);                                                          \
    template Tensor<T> max_pool2_backward(const PoolResult<T>&, const Shape&, const Tensor<T>&);                 \
    template Tensor<T> upsample2(const Tensor<T>&);                                                              \
    template Tensor<T> upsample2_backward(const Tensor<T>&);                                                     \
    template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                                      \
    template std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>&, std::size_t);                      \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                             \
    template void linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*, Tensor<T>*, \
                                  Tensor<T>*);

DWP_INSTANTIATE_OPS(float)
DWP_INSTANTIATE_OPS(double)

}  // namespace dwp
