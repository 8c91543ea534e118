#pragma once
// Neural network layers with explicit forward/backward passes. Each forward
// records what its backward needs into a per-pass Tape, so two passes of the
// same model (clean and perturbed companions) can be kept alive at once and
// their parameter gradients accumulated.
//
// Convolutions are im2col + Eigen GEMM, parallelized over the batch.

#include <functional>
#include <memory>
#include <unordered_map>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "lisard/core.hpp"

namespace lisard {

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;  // allocated lazily on first accumulation

    void ensure_grad() {
        if (grad.numel() != value.numel()) grad = Tensor(value.shape());
    }
};

// Per-pass activation storage keyed by layer instance. One forward pass per
// tape; layers are used at most once per pass.
struct Tape {
    Mode mode = Mode::inference;
    std::unordered_map<const void*, std::vector<Tensor>> slots;

    std::vector<Tensor>& stash(const void* who) { return slots[who]; }

    const std::vector<Tensor>& saved(const void* who) const {
        auto it = slots.find(who);
        require(it != slots.end(), "backward: no saved activations for layer (forward not taped)");
        return it->second;
    }
};

using NamedState = std::vector<std::pair<std::string, Tensor*>>;

class Layer {
public:
    virtual ~Layer() = default;

    // tape == nullptr means pure inference: nothing is saved and backward is
    // unavailable for this pass.
    virtual Tensor forward(const Tensor& x, Mode mode, Tape* tape) = 0;
    virtual Tensor backward(const Tensor& gy, const Tape& tape) = 0;

    virtual void collect_params(std::vector<Param*>& out) {}
    virtual void collect_state(const std::string& prefix, NamedState& out) {}
    virtual void init_params(std::uint64_t seed, std::uint64_t& counter) {}

    // Feature-shape propagation (without the batch dimension).
    virtual std::vector<long> out_shape(const std::vector<long>& in) const = 0;
};

inline void he_normal_init(Tensor& w, long fan_in, std::uint64_t seed, std::uint64_t& counter) {
    RngStream rng(mix_seed(seed, stream::init, counter++));
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (long i = 0; i < w.numel(); ++i) w[i] = static_cast<float>(rng.normal() * std_dev);
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

inline long conv_out_dim(long in, long k, long stride, long pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// Multi-image column matrix: row index = (c*k + ki)*k + kj, and image i of a
// chunk occupies the column range [i*spatial, (i+1)*spatial). row_stride is
// the full matrix width (chunk * spatial); col points at this image's
// column offset.
inline void im2col_strided(const float* x, long c, long h, long w, long k, long stride, long pad,
                           float* col, long row_stride) {
    const long oh = conv_out_dim(h, k, stride, pad);
    const long ow = conv_out_dim(w, k, stride, pad);
    for (long ch = 0; ch < c; ++ch) {
        for (long ki = 0; ki < k; ++ki) {
            for (long kj = 0; kj < k; ++kj) {
                float* dst = col + ((ch * k + ki) * k + kj) * row_stride;
                const float* src = x + ch * h * w;
                for (long i = 0; i < oh; ++i) {
                    long yy = i * stride - pad + ki;
                    if (yy < 0 || yy >= h) {
                        std::fill(dst + i * ow, dst + (i + 1) * ow, 0.0f);
                        continue;
                    }
                    for (long j = 0; j < ow; ++j) {
                        long xx = j * stride - pad + kj;
                        dst[i * ow + j] = (xx >= 0 && xx < w) ? src[yy * w + xx] : 0.0f;
                    }
                }
            }
        }
    }
}

inline void col2im_add_strided(const float* col, long c, long h, long w, long k, long stride,
                               long pad, long row_stride, float* x) {
    const long oh = conv_out_dim(h, k, stride, pad);
    const long ow = conv_out_dim(w, k, stride, pad);
    for (long ch = 0; ch < c; ++ch) {
        for (long ki = 0; ki < k; ++ki) {
            for (long kj = 0; kj < k; ++kj) {
                const float* src = col + ((ch * k + ki) * k + kj) * row_stride;
                float* dst = x + ch * h * w;
                for (long i = 0; i < oh; ++i) {
                    long yy = i * stride - pad + ki;
                    if (yy < 0 || yy >= h) continue;
                    for (long j = 0; j < ow; ++j) {
                        long xx = j * stride - pad + kj;
                        if (xx >= 0 && xx < w) dst[yy * w + xx] += src[i * ow + j];
                    }
                }
            }
        }
    }
}

}  // namespace detail

class Conv2d : public Layer {
public:
    Conv2d(long in_ch, long out_ch, long kernel, long stride = 1, long pad = 0, bool bias = true)
        : in_ch_(in_ch), out_ch_(out_ch), k_(kernel), stride_(stride), pad_(pad), has_bias_(bias) {
        w_.name = "weight";
        w_.value = Tensor({out_ch_, in_ch_, k_, k_});
        if (has_bias_) {
            b_.name = "bias";
            b_.value = Tensor({out_ch_});
        }
    }

    Tensor forward(const Tensor& x, Mode, Tape* tape) override {
        require(x.rank() == 4 && x.dim(1) == in_ch_,
                "Conv2d: bad input shape " + x.shape_str());
        const long batch = x.dim(0), h = x.dim(2), w = x.dim(3);
        const long oh = detail::conv_out_dim(h, k_, stride_, pad_);
        const long ow = detail::conv_out_dim(w, k_, stride_, pad_);
        require(oh >= 1 && ow >= 1, "Conv2d: output collapsed to zero size");
        const long spatial = oh * ow;
        const long cols = in_ch_ * k_ * k_;
        const long chunk = chunk_images(cols, spatial, batch);
        Tensor y({batch, out_ch_, oh, ow});
        ConstMapF wm(w_.value.data(), out_ch_, cols);
        std::vector<float> col(static_cast<std::size_t>(cols * chunk * spatial));
        std::vector<float> out_buf(static_cast<std::size_t>(out_ch_ * chunk * spatial));
        for (long start = 0; start < batch; start += chunk) {
            const long g = std::min(chunk, batch - start);
#pragma omp parallel for schedule(static)
            for (long i = 0; i < g; ++i) {
                detail::im2col_strided(x.data() + (start + i) * in_ch_ * h * w, in_ch_, h, w, k_,
                                       stride_, pad_, col.data() + i * spatial, g * spatial);
            }
            MapF om(out_buf.data(), out_ch_, g * spatial);
            om.noalias() = wm * ConstMapF(col.data(), cols, g * spatial);
            if (has_bias_) om.colwise() += ConstVecMapF(b_.value.data(), out_ch_);
            // Scatter out_buf (out x g*spatial, image-major columns) into y.
#pragma omp parallel for schedule(static)
            for (long i = 0; i < g; ++i) {
                for (long oc = 0; oc < out_ch_; ++oc) {
                    std::memcpy(y.data() + ((start + i) * out_ch_ + oc) * spatial,
                                out_buf.data() + (oc * g + i) * spatial,
                                sizeof(float) * static_cast<std::size_t>(spatial));
                }
            }
        }
        if (tape) tape->stash(this).push_back(x);
        return y;
    }

    Tensor backward(const Tensor& gy, const Tape& tape) override {
        const Tensor& x = tape.saved(this).at(0);
        const long batch = x.dim(0), h = x.dim(2), w = x.dim(3);
        const long oh = gy.dim(2), ow = gy.dim(3);
        const long spatial = oh * ow;
        const long cols = in_ch_ * k_ * k_;
        const long chunk = chunk_images(cols, spatial, batch);
        w_.ensure_grad();
        if (has_bias_) b_.ensure_grad();
        Tensor gx({batch, in_ch_, h, w});
        ConstMapF wm(w_.value.data(), out_ch_, cols);
        MapF dwm(w_.grad.data(), out_ch_, cols);

        std::vector<float> col(static_cast<std::size_t>(cols * chunk * spatial));
        std::vector<float> gy_buf(static_cast<std::size_t>(out_ch_ * chunk * spatial));
        std::vector<float> gcol(static_cast<std::size_t>(cols * chunk * spatial));
        for (long start = 0; start < batch; start += chunk) {
            const long g = std::min(chunk, batch - start);
#pragma omp parallel for schedule(static)
            for (long i = 0; i < g; ++i) {
                detail::im2col_strided(x.data() + (start + i) * in_ch_ * h * w, in_ch_, h, w, k_,
                                       stride_, pad_, col.data() + i * spatial, g * spatial);
                for (long oc = 0; oc < out_ch_; ++oc) {
                    std::memcpy(gy_buf.data() + (oc * g + i) * spatial,
                                gy.data() + ((start + i) * out_ch_ + oc) * spatial,
                                sizeof(float) * static_cast<std::size_t>(spatial));
                }
            }
            ConstMapF cm(col.data(), cols, g * spatial);
            ConstMapF gym(gy_buf.data(), out_ch_, g * spatial);
            dwm.noalias() += gym * cm.transpose();
            if (has_bias_) {
                VecMapF(b_.grad.data(), out_ch_) += gym.rowwise().sum();
            }
            MapF gcm(gcol.data(), cols, g * spatial);
            gcm.noalias() = wm.transpose() * gym;
#pragma omp parallel for schedule(static)
            for (long i = 0; i < g; ++i) {
                detail::col2im_add_strided(gcol.data() + i * spatial, in_ch_, h, w, k_, stride_,
                                           pad_, g * spatial,
                                           gx.data() + (start + i) * in_ch_ * h * w);
            }
        }
        return gx;
    }

    void collect_params(std::vector<Param*>& out) override {
        out.push_back(&w_);
        if (has_bias_) out.push_back(&b_);
    }

    void collect_state(const std::string& prefix, NamedState& out) override {
        out.emplace_back(prefix + "weight", &w_.value);
        if (has_bias_) out.emplace_back(prefix + "bias", &b_.value);
    }

    void init_params(std::uint64_t seed, std::uint64_t& counter) override {
        he_normal_init(w_.value, in_ch_ * k_ * k_, seed, counter);
        if (has_bias_) b_.value.zero();
    }

    std::vector<long> out_shape(const std::vector<long>& in) const override {
        return {out_ch_, detail::conv_out_dim(in[1], k_, stride_, pad_),
                detail::conv_out_dim(in[2], k_, stride_, pad_)};
    }

private:
    // How many images share one column matrix; keeps the buffer near 16 MB.
    static long chunk_images(long cols, long spatial, long batch) {
        const long budget_floats = 4L << 20;
        return std::clamp(budget_floats / std::max<long>(1, cols * spatial), 1L, batch);
    }

    long in_ch_, out_ch_, k_, stride_, pad_;
    bool has_bias_;
    Param w_, b_;
};

class DepthwiseConv2d : public Layer {
public:
    DepthwiseConv2d(long channels, long kernel, long stride = 1, long pad = 0)
        : ch_(channels), k_(kernel), stride_(stride), pad_(pad) {
        w_.name = "weight";
        w_.value = Tensor({ch_, 1, k_, k_});
        b_.name = "bias";
        b_.value = Tensor({ch_});
    }

    Tensor forward(const Tensor& x, Mode, Tape* tape) override {
        require(x.rank() == 4 && x.dim(1) == ch_, "DepthwiseConv2d: bad input shape");
        const long batch = x.dim(0), h = x.dim(2), w = x.dim(3);
        const long oh = detail::conv_out_dim(h, k_, stride_, pad_);
        const long ow = detail::conv_out_dim(w, k_, stride_, pad_);
        Tensor y({batch, ch_, oh, ow});
#pragma omp parallel for schedule(static)
        for (long b = 0; b < batch; ++b) {
            for (long c = 0; c < ch_; ++c) {
                const float* xs = x.data() + (b * ch_ + c) * h * w;
                const float* ws = w_.value.data() + c * k_ * k_;
                float* ys = y.data() + (b * ch_ + c) * oh * ow;
                for (long i = 0; i < oh; ++i) {
                    for (long j = 0; j < ow; ++j) {
                        float acc = b_.value[c];
                        for (long ki = 0; ki < k_; ++ki) {
                            long yy = i * stride_ - pad_ + ki;
                            if (yy < 0 || yy >= h) continue;
                            for (long kj = 0; kj < k_; ++kj) {
                                long xx = j * stride_ - pad_ + kj;
                                if (xx >= 0 && xx < w) acc += ws[ki * k_ + kj] * xs[yy * w + xx];
                            }
                        }
                        ys[i * ow + j] = acc;
                    }
                }
            }
        }
        if (tape) tape->stash(this).push_back(x);
        return y;
    }

    Tensor backward(const Tensor& gy, const Tape& tape) override {
        const Tensor& x = tape.saved(this).at(0);
        const long batch = x.dim(0), h = x.dim(2), w = x.dim(3);
        const long oh = gy.dim(2), ow = gy.dim(3);
        w_.ensure_grad();
        b_.ensure_grad();
        Tensor gx({batch, ch_, h, w});
        // Channel-parallel: per (c) accumulation is private to the thread.
#pragma omp parallel for schedule(static)
        for (long c = 0; c < ch_; ++c) {
            float* dws = w_.grad.data() + c * k_ * k_;
            double db = 0.0;
            for (long b = 0; b < batch; ++b) {
                const float* xs = x.data() + (b * ch_ + c) * h * w;
                const float* gys = gy.data() + (b * ch_ + c) * oh * ow;
                float* gxs = gx.data() + (b * ch_ + c) * h * w;
                const float* ws = w_.value.data() + c * k_ * k_;
                for (long i = 0; i < oh; ++i) {
                    for (long j = 0; j < ow; ++j) {
                        float g = gys[i * ow + j];
                        db += g;
                        for (long ki = 0; ki < k_; ++ki) {
                            long yy = i * stride_ - pad_ + ki;
                            if (yy < 0 || yy >= h) continue;
                            for (long kj = 0; kj < k_; ++kj) {
                                long xx = j * stride_ - pad_ + kj;
                                if (xx >= 0 && xx < w) {
                                    dws[ki * k_ + kj] += g * xs[yy * w + xx];
                                    gxs[yy * w + xx] += g * ws[ki * k_ + kj];
                                }
                            }
                        }
                    }
                }
            }
            b_.grad[c] += static_cast<float>(db);
        }
        return gx;
    }

    void collect_params(std::vector<Param*>& out) override {
        out.push_back(&w_);
        out.push_back(&b_);
    }

    void collect_state(const std::string& prefix, NamedState& out) override {
        out.emplace_back(prefix + "weight", &w_.value);
        out.emplace_back(prefix + "bias", &b_.value);
    }

    void init_params(std::uint64_t seed, std::uint64_t& counter) override {
        he_normal_init(w_.value, k_ * k_, seed, counter);
        b_.value.zero();
    }

    std::vector<long> out_shape(const std::vector<long>& in) const override {
        return {ch_, detail::conv_out_dim(in[1], k_, stride_, pad_),
                detail::conv_out_dim(in[2], k_, stride_, pad_)};
    }

private:
    long ch_, k_, stride_, pad_;
    Param w_, b_;
};

// ---------------------------------------------------------------------------
// Batch normalization

class BatchNorm2d : public Layer {
public:
    explicit BatchNorm2d(long channels, double momentum = 0.1, double eps = 1e-5)
        : ch_(channels), momentum_(momentum), eps_(eps) {
        gamma_.name = "gamma";
        gamma_.value = Tensor::full({ch_}, 1.0f);
        beta_.name = "beta";
        beta_.value = Tensor({ch_});
        running_mean_ = Tensor({ch_});
        running_var_ = Tensor::full({ch_}, 1.0f);
    }

    Tensor forward(const Tensor& x, Mode mode, Tape* tape) override {
        require(x.rank() == 4 && x.dim(1) == ch_, "BatchNorm2d: bad input shape");
        const long batch = x.dim(0), h = x.dim(2), w = x.dim(3);
        const long n = batch * h * w;
        Tensor mean({ch_}), invstd({ch_});
        if (mode == Mode::train) {
            require(n >= 2, "BatchNorm2d: train mode needs more than one value per channel");
#pragma omp parallel for schedule(static)
            for (long c = 0; c < ch_; ++c) {
                double s = 0.0, sq = 0.0;
                for (long b = 0; b < batch; ++b) {
                    const float* p = x.data() + (b * ch_ + c) * h * w;
                    for (long i = 0; i < h * w; ++i) {
                        s += p[i];
                        sq += static_cast<double>(p[i]) * p[i];
                    }
                }
                double mu = s / n;
                double var = sq / n - mu * mu;
                if (var < 0.0) var = 0.0;
                double var_u = var * n / (n - 1);
                mean[c] = static_cast<float>(mu);
                invstd[c] = static_cast<float>(1.0 / std::sqrt(var + eps_));
                running_mean_[c] = static_cast<float>((1.0 - momentum_) * running_mean_[c] +
                                                      momentum_ * mu);
                running_var_[c] = static_cast<float>((1.0 - momentum_) * running_var_[c] +
                                                     momentum_ * var_u);
            }
        } else {
            for (long c = 0; c < ch_; ++c) {
                mean[c] = running_mean_[c];
                invstd[c] = static_cast<float>(
                    1.0 / std::sqrt(static_cast<double>(running_var_[c]) + eps_));
            }
        }
        Tensor y(x.shape());
        Tensor xhat(x.shape());
#pragma omp parallel for schedule(static)
        for (long b = 0; b < batch; ++b) {
            for (long c = 0; c < ch_; ++c) {
                const float* p = x.data() + (b * ch_ + c) * h * w;
                float* ph = xhat.data() + (b * ch_ + c) * h * w;
                float* py = y.data() + (b * ch_ + c) * h * w;
                const float mu = mean[c], is = invstd[c];
                const float g = gamma_.value[c], bt = beta_.value[c];
                for (long i = 0; i < h * w; ++i) {
                    ph[i] = (p[i] - mu) * is;
                    py[i] = g * ph[i] + bt;
                }
            }
        }
        if (tape) {
            auto& slot = tape->stash(this);
            slot.push_back(std::move(xhat));
            slot.push_back(std::move(invstd));
        }
        return y;
    }

    Tensor backward(const Tensor& gy, const Tape& tape) override {
        const auto& slot = tape.saved(this);
        const Tensor& xhat = slot.at(0);
        const Tensor& invstd = slot.at(1);
        const long batch = gy.dim(0), h = gy.dim(2), w = gy.dim(3);
        const long n = batch * h * w;
        gamma_.ensure_grad();
        beta_.ensure_grad();
        Tensor gx(gy.shape());
#pragma omp parallel for schedule(static)
        for (long c = 0; c < ch_; ++c) {
            double sum_gy = 0.0, sum_gy_xhat = 0.0;
            for (long b = 0; b < batch; ++b) {
                const float* pg = gy.data() + (b * ch_ + c) * h * w;
                const float* ph = xhat.data() + (b * ch_ + c) * h * w;
                for (long i = 0; i < h * w; ++i) {
                    sum_gy += pg[i];
                    sum_gy_xhat += pg[i] * ph[i];
                }
            }
            gamma_.grad[c] += static_cast<float>(sum_gy_xhat);
            beta_.grad[c] += static_cast<float>(sum_gy);
            const double g = gamma_.value[c];
            const double is = invstd[c];
            if (tape.mode == Mode::train) {
                const double k1 = g * is;
                const double mean_gy = sum_gy / n;
                const double mean_gy_xhat = sum_gy_xhat / n;
                for (long b = 0; b < batch; ++b) {
                    const float* pg = gy.data() + (b * ch_ + c) * h * w;
                    const float* ph = xhat.data() + (b * ch_ + c) * h * w;
                    float* px = gx.data() + (b * ch_ + c) * h * w;
                    for (long i = 0; i < h * w; ++i) {
                        px[i] = static_cast<float>(k1 * (pg[i] - mean_gy - ph[i] * mean_gy_xhat));
                    }
                }
            } else {
                // Running statistics are constants: a per-channel affine map.
                const double k1 = g * is;
                for (long b = 0; b < batch; ++b) {
                    const float* pg = gy.data() + (b * ch_ + c) * h * w;
                    float* px = gx.data() + (b * ch_ + c) * h * w;
                    for (long i = 0; i < h * w; ++i) px[i] = static_cast<float>(k1 * pg[i]);
                }
            }
        }
        return gx;
    }

    void collect_params(std::vector<Param*>& out) override {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }

    void collect_state(const std::string& prefix, NamedState& out) override {
        out.emplace_back(prefix + "gamma", &gamma_.value);
        out.emplace_back(prefix + "beta", &beta_.value);
        out.emplace_back(prefix + "running_mean", &running_mean_);
        out.emplace_back(prefix + "running_var", &running_var_);
    }

    std::vector<long> out_shape(const std::vector<long>& in) const override { return in; }

private:
    long ch_;
    double momentum_, eps_;
    Param gamma_, beta_;
    Tensor running_mean_, running_var_;
};

// ---------------------------------------------------------------------------
// Activations and pooling

class ReLU : public Layer {
public:
    Tensor forward(const Tensor& x, Mode, Tape* tape) override {
        Tensor y(x.shape());
        if (tape) {
            Tensor mask(x.shape());
#pragma omp parallel for schedule(static)
            for (long i = 0; i < x.numel(); ++i) {
                const bool on = x[i] > 0.0f;
                y[i] = on ? x[i] : 0.0f;
                mask[i] = on ? 1.0f : 0.0f;
            }
            tape->stash(this).push_back(std::move(mask));
        } else {
#pragma omp parallel for schedule(static)
            for (long i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
        }
        return y;
    }

    Tensor backward(const Tensor& gy, const Tape& tape) override {
        const Tensor& mask = tape.saved(this).at(0);
        Tensor gx(gy.shape());
#pragma omp parallel for schedule(static)
        for (long i = 0; i < gy.numel(); ++i) gx[i] = gy[i] * mask[i];
        return gx;
    }

    std::vector<long> out_shape(const std::vector<long>& in) const override { return in; }
};

class ReLU6 : public Layer {
public:
    Tensor forward(const Tensor& x, Mode, Tape* tape) override {
        Tensor y(x.shape());
        for (long i = 0; i < x.numel(); ++i) y[i] = std::min(std::max(x[i], 0.0f), 6.0f);
        if (tape) {
            Tensor mask(x.shape());
            for (long i = 0; i < x.numel(); ++i)
                mask[i] = (x[i] > 0.0f && x[i] < 6.0f) ? 1.0f : 0.0f;
            tape->stash(this).push_back(std::move(mask));
        }
        return y;
    }

    Tensor backward(const Tensor& gy, const Tape& tape) override {
        const Tensor& mask = tape.saved(this).at(0);
        Tensor gx(gy.shape());
        for (long i = 0; i < gy.numel(); ++i) gx[i] = gy[i] * mask[i];
        return gx;
    }

    std::vector<long> out_shape(const std::vector<long>& in) const override { return in; }
};

// x * sigmoid(x)
class Swish : public Layer {
public:
    Tensor forward(const Tensor& x, Mode, Tape* tape) override {
        Tensor y(x.shape());
        Tensor sig(x.shape());
        for (long i = 0; i < x.numel(); ++i) {
            float s = 1.0f / (1.0f + std::exp(-x[i]));
            sig[i] = s;
            y[i] = x[i] * s;
        }
        if (tape) {
            auto& slot = tape->stash(this);
            slot.push_back(x);
            slot.push_back(std::move(sig));
        }
        return y;
    }

    Tensor backward(const Tensor& gy, const Tape& tape) override {
        const auto& slot = tape.saved(this);
        const Tensor& x = slot.at(0);
        const Tensor& sig = slot.at(1);
        Tensor gx(gy.shape());
        for (long i = 0; i < gy.numel(); ++i) {
            float s = sig[i];
            gx[i] = gy[i] * (s + x[i] * s * (1.0f - s));
        }
        return gx;
    }

    std::vector<long> out_shape(const std::vector<long>& in) const override { return in; }
};

class Sigmoid : public Layer {
public:
    Tensor forward(const Tensor& x, Mode, Tape* tape) override {
        Tensor y(x.shape());
        for (long i = 0; i < x.numel(); ++i) y[i] = 1.0f / (1.0f + std::exp(-x[i]));
        if (tape) tape->stash(this).push_back(y);
        return y;
    }

    Tensor backward(const Tensor& gy, const Tape& tape) override {
        const Tensor& y = tape.saved(this).at(0);
        Tensor gx(gy.shape());
        for (long i = 0; i < gy.numel(); ++i) gx[i] = gy[i] * y[i] * (1.0f - y[i]);
        return gx;
    }

    std::vector<long> out_shape(const std::vector<long>& in) const override { return in; }
};

class MaxPool2d : public Layer {
public:
    explicit MaxPool2d(long kernel = 2, long stride = 2) : k_(kernel), stride_(stride) {}

    Tensor forward(const Tensor& x, Mode, Tape* tape) override {
        const long batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        const long oh = (h - k_) / stride_ + 1;
        const long ow = (w - k_) / stride_ + 1;
        Tensor y({batch, c, oh, ow});
        Tensor idx({batch, c, oh, ow});
        for (long b = 0; b < batch; ++b) {
            for (long ch = 0; ch < c; ++ch) {
                const float* xs = x.data() + (b * c + ch) * h * w;
                float* ys = y.data() + (b * c + ch) * oh * ow;
                float* is = idx.data() + (b * c + ch) * oh * ow;
                for (long i = 0; i < oh; ++i) {
                    for (long j = 0; j < ow; ++j) {
                        long best = (i * stride_) * w + j * stride_;
                        float best_v = xs[best];
                        for (long ki = 0; ki < k_; ++ki) {
                            for (long kj = 0; kj < k_; ++kj) {
                                long p = (i * stride_ + ki) * w + (j * stride_ + kj);
                                if (xs[p] > best_v) {
                                    best_v = xs[p];
                                    best = p;
                                }
                            }
                        }
                        ys[i * ow + j] = best_v;
                        is[i * ow + j] = static_cast<float>(best);
                    }
                }
            }
        }
        if (tape) {
            auto& slot = tape->stash(this);
            slot.push_back(std::move(idx));
            slot.push_back(Tensor::from_vector({4}, {static_cast<float>(batch),
                                                     static_cast<float>(c), static_cast<float>(h),
                                                     static_cast<float>(w)}));
        }
        return y;
    }

    Tensor backward(const Tensor& gy, const Tape& tape) override {
        const auto& slot = tape.saved(this);
        const Tensor& idx = slot.at(0);
        const Tensor& dims = slot.at(1);
        const long batch = static_cast<long>(dims[0]), c = static_cast<long>(dims[1]);
        const long h = static_cast<long>(dims[2]), w = static_cast<long>(dims[3]);
        const long oh = gy.dim(2), ow = gy.dim(3);
        Tensor gx({batch, c, h, w});
        for (long b = 0; b < batch; ++b) {
            for (long ch = 0; ch < c; ++ch) {
                const float* gys = gy.data() + (b * c + ch) * oh * ow;
                const float* is = idx.data() + (b * c + ch) * oh * ow;
                float* gxs = gx.data() + (b * c + ch) * h * w;
                for (long i = 0; i < oh * ow; ++i) gxs[static_cast<long>(is[i])] += gys[i];
            }
        }
        return gx;
    }

    std::vector<long> out_shape(const std::vector<long>& in) const override {
        return {in[0], (in[1] - k_) / stride_ + 1, (in[2] - k_) / stride_ + 1};
    }

private:
    long k_, stride_;
};

// B,C,H,W -> B,C mean over the spatial grid.
class GlobalAvgPool : public Layer {
public:
    Tensor forward(const Tensor& x, Mode, Tape* tape) override {
        const long batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        Tensor y({batch, c});
        const float inv = 1.0f / static_cast<float>(h * w);
        for (long b = 0; b < batch; ++b) {
            for (long ch = 0; ch < c; ++ch) {
                const float* p = x.data() + (b * c + ch) * h * w;
                float s = 0.0f;
                for (long i = 0; i < h * w; ++i) s += p[i];
                y.at(b, ch) = s * inv;
            }
        }
        if (tape) {
            tape->stash(this).push_back(
                Tensor::from_vector({2}, {static_cast<float>(h), static_cast<float>(w)}));
        }
        return y;
    }

    Tensor backward(const Tensor& gy, const Tape& tape) override {
        const Tensor& dims = tape.saved(this).at(0);
        const long h = static_cast<long>(dims[0]), w = static_cast<long>(dims[1]);
        const long batch = gy.dim(0), c = gy.dim(1);
        Tensor gx({batch, c, h, w});
        const float inv = 1.0f / static_cast<float>(h * w);
        for (long b = 0; b < batch; ++b) {
            for (long ch = 0; ch < c; ++ch) {
                float g = gy.at(b, ch) * inv;
                float* p = gx.data() + (b * c + ch) * h * w;
                for (long i = 0; i < h * w; ++i) p[i] = g;
            }
        }
        return gx;
    }

    std::vector<long> out_shape(const std::vector<long>& in) const override { return {in[0]}; }
};

class Flatten : public Layer {
public:
    Tensor forward(const Tensor& x, Mode, Tape* tape) override {
        std::vector<long> shape = x.shape();
        long features = 1;
        for (std::size_t i = 1; i < shape.size(); ++i) features *= shape[i];
        Tensor y = x;
        if (tape) {
            Tensor dims({static_cast<long>(shape.size())});
            for (std::size_t i = 0; i < shape.size(); ++i) dims[static_cast<long>(i)] =
                static_cast<float>(shape[i]);
            tape->stash(this).push_back(std::move(dims));
        }
        return Tensor::from_vector({x.dim(0), features},
                                   std::vector<float>(y.data(), y.data() + y.numel()));
    }

    Tensor backward(const Tensor& gy, const Tape& tape) override {
        const Tensor& dims = tape.saved(this).at(0);
        std::vector<long> shape(static_cast<std::size_t>(dims.numel()));
        for (long i = 0; i < dims.numel(); ++i) shape[static_cast<std::size_t>(i)] =
            static_cast<long>(dims[i]);
        return Tensor::from_vector(shape,
                                   std::vector<float>(gy.data(), gy.data() + gy.numel()));
    }

    std::vector<long> out_shape(const std::vector<long>& in) const override {
        long features = 1;
        for (long d : in) features *= d;
        return {features};
    }
};

class Linear : public Layer {
public:
    Linear(long in_features, long out_features, bool bias = true)
        : in_(in_features), out_(out_features), has_bias_(bias) {
        w_.name = "weight";
        w_.value = Tensor({out_, in_});
        if (has_bias_) {
            b_.name = "bias";
            b_.value = Tensor({out_});
        }
    }

    Tensor forward(const Tensor& x, Mode, Tape* tape) override {
        require(x.rank() == 2 && x.dim(1) == in_, "Linear: bad input shape " + x.shape_str());
        const long batch = x.dim(0);
        Tensor y({batch, out_});
        y.mat(batch, out_).noalias() = x.mat(batch, in_) * w_.value.mat(out_, in_).transpose();
        if (has_bias_) {
            y.mat(batch, out_).rowwise() += ConstVecMapF(b_.value.data(), out_).transpose();
        }
        if (tape) tape->stash(this).push_back(x);
        return y;
    }

    Tensor backward(const Tensor& gy, const Tape& tape) override {
        const Tensor& x = tape.saved(this).at(0);
        const long batch = x.dim(0);
        w_.ensure_grad();
        if (has_bias_) b_.ensure_grad();
        w_.grad.mat(out_, in_).noalias() +=
            gy.mat(batch, out_).transpose() * x.mat(batch, in_);
        if (has_bias_) {
            VecMapF(b_.grad.data(), out_) += gy.mat(batch, out_).colwise().sum().transpose();
        }
        Tensor gx({batch, in_});
        gx.mat(batch, in_).noalias() = gy.mat(batch, out_) * w_.value.mat(out_, in_);
        return gx;
    }

    void collect_params(std::vector<Param*>& out) override {
        out.push_back(&w_);
        if (has_bias_) out.push_back(&b_);
    }

    void collect_state(const std::string& prefix, NamedState& out) override {
        out.emplace_back(prefix + "weight", &w_.value);
        if (has_bias_) out.emplace_back(prefix + "bias", &b_.value);
    }

    void init_params(std::uint64_t seed, std::uint64_t& counter) override {
        he_normal_init(w_.value, in_, seed, counter);
        if (has_bias_) b_.value.zero();
    }

    std::vector<long> out_shape(const std::vector<long>&) const override { return {out_}; }

private:
    long in_, out_;
    bool has_bias_;
    Param w_, b_;
};

// ---------------------------------------------------------------------------
// Containers and blocks

class Sequential : public Layer {
public:
    Sequential() = default;

    Sequential& add(std::unique_ptr<Layer> layer) {
        layers_.push_back(std::move(layer));
        return *this;
    }

    template <typename L, typename... Args>
    Sequential& emplace(Args&&... args) {
        layers_.push_back(std::make_unique<L>(std::forward<Args>(args)...));
        return *this;
    }

    bool empty() const { return layers_.empty(); }

    Tensor forward(const Tensor& x, Mode mode, Tape* tape) override {
        Tensor h = x;
        for (auto& l : layers_) h = l->forward(h, mode, tape);
        return h;
    }

    Tensor backward(const Tensor& gy, const Tape& tape) override {
        Tensor g = gy;
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g, tape);
        return g;
    }

    void collect_params(std::vector<Param*>& out) override {
        for (auto& l : layers_) l->collect_params(out);
    }

    void collect_state(const std::string& prefix, NamedState& out) override {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            layers_[i]->collect_state(prefix + std::to_string(i) + ".", out);
        }
    }

    void init_params(std::uint64_t seed, std::uint64_t& counter) override {
        for (auto& l : layers_) l->init_params(seed, counter);
    }

    std::vector<long> out_shape(const std::vector<long>& in) const override {
        std::vector<long> s = in;
        for (auto& l : layers_) s = l->out_shape(s);
        return s;
    }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

// y = main(x) + shortcut(x), with an optional ReLU after the join. A null
// shortcut is the identity.
class ResidualBlock : public Layer {
public:
    ResidualBlock(std::unique_ptr<Layer> main, std::unique_ptr<Layer> shortcut, bool post_relu)
        : main_(std::move(main)), shortcut_(std::move(shortcut)), post_relu_(post_relu) {}

    Tensor forward(const Tensor& x, Mode mode, Tape* tape) override {
        Tensor m = main_->forward(x, mode, tape);
        Tensor s = shortcut_ ? shortcut_->forward(x, mode, tape) : x;
        require(m.same_shape(s), "ResidualBlock: branch shape mismatch " + m.shape_str() +
                                     " vs " + s.shape_str());
        Tensor y(m.shape());
        for (long i = 0; i < m.numel(); ++i) y[i] = m[i] + s[i];
        if (post_relu_) {
            if (tape) {
                Tensor mask(y.shape());
                for (long i = 0; i < y.numel(); ++i) mask[i] = y[i] > 0.0f ? 1.0f : 0.0f;
                tape->stash(this).push_back(std::move(mask));
            }
            for (long i = 0; i < y.numel(); ++i) y[i] = y[i] > 0.0f ? y[i] : 0.0f;
        }
        return y;
    }

    Tensor backward(const Tensor& gy, const Tape& tape) override {
        Tensor g = gy;
        if (post_relu_) {
            const Tensor& mask = tape.saved(this).at(0);
            g = Tensor(gy.shape());
            for (long i = 0; i < gy.numel(); ++i) g[i] = gy[i] * mask[i];
        }
        Tensor gm = main_->backward(g, tape);
        Tensor gs = shortcut_ ? shortcut_->backward(g, tape) : g;
        Tensor gx(gm.shape());
        for (long i = 0; i < gm.numel(); ++i) gx[i] = gm[i] + gs[i];
        return gx;
    }

    void collect_params(std::vector<Param*>& out) override {
        main_->collect_params(out);
        if (shortcut_) shortcut_->collect_params(out);
    }

    void collect_state(const std::string& prefix, NamedState& out) override {
        main_->collect_state(prefix + "main.", out);
        if (shortcut_) shortcut_->collect_state(prefix + "shortcut.", out);
    }

    void init_params(std::uint64_t seed, std::uint64_t& counter) override {
        main_->init_params(seed, counter);
        if (shortcut_) shortcut_->init_params(seed, counter);
    }

    std::vector<long> out_shape(const std::vector<long>& in) const override {
        return main_->out_shape(in);
    }

private:
    std::unique_ptr<Layer> main_;
    std::unique_ptr<Layer> shortcut_;
    bool post_relu_;
};

// Squeeze-and-excitation: per-channel gates from globally pooled features.
class SEBlock : public Layer {
public:
    SEBlock(long channels, long reduced)
        : ch_(channels),
          fc1_(channels, reduced),
          fc2_(reduced, channels) {}

    Tensor forward(const Tensor& x, Mode mode, Tape* tape) override {
        const long batch = x.dim(0), h = x.dim(2), w = x.dim(3);
        Tensor s({batch, ch_});
        const float inv = 1.0f / static_cast<float>(h * w);
        for (long b = 0; b < batch; ++b) {
            for (long c = 0; c < ch_; ++c) {
                const float* p = x.data() + (b * ch_ + c) * h * w;
                float acc = 0.0f;
                for (long i = 0; i < h * w; ++i) acc += p[i];
                s.at(b, c) = acc * inv;
            }
        }
        Tensor hdn = relu_.forward(fc1_.forward(s, mode, tape), mode, tape);
        Tensor gate = sig_.forward(fc2_.forward(hdn, mode, tape), mode, tape);
        Tensor y(x.shape());
        for (long b = 0; b < batch; ++b) {
            for (long c = 0; c < ch_; ++c) {
                const float g = gate.at(b, c);
                const float* p = x.data() + (b * ch_ + c) * h * w;
                float* py = y.data() + (b * ch_ + c) * h * w;
                for (long i = 0; i < h * w; ++i) py[i] = p[i] * g;
            }
        }
        if (tape) {
            auto& slot = tape->stash(this);
            slot.push_back(x);
            slot.push_back(std::move(gate));
        }
        return y;
    }

    Tensor backward(const Tensor& gy, const Tape& tape) override {
        const auto& slot = tape.saved(this);
        const Tensor& x = slot.at(0);
        const Tensor& gate = slot.at(1);
        const long batch = x.dim(0), h = x.dim(2), w = x.dim(3);
        Tensor ggate({batch, ch_});
        Tensor gx(x.shape());
        for (long b = 0; b < batch; ++b) {
            for (long c = 0; c < ch_; ++c) {
                const float g = gate.at(b, c);
                const float* px = x.data() + (b * ch_ + c) * h * w;
                const float* pg = gy.data() + (b * ch_ + c) * h * w;
                float* pgx = gx.data() + (b * ch_ + c) * h * w;
                float acc = 0.0f;
                for (long i = 0; i < h * w; ++i) {
                    acc += pg[i] * px[i];
                    pgx[i] = pg[i] * g;
                }
                ggate.at(b, c) = acc;
            }
        }
        Tensor gs = fc1_.backward(relu_.backward(fc2_.backward(sig_.backward(ggate, tape), tape),
                                                 tape),
                                  tape);
        const float inv = 1.0f / static_cast<float>(h * w);
        for (long b = 0; b < batch; ++b) {
            for (long c = 0; c < ch_; ++c) {
                const float g = gs.at(b, c) * inv;
                float* pgx = gx.data() + (b * ch_ + c) * h * w;
                for (long i = 0; i < h * w; ++i) pgx[i] += g;
            }
        }
        return gx;
    }

    void collect_params(std::vector<Param*>& out) override {
        fc1_.collect_params(out);
        fc2_.collect_params(out);
    }

    void collect_state(const std::string& prefix, NamedState& out) override {
        fc1_.collect_state(prefix + "fc1.", out);
        fc2_.collect_state(prefix + "fc2.", out);
    }

    void init_params(std::uint64_t seed, std::uint64_t& counter) override {
        fc1_.init_params(seed, counter);
        fc2_.init_params(seed, counter);
    }

    std::vector<long> out_shape(const std::vector<long>& in) const override { return in; }

private:
    long ch_;
    Linear fc1_, fc2_;
    ReLU relu_;
    Sigmoid sig_;
};

}  // namespace lisard
