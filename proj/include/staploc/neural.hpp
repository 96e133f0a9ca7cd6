// Self-contained CNN engine: NCHW tensors, conv/batchnorm/relu/maxpool/dense
// layers with hand-written backprop, Adam, deterministic mini-batch training,
// layer freezing with few-shot fine-tuning, and a binary checkpoint format.
// Heavy lifting (im2col GEMMs, dense products) routes through Eigen.
//
// Parameter convention: each layer exposes one contiguous buffer
// (weights-then-bias, or gamma-then-beta) for the optimizer and checkpoints.
#pragma once

#include "staploc/common.hpp"

#include <Eigen/Dense>

#include <cassert>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

namespace staploc::neural {

template <class T>
struct Batch {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> v;  // NCHW, row-major

    void resize(int n_, int c_, int h_, int w_) {
        n = n_;
        c = c_;
        h = h_;
        w = w_;
        v.resize(static_cast<std::size_t>(n) * c * h * w);
    }
    std::size_t per_example() const { return static_cast<std::size_t>(c) * h * w; }
    T* ex(int i) { return v.data() + static_cast<std::size_t>(i) * per_example(); }
    const T* ex(int i) const { return v.data() + static_cast<std::size_t>(i) * per_example(); }
};

namespace tags {
inline constexpr std::uint32_t kConv = 1, kBatchNorm = 2, kRelu = 3, kMaxPool = 4, kFlatten = 5,
                               kDense = 6, kTanh = 7;
}

template <class T>
class Layer {
public:
    virtual ~Layer() = default;
    virtual const char* kind() const = 0;
    virtual std::uint32_t type_tag() const = 0;
    virtual std::vector<std::uint32_t> manifest_dims() const { return {}; }
    virtual std::unique_ptr<Layer<T>> clone() const = 0;
    virtual void forward(const Batch<T>& x, Batch<T>& y, bool training) = 0;
    // Consumes the gradient wrt this layer's output; fills the gradient wrt
    // its input and (for parameterized layers) overwrites parameter grads.
    virtual void backward(const Batch<T>& dy, Batch<T>& dx) = 0;
    virtual std::size_t param_count() const { return params_.size(); }
    virtual T* param_data() { return params_.data(); }
    virtual T* grad_data() { return grads_.data(); }
    virtual std::size_t stat_count() const { return 0; }  // BN running stats
    virtual T* stat_data() { return nullptr; }
    virtual void init_params(Rng&) {}

    bool trainable = true;
    bool frozen = false;  // BN: force running statistics even in training mode

protected:
    void alloc_params(std::size_t n) {
        params_.assign(n, T(0));
        grads_.assign(n, T(0));
    }
    std::vector<T> params_, grads_;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ColMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>>;
template <class T>
using CColMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>>;
template <class T>
using RowMap = Eigen::Map<RowMat<T>>;
template <class T>
using CRowMap = Eigen::Map<const RowMat<T>>;
template <class T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;

// 1/sqrt(fan_in) uniform bound throughout.  Batch-norm rescales the conv
// outputs anyway, so the smaller bound costs nothing in signal propagation
// while Adam's fixed step size adapts small weights proportionally faster.
template <class T>
void fill_fan_in_uniform(T* data, std::size_t count, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < count; ++i)
        data[i] = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace detail

// 2D valid convolution, stride 1, square kernel, via im2col + GEMM.
template <class T>
class Conv final : public Layer<T> {
public:
    Conv(int in_c, int out_c, int k) : in_c_(in_c), out_c_(out_c), k_(k) {
        if (in_c < 1 || out_c < 1 || k < 1) throw std::invalid_argument("Conv: bad dims");
        this->alloc_params(static_cast<std::size_t>(out_c_) * patch() + out_c_);
    }
    const char* kind() const override { return "conv"; }
    std::uint32_t type_tag() const override { return tags::kConv; }
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv<T>>(*this); }
    std::vector<std::uint32_t> manifest_dims() const override {
        return {static_cast<std::uint32_t>(in_c_), static_cast<std::uint32_t>(out_c_),
                static_cast<std::uint32_t>(k_)};
    }
    void init_params(Rng& rng) override {
        detail::fill_fan_in_uniform(this->params_.data(), weight_count(), patch(), rng);
        std::fill(this->params_.begin() + static_cast<std::ptrdiff_t>(weight_count()),
                  this->params_.end(), T(0));
    }

    void forward(const Batch<T>& x, Batch<T>& y, bool) override {
        if (x.c != in_c_ || x.h < k_ || x.w < k_)
            throw std::invalid_argument("Conv: input shape mismatch");
        n_ = x.n;
        in_h_ = x.h;
        in_w_ = x.w;
        oh_ = x.h - k_ + 1;
        ow_ = x.w - k_ + 1;
        const std::size_t ncols = static_cast<std::size_t>(n_) * oh_ * ow_;
        col_.resize(patch() * ncols);
        im2col(x);

        out_buf_.resize(static_cast<std::size_t>(out_c_) * ncols);
        detail::RowMap<T> out_m(out_buf_.data(), out_c_, static_cast<Eigen::Index>(ncols));
        detail::CRowMap<T> w_m(this->params_.data(), out_c_, static_cast<Eigen::Index>(patch()));
        detail::CRowMap<T> col_m(col_.data(), static_cast<Eigen::Index>(patch()),
                                 static_cast<Eigen::Index>(ncols));
        out_m.noalias() = w_m * col_m;

        y.resize(n_, out_c_, oh_, ow_);
        const std::size_t hw = static_cast<std::size_t>(oh_) * ow_;
        const T* bias = this->params_.data() + weight_count();
        for (int ex = 0; ex < n_; ++ex)
            for (int oc = 0; oc < out_c_; ++oc) {
                const T* src = out_buf_.data() + static_cast<std::size_t>(oc) * ncols + ex * hw;
                T* dst = y.ex(ex) + static_cast<std::size_t>(oc) * hw;
                for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bias[oc];
            }
    }

    void backward(const Batch<T>& dy, Batch<T>& dx) override {
        const std::size_t ncols = static_cast<std::size_t>(n_) * oh_ * ow_;
        const std::size_t hw = static_cast<std::size_t>(oh_) * ow_;
        dout_buf_.resize(static_cast<std::size_t>(out_c_) * ncols);
        for (int ex = 0; ex < n_; ++ex)
            for (int oc = 0; oc < out_c_; ++oc)
                std::memcpy(dout_buf_.data() + static_cast<std::size_t>(oc) * ncols + ex * hw,
                            dy.ex(ex) + static_cast<std::size_t>(oc) * hw, hw * sizeof(T));

        detail::CRowMap<T> dout_m(dout_buf_.data(), out_c_, static_cast<Eigen::Index>(ncols));
        detail::CRowMap<T> col_m(col_.data(), static_cast<Eigen::Index>(patch()),
                                 static_cast<Eigen::Index>(ncols));
        detail::RowMap<T> dw_m(this->grads_.data(), out_c_, static_cast<Eigen::Index>(patch()));
        dw_m.noalias() = dout_m * col_m.transpose();
        // Fixed-order accumulation: vectorized reductions would make the sum
        // order depend on buffer alignment and break bitwise reproducibility.
        T* db = this->grads_.data() + weight_count();
        for (int oc = 0; oc < out_c_; ++oc) {
            const T* row = dout_buf_.data() + static_cast<std::size_t>(oc) * ncols;
            double acc = 0.0;
            for (std::size_t i = 0; i < ncols; ++i) acc += static_cast<double>(row[i]);
            db[oc] = static_cast<T>(acc);
        }

        dcol_.resize(col_.size());
        detail::RowMap<T> dcol_m(dcol_.data(), static_cast<Eigen::Index>(patch()),
                                 static_cast<Eigen::Index>(ncols));
        detail::CRowMap<T> w_m(this->params_.data(), out_c_, static_cast<Eigen::Index>(patch()));
        dcol_m.noalias() = w_m.transpose() * dout_m;

        dx.resize(n_, in_c_, in_h_, in_w_);
        std::fill(dx.v.begin(), dx.v.end(), T(0));
        col2im_add(dx);
    }

private:
    std::size_t patch() const { return static_cast<std::size_t>(in_c_) * k_ * k_; }
    std::size_t weight_count() const { return static_cast<std::size_t>(out_c_) * patch(); }

    void im2col(const Batch<T>& x) {
        const std::size_t ncols = static_cast<std::size_t>(n_) * oh_ * ow_;
        for (int ci = 0; ci < in_c_; ++ci)
            for (int ki = 0; ki < k_; ++ki)
                for (int kj = 0; kj < k_; ++kj) {
                    const std::size_t row = (static_cast<std::size_t>(ci) * k_ + ki) * k_ + kj;
                    T* dst_row = col_.data() + row * ncols;
                    for (int ex = 0; ex < n_; ++ex) {
                        const T* src_plane =
                            x.ex(ex) + static_cast<std::size_t>(ci) * in_h_ * in_w_;
                        for (int yy = 0; yy < oh_; ++yy)
                            std::memcpy(dst_row + (static_cast<std::size_t>(ex) * oh_ + yy) * ow_,
                                        src_plane + static_cast<std::size_t>(yy + ki) * in_w_ + kj,
                                        static_cast<std::size_t>(ow_) * sizeof(T));
                    }
                }
    }

    void col2im_add(Batch<T>& dx) {
        const std::size_t ncols = static_cast<std::size_t>(n_) * oh_ * ow_;
        for (int ci = 0; ci < in_c_; ++ci)
            for (int ki = 0; ki < k_; ++ki)
                for (int kj = 0; kj < k_; ++kj) {
                    const std::size_t row = (static_cast<std::size_t>(ci) * k_ + ki) * k_ + kj;
                    const T* src_row = dcol_.data() + row * ncols;
                    for (int ex = 0; ex < n_; ++ex) {
                        T* dst_plane = dx.ex(ex) + static_cast<std::size_t>(ci) * in_h_ * in_w_;
                        for (int yy = 0; yy < oh_; ++yy) {
                            T* dst = dst_plane + static_cast<std::size_t>(yy + ki) * in_w_ + kj;
                            const T* src =
                                src_row + (static_cast<std::size_t>(ex) * oh_ + yy) * ow_;
                            for (int xx = 0; xx < ow_; ++xx) dst[xx] += src[xx];
                        }
                    }
                }
    }

    int in_c_, out_c_, k_;
    int n_ = 0, in_h_ = 0, in_w_ = 0, oh_ = 0, ow_ = 0;
    std::vector<T> col_, dcol_, out_buf_, dout_buf_;
};

// Spatial batch normalization (per channel), biased batch variance,
// eps 1e-5, running-stat momentum 0.1.
template <class T>
class BatchNorm final : public Layer<T> {
public:
    explicit BatchNorm(int c) : c_(c) {
        if (c < 1) throw std::invalid_argument("BatchNorm: bad channel count");
        this->alloc_params(2 * static_cast<std::size_t>(c));
        std::fill_n(this->params_.data(), c_, T(1));  // gamma = 1, beta = 0
        stats_.assign(2 * static_cast<std::size_t>(c), T(0));
        std::fill_n(stats_.data() + c_, c_, T(1));  // running var = 1
    }
    const char* kind() const override { return "batchnorm"; }
    std::uint32_t type_tag() const override { return tags::kBatchNorm; }
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BatchNorm<T>>(*this); }
    std::vector<std::uint32_t> manifest_dims() const override {
        return {static_cast<std::uint32_t>(c_)};
    }
    std::size_t stat_count() const override { return stats_.size(); }
    T* stat_data() override { return stats_.data(); }

    void forward(const Batch<T>& x, Batch<T>& y, bool training) override {
        if (x.c != c_) throw std::invalid_argument("BatchNorm: channel mismatch");
        n_ = x.n;
        h_ = x.h;
        w_ = x.w;
        y.resize(x.n, x.c, x.h, x.w);
        xhat_.resize(x.v.size());
        invstd_.resize(static_cast<std::size_t>(c_));
        batch_mode_ = training && !this->frozen;

        const std::size_t hw = static_cast<std::size_t>(h_) * w_;
        const double count = static_cast<double>(n_) * hw;
        const T* gamma = this->params_.data();
        const T* beta = this->params_.data() + c_;
        for (int c = 0; c < c_; ++c) {
            double mean, var;
            if (batch_mode_) {
                double s = 0.0, s2 = 0.0;
                for (int ex = 0; ex < n_; ++ex) {
                    const T* p = x.ex(ex) + c * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        s += p[i];
                        s2 += static_cast<double>(p[i]) * p[i];
                    }
                }
                mean = s / count;
                var = std::max(s2 / count - mean * mean, 0.0);
                stats_[static_cast<std::size_t>(c)] =
                    static_cast<T>(0.9 * stats_[static_cast<std::size_t>(c)] + 0.1 * mean);
                stats_[static_cast<std::size_t>(c_ + c)] =
                    static_cast<T>(0.9 * stats_[static_cast<std::size_t>(c_ + c)] + 0.1 * var);
            } else {
                mean = stats_[static_cast<std::size_t>(c)];
                var = stats_[static_cast<std::size_t>(c_ + c)];
            }
            const double inv = 1.0 / std::sqrt(var + 1e-5);
            invstd_[static_cast<std::size_t>(c)] = static_cast<T>(inv);
            for (int ex = 0; ex < n_; ++ex) {
                const T* p = x.ex(ex) + c * hw;
                T* xh = xhat_.data() + (static_cast<std::size_t>(ex) * c_ + c) * hw;
                T* q = y.ex(ex) + c * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    xh[i] = static_cast<T>((p[i] - mean) * inv);
                    q[i] = gamma[c] * xh[i] + beta[c];
                }
            }
        }
    }

    void backward(const Batch<T>& dy, Batch<T>& dx) override {
        dx.resize(n_, c_, h_, w_);
        const std::size_t hw = static_cast<std::size_t>(h_) * w_;
        const double count = static_cast<double>(n_) * hw;
        const T* gamma = this->params_.data();
        T* dgamma = this->grads_.data();
        T* dbeta = this->grads_.data() + c_;
        for (int c = 0; c < c_; ++c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int ex = 0; ex < n_; ++ex) {
                const T* d = dy.ex(ex) + c * hw;
                const T* xh = xhat_.data() + (static_cast<std::size_t>(ex) * c_ + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    sum_dy += d[i];
                    sum_dy_xhat += static_cast<double>(d[i]) * xh[i];
                }
            }
            dgamma[c] = static_cast<T>(sum_dy_xhat);
            dbeta[c] = static_cast<T>(sum_dy);
            const double g = gamma[c];
            const double inv = invstd_[static_cast<std::size_t>(c)];
            for (int ex = 0; ex < n_; ++ex) {
                const T* d = dy.ex(ex) + c * hw;
                const T* xh = xhat_.data() + (static_cast<std::size_t>(ex) * c_ + c) * hw;
                T* o = dx.ex(ex) + c * hw;
                if (batch_mode_) {
                    for (std::size_t i = 0; i < hw; ++i)
                        o[i] = static_cast<T>(g * inv *
                                              (d[i] - sum_dy / count - xh[i] * sum_dy_xhat / count));
                } else {
                    for (std::size_t i = 0; i < hw; ++i) o[i] = static_cast<T>(g * inv * d[i]);
                }
            }
        }
    }

private:
    int c_;
    int n_ = 0, h_ = 0, w_ = 0;
    bool batch_mode_ = false;
    std::vector<T> stats_;   // running mean (c), running var (c)
    std::vector<T> xhat_, invstd_;
};

template <class T>
class Relu final : public Layer<T> {
public:
    const char* kind() const override { return "relu"; }
    std::uint32_t type_tag() const override { return tags::kRelu; }
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Relu<T>>(*this); }
    void forward(const Batch<T>& x, Batch<T>& y, bool) override {
        y.resize(x.n, x.c, x.h, x.w);
        mask_.resize(x.v.size());
        for (std::size_t i = 0; i < x.v.size(); ++i) {
            const bool on = x.v[i] > T(0);
            mask_[i] = on;
            y.v[i] = on ? x.v[i] : T(0);
        }
        dims_ = {x.n, x.c, x.h, x.w};
    }
    void backward(const Batch<T>& dy, Batch<T>& dx) override {
        dx.resize(dims_[0], dims_[1], dims_[2], dims_[3]);
        for (std::size_t i = 0; i < dy.v.size(); ++i) dx.v[i] = mask_[i] ? dy.v[i] : T(0);
    }

private:
    std::vector<std::uint8_t> mask_;
    std::array<int, 4> dims_{};
};

// 2x2 max pooling, stride 2, floor semantics (trailing odd row/col dropped).
template <class T>
class MaxPool final : public Layer<T> {
public:
    const char* kind() const override { return "maxpool"; }
    std::uint32_t type_tag() const override { return tags::kMaxPool; }
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPool<T>>(*this); }
    void forward(const Batch<T>& x, Batch<T>& y, bool) override {
        if (x.h < 2 || x.w < 2) throw std::invalid_argument("MaxPool: input too small");
        n_ = x.n;
        c_ = x.c;
        in_h_ = x.h;
        in_w_ = x.w;
        const int oh = x.h / 2, ow = x.w / 2;
        y.resize(x.n, x.c, oh, ow);
        arg_.resize(y.v.size());
        std::size_t oi = 0;
        for (int ex = 0; ex < n_; ++ex)
            for (int c = 0; c < c_; ++c) {
                const T* plane = x.ex(ex) + static_cast<std::size_t>(c) * in_h_ * in_w_;
                for (int yy = 0; yy < oh; ++yy)
                    for (int xx = 0; xx < ow; ++xx, ++oi) {
                        std::size_t best = static_cast<std::size_t>(2 * yy) * in_w_ + 2 * xx;
                        T bv = plane[best];
                        const std::size_t cand[3] = {best + 1, best + in_w_, best + in_w_ + 1};
                        for (std::size_t k : cand)
                            if (plane[k] > bv) {
                                bv = plane[k];
                                best = k;
                            }
                        y.v[oi] = bv;
                        arg_[oi] = (static_cast<std::size_t>(ex) * c_ + c) * in_h_ * in_w_ + best;
                    }
            }
    }
    void backward(const Batch<T>& dy, Batch<T>& dx) override {
        dx.resize(n_, c_, in_h_, in_w_);
        std::fill(dx.v.begin(), dx.v.end(), T(0));
        for (std::size_t i = 0; i < dy.v.size(); ++i) dx.v[arg_[i]] += dy.v[i];
    }

private:
    int n_ = 0, c_ = 0, in_h_ = 0, in_w_ = 0;
    std::vector<std::size_t> arg_;
};

template <class T>
class Flatten final : public Layer<T> {
public:
    const char* kind() const override { return "flatten"; }
    std::uint32_t type_tag() const override { return tags::kFlatten; }
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Flatten<T>>(*this); }
    void forward(const Batch<T>& x, Batch<T>& y, bool) override {
        dims_ = {x.n, x.c, x.h, x.w};
        y.resize(x.n, x.c * x.h * x.w, 1, 1);
        y.v = x.v;  // NCHW is already contiguous per example
    }
    void backward(const Batch<T>& dy, Batch<T>& dx) override {
        dx.resize(dims_[0], dims_[1], dims_[2], dims_[3]);
        dx.v = dy.v;
    }

private:
    std::array<int, 4> dims_{};
};

template <class T>
class Dense final : public Layer<T> {
public:
    Dense(int in, int out) : in_(in), out_(out) {
        if (in < 1 || out < 1) throw std::invalid_argument("Dense: bad dims");
        this->alloc_params(static_cast<std::size_t>(in) * out + out);
    }
    const char* kind() const override { return "dense"; }
    std::uint32_t type_tag() const override { return tags::kDense; }
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dense<T>>(*this); }
    std::vector<std::uint32_t> manifest_dims() const override {
        return {static_cast<std::uint32_t>(in_), static_cast<std::uint32_t>(out_)};
    }
    void init_params(Rng& rng) override {
        // The 1/sqrt(fan_in) bound also keeps the unnormalized head's
        // pre-activations small enough that the saturating output layer
        // starts in its linear region.
        detail::fill_fan_in_uniform(this->params_.data(), static_cast<std::size_t>(in_) * out_,
                                    static_cast<std::size_t>(in_), rng);
        std::fill(this->params_.begin() + static_cast<std::ptrdiff_t>(in_) * out_,
                  this->params_.end(), T(0));
    }

    void forward(const Batch<T>& x, Batch<T>& y, bool) override {
        if (static_cast<std::size_t>(x.c) * x.h * x.w != static_cast<std::size_t>(in_))
            throw std::invalid_argument("Dense: input feature mismatch");
        n_ = x.n;
        x_cache_ = x.v;
        y.resize(x.n, out_, 1, 1);
        detail::CColMap<T> xm(x_cache_.data(), in_, n_);
        detail::ColMap<T> ym(y.v.data(), out_, n_);
        detail::CRowMap<T> wm(this->params_.data(), out_, in_);
        ym.noalias() = wm * xm;
        detail::VecMap<T> bm(this->params_.data() + static_cast<std::size_t>(in_) * out_, out_);
        ym.colwise() += bm;
    }

    void backward(const Batch<T>& dy, Batch<T>& dx) override {
        detail::CColMap<T> dym(dy.v.data(), out_, n_);
        detail::CColMap<T> xm(x_cache_.data(), in_, n_);
        detail::RowMap<T> dwm(this->grads_.data(), out_, in_);
        dwm.noalias() = dym * xm.transpose();
        // Fixed-order bias accumulation for bitwise reproducibility.
        T* db = this->grads_.data() + static_cast<std::size_t>(in_) * out_;
        for (int o = 0; o < out_; ++o) {
            double acc = 0.0;
            for (int ex = 0; ex < n_; ++ex)
                acc += static_cast<double>(dy.v[static_cast<std::size_t>(ex) * out_ + o]);
            db[o] = static_cast<T>(acc);
        }
        dx.resize(n_, in_, 1, 1);
        detail::ColMap<T> dxm(dx.v.data(), in_, n_);
        detail::CRowMap<T> wm(this->params_.data(), out_, in_);
        dxm.noalias() = wm.transpose() * dym;
    }

private:
    int in_, out_;
    int n_ = 0;
    std::vector<T> x_cache_;
};

template <class T>
class TanhLayer final : public Layer<T> {
public:
    const char* kind() const override { return "tanh"; }
    std::uint32_t type_tag() const override { return tags::kTanh; }
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<TanhLayer<T>>(*this); }
    void forward(const Batch<T>& x, Batch<T>& y, bool) override {
        y.resize(x.n, x.c, x.h, x.w);
        for (std::size_t i = 0; i < x.v.size(); ++i) y.v[i] = std::tanh(x.v[i]);
        y_cache_ = y.v;
        dims_ = {x.n, x.c, x.h, x.w};
    }
    void backward(const Batch<T>& dy, Batch<T>& dx) override {
        dx.resize(dims_[0], dims_[1], dims_[2], dims_[3]);
        for (std::size_t i = 0; i < dy.v.size(); ++i)
            dx.v[i] = dy.v[i] * (T(1) - y_cache_[i] * y_cache_[i]);
    }

private:
    std::vector<T> y_cache_;
    std::array<int, 4> dims_{};
};

template <class T>
struct Cnn {
    int in_c = 0, in_h = 0, in_w = 0;
    std::vector<std::unique_ptr<Layer<T>>> layers;
    std::vector<std::vector<T>> adam_m, adam_v;  // per layer, aligned to params
    std::uint64_t adam_steps = 0;

    void finalize() {
        adam_m.clear();
        adam_v.clear();
        for (auto& l : layers) {
            adam_m.emplace_back(l->param_count(), T(0));
            adam_v.emplace_back(l->param_count(), T(0));
        }
    }
    void reset_optimizer() {
        adam_steps = 0;
        for (auto& m : adam_m) std::fill(m.begin(), m.end(), T(0));
        for (auto& v : adam_v) std::fill(v.begin(), v.end(), T(0));
    }
    Cnn<T> clone() const {
        Cnn<T> c;
        c.in_c = in_c;
        c.in_h = in_h;
        c.in_w = in_w;
        c.adam_m = adam_m;
        c.adam_v = adam_v;
        c.adam_steps = adam_steps;
        c.layers.reserve(layers.size());
        for (const auto& l : layers) c.layers.push_back(l->clone());
        return c;
    }
    std::size_t total_params() const {
        std::size_t s = 0;
        for (const auto& l : layers) s += const_cast<Layer<T>&>(*l).param_count();
        return s;
    }
    std::size_t trainable_params() const {
        std::size_t s = 0;
        for (const auto& l : layers)
            if (l->trainable) s += const_cast<Layer<T>&>(*l).param_count();
        return s;
    }

    // Forward from layer `first` (0 = full network).  Layers cache what they
    // need for a subsequent backward pass.
    Batch<T> forward(const Batch<T>& input, bool training, std::size_t first = 0) {
        Batch<T> a = input, b;
        for (std::size_t i = first; i < layers.size(); ++i) {
            layers[i]->forward(a, b, training);
            std::swap(a, b);
        }
        return a;
    }

    void backward(const Batch<T>& dout, std::size_t first = 0) {
        Batch<T> a = dout, b;
        for (std::size_t i = layers.size(); i-- > first;) {
            layers[i]->backward(a, b);
            std::swap(a, b);
        }
    }
};

struct AdamConfig {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// One Adam update over all trainable parameters, with bias correction.
template <class T>
void adam_step(Cnn<T>& net, const AdamConfig& cfg) {
    if (net.adam_m.size() != net.layers.size()) net.finalize();
    ++net.adam_steps;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(net.adam_steps));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(net.adam_steps));
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        Layer<T>& l = *net.layers[li];
        if (!l.trainable || l.param_count() == 0) continue;
        T* p = l.param_data();
        const T* g = l.grad_data();
        T* m = net.adam_m[li].data();
        T* v = net.adam_v[li].data();
        const std::size_t n = l.param_count();
        for (std::size_t i = 0; i < n; ++i) {
            const double gi = g[i];
            const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            p[i] -= static_cast<T>(cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps));
        }
    }
}

// Borrowed view of a float32 dataset: n tensors of c*h*w values plus a
// 3-component regression label per example.
struct DataView {
    int n = 0, c = 0, h = 0, w = 0;
    const float* tensors = nullptr;
    const float* labels = nullptr;

    std::size_t per_example() const { return static_cast<std::size_t>(c) * h * w; }
};

struct TrainConfig {
    int epochs = 30;
    int batch_size = 64;
    AdamConfig adam{};
    std::uint64_t shuffle_seed = 0;
};

// Mean squared error over all outputs; gradient normalized by batch * dims.
template <class T>
double mse_loss(const Batch<T>& out, const float* labels, Batch<T>& grad) {
    grad.resize(out.n, out.c, out.h, out.w);
    const std::size_t total = out.v.size();
    double loss = 0.0;
    for (std::size_t i = 0; i < total; ++i) {
        const double d = static_cast<double>(out.v[i]) - labels[i];
        loss += d * d;
        grad.v[i] = static_cast<T>(2.0 * d / static_cast<double>(total));
    }
    return loss / static_cast<double>(total);
}

namespace detail {

// Shared mini-batch loop.  `first_layer` lets few-shot fine-tuning train only
// the unfrozen suffix on cached features; `load_example` fills one example's
// input (already shaped for layer `first_layer`).
template <class T, class LoadFn>
std::vector<double> train_loop(Cnn<T>& net, std::size_t first_layer, int n, int c, int h, int w,
                               const LoadFn& load_example, const float* labels,
                               const TrainConfig& cfg) {
    if (n < 1) throw std::invalid_argument("train: empty dataset");
    if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (cfg.epochs < 0) throw std::invalid_argument("train: negative epoch count");
    if (net.adam_m.size() != net.layers.size()) net.finalize();

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(cfg.shuffle_seed);
    std::vector<double> epoch_losses;
    epoch_losses.reserve(static_cast<std::size_t>(cfg.epochs));
    Batch<T> bx, grad;
    std::vector<float> blab;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int i = n - 1; i > 0; --i) {  // Fisher-Yates, pinned order
            const int j = static_cast<int>(shuffle_rng.bounded(static_cast<std::uint64_t>(i) + 1));
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }
        double loss_sum = 0.0;
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int bs = std::min(cfg.batch_size, n - start);
            bx.resize(bs, c, h, w);
            blab.resize(static_cast<std::size_t>(bs) * 3);
            for (int b = 0; b < bs; ++b) {
                const int idx = order[static_cast<std::size_t>(start + b)];
                load_example(idx, bx.ex(b));
                std::memcpy(blab.data() + static_cast<std::size_t>(b) * 3,
                            labels + static_cast<std::size_t>(idx) * 3, 3 * sizeof(float));
            }
            Batch<T> out = net.forward(bx, true, first_layer);
            const double loss = mse_loss(out, blab.data(), grad);
            if (!std::isfinite(loss))
                throw NumericError("training diverged: non-finite loss at epoch " +
                                   std::to_string(epoch));
            net.backward(grad, first_layer);
            adam_step(net, cfg.adam);
            loss_sum += loss * bs;
        }
        epoch_losses.push_back(loss_sum / n);
    }
    return epoch_losses;
}

}  // namespace detail

template <class T>
std::vector<double> train(Cnn<T>& net, const DataView& data, const TrainConfig& cfg) {
    if (data.n >= 1 && (data.c != net.in_c || data.h != net.in_h || data.w != net.in_w))
        throw std::invalid_argument("train: dataset shape does not match network input");
    const std::size_t pe = data.per_example();
    auto load = [&](int idx, T* dst) {
        const float* src = data.tensors + static_cast<std::size_t>(idx) * pe;
        for (std::size_t i = 0; i < pe; ++i) dst[i] = static_cast<T>(src[i]);
    };
    return detail::train_loop(net, 0, data.n, data.c, data.h, data.w, load, data.labels, cfg);
}

// Freeze all conv and batchnorm layers (batchnorm switches to its running
// statistics) and fine-tune the remaining dense head.  The frozen prefix is
// static per example, so its outputs are computed once and the suffix trains
// on cached features; this is numerically identical to running the full
// network every step.
template <class T>
std::vector<double> freeze_and_finetune(Cnn<T>& net, const DataView& data,
                                        const TrainConfig& cfg) {
    if (data.n < 1) throw std::invalid_argument("freeze_and_finetune: empty dataset");
    if (data.c != net.in_c || data.h != net.in_h || data.w != net.in_w)
        throw std::invalid_argument("freeze_and_finetune: dataset shape mismatch");
    for (auto& l : net.layers) {
        const std::uint32_t t = l->type_tag();
        if (t == tags::kConv || t == tags::kBatchNorm) {
            l->trainable = false;
            l->frozen = true;
        }
    }
    // The dense head should hold roughly half the parameters (within 2x).
    const double frac = static_cast<double>(net.trainable_params()) /
                        static_cast<double>(std::max<std::size_t>(net.total_params(), 1));
    assert(frac >= 0.25 && frac <= 1.0);
    (void)frac;
    net.reset_optimizer();

    // First layer that still trains parameters; everything before it (frozen
    // conv/bn plus parameterless relu/pool/flatten) is per-example static in
    // eval mode, so its outputs can be cached.
    std::size_t first = net.layers.size();
    for (std::size_t i = 0; i < net.layers.size(); ++i)
        if (net.layers[i]->trainable && net.layers[i]->param_count() > 0) {
            first = i;
            break;
        }
    if (first == net.layers.size())
        throw NumericError("freeze_and_finetune: no trainable parameters remain");
    std::vector<T> feats;
    int fc = data.c, fh = data.h, fw = data.w;
    {
        Batch<T> in;
        std::size_t pe_out = 0;
        const std::size_t pe_in = data.per_example();
        for (int start = 0; start < data.n; start += cfg.batch_size) {
            const int bs = std::min(cfg.batch_size, data.n - start);
            in.resize(bs, data.c, data.h, data.w);
            for (int b = 0; b < bs; ++b) {
                const float* src = data.tensors + static_cast<std::size_t>(start + b) * pe_in;
                T* dst = in.ex(b);
                for (std::size_t i = 0; i < pe_in; ++i) dst[i] = static_cast<T>(src[i]);
            }
            Batch<T> out = in;
            Batch<T> tmp;
            for (std::size_t li = 0; li < first; ++li) {
                net.layers[li]->forward(out, tmp, false);
                std::swap(out, tmp);
            }
            if (pe_out == 0) {
                pe_out = out.per_example();
                fc = out.c;
                fh = out.h;
                fw = out.w;
                feats.resize(static_cast<std::size_t>(data.n) * pe_out);
            }
            for (int b = 0; b < bs; ++b)
                std::memcpy(feats.data() + static_cast<std::size_t>(start + b) * pe_out,
                            out.ex(b), pe_out * sizeof(T));
        }
    }
    const std::size_t pe_out = static_cast<std::size_t>(fc) * fh * fw;
    auto load = [&](int idx, T* dst) {
        std::memcpy(dst, feats.data() + static_cast<std::size_t>(idx) * pe_out,
                    pe_out * sizeof(T));
    };
    return detail::train_loop(net, first, data.n, fc, fh, fw, load, data.labels, cfg);
}

// Eval-mode predictions, one 3-vector per example.
template <class T>
std::vector<Vec3> predict(Cnn<T>& net, const DataView& data, int batch_size = 256) {
    std::vector<Vec3> out;
    out.reserve(static_cast<std::size_t>(data.n));
    Batch<T> in;
    const std::size_t pe = data.per_example();
    for (int start = 0; start < data.n; start += batch_size) {
        const int bs = std::min(batch_size, data.n - start);
        in.resize(bs, data.c, data.h, data.w);
        for (int b = 0; b < bs; ++b) {
            const float* src = data.tensors + static_cast<std::size_t>(start + b) * pe;
            T* dst = in.ex(b);
            for (std::size_t i = 0; i < pe; ++i) dst[i] = static_cast<T>(src[i]);
        }
        Batch<T> y = net.forward(in, false);
        if (y.per_example() != 3) throw NumericError("predict: network output is not 3-d");
        for (int b = 0; b < bs; ++b)
            out.emplace_back(static_cast<double>(y.ex(b)[0]), static_cast<double>(y.ex(b)[1]),
                             static_cast<double>(y.ex(b)[2]));
    }
    return out;
}

// The paper-shaped localizer:
//   conv3x3(32) BN ReLU | conv3x3(64) BN ReLU | maxpool2 | conv3x3(64) BN
//   ReLU | flatten | dense(256) ReLU | dense(3) tanh
template <class T>
Cnn<T> build_localizer_cnn(int in_c, int in_h, int in_w, std::uint64_t seed) {
    auto hw_after = [](int v, int k) { return v - k + 1; };
    int h = in_h, w = in_w;
    Cnn<T> net;
    net.in_c = in_c;
    net.in_h = in_h;
    net.in_w = in_w;
    net.layers.push_back(std::make_unique<Conv<T>>(in_c, 32, 3));
    net.layers.push_back(std::make_unique<BatchNorm<T>>(32));
    net.layers.push_back(std::make_unique<Relu<T>>());
    h = hw_after(h, 3);
    w = hw_after(w, 3);
    net.layers.push_back(std::make_unique<Conv<T>>(32, 64, 3));
    net.layers.push_back(std::make_unique<BatchNorm<T>>(64));
    net.layers.push_back(std::make_unique<Relu<T>>());
    h = hw_after(h, 3);
    w = hw_after(w, 3);
    net.layers.push_back(std::make_unique<MaxPool<T>>());
    h /= 2;
    w /= 2;
    net.layers.push_back(std::make_unique<Conv<T>>(64, 64, 3));
    net.layers.push_back(std::make_unique<BatchNorm<T>>(64));
    net.layers.push_back(std::make_unique<Relu<T>>());
    h = hw_after(h, 3);
    w = hw_after(w, 3);
    net.layers.push_back(std::make_unique<MaxPool<T>>());
    h /= 2;
    w /= 2;
    if (h < 1 || w < 1) throw ConfigError("build_localizer_cnn: input too small");
    // The dense head is kept small on purpose: it carries roughly the same
    // parameter budget as the convolutional stack, so freezing the features
    // for few-shot fine-tuning halves the trainable count, and 64 fine-tuning
    // examples constrain the head instead of drowning in it.
    net.layers.push_back(std::make_unique<Flatten<T>>());
    net.layers.push_back(std::make_unique<Dense<T>>(64 * h * w, 64));
    net.layers.push_back(std::make_unique<Relu<T>>());
    net.layers.push_back(std::make_unique<Dense<T>>(64, 3));
    net.layers.push_back(std::make_unique<TanhLayer<T>>());
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(li)}));
        net.layers[li]->init_params(rng);
    }
    net.finalize();
    return net;
}

// ---------------------------------------------------------------------------
// Checkpoint format "STAPCNN1" (little-endian):
//   magic[8] | u32 version=1 | u32 in_c | u32 in_h | u32 in_w | u32 n_layers
//   per layer: u32 tag | u32 ndims | u32 dims[ndims]
//   f32 parameters per layer (weights then bias / gamma then beta)
//   u32 has_adam | if 1: u64 steps, then per layer f32 m[] then f32 v[]
//   per batchnorm layer: f32 running_mean[c], f32 running_var[c]
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

struct CheckReader {
    std::ifstream in;
    std::string path;
    std::size_t offset = 0;

    void read(void* dst, std::size_t bytes) {
        in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(bytes));
        if (static_cast<std::size_t>(in.gcount()) != bytes)
            throw FormatError(path + ": truncated at byte offset " + std::to_string(offset));
        offset += bytes;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        read(&v, sizeof(v));
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        read(&v, sizeof(v));
        return v;
    }
};

template <class T>
void write_f32(std::ostream& os, const T* data, std::size_t n) {
    std::vector<float> tmp(n);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = static_cast<float>(data[i]);
    os.write(reinterpret_cast<const char*>(tmp.data()),
             static_cast<std::streamsize>(n * sizeof(float)));
}

template <class T>
void read_f32(CheckReader& r, T* data, std::size_t n) {
    std::vector<float> tmp(n);
    r.read(tmp.data(), n * sizeof(float));
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<T>(tmp[i]);
}

template <class T>
std::unique_ptr<Layer<T>> make_layer(std::uint32_t tag, const std::vector<std::uint32_t>& dims,
                                     const std::string& path) {
    switch (tag) {
        case tags::kConv:
            if (dims.size() != 3) throw FormatError(path + ": conv layer needs 3 dims");
            return std::make_unique<Conv<T>>(static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                                             static_cast<int>(dims[2]));
        case tags::kBatchNorm:
            if (dims.size() != 1) throw FormatError(path + ": batchnorm layer needs 1 dim");
            return std::make_unique<BatchNorm<T>>(static_cast<int>(dims[0]));
        case tags::kRelu:
            return std::make_unique<Relu<T>>();
        case tags::kMaxPool:
            return std::make_unique<MaxPool<T>>();
        case tags::kFlatten:
            return std::make_unique<Flatten<T>>();
        case tags::kDense:
            if (dims.size() != 2) throw FormatError(path + ": dense layer needs 2 dims");
            return std::make_unique<Dense<T>>(static_cast<int>(dims[0]),
                                              static_cast<int>(dims[1]));
        case tags::kTanh:
            return std::make_unique<TanhLayer<T>>();
        default:
            throw FormatError(path + ": unknown layer tag " + std::to_string(tag));
    }
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'S', 'T', 'A', 'P', 'C', 'N', 'N', '1'};

template <class T>
void save_checkpoint(const Cnn<T>& net, const std::string& path, bool include_adam = true) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, 8);
    detail::put_u32(os, 1);
    detail::put_u32(os, static_cast<std::uint32_t>(net.in_c));
    detail::put_u32(os, static_cast<std::uint32_t>(net.in_h));
    detail::put_u32(os, static_cast<std::uint32_t>(net.in_w));
    detail::put_u32(os, static_cast<std::uint32_t>(net.layers.size()));
    for (const auto& l : net.layers) {
        detail::put_u32(os, l->type_tag());
        const auto dims = l->manifest_dims();
        detail::put_u32(os, static_cast<std::uint32_t>(dims.size()));
        for (std::uint32_t d : dims) detail::put_u32(os, d);
    }
    for (const auto& l : net.layers)
        detail::write_f32(os, const_cast<Layer<T>&>(*l).param_data(), l->param_count());
    detail::put_u32(os, include_adam ? 1u : 0u);
    if (include_adam) {
        detail::put_u64(os, net.adam_steps);
        for (std::size_t li = 0; li < net.layers.size(); ++li) {
            detail::write_f32(os, net.adam_m[li].data(), net.adam_m[li].size());
            detail::write_f32(os, net.adam_v[li].data(), net.adam_v[li].size());
        }
    }
    for (const auto& l : net.layers)
        if (l->stat_count() > 0)
            detail::write_f32(os, const_cast<Layer<T>&>(*l).stat_data(), l->stat_count());
    if (!os) throw IoError("failed writing checkpoint: " + path);
}

template <class T>
Cnn<T> load_checkpoint(const std::string& path) {
    detail::CheckReader r;
    r.path = path;
    r.in.open(path, std::ios::binary);
    if (!r.in) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    r.read(magic, 8);
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw FormatError(path + ": not a STAPCNN1 checkpoint");
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));

    Cnn<T> net;
    net.in_c = static_cast<int>(r.u32());
    net.in_h = static_cast<int>(r.u32());
    net.in_w = static_cast<int>(r.u32());
    const std::uint32_t n_layers = r.u32();
    if (n_layers > 1024) throw FormatError(path + ": implausible layer count");
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        const std::uint32_t tag = r.u32();
        const std::uint32_t nd = r.u32();
        if (nd > 8) throw FormatError(path + ": implausible dim count");
        std::vector<std::uint32_t> dims(nd);
        for (auto& d : dims) d = r.u32();
        net.layers.push_back(detail::make_layer<T>(tag, dims, path));
    }
    for (auto& l : net.layers) detail::read_f32(r, l->param_data(), l->param_count());
    net.finalize();
    const std::uint32_t has_adam = r.u32();
    if (has_adam == 1) {
        net.adam_steps = r.u64();
        for (std::size_t li = 0; li < net.layers.size(); ++li) {
            detail::read_f32(r, net.adam_m[li].data(), net.adam_m[li].size());
            detail::read_f32(r, net.adam_v[li].data(), net.adam_v[li].size());
        }
    } else if (has_adam != 0) {
        throw FormatError(path + ": bad adam flag");
    }
    for (auto& l : net.layers)
        if (l->stat_count() > 0) detail::read_f32(r, l->stat_data(), l->stat_count());
    return net;
}

}  // namespace staploc::neural
