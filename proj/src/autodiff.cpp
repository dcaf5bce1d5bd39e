#include "mipo/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace mipo::ad {

namespace {
thread_local Tape* g_active_tape = nullptr;

std::size_t product(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void check_shape(const Shape& shape) {
    for (std::size_t extent : shape) {
        if (extent == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(t.shape()));
    }
}

enum class Broadcast { kSame, kTrailing, kScalar };

Broadcast classify(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Broadcast::kSame;
    if (b.size() == 1) return Broadcast::kScalar;
    if (b.rank() == 1 && a.rank() >= 1 && b.dim(0) == a.shape().back()) return Broadcast::kTrailing;
    throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
}

inline std::size_t rhs_index(Broadcast mode, std::size_t i, std::size_t trailing) {
    switch (mode) {
        case Broadcast::kSame: return i;
        case Broadcast::kTrailing: return i % trailing;
        case Broadcast::kScalar: return 0;
    }
    return 0;
}
}  // namespace

namespace detail {
struct Access {
    static Tensor wrap(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }

    // Builds the op result and, when a tape is active and any input needs a
    // gradient, records `backward(gout)` on it.
    template <typename F>
    static Tensor emit(const char* name, Shape shape, std::vector<double> data,
                       std::vector<Tensor> inputs, F backward) {
        auto out = std::make_shared<TensorImpl>();
        out->shape = std::move(shape);
        out->data = std::move(data);
        Tape* tape = Tape::active();
        bool needs = tape != nullptr &&
                     std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
        if (needs) {
            out->requires_grad = true;
            out->is_op_output = true;
            Tape::Record rec;
            rec.name = name;
            for (const Tensor& t : inputs) rec.inputs.push_back(t.impl());
            rec.output = out;
            TensorImpl* raw = out.get();
            rec.backward = [raw, fn = std::move(backward)]() { fn(std::span<const double>(raw->grad)); };
            tape->records_.push_back(std::move(rec));
        }
        return Tensor(std::move(out));
    }
};
}  // namespace detail

using detail::Access;

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// --- Tensor -----------------------------------------------------------------

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
    check_shape(shape);
    if (product(shape) != data.size()) {
        throw ShapeError("shape " + to_string(shape) + " does not match " + std::to_string(data.size()) +
                         " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_shape(shape);
    std::size_t n = product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng, bool requires_grad) {
    check_shape(shape);
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> values(product(shape));
    for (double& v : values) v = dist(rng);
    return Tensor(std::move(shape), std::move(values), requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
    return impl_->shape[axis];
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape()));
    return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    require_rank(*this, 2, "at");
    return impl_->data[r * impl_->shape[1] + c];
}

Tensor& Tensor::set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
}

std::span<const double> Tensor::grad() const {
    impl_->ensure_grad();
    return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
    impl_->ensure_grad();
    return impl_->grad;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

// --- Tape -------------------------------------------------------------------

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ShapeError("backward: loss must be a scalar, got " +
                         (loss.defined() ? to_string(loss.shape()) : std::string("undefined tensor")));
    }
    const auto& target = loss.impl();
    bool on_tape = std::any_of(records_.begin(), records_.end(),
                               [&](const Record& r) { return r.output == target; });
    if (!on_tape && !(target->requires_grad && !target->is_op_output)) {
        throw std::logic_error("backward: loss was not produced on this tape");
    }
    for (Record& r : records_) r.output->grad.clear();
    target->accumulate(0, 1.0);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
        if (it->output->grad.empty()) continue;  // not reachable from loss
        it->backward();
    }
}

// --- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    auto A = a.data();
    auto B = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * B[p * n + j];
        }
    }
    return Access::emit("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const double> g) {
        auto A = a.data();
        auto B = b.data();
        if (a.requires_grad()) {
            auto& ga = a.impl()->grad;
            a.impl()->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * B[p * n + j];
                    ga[i * k + p] += acc;
                }
        }
        if (b.requires_grad()) {
            auto& gb = b.impl()->grad;
            b.impl()->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = A[i * k + p];
                    if (aip == 0.0) continue;
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
                }
        }
    });
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(r * c);
    auto A = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
    return Access::emit("transpose", {c, r}, std::move(out), {a}, [a, r, c](std::span<const double> g) {
        a.impl()->ensure_grad();
        auto& ga = a.impl()->grad;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
}

// --- elementwise ------------------------------------------------------------

namespace {
template <typename Fwd, typename DA, typename DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
    const Broadcast mode = classify(a, b, name);
    const std::size_t trailing = a.rank() ? a.shape().back() : 1;
    auto A = a.data();
    auto B = b.data();
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(A[i], B[rhs_index(mode, i, trailing)]);
    return Access::emit(name, a.shape(), std::move(out), {a, b}, [a, b, mode, trailing, da, db](std::span<const double> g) {
        auto A = a.data();
        auto B = b.data();
        if (a.requires_grad()) {
            a.impl()->ensure_grad();
            auto& ga = a.impl()->grad;
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * da(A[i], B[rhs_index(mode, i, trailing)]);
        }
        if (b.requires_grad()) {
            b.impl()->ensure_grad();
            auto& gb = b.impl()->grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                const std::size_t j = rhs_index(mode, i, trailing);
                gb[j] += g[i] * db(A[i], B[j]);
            }
        }
    });
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* name, const Tensor& a, Fwd fwd, Deriv deriv) {
    auto A = a.data();
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(A[i]);
    return Access::emit(name, a.shape(), std::move(out), {a}, [a, deriv](std::span<const double> g) {
        auto A = a.data();
        a.impl()->ensure_grad();
        auto& ga = a.impl()->grad;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * deriv(A[i]);
    });
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary("add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
                  [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary("sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
                  [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary("mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
                  [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double factor) {
    return unary("scale", a, [factor](double x) { return factor * x; }, [factor](double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary("add_scalar", a, [value](double x) { return x + value; }, [](double) { return 1.0; });
}

Tensor tanh(const Tensor& a) {
    return unary("tanh", a, [](double x) { return std::tanh(x); },
                 [](double x) {
                     const double t = std::tanh(x);
                     return 1.0 - t * t;
                 });
}

Tensor relu(const Tensor& a) {
    return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    auto sig = [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
    };
    return unary("sigmoid", a, sig, [sig](double x) {
        const double s = sig(x);
        return s * (1.0 - s);
    });
}

Tensor gelu(const Tensor& a) {
    // exact form: x * Phi(x)
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    return unary("gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
                 [](double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x); });
}

Tensor log_clamped(const Tensor& a) {
    return unary("log_clamped", a, [](double x) { return std::log(std::max(x, kLogClamp)); },
                 [](double x) { return x > kLogClamp ? 1.0 / x : 0.0; });
}

// --- normalization ----------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
    }
    const auto& shape = x.shape();
    const std::size_t len = shape[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];

    auto X = x.data();
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, X[base + j * inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(X[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
        }

    auto y = std::make_shared<std::vector<double>>(out);
    return Access::emit("softmax", shape, std::move(out), {x}, [x, y, outer, inner, len](std::span<const double> g) {
        x.impl()->ensure_grad();
        auto& gx = x.impl()->grad;
        const auto& Y = *y;
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * Y[base + j * inner];
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t idx = base + j * inner;
                    gx[idx] += Y[idx] * (g[idx] - dot);
                }
            }
    });
}

Tensor masked_softmax(const Tensor& x, const Mask& mask) {
    require_rank(x, 2, "masked_softmax");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    const bool per_column = mask.size() == cols;
    if (!per_column && mask.size() != rows * cols) {
        throw ShapeError("masked_softmax: mask of length " + std::to_string(mask.size()) + " does not fit " +
                         to_string(x.shape()));
    }
    auto keep = [&mask, per_column, cols](std::size_t r, std::size_t c) {
        return mask[per_column ? c : r * cols + c] != 0;
    };
    auto X = x.data();
    std::vector<double> out(x.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c)
            if (keep(r, c)) mx = std::max(mx, X[r * cols + c]);
        if (mx == -std::numeric_limits<double>::infinity()) continue;
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c)
            if (keep(r, c)) z += out[r * cols + c] = std::exp(X[r * cols + c] - mx);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
    }
    auto y = std::make_shared<std::vector<double>>(out);
    return Access::emit("masked_softmax", x.shape(), std::move(out), {x}, [x, y, rows, cols](std::span<const double> g) {
        x.impl()->ensure_grad();
        auto& gx = x.impl()->grad;
        const auto& Y = *y;
        // Masked entries have Y == 0, so the usual Jacobian already gives them zero gradient.
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * Y[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += Y[r * cols + c] * (g[r * cols + c] - dot);
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
    const std::size_t width = x.shape().back();
    if (gamma.size() != width || beta.size() != width) {
        throw ShapeError("layer_norm: gain/bias " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                         " do not match input " + to_string(x.shape()));
    }
    const std::size_t rows = x.size() / width;
    auto X = x.data();
    auto Gm = gamma.data();
    auto Bt = beta.data();
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < width; ++c) mu += X[r * width + c];
        mu /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t c = 0; c < width; ++c) {
            const double dv = X[r * width + c] - mu;
            var += dv * dv;
        }
        var /= static_cast<double>(width);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t c = 0; c < width; ++c) {
            const std::size_t i = r * width + c;
            (*xhat)[i] = (X[i] - mu) * is;
            out[i] = Gm[c] * (*xhat)[i] + Bt[c];
        }
    }
    return Access::emit("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat, inv_std, rows, width](std::span<const double> g) {
                            auto Gm = gamma.data();
                            const auto& XH = *xhat;
                            if (gamma.requires_grad() || beta.requires_grad()) {
                                gamma.impl()->ensure_grad();
                                beta.impl()->ensure_grad();
                                for (std::size_t r = 0; r < rows; ++r)
                                    for (std::size_t c = 0; c < width; ++c) {
                                        const std::size_t i = r * width + c;
                                        if (gamma.requires_grad()) gamma.impl()->grad[c] += g[i] * XH[i];
                                        if (beta.requires_grad()) beta.impl()->grad[c] += g[i];
                                    }
                            }
                            if (!x.requires_grad()) return;
                            x.impl()->ensure_grad();
                            auto& gx = x.impl()->grad;
                            const double inv_w = 1.0 / static_cast<double>(width);
                            for (std::size_t r = 0; r < rows; ++r) {
                                double mean_d = 0.0, mean_dx = 0.0;
                                for (std::size_t c = 0; c < width; ++c) {
                                    const std::size_t i = r * width + c;
                                    const double d = g[i] * Gm[c];
                                    mean_d += d;
                                    mean_dx += d * XH[i];
                                }
                                mean_d *= inv_w;
                                mean_dx *= inv_w;
                                for (std::size_t c = 0; c < width; ++c) {
                                    const std::size_t i = r * width + c;
                                    const double d = g[i] * Gm[c];
                                    gx[i] += (*inv_std)[r] * (d - mean_d - XH[i] * mean_dx);
                                }
                            }
                        });
}

// --- structure --------------------------------------------------------------

Tensor concat_last_axis(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_last_axis: no inputs");
    Shape lead = parts[0].shape();
    lead.pop_back();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        Shape l = p.shape();
        l.pop_back();
        if (l != lead) {
            throw ShapeError("concat_last_axis: leading shapes differ: " + to_string(parts[0].shape()) + " vs " +
                             to_string(p.shape()));
        }
        widths.push_back(p.shape().back());
        total += p.shape().back();
    }
    const std::size_t rows = parts[0].size() / widths[0];
    std::vector<double> out(rows * total);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        auto P = parts[k].data();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(P.begin() + r * widths[k], widths[k], out.begin() + r * total + offset);
        offset += widths[k];
    }
    Shape shape = lead;
    shape.push_back(total);
    return Access::emit("concat_last_axis", shape, std::move(out), parts,
                        [parts, widths, rows, total](std::span<const double> g) {
                            std::size_t offset = 0;
                            for (std::size_t k = 0; k < parts.size(); ++k) {
                                if (parts[k].requires_grad()) {
                                    parts[k].impl()->ensure_grad();
                                    auto& gp = parts[k].impl()->grad;
                                    for (std::size_t r = 0; r < rows; ++r)
                                        for (std::size_t c = 0; c < widths[k]; ++c)
                                            gp[r * widths[k] + c] += g[r * total + offset + c];
                                }
                                offset += widths[k];
                            }
                        });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t width = parts[0].rank() == 1 ? parts[0].dim(0) : parts[0].dim(1);
    std::size_t rows = 0;
    std::vector<double> out;
    for (const Tensor& p : parts) {
        const bool ok = (p.rank() == 1 && p.dim(0) == width) || (p.rank() == 2 && p.dim(1) == width);
        if (!ok) {
            throw ShapeError("concat_rows: row width mismatch between " + to_string(parts[0].shape()) + " and " +
                             to_string(p.shape()));
        }
        rows += p.size() / width;
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    return Access::emit("concat_rows", {rows, width}, std::move(out), parts, [parts](std::span<const double> g) {
        std::size_t offset = 0;
        for (const Tensor& p : parts) {
            if (p.requires_grad()) {
                p.impl()->ensure_grad();
                auto& gp = p.impl()->grad;
                for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
            }
            offset += p.size();
        }
    });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
    require_rank(x, 2, "slice_cols");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (count == 0 || begin + count > cols) {
        throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + to_string(x.shape()));
    }
    auto X = x.data();
    std::vector<double> out(rows * count);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(X.begin() + r * cols + begin, count, out.begin() + r * count);
    return Access::emit("slice_cols", {rows, count}, std::move(out), {x}, [x, rows, cols, begin, count](std::span<const double> g) {
        x.impl()->ensure_grad();
        auto& gx = x.impl()->grad;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < count; ++c) gx[r * cols + begin + c] += g[r * count + c];
    });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
    require_rank(x, 2, "slice_rows");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (count == 0 || begin + count > rows) {
        throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + to_string(x.shape()));
    }
    auto X = x.data();
    std::vector<double> out(X.begin() + begin * cols, X.begin() + (begin + count) * cols);
    return Access::emit("slice_rows", {count, cols}, std::move(out), {x}, [x, cols, begin](std::span<const double> g) {
        x.impl()->ensure_grad();
        auto& gx = x.impl()->grad;
        for (std::size_t i = 0; i < g.size(); ++i) gx[begin * cols + i] += g[i];
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    check_shape(shape);
    if (product(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    return Access::emit("reshape", std::move(shape), std::move(out), {x}, [x](std::span<const double> g) {
        x.impl()->ensure_grad();
        auto& gx = x.impl()->grad;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> indices) {
    require_rank(table, 2, "gather_rows");
    if (indices.empty()) throw ShapeError("gather_rows: empty index list");
    const std::size_t rows = table.dim(0), width = table.dim(1);
    for (std::int64_t idx : indices) {
        if (idx < -1 || idx >= static_cast<std::int64_t>(rows)) {
            throw std::out_of_range("gather_rows: index " + std::to_string(idx) + " outside table " +
                                    to_string(table.shape()));
        }
    }
    auto T = table.data();
    std::vector<double> out(indices.size() * width, 0.0);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] < 0) continue;
        std::copy_n(T.begin() + indices[i] * width, width, out.begin() + i * width);
    }
    std::vector<std::int64_t> idx(indices.begin(), indices.end());
    return Access::emit("gather_rows", {indices.size(), width}, std::move(out), {table},
                        [table, idx = std::move(idx), width](std::span<const double> g) {
                            table.impl()->ensure_grad();
                            auto& gt = table.impl()->grad;
                            for (std::size_t i = 0; i < idx.size(); ++i) {
                                if (idx[i] < 0) continue;
                                for (std::size_t c = 0; c < width; ++c) gt[idx[i] * width + c] += g[i * width + c];
                            }
                        });
}

Tensor weighted_gather(const Tensor& table, std::span<const std::int64_t> indices, const Tensor& weights) {
    require_rank(table, 2, "weighted_gather");
    require_rank(weights, 2, "weighted_gather");
    const std::size_t rows = weights.dim(0), slots = weights.dim(1), width = table.dim(1);
    if (indices.size() != rows * slots) {
        throw ShapeError("weighted_gather: " + std::to_string(indices.size()) + " indices for weights " +
                         to_string(weights.shape()));
    }
    for (std::int64_t idx : indices) {
        if (idx < -1 || idx >= static_cast<std::int64_t>(table.dim(0))) {
            throw std::out_of_range("weighted_gather: index " + std::to_string(idx) + " outside table " +
                                    to_string(table.shape()));
        }
    }
    auto T = table.data();
    auto W = weights.data();
    std::vector<double> out(rows * width, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t l = 0; l < slots; ++l) {
            const std::int64_t idx = indices[r * slots + l];
            if (idx < 0) continue;
            const double w = W[r * slots + l];
            for (std::size_t c = 0; c < width; ++c) out[r * width + c] += w * T[idx * width + c];
        }
    std::vector<std::int64_t> idx(indices.begin(), indices.end());
    return Access::emit("weighted_gather", {rows, width}, std::move(out), {table, weights},
                        [table, weights, idx = std::move(idx), rows, slots, width](std::span<const double> g) {
                            auto T = table.data();
                            auto W = weights.data();
                            if (table.requires_grad()) table.impl()->ensure_grad();
                            if (weights.requires_grad()) weights.impl()->ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t l = 0; l < slots; ++l) {
                                    const std::int64_t k = idx[r * slots + l];
                                    if (k < 0) continue;
                                    if (weights.requires_grad()) {
                                        double acc = 0.0;
                                        for (std::size_t c = 0; c < width; ++c) acc += g[r * width + c] * T[k * width + c];
                                        weights.impl()->grad[r * slots + l] += acc;
                                    }
                                    if (table.requires_grad()) {
                                        const double w = W[r * slots + l];
                                        for (std::size_t c = 0; c < width; ++c)
                                            table.impl()->grad[k * width + c] += w * g[r * width + c];
                                    }
                                }
                        });
}

// --- reductions -------------------------------------------------------------

Tensor sum(const Tensor& x) {
    auto X = x.data();
    double s = 0.0;
    for (double v : X) s += v;
    return Access::emit("sum", {1}, {s}, {x}, [x](std::span<const double> g) {
        x.impl()->ensure_grad();
        for (double& gx : x.impl()->grad) gx += g[0];
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
    if (rate == 0.0) return x;
    std::bernoulli_distribution keep(1.0 - rate);
    std::vector<double> m(x.size());
    const double survivor = 1.0 / (1.0 - rate);
    for (double& v : m) v = keep(rng) ? survivor : 0.0;
    return mul(x, Tensor(x.shape(), std::move(m)));
}

}  // namespace mipo::ad
