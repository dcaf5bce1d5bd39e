#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// Broadcasting rules for the binary elementwise ops (add, sub, mul):
//   * identical shapes;
//   * rhs is a vector whose length equals lhs's last extent (added to every
//     trailing-axis slice);
//   * rhs holds a single element (scalar broadcast).
// Nothing else broadcasts. The gradient of a broadcast operand is the sum of
// the incoming gradient over the broadcast positions.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mipo::ad {

using Shape = std::vector<std::size_t>;
using Mask = std::vector<std::uint8_t>;

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

std::string to_string(const Shape& shape);

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool is_op_output = false;

    void accumulate(std::size_t i, double g) {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        grad[i] += g;
    }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};
struct Access;
}  // namespace detail

class Tensor {
  public:
    Tensor();
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value);
    static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                          bool requires_grad = false);

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const { return impl_->data.size(); }
    bool defined() const { return impl_ != nullptr; }

    std::span<const double> data() const { return impl_->data; }
    // Direct write access is for leaves (parameter init, optimizer updates).
    std::span<double> mutable_data() { return impl_->data; }
    double item() const;
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double at(std::size_t r, std::size_t c) const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on);
    bool has_grad() const { return !impl_->grad.empty(); }
    // Zero-filled view when no gradient has been accumulated yet.
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad() { impl_->grad.clear(); }

    // Value copy with no history and no gradient.
    Tensor detach() const;

    bool same(const Tensor& other) const { return impl_ == other.impl_; }
    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

  private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;

    friend class Tape;
    friend struct detail::Access;
};

// Records executed ops in order; backward() replays them in reverse.
//
// Ops record onto the tape installed for the calling thread by a TapeScope.
// With no active tape, ops compute values only and results carry no grad.
class Tape {
  public:
    struct Record {
        const char* name;
        std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
        std::shared_ptr<detail::TensorImpl> output;
        std::function<void()> backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Accumulates d(loss)/d(leaf) into every reachable requires_grad leaf.
    // Intermediate gradients are reset at the start of every call, so calling
    // twice without zero_grad() on the leaves doubles their gradients.
    void backward(const Tensor& loss);

    std::size_t size() const { return records_.size(); }
    const std::vector<Record>& records() const { return records_; }
    void clear() { records_.clear(); }

    static Tape* active();

  private:
    friend class TapeScope;
    friend struct detail::Access;
    std::vector<Record> records_;
};

class TapeScope {
  public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

  private:
    Tape* previous_;
};

// --- linear algebra ---------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// --- elementwise ------------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
inline constexpr double kLogClamp = 1e-8;
// log(max(x, 1e-8)); zero gradient in the clamped region.
Tensor log_clamped(const Tensor& a);

// --- normalization ----------------------------------------------------------
Tensor softmax(const Tensor& x, std::size_t axis);
// Softmax over the last axis of a rank-2 tensor restricted to positions whose
// mask byte is nonzero. `mask` holds either one byte per column (shared by all
// rows) or one byte per element. Masked entries are exactly 0; a row with no
// unmasked entry is all zeros.
Tensor masked_softmax(const Tensor& x, const Mask& mask);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-12);

// --- structure --------------------------------------------------------------
Tensor concat_last_axis(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor reshape(const Tensor& x, Shape shape);
// Rows of `table` selected by `indices`; an index of -1 yields a zero row that
// receives no gradient.
Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> indices);
// out[i, :] = sum_l weights[i, l] * table[indices[i*L + l], :] for weights of
// shape [rows x L]; index -1 marks an empty slot (its weight is ignored).
Tensor weighted_gather(const Tensor& table, std::span<const std::int64_t> indices, const Tensor& weights);

// --- reductions -------------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Inverted dropout: zeroes each entry with probability `rate` and rescales the
// survivors by 1/(1-rate). Identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

}  // namespace mipo::ad
