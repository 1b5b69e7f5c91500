#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "wemoe/errors.hpp"

namespace wemoe {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major float32 tensor, rank 1..3. Plain value type; autodiff
// state lives on the GradTape, not here.
struct Tensor {
    Shape shape;
    std::vector<float> data;
    bool requires_grad = false;

    Tensor() = default;
    Tensor(Shape s, std::vector<float> d);

    static Tensor zeros(Shape s);
    static Tensor full(Shape s, float v);
    static Tensor scalar(float v) { return full({1}, v); }
    static Tensor from(Shape s, std::initializer_list<float> vals);

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    float& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    float at(int64_t i) const { return data[static_cast<size_t>(i)]; }
    // 2-D access; for rank-3 use explicit flat indexing.
    float& at2(int64_t r, int64_t c) { return data[static_cast<size_t>(r * shape[1] + c)]; }
    float at2(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * shape[1] + c)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
};

float max_abs_diff(const Tensor& a, const Tensor& b);

// Debug-mode NaN/Inf detection. Off by default (release semantics); tests
// and the CLI turn it on. When enabled, ops throw NumericalError on
// non-finite outputs.
void set_finite_checks(bool on);
bool finite_checks_enabled();
void check_finite(const Tensor& t, const char* where);

// Reverse-mode tape. Nodes are appended in execution order, so node order
// is a topological order; backward() is a single reverse sweep. One tape
// per training step; tapes are never shared across threads.
class GradTape {
public:
    using Var = int32_t;

    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    // Leaves. leaf() is tracked iff t.requires_grad; constant() never is.
    Var leaf(Tensor t);
    Var constant(Tensor t);

    const Tensor& value(Var v) const { return nodes_[static_cast<size_t>(v)].value; }
    bool tracked(Var v) const { return nodes_[static_cast<size_t>(v)].tracked; }
    size_t size() const { return nodes_.size(); }

    // Scalar value at full double precision when available. Reductions (sum,
    // cross_entropy) accumulate in double and the exact value propagates
    // through scalar add/sub/mul/scale; storage stays float32. The
    // finite-difference oracle reads this to avoid quantizing the loss.
    double scalar_value(Var v) const;

    // Valid after backward(); zero tensor for leaves the loss does not reach.
    const Tensor& grad(Var v) const;

    // ---- ops --------------------------------------------------------------
    Var add(Var a, Var b);             // same shape
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);             // elementwise
    Var scale(Var a, float s);
    Var matmul(Var a, Var b);          // [m,k] x [k,n] -> [m,n]
    Var bmm(Var a, Var b);             // [B,m,k] x [B,k,n] -> [B,m,n]
    Var transpose_last(Var a);         // swap last two dims (rank 2 or 3)
    Var linear(Var x, Var w, Var b);   // x[...,in], w[out,in], b[out]
    Var relu(Var a);
    Var gelu(Var a);                   // tanh approximation, fixed
    Var softmax(Var a, int axis = -1); // max-subtraction stabilized
    Var layernorm(Var x, Var gain, Var bias, float eps);
    Var log_clamped(Var a, float eps); // ln(max(x, eps))
    Var sum(Var a);                    // -> scalar [1]
    Var mean_axis1(Var a);             // [B,N,C] -> [B,C]
    Var cross_entropy(Var logits, std::vector<int> labels); // -> scalar, mean over rows
    Var row(Var a, int64_t index);     // select index along axis 0
    Var stack0(std::span<const Var> parts);  // k tensors of shape S -> [k, S...]
    Var reshape(Var a, Shape s);
    Var split_heads(Var a, int64_t n_heads); // [B,N,d] -> [B*H, N, d/H]
    Var merge_heads(Var a, int64_t n_heads); // inverse of split_heads
    // base + sum_i w[i] * deltas[i]; only w receives gradient. Deltas are
    // captured by pointer and must outlive the tape.
    Var dict_combine(Var w, const Tensor& base, std::span<const Tensor* const> deltas);

    // Reverse accumulation from a scalar loss. Leaves not reachable from the
    // loss end up with zero gradients.
    void backward(Var loss);

private:
    struct Node {
        Tensor value;
        bool tracked = false;
        bool has_scalar_hint = false;
        double scalar_hint = 0.0;
        std::vector<Var> parents;
        // Accumulates into parent grads given this node's grad.
        std::function<void(GradTape&, Var self)> backprop;
    };

    Var push(Tensor value, bool tracked, std::vector<Var> parents,
             std::function<void(GradTape&, Var)> backprop, const char* op);
    void set_scalar_hint(Var v, double d);
    bool scalar_hint(Var v, double* out) const;
    Tensor& grad_buf(Var v) { return grads_[static_cast<size_t>(v)]; }
    bool any_tracked(std::span<const Var> vs) const;

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    bool ran_backward_ = false;
};

// Central-difference gradient verification. `f` builds the scalar loss on a
// fresh tape from leaf vars created for `params` (in order); the check runs
// it once recorded for the autodiff gradient, then evaluates it with
// per-coordinate +/- step perturbations. Returns the max over coordinates of
// |fd - ad| / max(|fd|, |ad|, 1e-8).
struct FdCheckResult {
    double max_rel_err = 0.0;
    int worst_param = -1;
    int64_t worst_coord = -1;
    double autodiff = 0.0;
    double finite_diff = 0.0;
};

using TapedLoss =
    std::function<GradTape::Var(GradTape&, std::span<const GradTape::Var>)>;

FdCheckResult finite_difference_check(const TapedLoss& f,
                                      std::span<Tensor* const> params,
                                      double step);

}  // namespace wemoe
