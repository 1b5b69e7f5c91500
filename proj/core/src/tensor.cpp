#include "wemoe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <utility>

#include "wemoe/rng.hpp"

namespace wemoe {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

Tensor::Tensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape.empty() || shape.size() > 3)
        throw DimensionError("tensor rank must be 1..3, got shape " + shape_str(shape));
    for (int64_t dim : shape)
        if (dim <= 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
        throw DimensionError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
}

Tensor Tensor::zeros(Shape s) {
    auto n = static_cast<size_t>(shape_numel(s));
    return Tensor(std::move(s), std::vector<float>(n, 0.0f));
}

Tensor Tensor::full(Shape s, float v) {
    auto n = static_cast<size_t>(shape_numel(s));
    return Tensor(std::move(s), std::vector<float>(n, v));
}

Tensor Tensor::from(Shape s, std::initializer_list<float> vals) {
    return Tensor(std::move(s), std::vector<float>(vals));
}

bool Tensor::all_finite() const {
    for (float v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw DimensionError("max_abs_diff: shapes " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    float m = 0.0f;
    for (size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

namespace {
bool g_finite_checks = false;
}

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks_enabled() { return g_finite_checks; }

void check_finite(const Tensor& t, const char* where) {
    if (!g_finite_checks) return;
    if (!t.all_finite())
        throw NumericalError(std::string("non-finite value produced by ") + where);
}

// ---- tape ------------------------------------------------------------------

GradTape::Var GradTape::push(Tensor value, bool tracked, std::vector<Var> parents,
                             std::function<void(GradTape&, Var)> backprop, const char* op) {
    check_finite(value, op);
    Node n;
    n.value = std::move(value);
    n.tracked = tracked;
    if (tracked) {
        n.parents = std::move(parents);
        n.backprop = std::move(backprop);
    }
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
}

bool GradTape::any_tracked(std::span<const Var> vs) const {
    for (Var v : vs)
        if (tracked(v)) return true;
    return false;
}

GradTape::Var GradTape::leaf(Tensor t) {
    bool want_grad = t.requires_grad;
    return push(std::move(t), want_grad, {}, nullptr, "leaf");
}

GradTape::Var GradTape::constant(Tensor t) {
    t.requires_grad = false;
    return push(std::move(t), false, {}, nullptr, "constant");
}

const Tensor& GradTape::grad(Var v) const {
    if (!ran_backward_) throw ContractError("grad() requested before backward()");
    return grads_[static_cast<size_t>(v)];
}

void GradTape::set_scalar_hint(Var v, double d) {
    Node& n = nodes_[static_cast<size_t>(v)];
    n.has_scalar_hint = true;
    n.scalar_hint = d;
}

bool GradTape::scalar_hint(Var v, double* out) const {
    const Node& n = nodes_[static_cast<size_t>(v)];
    if (!n.has_scalar_hint) return false;
    *out = n.scalar_hint;
    return true;
}

double GradTape::scalar_value(Var v) const {
    const Node& n = nodes_[static_cast<size_t>(v)];
    if (n.has_scalar_hint) return n.scalar_hint;
    return n.value.data[0];
}

void GradTape::backward(Var loss) {
    const Tensor& lv = value(loss);
    if (lv.numel() != 1)
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(lv.shape));
    grads_.clear();
    grads_.reserve(nodes_.size());
    for (const Node& n : nodes_) grads_.push_back(Tensor::zeros(n.value.shape));
    grads_[static_cast<size_t>(loss)].data[0] = 1.0f;
    for (Var v = loss; v >= 0; --v) {
        const Node& n = nodes_[static_cast<size_t>(v)];
        if (n.tracked && n.backprop) n.backprop(*this, v);
    }
    ran_backward_ = true;
}

// ---- elementwise ops ---------------------------------------------------------

GradTape::Var GradTape::add(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb))
        throw DimensionError("add: shapes " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out = Tensor::zeros(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] + tb.data[i];
    Var ps[] = {a, b};
    bool tr = any_tracked(ps);
    Var res = push(std::move(out), tr, {a, b},
                [a, b](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    if (t.tracked(a)) {
                        Tensor& ga = t.grad_buf(a);
                        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
                    }
                    if (t.tracked(b)) {
                        Tensor& gb = t.grad_buf(b);
                        for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i];
                    }
                },
                "add");
    double ha, hb;
    if (value(res).numel() == 1 && scalar_hint(a, &ha) && scalar_hint(b, &hb))
        set_scalar_hint(res, ha + hb);
    return res;
}

GradTape::Var GradTape::sub(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb))
        throw DimensionError("sub: shapes " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out = Tensor::zeros(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] - tb.data[i];
    Var ps[] = {a, b};
    bool tr = any_tracked(ps);
    Var res = push(std::move(out), tr, {a, b},
                [a, b](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    if (t.tracked(a)) {
                        Tensor& ga = t.grad_buf(a);
                        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
                    }
                    if (t.tracked(b)) {
                        Tensor& gb = t.grad_buf(b);
                        for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] -= g.data[i];
                    }
                },
                "sub");
    double ha, hb;
    if (value(res).numel() == 1 && scalar_hint(a, &ha) && scalar_hint(b, &hb))
        set_scalar_hint(res, ha - hb);
    return res;
}

GradTape::Var GradTape::mul(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb))
        throw DimensionError("mul: shapes " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out = Tensor::zeros(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] * tb.data[i];
    Var ps[] = {a, b};
    bool tr = any_tracked(ps);
    Var res = push(std::move(out), tr, {a, b},
                [a, b](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    const Tensor& ta = t.value(a);
                    const Tensor& tb = t.value(b);
                    if (t.tracked(a)) {
                        Tensor& ga = t.grad_buf(a);
                        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * tb.data[i];
                    }
                    if (t.tracked(b)) {
                        Tensor& gb = t.grad_buf(b);
                        for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * ta.data[i];
                    }
                },
                "mul");
    double ha, hb;
    if (value(res).numel() == 1 && scalar_hint(a, &ha) && scalar_hint(b, &hb))
        set_scalar_hint(res, ha * hb);
    return res;
}

GradTape::Var GradTape::scale(Var a, float s) {
    const Tensor& ta = value(a);
    Tensor out = Tensor::zeros(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] * s;
    Var res = push(std::move(out), tracked(a), {a},
                [a, s](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    Tensor& ga = t.grad_buf(a);
                    for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += s * g.data[i];
                },
                "scale");
    double ha;
    if (value(res).numel() == 1 && scalar_hint(a, &ha))
        set_scalar_hint(res, static_cast<double>(s) * ha);
    return res;
}

// ---- matrix ops --------------------------------------------------------------

GradTape::Var GradTape::matmul(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0])
        throw DimensionError("matmul: inner dimensions disagree: " + shape_str(ta.shape) +
                             " vs " + shape_str(tb.shape));
    const int64_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
    Tensor out = Tensor::zeros({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            float acc = 0.0f;
            for (int64_t p = 0; p < k; ++p) acc += ta.at2(i, p) * tb.at2(p, j);
            out.at2(i, j) = acc;
        }
    Var ps[] = {a, b};
    bool tr = any_tracked(ps);
    return push(std::move(out), tr, {a, b},
                [a, b, m, k, n](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    const Tensor& ta = t.value(a);
                    const Tensor& tb = t.value(b);
                    if (t.tracked(a)) {  // dA = G * B^T
                        Tensor& ga = t.grad_buf(a);
                        for (int64_t i = 0; i < m; ++i)
                            for (int64_t p = 0; p < k; ++p) {
                                float acc = 0.0f;
                                for (int64_t j = 0; j < n; ++j) acc += g.at2(i, j) * tb.at2(p, j);
                                ga.at2(i, p) += acc;
                            }
                    }
                    if (t.tracked(b)) {  // dB = A^T * G
                        Tensor& gb = t.grad_buf(b);
                        for (int64_t p = 0; p < k; ++p)
                            for (int64_t j = 0; j < n; ++j) {
                                float acc = 0.0f;
                                for (int64_t i = 0; i < m; ++i) acc += ta.at2(i, p) * g.at2(i, j);
                                gb.at2(p, j) += acc;
                            }
                    }
                },
                "matmul");
}

GradTape::Var GradTape::bmm(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.rank() != 3 || tb.rank() != 3 || ta.shape[0] != tb.shape[0] || ta.shape[2] != tb.shape[1])
        throw DimensionError("bmm: incompatible shapes: " + shape_str(ta.shape) + " vs " +
                             shape_str(tb.shape));
    const int64_t bs = ta.shape[0], m = ta.shape[1], k = ta.shape[2], n = tb.shape[2];
    Tensor out = Tensor::zeros({bs, m, n});
    for (int64_t q = 0; q < bs; ++q) {
        const float* pa = ta.data.data() + q * m * k;
        const float* pb = tb.data.data() + q * k * n;
        float* po = out.data.data() + q * m * n;
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) {
                float acc = 0.0f;
                for (int64_t p = 0; p < k; ++p) acc += pa[i * k + p] * pb[p * n + j];
                po[i * n + j] = acc;
            }
    }
    Var ps[] = {a, b};
    bool tr = any_tracked(ps);
    return push(std::move(out), tr, {a, b},
                [a, b, bs, m, k, n](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    const Tensor& ta = t.value(a);
                    const Tensor& tb = t.value(b);
                    if (t.tracked(a)) {
                        Tensor& ga = t.grad_buf(a);
                        for (int64_t q = 0; q < bs; ++q) {
                            const float* pg = g.data.data() + q * m * n;
                            const float* pb = tb.data.data() + q * k * n;
                            float* pga = ga.data.data() + q * m * k;
                            for (int64_t i = 0; i < m; ++i)
                                for (int64_t p = 0; p < k; ++p) {
                                    float acc = 0.0f;
                                    for (int64_t j = 0; j < n; ++j)
                                        acc += pg[i * n + j] * pb[p * n + j];
                                    pga[i * k + p] += acc;
                                }
                        }
                    }
                    if (t.tracked(b)) {
                        Tensor& gb = t.grad_buf(b);
                        for (int64_t q = 0; q < bs; ++q) {
                            const float* pg = g.data.data() + q * m * n;
                            const float* pa = ta.data.data() + q * m * k;
                            float* pgb = gb.data.data() + q * k * n;
                            for (int64_t p = 0; p < k; ++p)
                                for (int64_t j = 0; j < n; ++j) {
                                    float acc = 0.0f;
                                    for (int64_t i = 0; i < m; ++i)
                                        acc += pa[i * k + p] * pg[i * n + j];
                                    pgb[p * n + j] += acc;
                                }
                        }
                    }
                },
                "bmm");
}

namespace {

void transpose_copy(const float* src, float* dst, int64_t rows, int64_t cols) {
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

}  // namespace

GradTape::Var GradTape::transpose_last(Var a) {
    const Tensor& ta = value(a);
    if (ta.rank() < 2)
        throw DimensionError("transpose_last: need rank >= 2, got " + shape_str(ta.shape));
    Shape out_shape = ta.shape;
    std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
    const int64_t rows = ta.shape[ta.rank() - 2], cols = ta.shape[ta.rank() - 1];
    const int64_t outer = ta.numel() / (rows * cols);
    Tensor out = Tensor::zeros(out_shape);
    for (int64_t q = 0; q < outer; ++q)
        transpose_copy(ta.data.data() + q * rows * cols, out.data.data() + q * rows * cols, rows, cols);
    return push(std::move(out), tracked(a), {a},
                [a, rows, cols, outer](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    Tensor& ga = t.grad_buf(a);
                    // gradient of transpose is transpose of gradient
                    for (int64_t q = 0; q < outer; ++q) {
                        const float* pg = g.data.data() + q * rows * cols;
                        float* pa = ga.data.data() + q * rows * cols;
                        for (int64_t i = 0; i < cols; ++i)
                            for (int64_t j = 0; j < rows; ++j) pa[j * cols + i] += pg[i * rows + j];
                    }
                },
                "transpose_last");
}

GradTape::Var GradTape::linear(Var x, Var w, Var b) {
    const Tensor& tx = value(x);
    const Tensor& tw = value(w);
    const Tensor& tb = value(b);
    if (tw.rank() != 2 || tb.rank() != 1 || tw.shape[0] != tb.shape[0])
        throw DimensionError("linear: weight " + shape_str(tw.shape) + " and bias " +
                             shape_str(tb.shape) + " disagree");
    const int64_t in = tw.shape[1], out_dim = tw.shape[0];
    if (tx.shape.back() != in)
        throw DimensionError("linear: input " + shape_str(tx.shape) + " incompatible with weight " +
                             shape_str(tw.shape));
    const int64_t rows = tx.numel() / in;
    Shape out_shape = tx.shape;
    out_shape.back() = out_dim;
    Tensor out = Tensor::zeros(out_shape);
    for (int64_t r = 0; r < rows; ++r) {
        const float* px = tx.data.data() + r * in;
        float* po = out.data.data() + r * out_dim;
        for (int64_t o = 0; o < out_dim; ++o) {
            float acc = tb.data[static_cast<size_t>(o)];
            const float* pw = tw.data.data() + o * in;
            for (int64_t i = 0; i < in; ++i) acc += px[i] * pw[i];
            po[o] = acc;
        }
    }
    Var ps[] = {x, w, b};
    bool tr = any_tracked(ps);
    return push(std::move(out), tr, {x, w, b},
                [x, w, b, rows, in, out_dim](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    const Tensor& tx = t.value(x);
                    const Tensor& tw = t.value(w);
                    if (t.tracked(x)) {
                        Tensor& gx = t.grad_buf(x);
                        for (int64_t r = 0; r < rows; ++r) {
                            const float* pg = g.data.data() + r * out_dim;
                            float* px = gx.data.data() + r * in;
                            for (int64_t i = 0; i < in; ++i) {
                                float acc = 0.0f;
                                for (int64_t o = 0; o < out_dim; ++o) acc += pg[o] * tw.at2(o, i);
                                px[i] += acc;
                            }
                        }
                    }
                    if (t.tracked(w)) {
                        Tensor& gw = t.grad_buf(w);
                        for (int64_t r = 0; r < rows; ++r) {
                            const float* pg = g.data.data() + r * out_dim;
                            const float* px = tx.data.data() + r * in;
                            for (int64_t o = 0; o < out_dim; ++o) {
                                const float go = pg[o];
                                float* pgw = gw.data.data() + o * in;
                                for (int64_t i = 0; i < in; ++i) pgw[i] += go * px[i];
                            }
                        }
                    }
                    if (t.tracked(b)) {
                        Tensor& gb = t.grad_buf(b);
                        for (int64_t o = 0; o < out_dim; ++o) {
                            double acc = 0.0;
                            for (int64_t r = 0; r < rows; ++r)
                                acc += static_cast<double>(g.data[static_cast<size_t>(r * out_dim + o)]);
                            gb.data[static_cast<size_t>(o)] += static_cast<float>(acc);
                        }
                    }
                },
                "linear");
}

// ---- activations --------------------------------------------------------------

GradTape::Var GradTape::relu(Var a) {
    const Tensor& ta = value(a);
    Tensor out = Tensor::zeros(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] > 0.0f ? ta.data[i] : 0.0f;
    return push(std::move(out), tracked(a), {a},
                [a](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    const Tensor& ta = t.value(a);
                    Tensor& ga = t.grad_buf(a);
                    for (size_t i = 0; i < g.data.size(); ++i)
                        if (ta.data[i] > 0.0f) ga.data[i] += g.data[i];
                },
                "relu");
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

GradTape::Var GradTape::gelu(Var a) {
    const Tensor& ta = value(a);
    Tensor out = Tensor::zeros(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i) {
        double x = ta.data[i];
        double u = kGeluC * (x + kGeluA * x * x * x);
        out.data[i] = static_cast<float>(0.5 * x * (1.0 + std::tanh(u)));
    }
    return push(std::move(out), tracked(a), {a},
                [a](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    const Tensor& ta = t.value(a);
                    Tensor& ga = t.grad_buf(a);
                    for (size_t i = 0; i < g.data.size(); ++i) {
                        double x = ta.data[i];
                        double u = kGeluC * (x + kGeluA * x * x * x);
                        double th = std::tanh(u);
                        double d = 0.5 * (1.0 + th) +
                                   0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
                        ga.data[i] += static_cast<float>(g.data[i] * d);
                    }
                },
                "gelu");
}

// ---- normalizations ------------------------------------------------------------

namespace {

struct AxisLines {
    int64_t outer, len, inner;
};

AxisLines axis_lines(const Shape& shape, int axis) {
    int rank = static_cast<int>(shape.size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw DimensionError("axis out of range for " + shape_str(shape));
    AxisLines lines{1, shape[static_cast<size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) lines.outer *= shape[static_cast<size_t>(i)];
    for (int i = axis + 1; i < rank; ++i) lines.inner *= shape[static_cast<size_t>(i)];
    return lines;
}

}  // namespace

GradTape::Var GradTape::softmax(Var a, int axis) {
    const Tensor& ta = value(a);
    AxisLines ln = axis_lines(ta.shape, axis);
    Tensor out = Tensor::zeros(ta.shape);
    for (int64_t o = 0; o < ln.outer; ++o)
        for (int64_t in = 0; in < ln.inner; ++in) {
            const int64_t base = o * ln.len * ln.inner + in;
            float mx = ta.data[static_cast<size_t>(base)];
            for (int64_t c = 1; c < ln.len; ++c)
                mx = std::max(mx, ta.data[static_cast<size_t>(base + c * ln.inner)]);
            double denom = 0.0;
            for (int64_t c = 0; c < ln.len; ++c) {
                double e = std::exp(static_cast<double>(ta.data[static_cast<size_t>(base + c * ln.inner)]) - mx);
                out.data[static_cast<size_t>(base + c * ln.inner)] = static_cast<float>(e);
                denom += e;
            }
            for (int64_t c = 0; c < ln.len; ++c)
                out.data[static_cast<size_t>(base + c * ln.inner)] =
                    static_cast<float>(out.data[static_cast<size_t>(base + c * ln.inner)] / denom);
        }
    return push(std::move(out), tracked(a), {a},
                [a, ln](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    const Tensor& y = t.value(self);
                    Tensor& ga = t.grad_buf(a);
                    // dx = y * (g - <g, y>) per line
                    for (int64_t o = 0; o < ln.outer; ++o)
                        for (int64_t in = 0; in < ln.inner; ++in) {
                            const int64_t base = o * ln.len * ln.inner + in;
                            double dot = 0.0;
                            for (int64_t c = 0; c < ln.len; ++c) {
                                size_t idx = static_cast<size_t>(base + c * ln.inner);
                                dot += static_cast<double>(g.data[idx]) * static_cast<double>(y.data[idx]);
                            }
                            for (int64_t c = 0; c < ln.len; ++c) {
                                size_t idx = static_cast<size_t>(base + c * ln.inner);
                                ga.data[idx] += static_cast<float>(
                                    static_cast<double>(y.data[idx]) * (static_cast<double>(g.data[idx]) - dot));
                            }
                        }
                },
                "softmax");
}

GradTape::Var GradTape::layernorm(Var x, Var gain, Var bias, float eps) {
    const Tensor& tx = value(x);
    const Tensor& tg = value(gain);
    const Tensor& tb = value(bias);
    const int64_t d = tx.shape.back();
    if (tg.rank() != 1 || tb.rank() != 1 || tg.shape[0] != d || tb.shape[0] != d)
        throw DimensionError("layernorm: input " + shape_str(tx.shape) + " needs gain/bias of length " +
                             std::to_string(d) + ", got " + shape_str(tg.shape) + " / " +
                             shape_str(tb.shape));
    const int64_t rows = tx.numel() / d;
    Tensor out = Tensor::zeros(tx.shape);
    // normalized rows are recomputed in backward from the cached inputs
    for (int64_t r = 0; r < rows; ++r) {
        const float* px = tx.data.data() + r * d;
        float* po = out.data.data() + r * d;
        double mean = 0.0;
        for (int64_t i = 0; i < d; ++i) mean += px[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            double c = px[i] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
        for (int64_t i = 0; i < d; ++i) {
            double xhat = (px[i] - mean) * inv;
            po[i] = static_cast<float>(static_cast<double>(tg.data[static_cast<size_t>(i)]) * xhat +
                                       static_cast<double>(tb.data[static_cast<size_t>(i)]));
        }
    }
    Var ps[] = {x, gain, bias};
    bool tr = any_tracked(ps);
    return push(std::move(out), tr, {x, gain, bias},
                [x, gain, bias, eps, rows, d](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    const Tensor& tx = t.value(x);
                    const Tensor& tg = t.value(gain);
                    for (int64_t r = 0; r < rows; ++r) {
                        const float* px = tx.data.data() + r * d;
                        const float* pg = g.data.data() + r * d;
                        double mean = 0.0;
                        for (int64_t i = 0; i < d; ++i) mean += px[i];
                        mean /= static_cast<double>(d);
                        double var = 0.0;
                        for (int64_t i = 0; i < d; ++i) {
                            double c = px[i] - mean;
                            var += c * c;
                        }
                        var /= static_cast<double>(d);
                        double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
                        if (t.tracked(gain)) {
                            Tensor& gg = t.grad_buf(gain);
                            for (int64_t i = 0; i < d; ++i)
                                gg.data[static_cast<size_t>(i)] +=
                                    static_cast<float>(pg[i] * (px[i] - mean) * inv);
                        }
                        if (t.tracked(bias)) {
                            Tensor& gb = t.grad_buf(bias);
                            for (int64_t i = 0; i < d; ++i) gb.data[static_cast<size_t>(i)] += pg[i];
                        }
                        if (t.tracked(x)) {
                            Tensor& gx = t.grad_buf(x);
                            double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat * xhat)
                            for (int64_t i = 0; i < d; ++i) {
                                double dxh = static_cast<double>(pg[i]) *
                                             static_cast<double>(tg.data[static_cast<size_t>(i)]);
                                double xhat = (px[i] - mean) * inv;
                                m1 += dxh;
                                m2 += dxh * xhat;
                            }
                            m1 /= static_cast<double>(d);
                            m2 /= static_cast<double>(d);
                            float* pgx = gx.data.data() + r * d;
                            for (int64_t i = 0; i < d; ++i) {
                                double dxh = static_cast<double>(pg[i]) *
                                             static_cast<double>(tg.data[static_cast<size_t>(i)]);
                                double xhat = (px[i] - mean) * inv;
                                pgx[i] += static_cast<float>(inv * (dxh - m1 - xhat * m2));
                            }
                        }
                    }
                },
                "layernorm");
}

// ---- reductions & misc -----------------------------------------------------------

GradTape::Var GradTape::log_clamped(Var a, float eps) {
    const Tensor& ta = value(a);
    Tensor out = Tensor::zeros(ta.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = std::log(std::max(ta.data[i], eps));
    return push(std::move(out), tracked(a), {a},
                [a, eps](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    const Tensor& ta = t.value(a);
                    Tensor& ga = t.grad_buf(a);
                    for (size_t i = 0; i < g.data.size(); ++i)
                        if (ta.data[i] >= eps) ga.data[i] += g.data[i] / ta.data[i];
                },
                "log_clamped");
}

GradTape::Var GradTape::sum(Var a) {
    const Tensor& ta = value(a);
    double acc = 0.0;
    for (float v : ta.data) acc += v;
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    Var res = push(std::move(out), tracked(a), {a},
                [a](GradTape& t, Var self) {
                    const float g = t.grad_buf(self).data[0];
                    Tensor& ga = t.grad_buf(a);
                    for (float& v : ga.data) v += g;
                },
                "sum");
    set_scalar_hint(res, acc);
    return res;
}

GradTape::Var GradTape::mean_axis1(Var a) {
    const Tensor& ta = value(a);
    if (ta.rank() != 3)
        throw DimensionError("mean_axis1: need rank 3, got " + shape_str(ta.shape));
    const int64_t B = ta.shape[0], N = ta.shape[1], C = ta.shape[2];
    Tensor out = Tensor::zeros({B, C});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int64_t n = 0; n < N; ++n)
                acc += ta.data[static_cast<size_t>((b * N + n) * C + c)];
            out.at2(b, c) = static_cast<float>(acc / static_cast<double>(N));
        }
    return push(std::move(out), tracked(a), {a},
                [a, B, N, C](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    Tensor& ga = t.grad_buf(a);
                    const float invn = 1.0f / static_cast<float>(N);
                    for (int64_t b = 0; b < B; ++b)
                        for (int64_t n = 0; n < N; ++n)
                            for (int64_t c = 0; c < C; ++c)
                                ga.data[static_cast<size_t>((b * N + n) * C + c)] += g.at2(b, c) * invn;
                },
                "mean_axis1");
}

GradTape::Var GradTape::cross_entropy(Var logits, std::vector<int> labels) {
    const Tensor& tl = value(logits);
    if (tl.rank() != 2)
        throw DimensionError("cross_entropy: logits must be [B,C], got " + shape_str(tl.shape));
    const int64_t B = tl.shape[0], C = tl.shape[1];
    if (static_cast<int64_t>(labels.size()) != B)
        throw DimensionError("cross_entropy: label count " + std::to_string(labels.size()) +
                             " != batch " + std::to_string(B));
    for (int y : labels)
        if (y < 0 || y >= C)
            throw DimensionError("cross_entropy: label " + std::to_string(y) + " outside [0," +
                                 std::to_string(C) + ")");
    double total = 0.0;
    for (int64_t b = 0; b < B; ++b) {
        const float* p = tl.data.data() + b * C;
        double mx = p[0];
        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, static_cast<double>(p[c]));
        double denom = 0.0;
        for (int64_t c = 0; c < C; ++c) denom += std::exp(p[c] - mx);
        total += -(static_cast<double>(p[labels[static_cast<size_t>(b)]]) - mx - std::log(denom));
    }
    Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(B)));
    const double exact = total / static_cast<double>(B);
    Var res = push(std::move(out), tracked(logits), {logits},
                [logits, labels = std::move(labels), B, C](GradTape& t, Var self) {
                    const float g = t.grad_buf(self).data[0];
                    const Tensor& tl = t.value(logits);
                    Tensor& gl = t.grad_buf(logits);
                    const float invb = 1.0f / static_cast<float>(B);
                    for (int64_t b = 0; b < B; ++b) {
                        const float* p = tl.data.data() + b * C;
                        double mx = p[0];
                        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, static_cast<double>(p[c]));
                        double denom = 0.0;
                        for (int64_t c = 0; c < C; ++c) denom += std::exp(p[c] - mx);
                        for (int64_t c = 0; c < C; ++c) {
                            double prob = std::exp(p[c] - mx) / denom;
                            double delta = (c == labels[static_cast<size_t>(b)]) ? 1.0 : 0.0;
                            gl.at2(b, c) += static_cast<float>(g * (prob - delta) * invb);
                        }
                    }
                },
                "cross_entropy");
    set_scalar_hint(res, exact);
    return res;
}

GradTape::Var GradTape::row(Var a, int64_t index) {
    const Tensor& ta = value(a);
    if (index < 0 || index >= ta.shape[0])
        throw DimensionError("row: index " + std::to_string(index) + " out of range for " +
                             shape_str(ta.shape));
    Shape out_shape(ta.shape.begin() + 1, ta.shape.end());
    if (out_shape.empty()) out_shape = {1};
    const int64_t stride = ta.numel() / ta.shape[0];
    Tensor out = Tensor::zeros(out_shape);
    std::memcpy(out.data.data(), ta.data.data() + index * stride,
                static_cast<size_t>(stride) * sizeof(float));
    return push(std::move(out), tracked(a), {a},
                [a, index, stride](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    Tensor& ga = t.grad_buf(a);
                    float* dst = ga.data.data() + index * stride;
                    for (int64_t i = 0; i < stride; ++i) dst[i] += g.data[static_cast<size_t>(i)];
                },
                "row");
}

GradTape::Var GradTape::stack0(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("stack0: empty part list");
    const Tensor& first = value(parts[0]);
    for (Var v : parts)
        if (!value(v).same_shape(first))
            throw DimensionError("stack0: mismatched part shapes " + shape_str(value(v).shape) +
                                 " vs " + shape_str(first.shape));
    if (first.rank() >= 3) throw DimensionError("stack0: result rank would exceed 3");
    Shape out_shape;
    out_shape.push_back(static_cast<int64_t>(parts.size()));
    out_shape.insert(out_shape.end(), first.shape.begin(), first.shape.end());
    const int64_t stride = first.numel();
    Tensor out = Tensor::zeros(out_shape);
    for (size_t k = 0; k < parts.size(); ++k)
        std::memcpy(out.data.data() + static_cast<int64_t>(k) * stride, value(parts[k]).data.data(),
                    static_cast<size_t>(stride) * sizeof(float));
    std::vector<Var> ps(parts.begin(), parts.end());
    bool tr = any_tracked(ps);
    return push(std::move(out), tr, ps,
                [ps, stride](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    for (size_t k = 0; k < ps.size(); ++k) {
                        if (!t.tracked(ps[k])) continue;
                        Tensor& gk = t.grad_buf(ps[k]);
                        const float* src = g.data.data() + static_cast<int64_t>(k) * stride;
                        for (int64_t i = 0; i < stride; ++i) gk.data[static_cast<size_t>(i)] += src[i];
                    }
                },
                "stack0");
}

GradTape::Var GradTape::reshape(Var a, Shape s) {
    const Tensor& ta = value(a);
    if (shape_numel(s) != ta.numel())
        throw DimensionError("reshape: cannot view " + shape_str(ta.shape) + " as " + shape_str(s));
    Tensor out(std::move(s), ta.data);
    return push(std::move(out), tracked(a), {a},
                [a](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    Tensor& ga = t.grad_buf(a);
                    for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
                },
                "reshape");
}

GradTape::Var GradTape::split_heads(Var a, int64_t n_heads) {
    const Tensor& ta = value(a);
    if (ta.rank() != 3 || ta.shape[2] % n_heads != 0)
        throw DimensionError("split_heads: shape " + shape_str(ta.shape) + " not divisible by " +
                             std::to_string(n_heads) + " heads");
    const int64_t B = ta.shape[0], N = ta.shape[1], d = ta.shape[2], dh = d / n_heads;
    Tensor out = Tensor::zeros({B * n_heads, N, dh});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < n_heads; ++h)
            for (int64_t n = 0; n < N; ++n)
                std::memcpy(out.data.data() + (((b * n_heads + h) * N) + n) * dh,
                            ta.data.data() + ((b * N + n) * d) + h * dh,
                            static_cast<size_t>(dh) * sizeof(float));
    return push(std::move(out), tracked(a), {a},
                [a, B, N, d, dh, n_heads](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    Tensor& ga = t.grad_buf(a);
                    for (int64_t b = 0; b < B; ++b)
                        for (int64_t h = 0; h < n_heads; ++h)
                            for (int64_t n = 0; n < N; ++n) {
                                const float* src = g.data.data() + (((b * n_heads + h) * N) + n) * dh;
                                float* dst = ga.data.data() + ((b * N + n) * d) + h * dh;
                                for (int64_t i = 0; i < dh; ++i) dst[i] += src[i];
                            }
                },
                "split_heads");
}

GradTape::Var GradTape::merge_heads(Var a, int64_t n_heads) {
    const Tensor& ta = value(a);
    if (ta.rank() != 3 || ta.shape[0] % n_heads != 0)
        throw DimensionError("merge_heads: shape " + shape_str(ta.shape) + " not divisible by " +
                             std::to_string(n_heads) + " heads");
    const int64_t B = ta.shape[0] / n_heads, N = ta.shape[1], dh = ta.shape[2], d = dh * n_heads;
    Tensor out = Tensor::zeros({B, N, d});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < n_heads; ++h)
            for (int64_t n = 0; n < N; ++n)
                std::memcpy(out.data.data() + ((b * N + n) * d) + h * dh,
                            ta.data.data() + (((b * n_heads + h) * N) + n) * dh,
                            static_cast<size_t>(dh) * sizeof(float));
    return push(std::move(out), tracked(a), {a},
                [a, B, N, d, dh, n_heads](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    Tensor& ga = t.grad_buf(a);
                    for (int64_t b = 0; b < B; ++b)
                        for (int64_t h = 0; h < n_heads; ++h)
                            for (int64_t n = 0; n < N; ++n) {
                                const float* src = g.data.data() + ((b * N + n) * d) + h * dh;
                                float* dst = ga.data.data() + (((b * n_heads + h) * N) + n) * dh;
                                for (int64_t i = 0; i < dh; ++i) dst[i] += src[i];
                            }
                },
                "merge_heads");
}

GradTape::Var GradTape::dict_combine(Var w, const Tensor& base,
                                     std::span<const Tensor* const> deltas) {
    const Tensor& tw = value(w);
    if (tw.rank() != 1 || tw.shape[0] != static_cast<int64_t>(deltas.size()))
        throw DimensionError("dict_combine: weight " + shape_str(tw.shape) + " vs " +
                             std::to_string(deltas.size()) + " dictionary columns");
    for (const Tensor* d : deltas)
        if (!d->same_shape(base))
            throw DimensionError("dict_combine: delta shape " + shape_str(d->shape) +
                                 " != base shape " + shape_str(base.shape));
    const size_t n = base.data.size();
    const size_t T = deltas.size();
    Tensor out = base;
    out.requires_grad = false;
    // accumulation order matches task_arithmetic so forced-weight paths are
    // bit-identical to the static merge
    for (size_t t = 0; t < T; ++t) {
        const float wt = tw.data[t];
        const float* pd = deltas[t]->data.data();
        for (size_t i = 0; i < n; ++i) out.data[i] += wt * pd[i];
    }
    std::vector<const Tensor*> dptrs(deltas.begin(), deltas.end());
    return push(std::move(out), tracked(w), {w},
                [w, dptrs = std::move(dptrs)](GradTape& t, Var self) {
                    const Tensor& g = t.grad_buf(self);
                    Tensor& gw = t.grad_buf(w);
                    for (size_t k = 0; k < dptrs.size(); ++k) {
                        double acc = 0.0;
                        const float* pd = dptrs[k]->data.data();
                        for (size_t i = 0; i < g.data.size(); ++i)
                            acc += static_cast<double>(g.data[i]) * static_cast<double>(pd[i]);
                        gw.data[k] += static_cast<float>(acc);
                    }
                },
                "dict_combine");
}

// ---- finite differences ------------------------------------------------------------

FdCheckResult finite_difference_check(const TapedLoss& f, std::span<Tensor* const> params,
                                      double step) {
    GradTape tape;
    std::vector<GradTape::Var> vars;
    vars.reserve(params.size());
    for (Tensor* p : params) {
        Tensor t = *p;
        t.requires_grad = true;
        vars.push_back(tape.leaf(std::move(t)));
    }
    GradTape::Var loss = f(tape, vars);
    if (tape.value(loss).numel() != 1)
        throw ContractError("finite_difference_check: loss must be scalar");
    tape.backward(loss);

    auto eval = [&]() -> double {
        GradTape t2;
        std::vector<GradTape::Var> vs;
        vs.reserve(params.size());
        for (Tensor* p : params) {
            Tensor t = *p;
            t.requires_grad = false;
            vs.push_back(t2.leaf(std::move(t)));
        }
        return t2.scalar_value(f(t2, vs));
    };

    FdCheckResult res;
    for (size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        const Tensor& ad_grad = tape.grad(vars[k]);
        for (size_t i = 0; i < p.data.size(); ++i) {
            const float orig = p.data[i];
            const float xp = static_cast<float>(static_cast<double>(orig) + step);
            const float xm = static_cast<float>(static_cast<double>(orig) - step);
            p.data[i] = xp;
            const double fp = eval();
            p.data[i] = xm;
            const double fm = eval();
            p.data[i] = orig;
            // use the actually-realized float step, not the nominal one
            const double denom = static_cast<double>(xp) - static_cast<double>(xm);
            const double fd = (fp - fm) / denom;
            const double ad = ad_grad.data[i];
            const double rel = std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), 1e-8});
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = static_cast<int>(k);
                res.worst_coord = static_cast<int64_t>(i);
                res.autodiff = ad;
                res.finite_diff = fd;
            }
        }
    }
    return res;
}

}  // namespace wemoe
