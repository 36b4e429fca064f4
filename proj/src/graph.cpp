#include "iwm/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>

#include "iwm/rng.hpp"
#include "iwm/threadpool.hpp"

namespace iwm {

namespace {

const char* kOpNames[] = {
    "leaf",      "matmul",  "add",    "sub",   "mul",         "div",     "neg",   "exp",
    "log",       "sqrt",    "power",  "sum",   "mean",        "broadcast", "reshape", "transpose",
    "concat",    "slice",   "gather", "gelu",  "relu",        "softmax", "layer_norm"};

static_assert(sizeof(kOpNames) / sizeof(kOpNames[0]) == static_cast<size_t>(OpKind::kCount));

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

Shape strides_of(const Shape& s) {
    Shape st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

template <typename T>
bool all_finite_span(const T* p, int64_t n) {
    const T lim = std::numeric_limits<T>::max();
    for (int64_t i = 0; i < n; ++i)
        if (!(std::abs(p[i]) <= lim)) return false;
    return true;
}

// axis helpers: outer x len x inner decomposition for single-axis ops
struct AxisGeom {
    int64_t outer, len, inner;
};
AxisGeom axis_geom(const Shape& s, int64_t axis) {
    AxisGeom g{1, s[axis], 1};
    for (int64_t i = 0; i < axis; ++i) g.outer *= s[i];
    for (size_t i = axis + 1; i < s.size(); ++i) g.inner *= s[i];
    return g;
}

int64_t norm_axis(int64_t axis, size_t ndim, const char* op) {
    int64_t n = static_cast<int64_t>(ndim);
    if (axis < 0) axis += n;
    if (axis < 0 || axis >= n) throw GraphError(std::string(op) + ": axis out of range");
    return axis;
}

} // namespace

const char* op_name(OpKind k) { return kOpNames[static_cast<size_t>(k)]; }

const Graph::Node& Graph::node(NodeId id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) throw GraphError("invalid node id");
    return nodes_[static_cast<size_t>(id)];
}
Graph::Node& Graph::node(NodeId id) {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) throw GraphError("invalid node id");
    return nodes_[static_cast<size_t>(id)];
}

NodeId Graph::push(OpKind kind, std::vector<NodeId> inputs, OpAttrs attrs, Tensor value) {
    if (!value.all_finite()) {
        std::ostringstream os;
        os << "non-finite result from op '" << op_name(kind) << "' at node " << nodes_.size();
        throw GraphError(os.str());
    }
    Node n;
    n.kind = kind;
    n.attrs = std::move(attrs);
    n.value = std::move(value);
    n.requires_grad = false;
    for (NodeId i : inputs) n.requires_grad = n.requires_grad || node(i).requires_grad;
    n.inputs = std::move(inputs);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::leaf(Tensor value, bool trainable) {
    NodeId id = push(OpKind::Leaf, {}, {}, std::move(value));
    Node& n = node(id);
    n.trainable = trainable;
    n.requires_grad = trainable;
    return id;
}

void Graph::check_same_dtype(NodeId a, NodeId b, const char* op) const {
    if (node(a).value.dtype() != node(b).value.dtype())
        throw GraphError(std::string(op) + ": mixed dtypes");
}

// ---------------------------------------------------------------- matmul

namespace {

struct MatmulDims {
    int64_t batch, m, k, n;
    bool shared_rhs;
};

MatmulDims matmul_dims(const Shape& a, const Shape& b) {
    if (a.size() < 2 || b.size() < 2) throw GraphError("matmul: inputs must have rank >= 2");
    MatmulDims d{};
    d.m = a[a.size() - 2];
    d.k = a[a.size() - 1];
    d.batch = 1;
    for (size_t i = 0; i + 2 < a.size(); ++i) d.batch *= a[i];
    if (b.size() == 2) {
        d.shared_rhs = true;
        if (b[0] != d.k) throw GraphError("matmul: inner dims " + shape_str(a) + " x " + shape_str(b));
        d.n = b[1];
    } else {
        d.shared_rhs = false;
        if (b.size() != a.size()) throw GraphError("matmul: rank mismatch " + shape_str(a) + " x " + shape_str(b));
        for (size_t i = 0; i + 2 < a.size(); ++i)
            if (a[i] != b[i]) throw GraphError("matmul: batch dims differ " + shape_str(a) + " x " + shape_str(b));
        if (b[b.size() - 2] != d.k) throw GraphError("matmul: inner dims " + shape_str(a) + " x " + shape_str(b));
        d.n = b[b.size() - 1];
    }
    return d;
}

template <typename T>
void matmul_fwd(const T* a, const T* b, T* c, const MatmulDims& d) {
    const int64_t as = d.m * d.k, bs = d.shared_rhs ? 0 : d.k * d.n, cs = d.m * d.n;
    parallel_for(d.batch, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            CMapMat<T> A(a + i * as, d.m, d.k);
            CMapMat<T> B(b + i * bs, d.k, d.n);
            MapMat<T> C(c + i * cs, d.m, d.n);
            C.noalias() = A * B;
        }
    });
}

} // namespace

NodeId Graph::matmul(NodeId a, NodeId b) {
    check_same_dtype(a, b, "matmul");
    const Tensor& ta = node(a).value;
    const Tensor& tb = node(b).value;
    MatmulDims d = matmul_dims(ta.shape(), tb.shape());
    Shape out = ta.shape();
    out[out.size() - 1] = d.n;
    Tensor tc = Tensor::zeros(out, ta.dtype());
    if (ta.dtype() == Dtype::F32)
        matmul_fwd<float>(ta.f32(), tb.f32(), tc.f32(), d);
    else
        matmul_fwd<double>(ta.f64(), tb.f64(), tc.f64(), d);
    return push(OpKind::Matmul, {a, b}, {}, std::move(tc));
}

// ---------------------------------------------------------------- elementwise

namespace {

template <typename T, typename F>
void ew_binary(const T* a, const T* b, T* o, int64_t n, F f) {
    for (int64_t i = 0; i < n; ++i) o[i] = f(a[i], b[i]);
}

template <typename T, typename F>
void ew_unary(const T* a, T* o, int64_t n, F f) {
    for (int64_t i = 0; i < n; ++i) o[i] = f(a[i]);
}

template <typename T>
T gelu_val(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
}
template <typename T>
T gelu_grad(T x) {
    T phi = std::exp(-T(0.5) * x * x) * T(0.3989422804014326779);
    T Phi = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
    return Phi + x * phi;
}

} // namespace

#define IWM_BINARY_OP(NAME, KIND, EXPR)                                                   \
    NodeId Graph::NAME(NodeId a, NodeId b) {                                              \
        check_same_dtype(a, b, #NAME);                                                    \
        const Tensor& ta = node(a).value;                                                 \
        const Tensor& tb = node(b).value;                                                 \
        if (ta.shape() != tb.shape())                                                     \
            throw GraphError(#NAME ": shape mismatch " + shape_str(ta.shape()) + " vs " + \
                             shape_str(tb.shape()));                                      \
        Tensor to = Tensor::zeros(ta.shape(), ta.dtype());                                \
        if (ta.dtype() == Dtype::F32)                                                     \
            ew_binary<float>(ta.f32(), tb.f32(), to.f32(), ta.numel(),                    \
                             [](float x, float y) { return EXPR; });                      \
        else                                                                              \
            ew_binary<double>(ta.f64(), tb.f64(), to.f64(), ta.numel(),                   \
                              [](double x, double y) { return EXPR; });                   \
        return push(OpKind::KIND, {a, b}, {}, std::move(to));                             \
    }

IWM_BINARY_OP(add, Add, x + y)
IWM_BINARY_OP(sub, Sub, x - y)
IWM_BINARY_OP(mul, Mul, x* y)
IWM_BINARY_OP(div, Div, x / y)
#undef IWM_BINARY_OP

#define IWM_UNARY_OP(NAME, KIND, EXPR)                                         \
    NodeId Graph::NAME(NodeId a) {                                             \
        const Tensor& ta = node(a).value;                                      \
        Tensor to = Tensor::zeros(ta.shape(), ta.dtype());                     \
        if (ta.dtype() == Dtype::F32)                                          \
            ew_unary<float>(ta.f32(), to.f32(), ta.numel(),                    \
                            [](float x) { return EXPR; });                     \
        else                                                                   \
            ew_unary<double>(ta.f64(), to.f64(), ta.numel(),                   \
                             [](double x) { return EXPR; });                   \
        return push(OpKind::KIND, {a}, {}, std::move(to));                     \
    }

IWM_UNARY_OP(neg, Neg, -x)
IWM_UNARY_OP(exp, Exp, std::exp(x))
IWM_UNARY_OP(log, Log, std::log(x))
IWM_UNARY_OP(sqrt, Sqrt, std::sqrt(x))
IWM_UNARY_OP(gelu, Gelu, gelu_val(x))
IWM_UNARY_OP(relu, Relu, x > 0 ? x : decltype(x)(0))
#undef IWM_UNARY_OP

NodeId Graph::power(NodeId a, double exponent) {
    const Tensor& ta = node(a).value;
    Tensor to = Tensor::zeros(ta.shape(), ta.dtype());
    OpAttrs attrs;
    attrs.scalar = exponent;
    if (ta.dtype() == Dtype::F32)
        ew_unary<float>(ta.f32(), to.f32(), ta.numel(),
                        [e = static_cast<float>(exponent)](float x) { return std::pow(x, e); });
    else
        ew_unary<double>(ta.f64(), to.f64(), ta.numel(),
                         [e = exponent](double x) { return std::pow(x, e); });
    return push(OpKind::Power, {a}, std::move(attrs), std::move(to));
}

// ---------------------------------------------------------------- reductions

namespace {

std::vector<int64_t> canon_axes(std::vector<int64_t> axes, size_t ndim, const char* op) {
    if (axes.empty()) {
        axes.resize(ndim);
        std::iota(axes.begin(), axes.end(), 0);
        return axes;
    }
    for (auto& a : axes) a = norm_axis(a, ndim, op);
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    return axes;
}

Shape reduced_shape(const Shape& in, const std::vector<int64_t>& axes) {
    Shape out;
    size_t k = 0;
    for (size_t i = 0; i < in.size(); ++i) {
        if (k < axes.size() && static_cast<int64_t>(i) == axes[k]) {
            ++k;
            continue;
        }
        out.push_back(in[i]);
    }
    if (out.empty()) out.push_back(1);
    return out;
}

// map every input linear index to its reduced-output linear index
template <typename T>
void reduce_sum(const Tensor& in, Tensor& out, const std::vector<int64_t>& axes) {
    const Shape& s = in.shape();
    if (axes.size() == s.size()) { // full reduction
        const T* p = in.dtype() == Dtype::F32 ? reinterpret_cast<const T*>(in.f32())
                                              : reinterpret_cast<const T*>(in.f64());
        T acc = 0;
        for (int64_t i = 0; i < in.numel(); ++i) acc += p[i];
        T* o = out.dtype() == Dtype::F32 ? reinterpret_cast<T*>(out.f32()) : reinterpret_cast<T*>(out.f64());
        o[0] = acc;
        return;
    }
    if (axes.size() == 1) {
        AxisGeom g = axis_geom(s, axes[0]);
        const T* p = in.dtype() == Dtype::F32 ? reinterpret_cast<const T*>(in.f32())
                                              : reinterpret_cast<const T*>(in.f64());
        T* o = out.dtype() == Dtype::F32 ? reinterpret_cast<T*>(out.f32()) : reinterpret_cast<T*>(out.f64());
        for (int64_t ou = 0; ou < g.outer; ++ou)
            for (int64_t l = 0; l < g.len; ++l) {
                const T* src = p + (ou * g.len + l) * g.inner;
                T* dst = o + ou * g.inner;
                for (int64_t in_i = 0; in_i < g.inner; ++in_i) dst[in_i] += src[in_i];
            }
        return;
    }
    // generic multi-axis: multi-index walk in fixed row-major order
    Shape st_in = strides_of(s);
    Shape out_shape_full(s.size());
    for (size_t i = 0; i < s.size(); ++i) out_shape_full[i] = s[i];
    std::vector<bool> red(s.size(), false);
    for (int64_t a : axes) red[static_cast<size_t>(a)] = true;
    Shape out_strides(s.size(), 0);
    {
        int64_t stride = 1;
        for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
            if (!red[static_cast<size_t>(i)]) {
                out_strides[static_cast<size_t>(i)] = stride;
                stride *= s[static_cast<size_t>(i)];
            }
        }
    }
    const T* p = in.dtype() == Dtype::F32 ? reinterpret_cast<const T*>(in.f32())
                                          : reinterpret_cast<const T*>(in.f64());
    T* o = out.dtype() == Dtype::F32 ? reinterpret_cast<T*>(out.f32()) : reinterpret_cast<T*>(out.f64());
    std::vector<int64_t> idx(s.size(), 0);
    for (int64_t lin = 0; lin < in.numel(); ++lin) {
        int64_t oi = 0;
        for (size_t d = 0; d < s.size(); ++d) oi += idx[d] * out_strides[d];
        o[oi] += p[lin];
        for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
            if (++idx[static_cast<size_t>(d)] < s[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
        }
    }
}

} // namespace

NodeId Graph::sum(NodeId a, std::vector<int64_t> axes) {
    const Tensor& ta = node(a).value;
    axes = canon_axes(std::move(axes), ta.ndim(), "sum");
    Tensor to = Tensor::zeros(reduced_shape(ta.shape(), axes), ta.dtype());
    if (ta.dtype() == Dtype::F32)
        reduce_sum<float>(ta, to, axes);
    else
        reduce_sum<double>(ta, to, axes);
    OpAttrs attrs;
    attrs.ints = axes;
    return push(OpKind::Sum, {a}, std::move(attrs), std::move(to));
}

NodeId Graph::mean(NodeId a, std::vector<int64_t> axes) {
    const Tensor& ta = node(a).value;
    axes = canon_axes(std::move(axes), ta.ndim(), "mean");
    Tensor to = Tensor::zeros(reduced_shape(ta.shape(), axes), ta.dtype());
    if (ta.dtype() == Dtype::F32)
        reduce_sum<float>(ta, to, axes);
    else
        reduce_sum<double>(ta, to, axes);
    int64_t count = 1;
    for (int64_t ax : axes) count *= ta.shape()[static_cast<size_t>(ax)];
    for (int64_t i = 0; i < to.numel(); ++i) to.set(i, to.at(i) / static_cast<double>(count));
    OpAttrs attrs;
    attrs.ints = axes;
    attrs.scalar = static_cast<double>(count);
    return push(OpKind::Mean, {a}, std::move(attrs), std::move(to));
}

// ---------------------------------------------------------------- shape ops

namespace {

// aligns `from` to `to` from the trailing side; returns per-target-dim source
// extent (1 = broadcast) or throws
Shape broadcast_check(const Shape& from, const Shape& to) {
    if (from.size() > to.size()) throw GraphError("broadcast: source rank exceeds target");
    Shape aligned(to.size(), 1);
    size_t off = to.size() - from.size();
    for (size_t i = 0; i < from.size(); ++i) aligned[off + i] = from[i];
    for (size_t i = 0; i < to.size(); ++i)
        if (aligned[i] != 1 && aligned[i] != to[i])
            throw GraphError("broadcast: cannot expand " + shape_str(from) + " to " + shape_str(to));
    return aligned;
}

// trailing-suffix fast path: source equals the last dims of target
bool is_suffix(const Shape& aligned, const Shape& to, int64_t* block) {
    int64_t b = 1;
    bool suffix = true;
    for (int i = static_cast<int>(to.size()) - 1; i >= 0; --i) {
        if (aligned[static_cast<size_t>(i)] == to[static_cast<size_t>(i)]) {
            b *= to[static_cast<size_t>(i)];
        } else {
            for (int j = i; j >= 0; --j)
                if (aligned[static_cast<size_t>(j)] != 1) suffix = false;
            break;
        }
    }
    *block = b;
    return suffix;
}

template <typename T>
void broadcast_fwd(const Tensor& in, Tensor& out, const Shape& aligned) {
    const T* p = in.dtype() == Dtype::F32 ? reinterpret_cast<const T*>(in.f32())
                                          : reinterpret_cast<const T*>(in.f64());
    T* o = out.dtype() == Dtype::F32 ? reinterpret_cast<T*>(out.f32()) : reinterpret_cast<T*>(out.f64());
    const Shape& to = out.shape();
    int64_t block = 0;
    if (is_suffix(aligned, to, &block)) {
        int64_t reps = out.numel() / block;
        for (int64_t r = 0; r < reps; ++r) std::memcpy(o + r * block, p, sizeof(T) * static_cast<size_t>(block));
        return;
    }
    Shape src_strides(to.size(), 0);
    {
        int64_t stride = 1;
        for (int i = static_cast<int>(to.size()) - 1; i >= 0; --i) {
            src_strides[static_cast<size_t>(i)] = (aligned[static_cast<size_t>(i)] == 1) ? 0 : stride;
            if (aligned[static_cast<size_t>(i)] != 1) stride *= aligned[static_cast<size_t>(i)];
        }
    }
    std::vector<int64_t> idx(to.size(), 0);
    for (int64_t lin = 0; lin < out.numel(); ++lin) {
        int64_t si = 0;
        for (size_t d = 0; d < to.size(); ++d) si += idx[d] * src_strides[d];
        o[lin] = p[si];
        for (int d = static_cast<int>(to.size()) - 1; d >= 0; --d) {
            if (++idx[static_cast<size_t>(d)] < to[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
        }
    }
}

template <typename T>
void broadcast_bwd(const Tensor& g, Tensor& gin, const Shape& aligned) {
    const T* go = g.dtype() == Dtype::F32 ? reinterpret_cast<const T*>(g.f32())
                                          : reinterpret_cast<const T*>(g.f64());
    T* gi = gin.dtype() == Dtype::F32 ? reinterpret_cast<T*>(gin.f32()) : reinterpret_cast<T*>(gin.f64());
    const Shape& to = g.shape();
    int64_t block = 0;
    if (is_suffix(aligned, to, &block)) {
        int64_t reps = g.numel() / block;
        for (int64_t r = 0; r < reps; ++r) {
            const T* src = go + r * block;
            for (int64_t i = 0; i < block; ++i) gi[i] += src[i];
        }
        return;
    }
    Shape src_strides(to.size(), 0);
    {
        int64_t stride = 1;
        for (int i = static_cast<int>(to.size()) - 1; i >= 0; --i) {
            src_strides[static_cast<size_t>(i)] = (aligned[static_cast<size_t>(i)] == 1) ? 0 : stride;
            if (aligned[static_cast<size_t>(i)] != 1) stride *= aligned[static_cast<size_t>(i)];
        }
    }
    std::vector<int64_t> idx(to.size(), 0);
    for (int64_t lin = 0; lin < g.numel(); ++lin) {
        int64_t si = 0;
        for (size_t d = 0; d < to.size(); ++d) si += idx[d] * src_strides[d];
        gi[si] += go[lin];
        for (int d = static_cast<int>(to.size()) - 1; d >= 0; --d) {
            if (++idx[static_cast<size_t>(d)] < to[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
        }
    }
}

} // namespace

NodeId Graph::broadcast_to(NodeId a, Shape target) {
    const Tensor& ta = node(a).value;
    Shape aligned = broadcast_check(ta.shape(), target);
    Tensor to = Tensor::zeros(target, ta.dtype());
    if (ta.dtype() == Dtype::F32)
        broadcast_fwd<float>(ta, to, aligned);
    else
        broadcast_fwd<double>(ta, to, aligned);
    OpAttrs attrs;
    attrs.ints = std::move(target);
    return push(OpKind::BroadcastTo, {a}, std::move(attrs), std::move(to));
}

NodeId Graph::reshape(NodeId a, Shape target) {
    Tensor to = node(a).value.reshaped(target);
    OpAttrs attrs;
    attrs.ints = std::move(target);
    return push(OpKind::Reshape, {a}, std::move(attrs), std::move(to));
}

namespace {

template <typename T>
void transpose_kernel(const Tensor& in, Tensor& out, const std::vector<int64_t>& perm) {
    const Shape& si = in.shape();
    Shape so = out.shape();
    Shape out_strides = strides_of(so);
    // stride in output for a step along input dim d
    Shape step(si.size());
    for (size_t od = 0; od < perm.size(); ++od) step[static_cast<size_t>(perm[od])] = out_strides[od];
    const T* p = in.dtype() == Dtype::F32 ? reinterpret_cast<const T*>(in.f32())
                                          : reinterpret_cast<const T*>(in.f64());
    T* o = out.dtype() == Dtype::F32 ? reinterpret_cast<T*>(out.f32()) : reinterpret_cast<T*>(out.f64());
    std::vector<int64_t> idx(si.size(), 0);
    int64_t oi = 0;
    for (int64_t lin = 0; lin < in.numel(); ++lin) {
        o[oi] = p[lin];
        for (int d = static_cast<int>(si.size()) - 1; d >= 0; --d) {
            oi += step[static_cast<size_t>(d)];
            if (++idx[static_cast<size_t>(d)] < si[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
            oi -= step[static_cast<size_t>(d)] * si[static_cast<size_t>(d)];
        }
    }
}

} // namespace

NodeId Graph::transpose(NodeId a, std::vector<int64_t> perm) {
    const Tensor& ta = node(a).value;
    if (perm.size() != ta.ndim()) throw GraphError("transpose: perm rank mismatch");
    std::vector<bool> seen(perm.size(), false);
    Shape so(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) {
        int64_t p = norm_axis(perm[i], ta.ndim(), "transpose");
        if (seen[static_cast<size_t>(p)]) throw GraphError("transpose: duplicate axis in perm");
        seen[static_cast<size_t>(p)] = true;
        perm[i] = p;
        so[i] = ta.shape()[static_cast<size_t>(p)];
    }
    Tensor to = Tensor::zeros(so, ta.dtype());
    if (ta.dtype() == Dtype::F32)
        transpose_kernel<float>(ta, to, perm);
    else
        transpose_kernel<double>(ta, to, perm);
    OpAttrs attrs;
    attrs.ints = std::move(perm);
    return push(OpKind::Transpose, {a}, std::move(attrs), std::move(to));
}

NodeId Graph::concat(const std::vector<NodeId>& parts, int64_t axis) {
    if (parts.empty()) throw GraphError("concat: no inputs");
    const Tensor& t0 = node(parts[0]).value;
    axis = norm_axis(axis, t0.ndim(), "concat");
    Shape so = t0.shape();
    for (size_t i = 1; i < parts.size(); ++i) {
        const Tensor& ti = node(parts[i]).value;
        check_same_dtype(parts[0], parts[i], "concat");
        if (ti.ndim() != t0.ndim()) throw GraphError("concat: rank mismatch");
        for (size_t d = 0; d < t0.ndim(); ++d)
            if (static_cast<int64_t>(d) != axis && ti.shape()[d] != t0.shape()[d])
                throw GraphError("concat: shape mismatch off-axis");
        so[static_cast<size_t>(axis)] += ti.shape()[static_cast<size_t>(axis)];
    }
    Tensor to = Tensor::zeros(so, t0.dtype());
    AxisGeom g = axis_geom(so, axis);
    size_t esize = t0.dtype() == Dtype::F32 ? sizeof(float) : sizeof(double);
    char* out_base = t0.dtype() == Dtype::F32 ? reinterpret_cast<char*>(to.f32())
                                              : reinterpret_cast<char*>(to.f64());
    int64_t off = 0;
    for (NodeId p : parts) {
        const Tensor& ti = node(p).value;
        int64_t li = ti.shape()[static_cast<size_t>(axis)];
        const char* in_base = ti.dtype() == Dtype::F32 ? reinterpret_cast<const char*>(ti.f32())
                                                       : reinterpret_cast<const char*>(ti.f64());
        for (int64_t ou = 0; ou < g.outer; ++ou) {
            std::memcpy(out_base + ((ou * g.len + off) * g.inner) * esize,
                        in_base + (ou * li * g.inner) * esize,
                        static_cast<size_t>(li * g.inner) * esize);
        }
        off += li;
    }
    OpAttrs attrs;
    attrs.ints = {axis};
    return push(OpKind::Concat, parts, std::move(attrs), std::move(to));
}

NodeId Graph::slice(NodeId a, int64_t axis, int64_t start, int64_t stop) {
    const Tensor& ta = node(a).value;
    axis = norm_axis(axis, ta.ndim(), "slice");
    int64_t len = ta.shape()[static_cast<size_t>(axis)];
    if (start < 0 || stop > len || start >= stop) throw GraphError("slice: bad range");
    Shape so = ta.shape();
    so[static_cast<size_t>(axis)] = stop - start;
    Tensor to = Tensor::zeros(so, ta.dtype());
    AxisGeom g = axis_geom(ta.shape(), axis);
    size_t esize = ta.dtype() == Dtype::F32 ? sizeof(float) : sizeof(double);
    const char* in_base = ta.dtype() == Dtype::F32 ? reinterpret_cast<const char*>(ta.f32())
                                                   : reinterpret_cast<const char*>(ta.f64());
    char* out_base = ta.dtype() == Dtype::F32 ? reinterpret_cast<char*>(to.f32())
                                              : reinterpret_cast<char*>(to.f64());
    int64_t span = stop - start;
    for (int64_t ou = 0; ou < g.outer; ++ou)
        std::memcpy(out_base + (ou * span * g.inner) * esize,
                    in_base + ((ou * g.len + start) * g.inner) * esize,
                    static_cast<size_t>(span * g.inner) * esize);
    OpAttrs attrs;
    attrs.ints = {axis, start, stop};
    return push(OpKind::Slice, {a}, std::move(attrs), std::move(to));
}

NodeId Graph::gather_rows(NodeId a, std::vector<int64_t> indices) {
    const Tensor& ta = node(a).value;
    if (ta.ndim() < 1) throw GraphError("gather: rank 0 input");
    int64_t rows = ta.shape()[0];
    int64_t rowlen = ta.numel() / rows;
    for (int64_t i : indices)
        if (i < 0 || i >= rows) throw GraphError("gather: index out of range");
    Shape so = ta.shape();
    so[0] = static_cast<int64_t>(indices.size());
    if (indices.empty()) throw GraphError("gather: empty index list");
    Tensor to = Tensor::zeros(so, ta.dtype());
    size_t esize = ta.dtype() == Dtype::F32 ? sizeof(float) : sizeof(double);
    const char* in_base = ta.dtype() == Dtype::F32 ? reinterpret_cast<const char*>(ta.f32())
                                                   : reinterpret_cast<const char*>(ta.f64());
    char* out_base = ta.dtype() == Dtype::F32 ? reinterpret_cast<char*>(to.f32())
                                              : reinterpret_cast<char*>(to.f64());
    for (size_t j = 0; j < indices.size(); ++j)
        std::memcpy(out_base + static_cast<int64_t>(j) * rowlen * static_cast<int64_t>(esize),
                    in_base + indices[j] * rowlen * static_cast<int64_t>(esize),
                    static_cast<size_t>(rowlen) * esize);
    OpAttrs attrs;
    attrs.ints = std::move(indices);
    return push(OpKind::GatherRows, {a}, std::move(attrs), std::move(to));
}

// ---------------------------------------------------------------- softmax / layer norm

namespace {

template <typename T>
void softmax_fwd(const Tensor& in, Tensor& out, int64_t axis) {
    AxisGeom g = axis_geom(in.shape(), axis);
    const T* p = in.dtype() == Dtype::F32 ? reinterpret_cast<const T*>(in.f32())
                                          : reinterpret_cast<const T*>(in.f64());
    T* o = out.dtype() == Dtype::F32 ? reinterpret_cast<T*>(out.f32()) : reinterpret_cast<T*>(out.f64());
    parallel_for(g.outer, [&](int64_t lo, int64_t hi) {
        for (int64_t ou = lo; ou < hi; ++ou)
            for (int64_t in_i = 0; in_i < g.inner; ++in_i) {
                const T* x = p + ou * g.len * g.inner + in_i;
                T* y = o + ou * g.len * g.inner + in_i;
                T mx = x[0];
                for (int64_t l = 1; l < g.len; ++l) mx = std::max(mx, x[l * g.inner]);
                T sum = 0;
                for (int64_t l = 0; l < g.len; ++l) {
                    T e = std::exp(x[l * g.inner] - mx);
                    y[l * g.inner] = e;
                    sum += e;
                }
                T inv = T(1) / sum;
                for (int64_t l = 0; l < g.len; ++l) y[l * g.inner] *= inv;
            }
    });
}

template <typename T>
void softmax_bwd(const Tensor& y, const Tensor& gy, Tensor& gx, int64_t axis) {
    AxisGeom g = axis_geom(y.shape(), axis);
    const T* yp = y.dtype() == Dtype::F32 ? reinterpret_cast<const T*>(y.f32())
                                          : reinterpret_cast<const T*>(y.f64());
    const T* gp = gy.dtype() == Dtype::F32 ? reinterpret_cast<const T*>(gy.f32())
                                           : reinterpret_cast<const T*>(gy.f64());
    T* o = gx.dtype() == Dtype::F32 ? reinterpret_cast<T*>(gx.f32()) : reinterpret_cast<T*>(gx.f64());
    for (int64_t ou = 0; ou < g.outer; ++ou)
        for (int64_t in_i = 0; in_i < g.inner; ++in_i) {
            const T* yy = yp + ou * g.len * g.inner + in_i;
            const T* gg = gp + ou * g.len * g.inner + in_i;
            T* oo = o + ou * g.len * g.inner + in_i;
            T dot = 0;
            for (int64_t l = 0; l < g.len; ++l) dot += yy[l * g.inner] * gg[l * g.inner];
            for (int64_t l = 0; l < g.len; ++l)
                oo[l * g.inner] += yy[l * g.inner] * (gg[l * g.inner] - dot);
        }
}

template <typename T>
void layer_norm_fwd(const Tensor& in, Tensor& out, Tensor& inv_std, int64_t axis, double eps) {
    AxisGeom g = axis_geom(in.shape(), axis);
    const T* p = in.dtype() == Dtype::F32 ? reinterpret_cast<const T*>(in.f32())
                                          : reinterpret_cast<const T*>(in.f64());
    T* o = out.dtype() == Dtype::F32 ? reinterpret_cast<T*>(out.f32()) : reinterpret_cast<T*>(out.f64());
    T* is = inv_std.dtype() == Dtype::F32 ? reinterpret_cast<T*>(inv_std.f32())
                                          : reinterpret_cast<T*>(inv_std.f64());
    parallel_for(g.outer, [&](int64_t lo, int64_t hi) {
        for (int64_t ou = lo; ou < hi; ++ou)
            for (int64_t in_i = 0; in_i < g.inner; ++in_i) {
                const T* x = p + ou * g.len * g.inner + in_i;
                T* y = o + ou * g.len * g.inner + in_i;
                T mu = 0;
                for (int64_t l = 0; l < g.len; ++l) mu += x[l * g.inner];
                mu /= T(g.len);
                T var = 0;
                for (int64_t l = 0; l < g.len; ++l) {
                    T d = x[l * g.inner] - mu;
                    var += d * d;
                }
                var /= T(g.len);
                T inv = T(1) / std::sqrt(var + T(eps));
                is[ou * g.inner + in_i] = inv;
                for (int64_t l = 0; l < g.len; ++l) y[l * g.inner] = (x[l * g.inner] - mu) * inv;
            }
    });
}

template <typename T>
void layer_norm_bwd(const Tensor& y, const Tensor& inv_std, const Tensor& gy, Tensor& gx, int64_t axis) {
    AxisGeom g = axis_geom(y.shape(), axis);
    const T* yp = y.dtype() == Dtype::F32 ? reinterpret_cast<const T*>(y.f32())
                                          : reinterpret_cast<const T*>(y.f64());
    const T* is = inv_std.dtype() == Dtype::F32 ? reinterpret_cast<const T*>(inv_std.f32())
                                                : reinterpret_cast<const T*>(inv_std.f64());
    const T* gp = gy.dtype() == Dtype::F32 ? reinterpret_cast<const T*>(gy.f32())
                                           : reinterpret_cast<const T*>(gy.f64());
    T* o = gx.dtype() == Dtype::F32 ? reinterpret_cast<T*>(gx.f32()) : reinterpret_cast<T*>(gx.f64());
    for (int64_t ou = 0; ou < g.outer; ++ou)
        for (int64_t in_i = 0; in_i < g.inner; ++in_i) {
            const T* yy = yp + ou * g.len * g.inner + in_i;
            const T* gg = gp + ou * g.len * g.inner + in_i;
            T* oo = o + ou * g.len * g.inner + in_i;
            T gmean = 0, gymean = 0;
            for (int64_t l = 0; l < g.len; ++l) {
                gmean += gg[l * g.inner];
                gymean += gg[l * g.inner] * yy[l * g.inner];
            }
            gmean /= T(g.len);
            gymean /= T(g.len);
            T inv = is[ou * g.inner + in_i];
            for (int64_t l = 0; l < g.len; ++l)
                oo[l * g.inner] += (gg[l * g.inner] - gmean - yy[l * g.inner] * gymean) * inv;
        }
}

} // namespace

NodeId Graph::softmax(NodeId a, int64_t axis) {
    const Tensor& ta = node(a).value;
    axis = norm_axis(axis, ta.ndim(), "softmax");
    Tensor to = Tensor::zeros(ta.shape(), ta.dtype());
    if (ta.dtype() == Dtype::F32)
        softmax_fwd<float>(ta, to, axis);
    else
        softmax_fwd<double>(ta, to, axis);
    OpAttrs attrs;
    attrs.ints = {axis};
    return push(OpKind::Softmax, {a}, std::move(attrs), std::move(to));
}

NodeId Graph::layer_norm(NodeId a, int64_t axis, double eps) {
    const Tensor& ta = node(a).value;
    axis = norm_axis(axis, ta.ndim(), "layer_norm");
    if (eps <= 0) throw GraphError("layer_norm: eps must be positive");
    Tensor to = Tensor::zeros(ta.shape(), ta.dtype());
    AxisGeom g = axis_geom(ta.shape(), axis);
    Tensor inv_std = Tensor::zeros({g.outer * g.inner}, ta.dtype());
    if (ta.dtype() == Dtype::F32)
        layer_norm_fwd<float>(ta, to, inv_std, axis, eps);
    else
        layer_norm_fwd<double>(ta, to, inv_std, axis, eps);
    OpAttrs attrs;
    attrs.ints = {axis};
    attrs.scalar = eps;
    NodeId id = push(OpKind::LayerNorm, {a}, std::move(attrs), std::move(to));
    saved_.resize(nodes_.size());
    saved_[static_cast<size_t>(id)] = std::move(inv_std);
    return id;
}

// ---------------------------------------------------------------- backward

void Graph::accumulate(NodeId id, const Tensor& g) {
    Node& n = node(id);
    if (!n.requires_grad) return;
    if (!n.grad.defined()) n.grad = Tensor::zeros(n.value.shape(), n.value.dtype());
    if (g.shape() != n.grad.shape()) throw GraphError("grad shape mismatch at node accumulate");
    if (n.value.dtype() == Dtype::F32) {
        float* d = n.grad.f32();
        const float* s = g.f32();
        for (int64_t i = 0; i < g.numel(); ++i) d[i] += s[i];
    } else {
        double* d = n.grad.f64();
        const double* s = g.f64();
        for (int64_t i = 0; i < g.numel(); ++i) d[i] += s[i];
    }
}

void Graph::backward(NodeId output) {
    const Node& out = node(output);
    if (out.value.numel() != 1) throw GraphError("backward: output is not scalar");
    if (ran_backward_) throw GraphError("backward: already run on this graph");
    ran_backward_ = true;
    if (!out.requires_grad) return; // nothing trainable reaches the output
    node(output).grad = Tensor::full(out.value.shape(), 1.0, out.value.dtype());
    for (NodeId id = output; id >= 0; --id) {
        Node& n = node(id);
        if (!n.requires_grad || !n.grad.defined() || n.kind == OpKind::Leaf) continue;
        backward_node(id);
    }
}

void Graph::backward_node(NodeId id) {
    Node& n = node(id);
    const Tensor& g = n.grad;
    const Tensor& v = n.value;
    auto in_val = [&](size_t i) -> const Tensor& { return node(n.inputs[i]).value; };
    auto needs = [&](size_t i) { return node(n.inputs[i]).requires_grad; };

    switch (n.kind) {
    case OpKind::Matmul: {
        const Tensor& A = in_val(0);
        const Tensor& B = in_val(1);
        MatmulDims d = matmul_dims(A.shape(), B.shape());
        const int64_t as = d.m * d.k, bs = d.shared_rhs ? 0 : d.k * d.n, cs = d.m * d.n;
        if (needs(0)) {
            Tensor gA = Tensor::zeros(A.shape(), A.dtype());
            auto run = [&](auto tag) {
                using T = decltype(tag);
                const T* gp = std::is_same_v<T, float> ? reinterpret_cast<const T*>(g.f32())
                                                       : reinterpret_cast<const T*>(g.f64());
                const T* bp = std::is_same_v<T, float> ? reinterpret_cast<const T*>(B.f32())
                                                       : reinterpret_cast<const T*>(B.f64());
                T* ap = std::is_same_v<T, float> ? reinterpret_cast<T*>(gA.f32())
                                                 : reinterpret_cast<T*>(gA.f64());
                parallel_for(d.batch, [&](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i) {
                        CMapMat<T> G(gp + i * cs, d.m, d.n);
                        CMapMat<T> Bm(bp + i * bs, d.k, d.n);
                        MapMat<T> Am(ap + i * as, d.m, d.k);
                        Am.noalias() = G * Bm.transpose();
                    }
                });
            };
            A.dtype() == Dtype::F32 ? run(float{}) : run(double{});
            accumulate(n.inputs[0], gA);
        }
        if (needs(1)) {
            Tensor gB = Tensor::zeros(B.shape(), B.dtype());
            auto run = [&](auto tag) {
                using T = decltype(tag);
                const T* gp = std::is_same_v<T, float> ? reinterpret_cast<const T*>(g.f32())
                                                       : reinterpret_cast<const T*>(g.f64());
                const T* apv = std::is_same_v<T, float> ? reinterpret_cast<const T*>(A.f32())
                                                        : reinterpret_cast<const T*>(A.f64());
                T* bp = std::is_same_v<T, float> ? reinterpret_cast<T*>(gB.f32())
                                                 : reinterpret_cast<T*>(gB.f64());
                if (d.shared_rhs) {
                    MapMat<T> Bm(bp, d.k, d.n);
                    for (int64_t i = 0; i < d.batch; ++i) { // fixed order accumulation
                        CMapMat<T> Am(apv + i * as, d.m, d.k);
                        CMapMat<T> G(gp + i * cs, d.m, d.n);
                        Bm.noalias() += Am.transpose() * G;
                    }
                } else {
                    parallel_for(d.batch, [&](int64_t lo, int64_t hi) {
                        for (int64_t i = lo; i < hi; ++i) {
                            CMapMat<T> Am(apv + i * as, d.m, d.k);
                            CMapMat<T> G(gp + i * cs, d.m, d.n);
                            MapMat<T> Bm(bp + i * bs, d.k, d.n);
                            Bm.noalias() = Am.transpose() * G;
                        }
                    });
                }
            };
            B.dtype() == Dtype::F32 ? run(float{}) : run(double{});
            accumulate(n.inputs[1], gB);
        }
        break;
    }
    case OpKind::Add:
        if (needs(0)) accumulate(n.inputs[0], g);
        if (needs(1)) accumulate(n.inputs[1], g);
        break;
    case OpKind::Sub: {
        if (needs(0)) accumulate(n.inputs[0], g);
        if (needs(1)) {
            Tensor gb = Tensor::zeros(g.shape(), g.dtype());
            for (int64_t i = 0; i < g.numel(); ++i) gb.set(i, -g.at(i));
            accumulate(n.inputs[1], gb);
        }
        break;
    }
    case OpKind::Mul: {
        if (needs(0)) {
            Tensor ga = Tensor::zeros(g.shape(), g.dtype());
            const Tensor& B = in_val(1);
            for (int64_t i = 0; i < g.numel(); ++i) ga.set(i, g.at(i) * B.at(i));
            accumulate(n.inputs[0], ga);
        }
        if (needs(1)) {
            Tensor gb = Tensor::zeros(g.shape(), g.dtype());
            const Tensor& A = in_val(0);
            for (int64_t i = 0; i < g.numel(); ++i) gb.set(i, g.at(i) * A.at(i));
            accumulate(n.inputs[1], gb);
        }
        break;
    }
    case OpKind::Div: {
        const Tensor& A = in_val(0);
        const Tensor& B = in_val(1);
        if (needs(0)) {
            Tensor ga = Tensor::zeros(g.shape(), g.dtype());
            for (int64_t i = 0; i < g.numel(); ++i) ga.set(i, g.at(i) / B.at(i));
            accumulate(n.inputs[0], ga);
        }
        if (needs(1)) {
            Tensor gb = Tensor::zeros(g.shape(), g.dtype());
            for (int64_t i = 0; i < g.numel(); ++i) {
                double b = B.at(i);
                gb.set(i, -g.at(i) * A.at(i) / (b * b));
            }
            accumulate(n.inputs[1], gb);
        }
        break;
    }
    case OpKind::Neg: {
        if (!needs(0)) break;
        Tensor ga = Tensor::zeros(g.shape(), g.dtype());
        for (int64_t i = 0; i < g.numel(); ++i) ga.set(i, -g.at(i));
        accumulate(n.inputs[0], ga);
        break;
    }
    case OpKind::Exp: {
        if (!needs(0)) break;
        Tensor ga = Tensor::zeros(g.shape(), g.dtype());
        for (int64_t i = 0; i < g.numel(); ++i) ga.set(i, g.at(i) * v.at(i));
        accumulate(n.inputs[0], ga);
        break;
    }
    case OpKind::Log: {
        if (!needs(0)) break;
        const Tensor& A = in_val(0);
        Tensor ga = Tensor::zeros(g.shape(), g.dtype());
        for (int64_t i = 0; i < g.numel(); ++i) ga.set(i, g.at(i) / A.at(i));
        accumulate(n.inputs[0], ga);
        break;
    }
    case OpKind::Sqrt: {
        if (!needs(0)) break;
        Tensor ga = Tensor::zeros(g.shape(), g.dtype());
        for (int64_t i = 0; i < g.numel(); ++i) ga.set(i, g.at(i) * 0.5 / v.at(i));
        accumulate(n.inputs[0], ga);
        break;
    }
    case OpKind::Power: {
        if (!needs(0)) break;
        const Tensor& A = in_val(0);
        double p = n.attrs.scalar;
        Tensor ga = Tensor::zeros(g.shape(), g.dtype());
        for (int64_t i = 0; i < g.numel(); ++i)
            ga.set(i, g.at(i) * p * std::pow(A.at(i), p - 1.0));
        accumulate(n.inputs[0], ga);
        break;
    }
    case OpKind::Gelu: {
        if (!needs(0)) break;
        const Tensor& A = in_val(0);
        Tensor ga = Tensor::zeros(g.shape(), g.dtype());
        if (A.dtype() == Dtype::F32) {
            const float* x = A.f32();
            const float* gp = g.f32();
            float* o = ga.f32();
            for (int64_t i = 0; i < g.numel(); ++i) o[i] = gp[i] * gelu_grad(x[i]);
        } else {
            const double* x = A.f64();
            const double* gp = g.f64();
            double* o = ga.f64();
            for (int64_t i = 0; i < g.numel(); ++i) o[i] = gp[i] * gelu_grad(x[i]);
        }
        accumulate(n.inputs[0], ga);
        break;
    }
    case OpKind::Relu: {
        if (!needs(0)) break;
        const Tensor& A = in_val(0);
        Tensor ga = Tensor::zeros(g.shape(), g.dtype());
        for (int64_t i = 0; i < g.numel(); ++i) ga.set(i, A.at(i) > 0 ? g.at(i) : 0.0);
        accumulate(n.inputs[0], ga);
        break;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
        if (!needs(0)) break;
        const Tensor& A = in_val(0);
        const auto& axes = n.attrs.ints;
        double scale = n.kind == OpKind::Mean ? 1.0 / n.attrs.scalar : 1.0;
        Tensor ga = Tensor::zeros(A.shape(), A.dtype());
        // replay the same input->output index mapping as the forward
        const Shape& s = A.shape();
        if (axes.size() == s.size()) {
            double gv = g.at(0) * scale;
            for (int64_t i = 0; i < ga.numel(); ++i) ga.set(i, gv);
        } else if (axes.size() == 1) {
            AxisGeom geo = axis_geom(s, axes[0]);
            for (int64_t ou = 0; ou < geo.outer; ++ou)
                for (int64_t l = 0; l < geo.len; ++l)
                    for (int64_t in_i = 0; in_i < geo.inner; ++in_i)
                        ga.set((ou * geo.len + l) * geo.inner + in_i,
                               g.at(ou * geo.inner + in_i) * scale);
        } else {
            std::vector<bool> red(s.size(), false);
            for (int64_t a : axes) red[static_cast<size_t>(a)] = true;
            Shape out_strides(s.size(), 0);
            int64_t stride = 1;
            for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
                if (!red[static_cast<size_t>(i)]) {
                    out_strides[static_cast<size_t>(i)] = stride;
                    stride *= s[static_cast<size_t>(i)];
                }
            }
            std::vector<int64_t> idx(s.size(), 0);
            for (int64_t lin = 0; lin < A.numel(); ++lin) {
                int64_t oi = 0;
                for (size_t d2 = 0; d2 < s.size(); ++d2) oi += idx[d2] * out_strides[d2];
                ga.set(lin, g.at(oi) * scale);
                for (int d2 = static_cast<int>(s.size()) - 1; d2 >= 0; --d2) {
                    if (++idx[static_cast<size_t>(d2)] < s[static_cast<size_t>(d2)]) break;
                    idx[static_cast<size_t>(d2)] = 0;
                }
            }
        }
        accumulate(n.inputs[0], ga);
        break;
    }
    case OpKind::BroadcastTo: {
        if (!needs(0)) break;
        const Tensor& A = in_val(0);
        Shape aligned = broadcast_check(A.shape(), v.shape());
        Tensor ga = Tensor::zeros(aligned, A.dtype());
        if (A.dtype() == Dtype::F32)
            broadcast_bwd<float>(g, ga, aligned);
        else
            broadcast_bwd<double>(g, ga, aligned);
        accumulate(n.inputs[0], ga.reshaped(A.shape()));
        break;
    }
    case OpKind::Reshape: {
        if (!needs(0)) break;
        accumulate(n.inputs[0], g.reshaped(in_val(0).shape()));
        break;
    }
    case OpKind::Transpose: {
        if (!needs(0)) break;
        const auto& perm = n.attrs.ints;
        std::vector<int64_t> inv(perm.size());
        for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int64_t>(i);
        Tensor ga = Tensor::zeros(in_val(0).shape(), g.dtype());
        if (g.dtype() == Dtype::F32)
            transpose_kernel<float>(g, ga, inv);
        else
            transpose_kernel<double>(g, ga, inv);
        accumulate(n.inputs[0], ga);
        break;
    }
    case OpKind::Concat: {
        int64_t axis = n.attrs.ints[0];
        int64_t off = 0;
        AxisGeom geo = axis_geom(v.shape(), axis);
        for (size_t pi = 0; pi < n.inputs.size(); ++pi) {
            const Tensor& ti = in_val(pi);
            int64_t li = ti.shape()[static_cast<size_t>(axis)];
            if (needs(pi)) {
                Tensor gp = Tensor::zeros(ti.shape(), ti.dtype());
                for (int64_t ou = 0; ou < geo.outer; ++ou)
                    for (int64_t l = 0; l < li; ++l)
                        for (int64_t in_i = 0; in_i < geo.inner; ++in_i)
                            gp.set((ou * li + l) * geo.inner + in_i,
                                   g.at((ou * geo.len + off + l) * geo.inner + in_i));
                accumulate(n.inputs[pi], gp);
            }
            off += li;
        }
        break;
    }
    case OpKind::Slice: {
        if (!needs(0)) break;
        const Tensor& A = in_val(0);
        int64_t axis = n.attrs.ints[0], start = n.attrs.ints[1], stop = n.attrs.ints[2];
        AxisGeom geo = axis_geom(A.shape(), axis);
        Tensor ga = Tensor::zeros(A.shape(), A.dtype());
        int64_t span = stop - start;
        for (int64_t ou = 0; ou < geo.outer; ++ou)
            for (int64_t l = 0; l < span; ++l)
                for (int64_t in_i = 0; in_i < geo.inner; ++in_i)
                    ga.set((ou * geo.len + start + l) * geo.inner + in_i,
                           g.at((ou * span + l) * geo.inner + in_i));
        accumulate(n.inputs[0], ga);
        break;
    }
    case OpKind::GatherRows: {
        if (!needs(0)) break;
        const Tensor& A = in_val(0);
        const auto& idx = n.attrs.ints;
        int64_t rowlen = A.numel() / A.shape()[0];
        Tensor ga = Tensor::zeros(A.shape(), A.dtype());
        if (A.dtype() == Dtype::F32) {
            float* o = ga.f32();
            const float* gp = g.f32();
            for (size_t j = 0; j < idx.size(); ++j) {
                float* dst = o + idx[j] * rowlen;
                const float* src = gp + static_cast<int64_t>(j) * rowlen;
                for (int64_t i = 0; i < rowlen; ++i) dst[i] += src[i];
            }
        } else {
            double* o = ga.f64();
            const double* gp = g.f64();
            for (size_t j = 0; j < idx.size(); ++j) {
                double* dst = o + idx[j] * rowlen;
                const double* src = gp + static_cast<int64_t>(j) * rowlen;
                for (int64_t i = 0; i < rowlen; ++i) dst[i] += src[i];
            }
        }
        accumulate(n.inputs[0], ga);
        break;
    }
    case OpKind::Softmax: {
        if (!needs(0)) break;
        Tensor ga = Tensor::zeros(v.shape(), v.dtype());
        if (v.dtype() == Dtype::F32)
            softmax_bwd<float>(v, g, ga, n.attrs.ints[0]);
        else
            softmax_bwd<double>(v, g, ga, n.attrs.ints[0]);
        accumulate(n.inputs[0], ga);
        break;
    }
    case OpKind::LayerNorm: {
        if (!needs(0)) break;
        Tensor ga = Tensor::zeros(v.shape(), v.dtype());
        const Tensor& is = saved_node_tensor(id);
        if (v.dtype() == Dtype::F32)
            layer_norm_bwd<float>(v, is, g, ga, n.attrs.ints[0]);
        else
            layer_norm_bwd<double>(v, is, g, ga, n.attrs.ints[0]);
        accumulate(n.inputs[0], ga);
        break;
    }
    case OpKind::Leaf:
        break;
    default:
        throw GraphError(std::string("no backward rule registered for op '") + op_name(n.kind) + "'");
    }
}

const Tensor& Graph::saved_node_tensor(NodeId id) const {
    if (static_cast<size_t>(id) >= saved_.size() || !saved_[static_cast<size_t>(id)].defined())
        throw GraphError("missing saved activation for node");
    return saved_[static_cast<size_t>(id)];
}

const Tensor& Graph::value(NodeId id) const { return node(id).value; }

Tensor Graph::grad(NodeId id) const {
    const Node& n = node(id);
    if (n.grad.defined()) return n.grad;
    return Tensor::zeros(n.value.shape(), n.value.dtype());
}

bool Graph::has_grad(NodeId id) const { return node(id).grad.defined(); }

std::vector<NodeId> Graph::trainable_leaves() const {
    std::vector<NodeId> out;
    for (size_t i = 0; i < nodes_.size(); ++i)
        if (nodes_[i].kind == OpKind::Leaf && nodes_[i].trainable) out.push_back(static_cast<NodeId>(i));
    return out;
}

size_t Graph::bytes_held() const {
    size_t b = 0;
    for (const auto& n : nodes_) {
        b += static_cast<size_t>(n.value.numel()) * (n.value.dtype() == Dtype::F32 ? 4 : 8);
        if (n.grad.defined()) b += static_cast<size_t>(n.grad.numel()) * (n.grad.dtype() == Dtype::F32 ? 4 : 8);
    }
    return b;
}

} // namespace iwm
