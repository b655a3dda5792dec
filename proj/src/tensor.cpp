#include "coview/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace coview {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapC = Eigen::Map<const MatRM>;

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

double Tensor::at(std::initializer_list<int> idx) const {
    require_dims(idx.size() == shape.size(), "Tensor::at: rank mismatch");
    int64_t flat = 0;
    size_t axis = 0;
    for (int i : idx) {
        require_dims(i >= 0 && i < shape[axis], "Tensor::at: index out of range on axis " + std::to_string(axis));
        flat = flat * shape[axis] + i;
        ++axis;
    }
    return (*values)[flat];
}

Tensor tensor_of(Shape shape, std::vector<double> values) {
    require_dims(shape_numel(shape) == static_cast<int64_t>(values.size()),
                 "tensor_of: shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
    Tensor t;
    t.shape = std::move(shape);
    t.values = std::make_shared<const std::vector<double>>(std::move(values));
    return t;
}

Tensor zeros(const Shape& shape) { return tensor_of(shape, std::vector<double>(shape_numel(shape), 0.0)); }

Tensor full(const Shape& shape, double v) {
    return tensor_of(shape, std::vector<double>(shape_numel(shape), v));
}

bool all_finite(const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

double softplus_value(double x) {
    // overflow-safe form: max(x,0) + log(1+exp(-|x|))
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

double sigmoid_value(double x) {
    if (x >= 0.0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// Graph internals
// ---------------------------------------------------------------------------

Tensor Graph::emit(Shape shape, std::vector<double> vals, bool needs_grad,
                   std::function<void(Graph&, const std::vector<double>&)> backprop) {
    Node n;
    n.shape = shape;
    n.values = std::make_shared<const std::vector<double>>(std::move(vals));
    n.needs_grad = needs_grad;
    if (needs_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    Tensor t;
    t.shape = std::move(shape);
    t.values = nodes_.back().values;
    t.node = static_cast<int>(nodes_.size()) - 1;
    return t;
}

bool Graph::tracked(const Tensor& t) const {
    if (t.node < 0) return false;
    require(t.node < static_cast<int>(nodes_.size()) &&
                nodes_[t.node].values.get() == t.values.get(),
            "tensor does not belong to this graph");
    return true;
}

std::vector<double>& Graph::grad_buf(int id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.values->size(), 0.0);
    return n.grad;
}

void Graph::accumulate(int id, const double* g, int64_t n) {
    if (id < 0 || !nodes_[id].needs_grad) return;
    std::vector<double>& buf = grad_buf(id);
    for (int64_t i = 0; i < n; ++i) buf[i] += g[i];
}

Tensor Graph::input(const Tensor& t) {
    return emit(t.shape, std::vector<double>(t.data()), false, nullptr);
}

Tensor Graph::param(const Tensor& t) {
    return emit(t.shape, std::vector<double>(t.data()), true, nullptr);
}

void Graph::backward(const Tensor& loss) {
    require(!backward_done_, "Graph::backward: already run on this graph");
    require(tracked(loss), "Graph::backward: loss is not part of this graph");
    require(loss.numel() == 1,
            "Graph::backward: loss must be scalar, got shape " + shape_str(loss.shape));
    backward_done_ = true;
    grad_buf(loss.node)[0] = 1.0;
    for (int id = loss.node; id >= 0; --id) {
        Node& n = nodes_[id];
        if (!n.grad.empty() && n.backprop) n.backprop(*this, n.grad);
    }
}

std::vector<double> Graph::grad(const Tensor& t) const {
    if (t.node >= 0) {
        require(tracked(t), "Graph::grad: tensor is not part of this graph");
        const Node& n = nodes_[t.node];
        if (!n.grad.empty()) return n.grad;
    }
    return std::vector<double>(t.numel(), 0.0);
}

bool Graph::owns(const Tensor& t) const { return t.node >= 0 && tracked(t); }

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor Graph::add(const Tensor& a, const Tensor& b) {
    require_dims(a.shape == b.shape,
                 "add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    int64_t n = a.numel();
    std::vector<double> out(n);
    const std::vector<double>&av = a.data(), &bv = b.data();
    for (int64_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
    int ia = tracked(a) ? a.node : -1;
    int ib = tracked(b) ? b.node : -1;
    bool ng = ia >= 0 || ib >= 0;
    return emit(a.shape, std::move(out), ng, [ia, ib, n](Graph& g, const std::vector<double>& go) {
        g.accumulate(ia, go.data(), n);
        g.accumulate(ib, go.data(), n);
    });
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
    require_dims(a.shape == b.shape,
                 "sub: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    int64_t n = a.numel();
    std::vector<double> out(n);
    const std::vector<double>&av = a.data(), &bv = b.data();
    for (int64_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
    int ia = tracked(a) ? a.node : -1;
    int ib = tracked(b) ? b.node : -1;
    bool ng = ia >= 0 || ib >= 0;
    return emit(a.shape, std::move(out), ng, [ia, ib, n](Graph& g, const std::vector<double>& go) {
        g.accumulate(ia, go.data(), n);
        if (ib >= 0 && g.nodes_[ib].needs_grad) {
            std::vector<double>& buf = g.grad_buf(ib);
            for (int64_t i = 0; i < n; ++i) buf[i] -= go[i];
        }
    });
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
    require_dims(a.shape == b.shape,
                 "mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    int64_t n = a.numel();
    std::vector<double> out(n);
    auto av = a.values, bv = b.values;
    for (int64_t i = 0; i < n; ++i) out[i] = (*av)[i] * (*bv)[i];
    int ia = tracked(a) ? a.node : -1;
    int ib = tracked(b) ? b.node : -1;
    bool ng = ia >= 0 || ib >= 0;
    return emit(a.shape, std::move(out), ng,
                [ia, ib, n, av, bv](Graph& g, const std::vector<double>& go) {
                    if (ia >= 0 && g.nodes_[ia].needs_grad) {
                        std::vector<double>& buf = g.grad_buf(ia);
                        for (int64_t i = 0; i < n; ++i) buf[i] += go[i] * (*bv)[i];
                    }
                    if (ib >= 0 && g.nodes_[ib].needs_grad) {
                        std::vector<double>& buf = g.grad_buf(ib);
                        for (int64_t i = 0; i < n; ++i) buf[i] += go[i] * (*av)[i];
                    }
                });
}

Tensor Graph::scale(const Tensor& a, double c) {
    int64_t n = a.numel();
    std::vector<double> out(n);
    const std::vector<double>& av = a.data();
    for (int64_t i = 0; i < n; ++i) out[i] = av[i] * c;
    int ia = tracked(a) ? a.node : -1;
    return emit(a.shape, std::move(out), ia >= 0,
                [ia, c, n](Graph& g, const std::vector<double>& go) {
                    if (ia >= 0 && g.nodes_[ia].needs_grad) {
                        std::vector<double>& buf = g.grad_buf(ia);
                        for (int64_t i = 0; i < n; ++i) buf[i] += go[i] * c;
                    }
                });
}

Tensor Graph::activation(const Tensor& a, Activation kind) {
    int64_t n = a.numel();
    std::vector<double> out(n);
    auto av = a.values;
    switch (kind) {
        case Activation::Relu:
            for (int64_t i = 0; i < n; ++i) out[i] = (*av)[i] > 0.0 ? (*av)[i] : 0.0;
            break;
        case Activation::Sigmoid:
            for (int64_t i = 0; i < n; ++i) out[i] = sigmoid_value((*av)[i]);
            break;
        case Activation::Softplus:
            for (int64_t i = 0; i < n; ++i) out[i] = softplus_value((*av)[i]);
            break;
    }
    int ia = tracked(a) ? a.node : -1;
    if (ia < 0) return emit(a.shape, std::move(out), false, nullptr);
    // sigmoid derivative uses the output; relu/softplus use the input
    auto ov = std::make_shared<std::vector<double>>(out);
    return emit(a.shape, std::move(out), true,
                [ia, kind, n, av, ov](Graph& g, const std::vector<double>& go) {
                    if (!g.nodes_[ia].needs_grad) return;
                    std::vector<double>& buf = g.grad_buf(ia);
                    switch (kind) {
                        case Activation::Relu:
                            for (int64_t i = 0; i < n; ++i)
                                if ((*av)[i] > 0.0) buf[i] += go[i];
                            break;
                        case Activation::Sigmoid:
                            for (int64_t i = 0; i < n; ++i) {
                                double s = (*ov)[i];
                                buf[i] += go[i] * s * (1.0 - s);
                            }
                            break;
                        case Activation::Softplus:
                            for (int64_t i = 0; i < n; ++i) buf[i] += go[i] * sigmoid_value((*av)[i]);
                            break;
                    }
                });
}

Tensor Graph::huber(const Tensor& a) {
    int64_t n = a.numel();
    std::vector<double> out(n);
    auto av = a.values;
    for (int64_t i = 0; i < n; ++i) {
        double x = (*av)[i];
        out[i] = std::fabs(x) <= 1.0 ? 0.5 * x * x : std::fabs(x) - 0.5;
    }
    int ia = tracked(a) ? a.node : -1;
    return emit(a.shape, std::move(out), ia >= 0,
                [ia, n, av](Graph& g, const std::vector<double>& go) {
                    if (ia < 0 || !g.nodes_[ia].needs_grad) return;
                    std::vector<double>& buf = g.grad_buf(ia);
                    for (int64_t i = 0; i < n; ++i)
                        buf[i] += go[i] * std::clamp((*av)[i], -1.0, 1.0);
                });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor Graph::sum(const Tensor& a) {
    int64_t n = a.numel();
    double s = 0.0;
    for (double v : a.data()) s += v;
    int ia = tracked(a) ? a.node : -1;
    return emit({1}, {s}, ia >= 0, [ia, n](Graph& g, const std::vector<double>& go) {
        if (ia < 0 || !g.nodes_[ia].needs_grad) return;
        std::vector<double>& buf = g.grad_buf(ia);
        for (int64_t i = 0; i < n; ++i) buf[i] += go[0];
    });
}

Tensor Graph::mean(const Tensor& a) {
    int64_t n = a.numel();
    require(n > 0, "mean: empty tensor");
    double s = 0.0;
    for (double v : a.data()) s += v;
    double inv = 1.0 / static_cast<double>(n);
    int ia = tracked(a) ? a.node : -1;
    return emit({1}, {s * inv}, ia >= 0, [ia, n, inv](Graph& g, const std::vector<double>& go) {
        if (ia < 0 || !g.nodes_[ia].needs_grad) return;
        std::vector<double>& buf = g.grad_buf(ia);
        double gv = go[0] * inv;
        for (int64_t i = 0; i < n; ++i) buf[i] += gv;
    });
}

// ---------------------------------------------------------------------------
// dense layers
// ---------------------------------------------------------------------------

Tensor Graph::linear(const Tensor& x, const Tensor& w, const Tensor* b) {
    require_dims(w.shape.size() == 2, "linear: weight must be 2-D, got " + shape_str(w.shape));
    int nin = w.shape[0], nout = w.shape[1];
    bool batched = x.shape.size() == 2;
    require_dims(batched || x.shape.size() == 1,
                 "linear: input must be [n] or [B,n], got " + shape_str(x.shape));
    int rows = batched ? x.shape[0] : 1;
    int xin = batched ? x.shape[1] : x.shape[0];
    require_dims(xin == nin, "linear: input size " + std::to_string(xin) + " != weight rows " +
                                 std::to_string(nin));
    if (b != nullptr)
        require_dims(b->shape == Shape{nout}, "linear: bias shape " + shape_str(b->shape) +
                                                  " != [" + std::to_string(nout) + "]");

    std::vector<double> out(static_cast<size_t>(rows) * nout);
    {
        MapC X(x.data().data(), rows, nin);
        MapC W(w.data().data(), nin, nout);
        MapM Y(out.data(), rows, nout);
        Y.noalias() = X * W;
        if (b != nullptr) Y.rowwise() += MapC(b->data().data(), 1, nout).row(0);
    }
    Shape oshape = batched ? Shape{rows, nout} : Shape{nout};
    int ix = tracked(x) ? x.node : -1;
    int iw = tracked(w) ? w.node : -1;
    int ib = (b != nullptr && tracked(*b)) ? b->node : -1;
    bool ng = ix >= 0 || iw >= 0 || ib >= 0;
    auto xv = x.values;
    auto wv = w.values;
    return emit(std::move(oshape), std::move(out), ng,
                [ix, iw, ib, rows, nin, nout, xv, wv](Graph& g, const std::vector<double>& go) {
                    MapC GO(go.data(), rows, nout);
                    if (ix >= 0 && g.nodes_[ix].needs_grad) {
                        std::vector<double>& buf = g.grad_buf(ix);
                        MapM GX(buf.data(), rows, nin);
                        GX.noalias() += GO * MapC(wv->data(), nin, nout).transpose();
                    }
                    if (iw >= 0 && g.nodes_[iw].needs_grad) {
                        std::vector<double>& buf = g.grad_buf(iw);
                        MapM GW(buf.data(), nin, nout);
                        GW.noalias() += MapC(xv->data(), rows, nin).transpose() * GO;
                    }
                    if (ib >= 0 && g.nodes_[ib].needs_grad) {
                        // plain loop: Eigen's column reduction splits lanes by
                        // heap alignment, which breaks bitwise reproducibility
                        std::vector<double>& buf = g.grad_buf(ib);
                        for (int r = 0; r < rows; ++r)
                            for (int c = 0; c < nout; ++c) buf[c] += go[static_cast<size_t>(r) * nout + c];
                    }
                });
}

namespace {
struct ConvGeom {
    int h, w, cin, k, cout, stride;
    int oh, ow, pad_top, pad_left;
    int64_t patch;  // k*k*cin
};

ConvGeom conv_geometry(const Shape& xs, const Shape& ks, int stride, Padding padding) {
    require_dims(xs.size() == 3, "conv2d: input must be [H,W,Cin], got " + shape_str(xs));
    require_dims(ks.size() == 4, "conv2d: kernel must be [k,k,Cin,Cout], got " + shape_str(ks));
    require_dims(ks[0] == ks[1], "conv2d: kernel must be square, got " + shape_str(ks));
    require_dims(ks[0] % 2 == 1, "conv2d: kernel size must be odd, got " + std::to_string(ks[0]));
    require_dims(ks[2] == xs[2], "conv2d: input channels " + std::to_string(xs[2]) +
                                     " != kernel Cin " + std::to_string(ks[2]));
    require(stride >= 1, "conv2d: stride must be positive");
    ConvGeom cg;
    cg.h = xs[0];
    cg.w = xs[1];
    cg.cin = xs[2];
    cg.k = ks[0];
    cg.cout = ks[3];
    cg.stride = stride;
    if (padding == Padding::Same) {
        cg.oh = (cg.h + stride - 1) / stride;
        cg.ow = (cg.w + stride - 1) / stride;
        int pad_h = std::max(0, (cg.oh - 1) * stride + cg.k - cg.h);
        int pad_w = std::max(0, (cg.ow - 1) * stride + cg.k - cg.w);
        cg.pad_top = pad_h / 2;
        cg.pad_left = pad_w / 2;
    } else {
        require_dims(cg.h >= cg.k && cg.w >= cg.k,
                     "conv2d: kernel larger than input for \"valid\" padding");
        require_dims((cg.h - cg.k) % stride == 0 && (cg.w - cg.k) % stride == 0,
                     "conv2d: stride does not divide the valid extent (input " + shape_str(xs) +
                         ", kernel " + std::to_string(cg.k) + ", stride " + std::to_string(stride) + ")");
        cg.oh = (cg.h - cg.k) / stride + 1;
        cg.ow = (cg.w - cg.k) / stride + 1;
        cg.pad_top = 0;
        cg.pad_left = 0;
    }
    cg.patch = static_cast<int64_t>(cg.k) * cg.k * cg.cin;
    return cg;
}

std::shared_ptr<std::vector<double>> im2col(const std::vector<double>& x, const ConvGeom& cg) {
    auto cols = std::make_shared<std::vector<double>>(
        static_cast<size_t>(cg.oh) * cg.ow * cg.patch, 0.0);
    double* dst = cols->data();
    for (int oi = 0; oi < cg.oh; ++oi) {
        for (int oj = 0; oj < cg.ow; ++oj) {
            int64_t row = (static_cast<int64_t>(oi) * cg.ow + oj) * cg.patch;
            for (int ki = 0; ki < cg.k; ++ki) {
                int h = oi * cg.stride - cg.pad_top + ki;
                for (int kj = 0; kj < cg.k; ++kj) {
                    int w = oj * cg.stride - cg.pad_left + kj;
                    int64_t off = row + (static_cast<int64_t>(ki) * cg.k + kj) * cg.cin;
                    if (h >= 0 && h < cg.h && w >= 0 && w < cg.w) {
                        const double* src = x.data() + (static_cast<int64_t>(h) * cg.w + w) * cg.cin;
                        std::copy(src, src + cg.cin, dst + off);
                    }
                }
            }
        }
    }
    return cols;
}
} // namespace

Tensor Graph::conv2d(const Tensor& x, const Tensor& k, int stride, Padding padding) {
    ConvGeom cg = conv_geometry(x.shape, k.shape, stride, padding);
    auto cols = im2col(x.data(), cg);
    int64_t orows = static_cast<int64_t>(cg.oh) * cg.ow;
    std::vector<double> out(orows * cg.cout);
    {
        MapC C(cols->data(), orows, cg.patch);
        MapC K(k.data().data(), cg.patch, cg.cout);
        MapM O(out.data(), orows, cg.cout);
        O.noalias() = C * K;
    }
    int ix = tracked(x) ? x.node : -1;
    int ik = tracked(k) ? k.node : -1;
    bool ng = ix >= 0 || ik >= 0;
    auto kv = k.values;
    return emit({cg.oh, cg.ow, cg.cout}, std::move(out), ng,
                [ix, ik, cg, orows, cols, kv](Graph& g, const std::vector<double>& go) {
                    MapC GO(go.data(), orows, cg.cout);
                    if (ik >= 0 && g.nodes_[ik].needs_grad) {
                        std::vector<double>& buf = g.grad_buf(ik);
                        MapM GK(buf.data(), cg.patch, cg.cout);
                        GK.noalias() += MapC(cols->data(), orows, cg.patch).transpose() * GO;
                    }
                    if (ix >= 0 && g.nodes_[ix].needs_grad) {
                        std::vector<double> gcols(orows * cg.patch);
                        MapM GC(gcols.data(), orows, cg.patch);
                        GC.noalias() = GO * MapC(kv->data(), cg.patch, cg.cout).transpose();
                        std::vector<double>& buf = g.grad_buf(ix);
                        for (int oi = 0; oi < cg.oh; ++oi) {
                            for (int oj = 0; oj < cg.ow; ++oj) {
                                int64_t row = (static_cast<int64_t>(oi) * cg.ow + oj) * cg.patch;
                                for (int ki = 0; ki < cg.k; ++ki) {
                                    int h = oi * cg.stride - cg.pad_top + ki;
                                    if (h < 0 || h >= cg.h) continue;
                                    for (int kj = 0; kj < cg.k; ++kj) {
                                        int w = oj * cg.stride - cg.pad_left + kj;
                                        if (w < 0 || w >= cg.w) continue;
                                        const double* src =
                                            gcols.data() + row +
                                            (static_cast<int64_t>(ki) * cg.k + kj) * cg.cin;
                                        double* dst =
                                            buf.data() + (static_cast<int64_t>(h) * cg.w + w) * cg.cin;
                                        for (int c = 0; c < cg.cin; ++c) dst[c] += src[c];
                                    }
                                }
                            }
                        }
                    }
                });
}

Tensor Graph::channel_bias(const Tensor& x, const Tensor& b) {
    require_dims(x.shape.size() == 3, "channel_bias: input must be [H,W,C], got " + shape_str(x.shape));
    int c = x.shape[2];
    require_dims(b.shape == Shape{c}, "channel_bias: bias shape " + shape_str(b.shape) +
                                          " != [" + std::to_string(c) + "]");
    int64_t n = x.numel();
    std::vector<double> out(n);
    const std::vector<double>&xv = x.data(), &bv = b.data();
    for (int64_t i = 0; i < n; ++i) out[i] = xv[i] + bv[i % c];
    int ix = tracked(x) ? x.node : -1;
    int ib = tracked(b) ? b.node : -1;
    bool ng = ix >= 0 || ib >= 0;
    return emit(x.shape, std::move(out), ng,
                [ix, ib, n, c](Graph& g, const std::vector<double>& go) {
                    g.accumulate(ix, go.data(), n);
                    if (ib >= 0 && g.nodes_[ib].needs_grad) {
                        std::vector<double>& buf = g.grad_buf(ib);
                        for (int64_t i = 0; i < n; ++i) buf[i % c] += go[i];
                    }
                });
}

// ---------------------------------------------------------------------------
// spatial
// ---------------------------------------------------------------------------

namespace {
struct WarpTap {
    int64_t src;   // flat voxel index
    double weight;
};

// 4 taps per output voxel, weight 0 for out-of-grid reads
void warp_taps(int h, int w, const SE2& inv, int r, int c, WarpTap taps[4]) {
    double ux = c - 0.5 * w + 0.5;
    double uy = r - 0.5 * h + 0.5;
    Vec2 s = inv.apply({ux, uy});
    double col = s.x + 0.5 * w - 0.5;
    double row = s.y + 0.5 * h - 0.5;
    double fc = std::floor(col), fr = std::floor(row);
    int c0 = static_cast<int>(fc), r0 = static_cast<int>(fr);
    double ac = col - fc, ar = row - fr;
    const double wts[4] = {(1 - ar) * (1 - ac), (1 - ar) * ac, ar * (1 - ac), ar * ac};
    const int rr[4] = {r0, r0, r0 + 1, r0 + 1};
    const int cc[4] = {c0, c0 + 1, c0, c0 + 1};
    for (int t = 0; t < 4; ++t) {
        bool in = rr[t] >= 0 && rr[t] < h && cc[t] >= 0 && cc[t] < w;
        taps[t].src = in ? static_cast<int64_t>(rr[t]) * w + cc[t] : -1;
        taps[t].weight = in ? wts[t] : 0.0;
    }
}
} // namespace

Tensor Graph::bilinear_warp(const Tensor& x, const SE2& transform) {
    require_dims(x.shape.size() == 3, "bilinear_warp: input must be [H,W,C], got " + shape_str(x.shape));
    int h = x.shape[0], w = x.shape[1], c = x.shape[2];
    SE2 inv = transform.inverse();
    std::vector<double> out(x.numel(), 0.0);
    const std::vector<double>& xv = x.data();
    WarpTap taps[4];
    for (int r = 0; r < h; ++r) {
        for (int cl = 0; cl < w; ++cl) {
            warp_taps(h, w, inv, r, cl, taps);
            double* dst = out.data() + (static_cast<int64_t>(r) * w + cl) * c;
            for (int t = 0; t < 4; ++t) {
                if (taps[t].src < 0 || taps[t].weight == 0.0) continue;
                const double* src = xv.data() + taps[t].src * c;
                double wt = taps[t].weight;
                for (int ch = 0; ch < c; ++ch) dst[ch] += wt * src[ch];
            }
        }
    }
    int ix = tracked(x) ? x.node : -1;
    return emit(x.shape, std::move(out), ix >= 0,
                [ix, h, w, c, inv](Graph& g, const std::vector<double>& go) {
                    if (ix < 0 || !g.nodes_[ix].needs_grad) return;
                    std::vector<double>& buf = g.grad_buf(ix);
                    WarpTap taps[4];
                    for (int r = 0; r < h; ++r) {
                        for (int cl = 0; cl < w; ++cl) {
                            warp_taps(h, w, inv, r, cl, taps);
                            const double* src = go.data() + (static_cast<int64_t>(r) * w + cl) * c;
                            for (int t = 0; t < 4; ++t) {
                                if (taps[t].src < 0 || taps[t].weight == 0.0) continue;
                                double* dst = buf.data() + taps[t].src * c;
                                double wt = taps[t].weight;
                                for (int ch = 0; ch < c; ++ch) dst[ch] += wt * src[ch];
                            }
                        }
                    }
                });
}

Tensor Graph::upsample_nearest(const Tensor& x, int fh, int fw) {
    require_dims(x.shape.size() == 3, "upsample_nearest: input must be [H,W,C]");
    require(fh >= 1 && fw >= 1, "upsample_nearest: factors must be positive");
    int h = x.shape[0], w = x.shape[1], c = x.shape[2];
    int oh = h * fh, ow = w * fw;
    std::vector<double> out(static_cast<int64_t>(oh) * ow * c);
    const std::vector<double>& xv = x.data();
    for (int r = 0; r < oh; ++r)
        for (int cl = 0; cl < ow; ++cl) {
            const double* src = xv.data() + (static_cast<int64_t>(r / fh) * w + cl / fw) * c;
            double* dst = out.data() + (static_cast<int64_t>(r) * ow + cl) * c;
            std::copy(src, src + c, dst);
        }
    int ix = tracked(x) ? x.node : -1;
    return emit({oh, ow, c}, std::move(out), ix >= 0,
                [ix, h, w, c, fh, fw, oh, ow](Graph& g, const std::vector<double>& go) {
                    if (ix < 0 || !g.nodes_[ix].needs_grad) return;
                    std::vector<double>& buf = g.grad_buf(ix);
                    for (int r = 0; r < oh; ++r)
                        for (int cl = 0; cl < ow; ++cl) {
                            const double* src = go.data() + (static_cast<int64_t>(r) * ow + cl) * c;
                            double* dst = buf.data() + (static_cast<int64_t>(r / fh) * w + cl / fw) * c;
                            for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                        }
                });
}

Tensor Graph::avgpool(const Tensor& x, int fh, int fw) {
    require_dims(x.shape.size() == 3, "avgpool: input must be [H,W,C]");
    int h = x.shape[0], w = x.shape[1], c = x.shape[2];
    require_dims(h % fh == 0 && w % fw == 0, "avgpool: factors must divide spatial dims");
    int oh = h / fh, ow = w / fw;
    double inv = 1.0 / (fh * fw);
    std::vector<double> out(static_cast<int64_t>(oh) * ow * c, 0.0);
    const std::vector<double>& xv = x.data();
    for (int r = 0; r < h; ++r)
        for (int cl = 0; cl < w; ++cl) {
            const double* src = xv.data() + (static_cast<int64_t>(r) * w + cl) * c;
            double* dst = out.data() + (static_cast<int64_t>(r / fh) * ow + cl / fw) * c;
            for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch] * inv;
        }
    int ix = tracked(x) ? x.node : -1;
    return emit({oh, ow, c}, std::move(out), ix >= 0,
                [ix, h, w, c, fh, fw, ow, inv](Graph& g, const std::vector<double>& go) {
                    if (ix < 0 || !g.nodes_[ix].needs_grad) return;
                    std::vector<double>& buf = g.grad_buf(ix);
                    for (int r = 0; r < h; ++r)
                        for (int cl = 0; cl < w; ++cl) {
                            const double* src = go.data() + (static_cast<int64_t>(r / fh) * ow + cl / fw) * c;
                            double* dst = buf.data() + (static_cast<int64_t>(r) * w + cl) * c;
                            for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch] * inv;
                        }
                });
}

// ---------------------------------------------------------------------------
// shape & channel plumbing
// ---------------------------------------------------------------------------

Tensor Graph::reshape(const Tensor& x, Shape shape) {
    require_dims(shape_numel(shape) == x.numel(), "reshape: " + shape_str(x.shape) + " -> " +
                                                      shape_str(shape) + " changes element count");
    int64_t n = x.numel();
    int ix = tracked(x) ? x.node : -1;
    return emit(std::move(shape), std::vector<double>(x.data()), ix >= 0,
                [ix, n](Graph& g, const std::vector<double>& go) { g.accumulate(ix, go.data(), n); });
}

Tensor Graph::flatten(const Tensor& x) { return reshape(x, {static_cast<int>(x.numel())}); }

Tensor Graph::concat_channels(const std::vector<Tensor>& xs) {
    require(!xs.empty(), "concat_channels: empty input list");
    int h = xs[0].shape.size() == 3 ? xs[0].shape[0] : -1;
    require_dims(h > 0, "concat_channels: inputs must be [H,W,C]");
    int w = xs[0].shape[1];
    int ctot = 0;
    for (const Tensor& t : xs) {
        require_dims(t.shape.size() == 3 && t.shape[0] == h && t.shape[1] == w,
                     "concat_channels: spatial mismatch " + shape_str(t.shape) + " vs " +
                         shape_str(xs[0].shape));
        ctot += t.shape[2];
    }
    int64_t hw = static_cast<int64_t>(h) * w;
    std::vector<double> out(hw * ctot);
    std::vector<int> ids(xs.size());
    std::vector<int> chans(xs.size());
    bool ng = false;
    int off = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        int ci = xs[i].shape[2];
        chans[i] = ci;
        ids[i] = tracked(xs[i]) ? xs[i].node : -1;
        ng = ng || ids[i] >= 0;
        const std::vector<double>& v = xs[i].data();
        for (int64_t p = 0; p < hw; ++p)
            std::copy(v.data() + p * ci, v.data() + (p + 1) * ci, out.data() + p * ctot + off);
        off += ci;
    }
    return emit({h, w, ctot}, std::move(out), ng,
                [ids, chans, hw, ctot](Graph& g, const std::vector<double>& go) {
                    int off = 0;
                    for (size_t i = 0; i < ids.size(); ++i) {
                        int ci = chans[i];
                        if (ids[i] >= 0 && g.nodes_[ids[i]].needs_grad) {
                            std::vector<double>& buf = g.grad_buf(ids[i]);
                            for (int64_t p = 0; p < hw; ++p)
                                for (int c = 0; c < ci; ++c) buf[p * ci + c] += go[p * ctot + off + c];
                        }
                        off += ci;
                    }
                });
}

Tensor Graph::slice_channels(const Tensor& x, int c0, int c1) {
    require_dims(x.shape.size() == 3, "slice_channels: input must be [H,W,C]");
    int h = x.shape[0], w = x.shape[1], c = x.shape[2];
    require_dims(0 <= c0 && c0 < c1 && c1 <= c, "slice_channels: bad range [" + std::to_string(c0) +
                                                    "," + std::to_string(c1) + ") for C=" +
                                                    std::to_string(c));
    int oc = c1 - c0;
    int64_t hw = static_cast<int64_t>(h) * w;
    std::vector<double> out(hw * oc);
    const std::vector<double>& xv = x.data();
    for (int64_t p = 0; p < hw; ++p)
        std::copy(xv.data() + p * c + c0, xv.data() + p * c + c1, out.data() + p * oc);
    int ix = tracked(x) ? x.node : -1;
    return emit({h, w, oc}, std::move(out), ix >= 0,
                [ix, hw, c, c0, oc](Graph& g, const std::vector<double>& go) {
                    if (ix < 0 || !g.nodes_[ix].needs_grad) return;
                    std::vector<double>& buf = g.grad_buf(ix);
                    for (int64_t p = 0; p < hw; ++p)
                        for (int i = 0; i < oc; ++i) buf[p * c + c0 + i] += go[p * oc + i];
                });
}

Tensor Graph::softmax_channels(const Tensor& x) {
    require_dims(x.shape.size() == 3, "softmax_channels: input must be [H,W,C]");
    int c = x.shape[2];
    int64_t hw = static_cast<int64_t>(x.shape[0]) * x.shape[1];
    std::vector<double> out(x.numel());
    const std::vector<double>& xv = x.data();
    for (int64_t p = 0; p < hw; ++p) {
        const double* src = xv.data() + p * c;
        double* dst = out.data() + p * c;
        double mx = src[0];
        for (int i = 1; i < c; ++i) mx = std::max(mx, src[i]);
        double z = 0.0;
        for (int i = 0; i < c; ++i) {
            dst[i] = std::exp(src[i] - mx);
            z += dst[i];
        }
        for (int i = 0; i < c; ++i) dst[i] /= z;
    }
    int ix = tracked(x) ? x.node : -1;
    if (ix < 0) return emit(x.shape, std::move(out), false, nullptr);
    auto ov = std::make_shared<std::vector<double>>(out);
    return emit(x.shape, std::move(out), true,
                [ix, hw, c, ov](Graph& g, const std::vector<double>& go) {
                    if (!g.nodes_[ix].needs_grad) return;
                    std::vector<double>& buf = g.grad_buf(ix);
                    for (int64_t p = 0; p < hw; ++p) {
                        const double* y = ov->data() + p * c;
                        const double* gy = go.data() + p * c;
                        double dot = 0.0;
                        for (int i = 0; i < c; ++i) dot += y[i] * gy[i];
                        for (int i = 0; i < c; ++i) buf[p * c + i] += y[i] * (gy[i] - dot);
                    }
                });
}

Tensor Graph::mul_channel(const Tensor& x, const Tensor& w) {
    require_dims(x.shape.size() == 3 && w.shape.size() == 3, "mul_channel: inputs must be [H,W,C]");
    require_dims(w.shape[2] == 1 && w.shape[0] == x.shape[0] && w.shape[1] == x.shape[1],
                 "mul_channel: weight must be [H,W,1] matching input, got " + shape_str(w.shape) +
                     " vs " + shape_str(x.shape));
    int c = x.shape[2];
    int64_t hw = static_cast<int64_t>(x.shape[0]) * x.shape[1];
    std::vector<double> out(x.numel());
    auto xv = x.values, wv = w.values;
    for (int64_t p = 0; p < hw; ++p) {
        double ww = (*wv)[p];
        for (int ch = 0; ch < c; ++ch) out[p * c + ch] = (*xv)[p * c + ch] * ww;
    }
    int ix = tracked(x) ? x.node : -1;
    int iw = tracked(w) ? w.node : -1;
    bool ng = ix >= 0 || iw >= 0;
    return emit(x.shape, std::move(out), ng,
                [ix, iw, hw, c, xv, wv](Graph& g, const std::vector<double>& go) {
                    if (ix >= 0 && g.nodes_[ix].needs_grad) {
                        std::vector<double>& buf = g.grad_buf(ix);
                        for (int64_t p = 0; p < hw; ++p) {
                            double ww = (*wv)[p];
                            for (int ch = 0; ch < c; ++ch) buf[p * c + ch] += go[p * c + ch] * ww;
                        }
                    }
                    if (iw >= 0 && g.nodes_[iw].needs_grad) {
                        std::vector<double>& buf = g.grad_buf(iw);
                        for (int64_t p = 0; p < hw; ++p) {
                            double s = 0.0;
                            for (int ch = 0; ch < c; ++ch) s += go[p * c + ch] * (*xv)[p * c + ch];
                            buf[p] += s;
                        }
                    }
                });
}

Tensor Graph::concat_flat(const std::vector<Tensor>& xs) {
    require(!xs.empty(), "concat_flat: empty input list");
    int64_t total = 0;
    for (const Tensor& t : xs) total += t.numel();
    std::vector<double> out;
    out.reserve(total);
    std::vector<int> ids(xs.size());
    std::vector<int64_t> sizes(xs.size());
    bool ng = false;
    for (size_t i = 0; i < xs.size(); ++i) {
        ids[i] = tracked(xs[i]) ? xs[i].node : -1;
        sizes[i] = xs[i].numel();
        ng = ng || ids[i] >= 0;
        const std::vector<double>& v = xs[i].data();
        out.insert(out.end(), v.begin(), v.end());
    }
    return emit({static_cast<int>(total)}, std::move(out), ng,
                [ids, sizes](Graph& g, const std::vector<double>& go) {
                    int64_t off = 0;
                    for (size_t i = 0; i < ids.size(); ++i) {
                        g.accumulate(ids[i], go.data() + off, sizes[i]);
                        off += sizes[i];
                    }
                });
}

Tensor Graph::vstack(const std::vector<Tensor>& xs) {
    require(!xs.empty(), "vstack: empty input list");
    auto cols_of = [](const Tensor& t) {
        return t.shape.size() == 2 ? t.shape[1] : static_cast<int>(t.numel());
    };
    auto rows_of = [](const Tensor& t) { return t.shape.size() == 2 ? t.shape[0] : 1; };
    int cols = cols_of(xs[0]);
    int rows = 0;
    for (const Tensor& t : xs) {
        require_dims(t.shape.size() <= 2 && cols_of(t) == cols,
                     "vstack: column mismatch " + shape_str(t.shape));
        rows += rows_of(t);
    }
    std::vector<double> out;
    out.reserve(static_cast<int64_t>(rows) * cols);
    std::vector<int> ids(xs.size());
    std::vector<int64_t> sizes(xs.size());
    bool ng = false;
    for (size_t i = 0; i < xs.size(); ++i) {
        ids[i] = tracked(xs[i]) ? xs[i].node : -1;
        sizes[i] = xs[i].numel();
        ng = ng || ids[i] >= 0;
        const std::vector<double>& v = xs[i].data();
        out.insert(out.end(), v.begin(), v.end());
    }
    return emit({rows, cols}, std::move(out), ng,
                [ids, sizes](Graph& g, const std::vector<double>& go) {
                    int64_t off = 0;
                    for (size_t i = 0; i < ids.size(); ++i) {
                        g.accumulate(ids[i], go.data() + off, sizes[i]);
                        off += sizes[i];
                    }
                });
}

Tensor Graph::rows_with_vector(const Tensor& x, const Tensor& v) {
    require_dims(x.shape.size() == 3, "rows_with_vector: feature must be [H,W,C]");
    require_dims(v.shape.size() == 1, "rows_with_vector: vector must be 1-D");
    int c = x.shape[2];
    int d = v.shape[0];
    int64_t hw = static_cast<int64_t>(x.shape[0]) * x.shape[1];
    std::vector<double> out(hw * (c + d));
    const std::vector<double>&xv = x.data(), &vv = v.data();
    for (int64_t p = 0; p < hw; ++p) {
        std::copy(xv.data() + p * c, xv.data() + (p + 1) * c, out.data() + p * (c + d));
        std::copy(vv.data(), vv.data() + d, out.data() + p * (c + d) + c);
    }
    int ix = tracked(x) ? x.node : -1;
    int iv = tracked(v) ? v.node : -1;
    bool ng = ix >= 0 || iv >= 0;
    return emit({static_cast<int>(hw), c + d}, std::move(out), ng,
                [ix, iv, hw, c, d](Graph& g, const std::vector<double>& go) {
                    if (ix >= 0 && g.nodes_[ix].needs_grad) {
                        std::vector<double>& buf = g.grad_buf(ix);
                        for (int64_t p = 0; p < hw; ++p)
                            for (int i = 0; i < c; ++i) buf[p * c + i] += go[p * (c + d) + i];
                    }
                    if (iv >= 0 && g.nodes_[iv].needs_grad) {
                        std::vector<double>& buf = g.grad_buf(iv);
                        for (int64_t p = 0; p < hw; ++p)
                            for (int i = 0; i < d; ++i) buf[i] += go[p * (c + d) + c + i];
                    }
                });
}

} // namespace coview
