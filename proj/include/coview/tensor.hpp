#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "coview/check.hpp"
#include "coview/geometry.hpp"

namespace coview {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major tensor of 64-bit reals. Immutable: the value buffer is
// shared and never written after construction. `node` identifies the tensor
// inside the Graph that produced it (-1 for constants outside any graph).
struct Tensor {
    Shape shape;
    std::shared_ptr<const std::vector<double>> values;
    int node = -1;

    int64_t numel() const { return values ? static_cast<int64_t>(values->size()) : 0; }
    const std::vector<double>& data() const { return *values; }

    double scalar() const {
        require(numel() == 1, "Tensor::scalar: tensor has " + std::to_string(numel()) + " elements");
        return (*values)[0];
    }

    // convenience accessor for tests and debugging: index per axis
    double at(std::initializer_list<int> idx) const;
};

Tensor tensor_of(Shape shape, std::vector<double> values);
Tensor zeros(const Shape& shape);
Tensor full(const Shape& shape, double v);

bool all_finite(const Tensor& t);

enum class Activation { Relu, Sigmoid, Softplus };
enum class Padding { Same, Valid };

// numerically stable scalar kernels shared with non-graph code
double softplus_value(double x);
double sigmoid_value(double x);

// Reverse-mode differentiation tape over whole-tensor primitives. Nodes are
// recorded in the order they are created, which is a topological order of the
// dataflow. A Graph is confined to a single thread; Tensors themselves are
// immutable and may be shared freely.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // ---- leaves ----
    Tensor input(const Tensor& t);  // constant leaf: no gradient is tracked
    Tensor param(const Tensor& t);  // trainable leaf

    // ---- elementwise ----
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor scale(const Tensor& a, double c);
    Tensor activation(const Tensor& a, Activation kind);
    Tensor relu(const Tensor& a) { return activation(a, Activation::Relu); }
    Tensor sigmoid(const Tensor& a) { return activation(a, Activation::Sigmoid); }
    Tensor softplus(const Tensor& a) { return activation(a, Activation::Softplus); }
    Tensor huber(const Tensor& a);  // 0.5*x^2 for |x|<=1, |x|-0.5 beyond

    // ---- reductions ----
    Tensor sum(const Tensor& a);
    Tensor mean(const Tensor& a);

    // ---- dense layers ----
    // x: [n] or [B,n]; w: [n,m]; b: [m] (optional)
    Tensor linear(const Tensor& x, const Tensor& w, const Tensor* b = nullptr);
    // x: [H,W,Cin]; k: [kh,kw,Cin,Cout], kh==kw odd
    Tensor conv2d(const Tensor& x, const Tensor& k, int stride, Padding padding);
    Tensor channel_bias(const Tensor& x, const Tensor& b);  // [H,W,C] + [C]

    // ---- spatial ----
    // transform is a rigid motion in voxel units about the grid center;
    // output(y) = bilinear sample of x at transform^{-1}(y), zero outside.
    // Gradients flow to x only.
    Tensor bilinear_warp(const Tensor& x, const SE2& transform);
    Tensor upsample_nearest(const Tensor& x, int fh, int fw);
    Tensor avgpool(const Tensor& x, int fh, int fw);

    // ---- shape & channel plumbing ----
    Tensor reshape(const Tensor& x, Shape shape);
    Tensor flatten(const Tensor& x);
    Tensor concat_channels(const std::vector<Tensor>& xs);  // [H,W,Ci] -> [H,W,sum Ci]
    Tensor slice_channels(const Tensor& x, int c0, int c1);
    Tensor softmax_channels(const Tensor& x);               // softmax over last axis per voxel
    Tensor mul_channel(const Tensor& x, const Tensor& w);   // [H,W,C] * [H,W,1]
    Tensor concat_flat(const std::vector<Tensor>& xs);      // flatten all, concat -> [n]
    Tensor vstack(const std::vector<Tensor>& xs);           // [ri,c] (or [c]) -> [sum ri, c]
    // one row per voxel: [H*W, C+d], each row = (x at voxel, v)
    Tensor rows_with_vector(const Tensor& x, const Tensor& v);

    // ---- autodiff ----
    void backward(const Tensor& loss);
    std::vector<double> grad(const Tensor& t) const;  // zeros if no gradient reached t
    bool owns(const Tensor& t) const;
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Shape shape;
        std::shared_ptr<const std::vector<double>> values;
        std::vector<double> grad;  // empty until a gradient reaches the node
        std::function<void(Graph&, const std::vector<double>&)> backprop;
        bool needs_grad = false;
    };

    std::vector<Node> nodes_;
    bool backward_done_ = false;

    Tensor emit(Shape shape, std::vector<double> vals, bool needs_grad,
                std::function<void(Graph&, const std::vector<double>&)> backprop);
    bool tracked(const Tensor& t) const;
    std::vector<double>& grad_buf(int id);
    void accumulate(int id, const double* g, int64_t n);
    friend struct GraphDetail;
};

} // namespace coview
