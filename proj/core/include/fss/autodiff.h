#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "fss/kernels.h"
#include "fss/tensor.h"

// Tape-based reverse-mode differentiation over the kernel set in kernels.h.
//
// A Graph records every operation applied to its Vars in execution order.
// backward() walks the tape in reverse, so a node's gradient is complete by
// the time its own backward function runs. The tape releases each node's
// value and gradient as soon as it has been processed; a graph can therefore
// be differentiated once.
namespace fss::ad {

// A learnable tensor plus its accumulated gradient.
template <typename T>
struct ParamTensor {
  ParamTensor() = default;
  ParamTensor(std::string name, BasicTensor<T> value);

  void zero_grad();

  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;
};

template <typename T>
class Graph;

// Handle to a node of a Graph. Cheap to copy; valid as long as the graph is.
template <typename T>
class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph<T>& graph() const;
  std::size_t id() const { return id_; }
  const BasicTensor<T>& value() const;
  const Shape& dims() const { return value().dims(); }

 private:
  friend class Graph<T>;
  Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const BasicTensor<T>& grad_out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaf that never receives a gradient.
  Var<T> constant(BasicTensor<T> value);

  // Leaf bound to `param`: its value is read in place and backward()
  // accumulates into param.grad. `param` must outlive the graph.
  Var<T> parameter(ParamTensor<T>& param);

  // Interior node. The node requires a gradient iff any input does; if none
  // does, `backward` is dropped.
  Var<T> record(BasicTensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward);
  Var<T> record(BasicTensor<T> value, const std::vector<Var<T>>& inputs,
                BackwardFn backward);

  const BasicTensor<T>& value(Var<T> v) const;
  bool requires_grad(Var<T> v) const;

  // Gradient accumulator of `v`, allocated (zero) on first use. Returns null
  // when `v` does not require a gradient. For parameters this is param.grad.
  BasicTensor<T>* grad_sink(Var<T> v);

  // Propagates d(loss)/d(node) to every parameter. `loss` must be a
  // single-element node of this graph.
  void backward(Var<T> loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    ParamTensor<T>* param = nullptr;
    bool requires_grad = false;
    bool released = false;
    BackwardFn backward;
  };

  void check_owned(Var<T> v) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Differentiable operations. All inputs must belong to the same graph.

template <typename T>
Var<T> relu(Var<T> x);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

// Sum / mean of all elements, returned as a [1] tensor.
template <typename T>
Var<T> sum(Var<T> x);
template <typename T>
Var<T> mean(Var<T> x);

template <typename T>
Var<T> reshape(Var<T> x, Shape dims);

// Concatenation along the leading (channel) axis.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts);

template <typename T>
Var<T> cosine_similarity_map(Var<T> query, Var<T> support);

template <typename T>
Var<T> cp4d_conv(Var<T> input, Var<T> wq, Var<T> ws, Var<T> bias, int support_stride);

template <typename T>
Var<T> dw4d_conv(Var<T> input, Var<T> wq, Var<T> ws);

template <typename T>
Var<T> pw4d_conv(Var<T> input, Var<T> weight, Var<T> bias);

template <typename T>
Var<T> group_norm(Var<T> input, std::size_t groups, Var<T> gamma, Var<T> beta,
                  double eps = 1e-5);

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias);

template <typename T>
Var<T> bilinear_resize(Var<T> input, std::size_t out_h, std::size_t out_w);

template <typename T>
Var<T> avg_over_support_dims(Var<T> input);

// Scalar [1] loss. `target` is a constant binary map.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const BasicTensor<T>& target);

}  // namespace fss::ad
