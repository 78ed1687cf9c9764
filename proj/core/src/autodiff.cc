#include "fss/autodiff.h"

#include <algorithm>
#include <memory>

namespace fss::ad {

template <typename T>
ParamTensor<T>::ParamTensor(std::string n, BasicTensor<T> v)
    : name(std::move(n)), value(std::move(v)), grad(value.dims()) {}

template <typename T>
void ParamTensor<T>::zero_grad() {
  if (grad.dims() != value.dims()) {
    grad = BasicTensor<T>(value.dims());
  } else {
    grad.fill(T{0});
  }
}

template <typename T>
Graph<T>& Var<T>::graph() const {
  if (!graph_) throw StateError("variable is not attached to a graph");
  return *graph_;
}

template <typename T>
const BasicTensor<T>& Var<T>::value() const {
  return graph().value(*this);
}

// ---------------------------------------------------------------------------

template <typename T>
void Graph<T>::check_owned(Var<T> v) const {
  if (v.graph_ != this || v.id_ >= nodes_.size()) {
    throw StateError("variable does not belong to this graph");
  }
}

template <typename T>
Var<T> Graph<T>::constant(BasicTensor<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::parameter(ParamTensor<T>& param) {
  Node n;
  n.param = &param;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::record(BasicTensor<T> value, const std::vector<Var<T>>& inputs,
                        BackwardFn backward) {
  if (consumed_) throw StateError("cannot record onto a graph after backward()");
  Node n;
  n.value = std::move(value);
  for (const Var<T>& in : inputs) {
    check_owned(in);
    n.requires_grad = n.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::record(BasicTensor<T> value, std::initializer_list<Var<T>> inputs,
                        BackwardFn backward) {
  return record(std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
}

template <typename T>
const BasicTensor<T>& Graph<T>::value(Var<T> v) const {
  check_owned(v);
  const Node& n = nodes_[v.id_];
  if (n.released) throw StateError("node value was released by backward()");
  return n.param ? n.param->value : n.value;
}

template <typename T>
bool Graph<T>::requires_grad(Var<T> v) const {
  check_owned(v);
  return nodes_[v.id_].requires_grad;
}

template <typename T>
BasicTensor<T>* Graph<T>::grad_sink(Var<T> v) {
  check_owned(v);
  Node& n = nodes_[v.id_];
  if (!n.requires_grad) return nullptr;
  if (n.param) {
    if (n.param->grad.dims() != n.param->value.dims()) n.param->zero_grad();
    return &n.param->grad;
  }
  if (n.grad.empty()) n.grad = BasicTensor<T>(n.value.dims());
  return &n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
  if (nodes_.empty() || !loss.valid()) {
    throw StateError("backward() called before any forward pass was recorded");
  }
  check_owned(loss);
  if (consumed_) throw StateError("backward() already ran on this graph");
  if (value(loss).size() != 1) {
    throw ShapeError("backward() needs a single-element loss, got " +
                     shape_string(value(loss).dims()));
  }
  consumed_ = true;
  if (!nodes_[loss.id_].requires_grad) return;
  grad_sink(loss)->fill(T{1});
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) {
      // Move the gradient out so the node's storage can be reclaimed while
      // inputs accumulate theirs.
      BasicTensor<T> g = std::move(n.grad);
      n.backward(*this, g);
    }
    n.grad = BasicTensor<T>();
    n.backward = nullptr;
    if (!n.param) {
      n.value = BasicTensor<T>();
      n.released = true;
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
Graph<T>& common_graph(std::initializer_list<Var<T>> vars) {
  Graph<T>* g = nullptr;
  for (const Var<T>& v : vars) {
    if (!v.valid()) throw StateError("operation on a detached variable");
    if (g && &v.graph() != g) throw StateError("operation mixes variables of different graphs");
    g = &v.graph();
  }
  return *g;
}

}  // namespace

template <typename T>
Var<T> relu(Var<T> x) {
  Graph<T>& g = common_graph({x});
  // [x > 0] == [relu(x) > 0], so the input serves as the gate.
  return g.record(kernels::relu(x.value()), {x}, [x](Graph<T>& gr, const BasicTensor<T>& go) {
    kernels::relu_backward(gr.value(x), go, gr.grad_sink(x));
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Graph<T>& g = common_graph({a, b});
  expect_dims(b.value(), a.value().dims(), "add operand");
  BasicTensor<T> v = a.value();
  const T* src = b.value().data();
  T* dst = v.data();
  for (std::size_t i = 0; i < v.size(); ++i) dst[i] += src[i];
  return g.record(std::move(v), {a, b}, [a, b](Graph<T>& gr, const BasicTensor<T>& go) {
    for (Var<T> x : {a, b}) {
      if (BasicTensor<T>* s = gr.grad_sink(x)) {
        for (std::size_t i = 0; i < go.size(); ++i) (*s)[i] += go[i];
      }
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  Graph<T>& g = common_graph({x});
  double acc = 0;
  for (T v : x.value().values()) acc += v;
  return g.record(BasicTensor<T>({1}, static_cast<T>(acc)), {x},
                  [x](Graph<T>& gr, const BasicTensor<T>& go) {
                    if (BasicTensor<T>* s = gr.grad_sink(x)) {
                      for (T& v : s->values()) v += go[0];
                    }
                  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  Graph<T>& g = common_graph({x});
  double acc = 0;
  for (T v : x.value().values()) acc += v;
  const std::size_t n = x.value().size();
  return g.record(BasicTensor<T>({1}, static_cast<T>(acc / static_cast<double>(n))), {x},
                  [x, n](Graph<T>& gr, const BasicTensor<T>& go) {
                    if (BasicTensor<T>* s = gr.grad_sink(x)) {
                      const T d = go[0] / static_cast<T>(n);
                      for (T& v : s->values()) v += d;
                    }
                  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape dims) {
  Graph<T>& g = common_graph({x});
  return g.record(x.value().reshaped(std::move(dims)), {x},
                  [x](Graph<T>& gr, const BasicTensor<T>& go) {
                    if (BasicTensor<T>* s = gr.grad_sink(x)) {
                      for (std::size_t i = 0; i < go.size(); ++i) (*s)[i] += go[i];
                    }
                  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Graph<T>& g = parts.front().graph();
  const Shape& first = parts.front().dims();
  Shape dims = first;
  dims[0] = 0;
  for (const Var<T>& p : parts) {
    if (&p.graph() != &g) throw StateError("operation mixes variables of different graphs");
    const Shape& d = p.dims();
    if (d.size() != first.size() || !std::equal(d.begin() + 1, d.end(), first.begin() + 1)) {
      throw ShapeError("concat: inconsistent dims " + shape_string(d) + " vs " +
                       shape_string(first));
    }
    dims[0] += d[0];
  }
  std::vector<T> values;
  values.reserve(shape_size(dims));
  for (const Var<T>& p : parts) {
    values.insert(values.end(), p.value().values().begin(), p.value().values().end());
  }
  return g.record(BasicTensor<T>(dims, std::move(values)), parts,
                  [parts](Graph<T>& gr, const BasicTensor<T>& go) {
                    std::size_t off = 0;
                    for (const Var<T>& p : parts) {
                      const std::size_t n = shape_size(p.dims());
                      if (BasicTensor<T>* s = gr.grad_sink(p)) {
                        for (std::size_t i = 0; i < n; ++i) (*s)[i] += go[off + i];
                      }
                      off += n;
                    }
                  });
}

template <typename T>
Var<T> cosine_similarity_map(Var<T> query, Var<T> support) {
  Graph<T>& g = common_graph({query, support});
  return g.record(kernels::cosine_similarity_map(query.value(), support.value()),
                  {query, support},
                  [query, support](Graph<T>& gr, const BasicTensor<T>& go) {
                    kernels::cosine_similarity_map_backward(gr.value(query), gr.value(support),
                                                            go, gr.grad_sink(query),
                                                            gr.grad_sink(support));
                  });
}

template <typename T>
Var<T> cp4d_conv(Var<T> input, Var<T> wq, Var<T> ws, Var<T> bias, int support_stride) {
  Graph<T>& g = common_graph({input, wq, ws, bias});
  return g.record(
      kernels::cp4d_conv(input.value(), wq.value(), ws.value(), bias.value(), support_stride),
      {input, wq, ws, bias},
      [=](Graph<T>& gr, const BasicTensor<T>& go) {
        kernels::cp4d_conv_backward(gr.value(input), gr.value(wq), gr.value(ws),
                                    support_stride, go, gr.grad_sink(input),
                                    gr.grad_sink(wq), gr.grad_sink(ws), gr.grad_sink(bias));
      });
}

template <typename T>
Var<T> dw4d_conv(Var<T> input, Var<T> wq, Var<T> ws) {
  Graph<T>& g = common_graph({input, wq, ws});
  return g.record(kernels::dw4d_conv(input.value(), wq.value(), ws.value()), {input, wq, ws},
                  [=](Graph<T>& gr, const BasicTensor<T>& go) {
                    kernels::dw4d_conv_backward(gr.value(input), gr.value(wq), gr.value(ws), go,
                                                gr.grad_sink(input), gr.grad_sink(wq),
                                                gr.grad_sink(ws));
                  });
}

template <typename T>
Var<T> pw4d_conv(Var<T> input, Var<T> weight, Var<T> bias) {
  Graph<T>& g = common_graph({input, weight, bias});
  return g.record(kernels::pw4d_conv(input.value(), weight.value(), bias.value()),
                  {input, weight, bias}, [=](Graph<T>& gr, const BasicTensor<T>& go) {
                    kernels::pw4d_conv_backward(gr.value(input), gr.value(weight), go,
                                                gr.grad_sink(input), gr.grad_sink(weight),
                                                gr.grad_sink(bias));
                  });
}

template <typename T>
Var<T> group_norm(Var<T> input, std::size_t groups, Var<T> gamma, Var<T> beta, double eps) {
  Graph<T>& g = common_graph({input, gamma, beta});
  auto stats = std::make_shared<kernels::GroupNormStats<T>>();
  BasicTensor<T> out =
      kernels::group_norm(input.value(), groups, gamma.value(), beta.value(), eps, stats.get());
  return g.record(std::move(out), {input, gamma, beta},
                  [=](Graph<T>& gr, const BasicTensor<T>& go) {
                    kernels::group_norm_backward(gr.value(input), groups, gr.value(gamma), *stats,
                                                 go, gr.grad_sink(input), gr.grad_sink(gamma),
                                                 gr.grad_sink(beta));
                  });
}

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias) {
  Graph<T>& g = common_graph({input, weight, bias});
  return g.record(kernels::conv2d(input.value(), weight.value(), bias.value()),
                  {input, weight, bias}, [=](Graph<T>& gr, const BasicTensor<T>& go) {
                    kernels::conv2d_backward(gr.value(input), gr.value(weight), go,
                                             gr.grad_sink(input), gr.grad_sink(weight),
                                             gr.grad_sink(bias));
                  });
}

template <typename T>
Var<T> bilinear_resize(Var<T> input, std::size_t out_h, std::size_t out_w) {
  Graph<T>& g = common_graph({input});
  const Shape in_dims = input.dims();
  return g.record(kernels::bilinear_resize(input.value(), out_h, out_w), {input},
                  [input, in_dims](Graph<T>& gr, const BasicTensor<T>& go) {
                    kernels::bilinear_resize_backward(in_dims, go, gr.grad_sink(input));
                  });
}

template <typename T>
Var<T> avg_over_support_dims(Var<T> input) {
  Graph<T>& g = common_graph({input});
  const Shape in_dims = input.dims();
  return g.record(kernels::avg_over_support_dims(input.value()), {input},
                  [input, in_dims](Graph<T>& gr, const BasicTensor<T>& go) {
                    kernels::avg_over_support_dims_backward(in_dims, go, gr.grad_sink(input));
                  });
}

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const BasicTensor<T>& target) {
  Graph<T>& g = common_graph({logits});
  const T loss = kernels::softmax_cross_entropy(logits.value(), target);
  auto tgt = std::make_shared<const BasicTensor<T>>(target);
  return g.record(BasicTensor<T>({1}, loss), {logits},
                  [logits, tgt](Graph<T>& gr, const BasicTensor<T>& go) {
                    kernels::softmax_cross_entropy_backward(gr.value(logits), *tgt, go[0],
                                                            gr.grad_sink(logits));
                  });
}

#define FSS_INSTANTIATE_AD(T)                                                              \
  template struct ParamTensor<T>;                                                          \
  template class Var<T>;                                                                   \
  template class Graph<T>;                                                                 \
  template Var<T> relu(Var<T>);                                                            \
  template Var<T> add(Var<T>, Var<T>);                                                     \
  template Var<T> sum(Var<T>);                                                             \
  template Var<T> mean(Var<T>);                                                            \
  template Var<T> reshape(Var<T>, Shape);                                                  \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                             \
  template Var<T> cosine_similarity_map(Var<T>, Var<T>);                                   \
  template Var<T> cp4d_conv(Var<T>, Var<T>, Var<T>, Var<T>, int);                          \
  template Var<T> dw4d_conv(Var<T>, Var<T>, Var<T>);                                       \
  template Var<T> pw4d_conv(Var<T>, Var<T>, Var<T>);                                       \
  template Var<T> group_norm(Var<T>, std::size_t, Var<T>, Var<T>, double);                 \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>);                                          \
  template Var<T> bilinear_resize(Var<T>, std::size_t, std::size_t);                       \
  template Var<T> avg_over_support_dims(Var<T>);                                           \
  template Var<T> softmax_cross_entropy(Var<T>, const BasicTensor<T>&);

FSS_INSTANTIATE_AD(float)
FSS_INSTANTIATE_AD(double)

#undef FSS_INSTANTIATE_AD

}  // namespace fss::ad
