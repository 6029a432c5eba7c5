#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace cadalign::nn {

// Dense NCHW float tensor.
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, float fill = 0.0f)
      : n(n_), c(c_), h(h_), w(w_),
        data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  float* image(int i) { return data.data() + static_cast<std::size_t>(i) * c * plane(); }
  const float* image(int i) const { return data.data() + static_cast<std::size_t>(i) * c * plane(); }
  float& at(int i, int ch, int y, int x) {
    return data[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x];
  }
  float at(int i, int ch, int y, int x) const {
    return data[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x];
  }
  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
  std::string shape_string() const;
};

// A node in a reverse-mode graph. Parameters are long-lived nodes owned by
// the model; intermediates are owned by the graph that produced them.
struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily
  bool requires_grad = false;
  std::function<void()> backward;

  Tensor& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor(value.n, value.c, value.h, value.w);
    return grad;
  }
};

using Var = std::shared_ptr<Node>;

Var make_var(Tensor t, bool requires_grad = false);

// Records operations for one forward pass. With recording disabled no
// backward closures are kept and intermediates are released as soon as
// they go out of scope.
class Graph {
public:
  explicit Graph(bool record) : record_(record) {}

  bool recording() const { return record_; }
  void push(const Var& v) {
    if (record_) tape_.push_back(v);
  }
  // Seeds d(out)/d(out) with `seed` (same shape as out) and runs the tape in reverse.
  void backward(const Var& out, const Tensor& seed);

private:
  bool record_;
  std::vector<Var> tape_;
};

// Operations. Each allocates its result, and when recording, attaches the
// closure that pushes gradients to its inputs.
Var conv2d(Graph& g, const Var& x, const Var& weight, const Var& bias, int kernel);
Var conv_transpose2x2(Graph& g, const Var& x, const Var& weight, const Var& bias);
Var max_pool2x2(Graph& g, const Var& x);
Var relu(Graph& g, const Var& x);
Var add(Graph& g, const Var& a, const Var& b);
Var concat_channels(Graph& g, const Var& a, const Var& b);
Var slice_channels(Graph& g, const Var& x, int begin, int end);
Var tanh_act(Graph& g, const Var& x);
Var sigmoid_act(Graph& g, const Var& x);
// Per-sample, per-channel normalization over (H, W), then gamma * x + beta;
// gamma and beta have shape (1, C, 1, 1).
Var instance_norm(Graph& g, const Var& x, const Var& gamma, const Var& beta);

}  // namespace cadalign::nn
