#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cadalign/nn/tensor.hpp"

namespace cadalign::nn {

std::string Tensor::shape_string() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

Var make_var(Tensor t, bool requires_grad) {
  auto v = std::make_shared<Node>();
  v->value = std::move(t);
  v->requires_grad = requires_grad;
  return v;
}

void Graph::backward(const Var& out, const Tensor& seed) {
  if (!record_) throw std::logic_error("backward on a graph that did not record");
  if (!seed.same_shape(out->value)) throw std::invalid_argument("backward seed shape mismatch");
  out->ensure_grad();
  for (std::size_t i = 0; i < seed.size(); ++i) out->grad.data[i] += seed.data[i];
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
    Node& node = **it;
    if (node.backward && node.grad.size() == node.value.size()) node.backward();
  }
}

namespace {

Var result(Graph& g, Tensor t, std::initializer_list<const Var*> inputs) {
  bool rg = false;
  for (const Var* in : inputs) rg = rg || (*in)->requires_grad;
  Var v = make_var(std::move(t), rg && g.recording());
  if (v->requires_grad) g.push(v);
  return v;
}

// Weak reference to the output so closures do not form ownership cycles.
using WeakVar = std::weak_ptr<Node>;

void im2col3(const float* x, int c, int h, int w, float* col) {
  const int hw = h * w;
  for (int ci = 0; ci < c; ++ci) {
    const float* xc = x + static_cast<std::size_t>(ci) * hw;
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        float* dst = col + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * hw;
        const int dx = kx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          float* row = dst + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill_n(row, w, 0.0f);
            continue;
          }
          const float* src = xc + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          for (int x = 0; x < x0; ++x) row[x] = 0.0f;
          std::memcpy(row + x0, src + x0 + dx, sizeof(float) * static_cast<std::size_t>(x1 - x0));
          for (int x = x1; x < w; ++x) row[x] = 0.0f;
        }
      }
  }
}

void col2im3_add(const float* col, int c, int h, int w, float* dx_out) {
  const int hw = h * w;
  for (int ci = 0; ci < c; ++ci) {
    float* xc = dx_out + static_cast<std::size_t>(ci) * hw;
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const float* src = col + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * hw;
        const int dx = kx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          const float* row = src + static_cast<std::size_t>(y) * w;
          float* dst = xc + static_cast<std::size_t>(sy) * w;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          for (int x = x0; x < x1; ++x) dst[x + dx] += row[x];
        }
      }
  }
}

}  // namespace

Var conv2d(Graph& g, const Var& x, const Var& weight, const Var& bias, int kernel) {
  const Tensor& X = x->value;
  const Tensor& W = weight->value;
  if (kernel != 1 && kernel != 3) throw std::invalid_argument("conv2d supports 1x1 and 3x3");
  if (W.c != X.c || W.h != kernel || W.w != kernel)
    throw std::invalid_argument("conv2d weight " + W.shape_string() + " vs input " + X.shape_string());
  const int cout = W.n, cin = X.c, hw = X.h * X.w, kk = cin * kernel * kernel;
  Tensor Y(X.n, cout, X.h, X.w);
  std::vector<float> col(kernel == 3 ? static_cast<std::size_t>(kk) * hw : 0);
  for (int i = 0; i < X.n; ++i) {
    float* y = Y.image(i);
    for (int co = 0; co < cout; ++co) std::fill_n(y + static_cast<std::size_t>(co) * hw, hw, bias->value.data[co]);
    const float* src = X.image(i);
    if (kernel == 3) {
      im2col3(src, cin, X.h, X.w, col.data());
      src = col.data();
    }
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, cout, hw, kk, 1.0f, W.data.data(), kk,
                src, hw, 1.0f, y, hw);
  }
  Var out = result(g, std::move(Y), {&x, &weight, &bias});
  if (out->requires_grad) {
    WeakVar wo = out;
    out->backward = [wo, x, weight, bias, kernel, cout, cin, hw, kk]() {
      auto o = wo.lock();
      const Tensor& X = x->value;
      const Tensor& dY = o->grad;
      std::vector<float> col(kernel == 3 ? static_cast<std::size_t>(kk) * hw : 0);
      std::vector<float> dcol(static_cast<std::size_t>(kk) * hw);
      for (int i = 0; i < X.n; ++i) {
        const float* dy = dY.image(i);
        const float* src = X.image(i);
        if (kernel == 3) {
          im2col3(src, cin, X.h, X.w, col.data());
          src = col.data();
        }
        if (weight->requires_grad)
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, cout, kk, hw, 1.0f, dy, hw, src, hw,
                      1.0f, weight->ensure_grad().data.data(), kk);
        if (bias->requires_grad) {
          float* db = bias->ensure_grad().data.data();
          for (int co = 0; co < cout; ++co) {
            const float* r = dy + static_cast<std::size_t>(co) * hw;
            double s = 0.0;
            for (int k = 0; k < hw; ++k) s += r[k];
            db[co] += static_cast<float>(s);
          }
        }
        if (x->requires_grad) {
          float* dx = x->ensure_grad().image(i);
          if (kernel == 3) {
            cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, kk, hw, cout, 1.0f,
                        weight->value.data.data(), kk, dy, hw, 0.0f, dcol.data(), hw);
            col2im3_add(dcol.data(), cin, X.h, X.w, dx);
          } else {
            cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, kk, hw, cout, 1.0f,
                        weight->value.data.data(), kk, dy, hw, 1.0f, dx, hw);
          }
        }
      }
    };
  }
  return out;
}

Var conv_transpose2x2(Graph& g, const Var& x, const Var& weight, const Var& bias) {
  const Tensor& X = x->value;
  const Tensor& W = weight->value;  // (cin, cout, 2, 2)
  if (W.n != X.c || W.h != 2 || W.w != 2)
    throw std::invalid_argument("conv_transpose2x2 weight " + W.shape_string() + " vs input " +
                                X.shape_string());
  const int cin = X.c, cout = W.c, hw = X.h * X.w, co4 = cout * 4;
  const int oh = X.h * 2, ow = X.w * 2;
  Tensor Y(X.n, cout, oh, ow);
  std::vector<float> z(static_cast<std::size_t>(co4) * hw);
  for (int i = 0; i < X.n; ++i) {
    // z[(co,ky,kx), p] = sum_ci W[ci, (co,ky,kx)] * x[ci, p]
    cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, co4, hw, cin, 1.0f, W.data.data(), co4,
                X.image(i), hw, 0.0f, z.data(), hw);
    float* y = Y.image(i);
    for (int co = 0; co < cout; ++co) {
      const float b = bias->value.data[co];
      for (int k = 0; k < 4; ++k) {
        const int ky = k / 2, kx = k % 2;
        const float* zr = z.data() + (static_cast<std::size_t>(co) * 4 + k) * hw;
        for (int yy = 0; yy < X.h; ++yy)
          for (int xx = 0; xx < X.w; ++xx)
            y[(static_cast<std::size_t>(co) * oh + 2 * yy + ky) * ow + 2 * xx + kx] =
                zr[yy * X.w + xx] + b;
      }
    }
  }
  Var out = result(g, std::move(Y), {&x, &weight, &bias});
  if (out->requires_grad) {
    WeakVar wo = out;
    out->backward = [wo, x, weight, bias, cin, cout, hw, co4, oh, ow]() {
      auto o = wo.lock();
      const Tensor& X = x->value;
      std::vector<float> dz(static_cast<std::size_t>(co4) * hw);
      for (int i = 0; i < X.n; ++i) {
        const float* dy = o->grad.image(i);
        for (int co = 0; co < cout; ++co)
          for (int k = 0; k < 4; ++k) {
            const int ky = k / 2, kx = k % 2;
            float* zr = dz.data() + (static_cast<std::size_t>(co) * 4 + k) * hw;
            for (int yy = 0; yy < X.h; ++yy)
              for (int xx = 0; xx < X.w; ++xx)
                zr[yy * X.w + xx] = dy[(static_cast<std::size_t>(co) * oh + 2 * yy + ky) * ow + 2 * xx + kx];
          }
        if (bias->requires_grad) {
          float* db = bias->ensure_grad().data.data();
          for (int co = 0; co < cout; ++co) {
            double s = 0.0;
            for (int k = 0; k < 4 * hw; ++k) s += dz[static_cast<std::size_t>(co) * 4 * hw + k];
            db[co] += static_cast<float>(s);
          }
        }
        if (weight->requires_grad)
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, cin, co4, hw, 1.0f, X.image(i), hw,
                      dz.data(), hw, 1.0f, weight->ensure_grad().data.data(), co4);
        if (x->requires_grad)
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, cin, hw, co4, 1.0f,
                      weight->value.data.data(), co4, dz.data(), hw, 1.0f,
                      x->ensure_grad().image(i), hw);
      }
    };
  }
  return out;
}

Var max_pool2x2(Graph& g, const Var& x) {
  const Tensor& X = x->value;
  if (X.h % 2 || X.w % 2) throw std::invalid_argument("max_pool2x2 needs even spatial size");
  const int oh = X.h / 2, ow = X.w / 2;
  Tensor Y(X.n, X.c, oh, ow);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(Y.size());
  for (int i = 0; i < X.n; ++i)
    for (int ch = 0; ch < X.c; ++ch)
      for (int yy = 0; yy < oh; ++yy)
        for (int xx = 0; xx < ow; ++xx) {
          std::size_t best = ((static_cast<std::size_t>(i) * X.c + ch) * X.h + 2 * yy) * X.w + 2 * xx;
          for (const std::size_t cand : {best + 1, best + X.w, best + X.w + 1})
            if (X.data[cand] > X.data[best]) best = cand;
          const std::size_t oi = ((static_cast<std::size_t>(i) * X.c + ch) * oh + yy) * ow + xx;
          Y.data[oi] = X.data[best];
          (*argmax)[oi] = static_cast<std::uint32_t>(best);
        }
  Var out = result(g, std::move(Y), {&x});
  if (out->requires_grad) {
    WeakVar wo = out;
    out->backward = [wo, x, argmax]() {
      auto o = wo.lock();
      Tensor& dx = x->ensure_grad();
      for (std::size_t k = 0; k < argmax->size(); ++k) dx.data[(*argmax)[k]] += o->grad.data[k];
    };
  }
  return out;
}

namespace {

template <typename Fwd, typename Deriv>
Var unary(Graph& g, const Var& x, Fwd fwd, Deriv deriv_from_output) {
  Tensor Y = x->value;
  for (auto& v : Y.data) v = fwd(v);
  Var out = result(g, std::move(Y), {&x});
  if (out->requires_grad) {
    WeakVar wo = out;
    out->backward = [wo, x, deriv_from_output]() {
      auto o = wo.lock();
      Tensor& dx = x->ensure_grad();
      for (std::size_t k = 0; k < dx.size(); ++k)
        dx.data[k] += o->grad.data[k] * deriv_from_output(o->value.data[k]);
    };
  }
  return out;
}

}  // namespace

Var relu(Graph& g, const Var& x) {
  return unary(g, x, [](float v) { return v > 0.0f ? v : 0.0f; },
               [](float y) { return y > 0.0f ? 1.0f : 0.0f; });
}

Var tanh_act(Graph& g, const Var& x) {
  return unary(g, x, [](float v) { return std::tanh(v); }, [](float y) { return 1.0f - y * y; });
}

Var sigmoid_act(Graph& g, const Var& x) {
  return unary(g, x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
               [](float y) { return y * (1.0f - y); });
}

Var instance_norm(Graph& g, const Var& x, const Var& gamma, const Var& beta) {
  const Tensor& X = x->value;
  if (gamma->value.size() != static_cast<std::size_t>(X.c) || beta->value.size() != static_cast<std::size_t>(X.c))
    throw std::invalid_argument("instance_norm: affine parameters must have " + std::to_string(X.c) + " channels");
  constexpr double kEps = 1e-5;
  const std::size_t hw = X.plane();
  Tensor Y(X.n, X.c, X.h, X.w), Xhat(X.n, X.c, X.h, X.w);
  std::vector<float> inv_std(static_cast<std::size_t>(X.n) * X.c);
  for (int i = 0; i < X.n; ++i)
    for (int ch = 0; ch < X.c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(i) * X.c + ch) * hw;
      double mean = 0.0, var = 0.0;
      for (std::size_t k = 0; k < hw; ++k) mean += X.data[off + k];
      mean /= static_cast<double>(hw);
      for (std::size_t k = 0; k < hw; ++k) var += (X.data[off + k] - mean) * (X.data[off + k] - mean);
      const double is = 1.0 / std::sqrt(var / static_cast<double>(hw) + kEps);
      inv_std[static_cast<std::size_t>(i) * X.c + ch] = static_cast<float>(is);
      const float ga = gamma->value.data[ch], be = beta->value.data[ch];
      for (std::size_t k = 0; k < hw; ++k) {
        const float xh = static_cast<float>((X.data[off + k] - mean) * is);
        Xhat.data[off + k] = xh;
        Y.data[off + k] = ga * xh + be;
      }
    }
  Var out = result(g, std::move(Y), {&x, &gamma, &beta});
  if (out->requires_grad) {
    WeakVar wo = out;
    out->backward = [wo, x, gamma, beta, Xhat = std::move(Xhat), inv_std = std::move(inv_std)]() {
      auto o = wo.lock();
      const Tensor& dY = o->grad;
      const int n = dY.n, c = dY.c;
      const std::size_t hw = dY.plane();
      for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * hw;
          double sum_dy = 0.0, sum_dy_xh = 0.0;
          for (std::size_t k = 0; k < hw; ++k) {
            sum_dy += dY.data[off + k];
            sum_dy_xh += dY.data[off + k] * Xhat.data[off + k];
          }
          if (gamma->requires_grad) gamma->ensure_grad().data[ch] += static_cast<float>(sum_dy_xh);
          if (beta->requires_grad) beta->ensure_grad().data[ch] += static_cast<float>(sum_dy);
          if (!x->requires_grad) continue;
          Tensor& dX = x->ensure_grad();
          const double ga = gamma->value.data[ch], is = inv_std[static_cast<std::size_t>(i) * c + ch];
          const double m1 = sum_dy / static_cast<double>(hw), m2 = sum_dy_xh / static_cast<double>(hw);
          for (std::size_t k = 0; k < hw; ++k)
            dX.data[off + k] += static_cast<float>(ga * is * (dY.data[off + k] - m1 - Xhat.data[off + k] * m2));
        }
    };
  }
  return out;
}

Var add(Graph& g, const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument("add: " + a->value.shape_string() + " vs " + b->value.shape_string());
  Tensor Y = a->value;
  for (std::size_t k = 0; k < Y.size(); ++k) Y.data[k] += b->value.data[k];
  Var out = result(g, std::move(Y), {&a, &b});
  if (out->requires_grad) {
    WeakVar wo = out;
    out->backward = [wo, a, b]() {
      auto o = wo.lock();
      for (const Var* in : {&a, &b}) {
        if (!(*in)->requires_grad) continue;
        Tensor& d = (*in)->ensure_grad();
        for (std::size_t k = 0; k < d.size(); ++k) d.data[k] += o->grad.data[k];
      }
    };
  }
  return out;
}

Var concat_channels(Graph& g, const Var& a, const Var& b) {
  const Tensor& A = a->value;
  const Tensor& B = b->value;
  if (A.n != B.n || A.h != B.h || A.w != B.w)
    throw std::invalid_argument("concat: " + A.shape_string() + " vs " + B.shape_string());
  Tensor Y(A.n, A.c + B.c, A.h, A.w);
  const std::size_t sa = A.c * A.plane(), sb = B.c * B.plane();
  for (int i = 0; i < A.n; ++i) {
    std::copy_n(A.image(i), sa, Y.image(i));
    std::copy_n(B.image(i), sb, Y.image(i) + sa);
  }
  Var out = result(g, std::move(Y), {&a, &b});
  if (out->requires_grad) {
    WeakVar wo = out;
    out->backward = [wo, a, b, sa, sb]() {
      auto o = wo.lock();
      for (int i = 0; i < o->value.n; ++i) {
        const float* dy = o->grad.image(i);
        if (a->requires_grad) {
          float* da = a->ensure_grad().image(i);
          for (std::size_t k = 0; k < sa; ++k) da[k] += dy[k];
        }
        if (b->requires_grad) {
          float* db = b->ensure_grad().image(i);
          for (std::size_t k = 0; k < sb; ++k) db[k] += dy[sa + k];
        }
      }
    };
  }
  return out;
}

Var slice_channels(Graph& g, const Var& x, int begin, int end) {
  const Tensor& X = x->value;
  if (begin < 0 || end > X.c || begin >= end) throw std::invalid_argument("slice_channels: bad range");
  Tensor Y(X.n, end - begin, X.h, X.w);
  const std::size_t plane = X.plane();
  for (int i = 0; i < X.n; ++i)
    std::copy_n(X.image(i) + begin * plane, (end - begin) * plane, Y.image(i));
  Var out = result(g, std::move(Y), {&x});
  if (out->requires_grad) {
    WeakVar wo = out;
    out->backward = [wo, x, begin, end, plane]() {
      auto o = wo.lock();
      for (int i = 0; i < o->value.n; ++i) {
        float* dx = x->ensure_grad().image(i) + begin * plane;
        const float* dy = o->grad.image(i);
        for (std::size_t k = 0; k < (end - begin) * plane; ++k) dx[k] += dy[k];
      }
    };
  }
  return out;
}

}  // namespace cadalign::nn
