// SPDX-License-Identifier: Apache-2.0

#include "dcan/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>

namespace dcan {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
Tape<T>& shared_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument("operands recorded on different tapes");
  return a.tape();
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " + shape_string(s));
  }
}

// Per-axis input strides against the output shape; broadcast axes get 0.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    if (in[i] != 1) strides[i + offset] = stride;
    stride *= in[i];
  }
  return strides;
}

// Visits every output element with the matching flat offsets into a and b.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& f) {
  const std::size_t rank = out.size();
  const std::size_t total = shape_numel(out);
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  const std::size_t inner = out[rank - 1];
  const std::size_t ja = sa[rank - 1], jb = sb[rank - 1];
  for (std::size_t o = 0; o < total; o += inner) {
    std::size_t pa = ia, pb = ib;
    for (std::size_t k = 0; k < inner; ++k) {
      f(o + k, pa, pb);
      pa += ja;
      pb += jb;
    }
    // advance the odometer over the outer axes
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out[ax]) break;
      ia -= sa[ax] * out[ax];
      ib -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

// Unfolds an NCHW input into a [C_in*kh*kw, N*H'*W'] matrix.
template <typename T>
void im2col(const Tensor<T>& x, std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh,
            std::size_t ow, std::vector<T>& col) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t plane = oh * ow;
  const std::size_t cols = n * plane;
  col.assign(c * kh * kw * cols, T{0});
  const T* src = x.raw();
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = col.data() + ((ci * kh + ki) * kw + kj) * cols;
        for (std::size_t ni = 0; ni < n; ++ni) {
          const T* img = src + (ni * c + ci) * h * w;
          T* dst = row + ni * plane;
          for (std::size_t y = 0; y < oh; ++y) {
            const long iy = static_cast<long>(y * stride + ki) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t xo = 0; xo < ow; ++xo) {
              const long ix = static_cast<long>(xo * stride + kj) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              dst[y * ow + xo] = img[iy * w + ix];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const Shape& xs, std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
            std::size_t oh, std::size_t ow, std::span<T> dx) {
  const std::size_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const std::size_t plane = oh * ow;
  const std::size_t cols = n * plane;
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((ci * kh + ki) * kw + kj) * cols;
        for (std::size_t ni = 0; ni < n; ++ni) {
          T* img = dx.data() + (ni * c + ci) * h * w;
          const T* src = row + ni * plane;
          for (std::size_t y = 0; y < oh; ++y) {
            const long iy = static_cast<long>(y * stride + ki) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t xo = 0; xo < ow; ++xo) {
              const long ix = static_cast<long>(xo * stride + kj) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              img[iy * w + ix] += src[y * ow + xo];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

template <typename T>
Var<T> binary(Binary kind, const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = shared_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Shape out_shape = broadcast_shape(av.shape(), bv.shape());
  auto sa = broadcast_strides(av.shape(), out_shape);
  auto sb = broadcast_strides(bv.shape(), out_shape);
  Tensor<T> out(out_shape);
  T* o = out.raw();
  const T* pa = av.raw();
  const T* pb = bv.raw();
  const bool same = av.shape() == bv.shape();
  auto apply = [&](auto op) {
    if (same) {
      for (std::size_t i = 0; i < out.numel(); ++i) o[i] = op(pa[i], pb[i]);
    } else {
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = op(pa[ia], pb[ib]); });
    }
  };
  OpKind op_kind = OpKind::add;
  switch (kind) {
    case Binary::add: apply([](T x, T y) { return x + y; }); op_kind = OpKind::add; break;
    case Binary::sub: apply([](T x, T y) { return x - y; }); op_kind = OpKind::sub; break;
    case Binary::mul: apply([](T x, T y) { return x * y; }); op_kind = OpKind::mul; break;
    case Binary::div: apply([](T x, T y) { return x / y; }); op_kind = OpKind::div; break;
  }
  const std::size_t ida = a.id(), idb = b.id();
  auto backward = [kind, ida, idb, out_shape, sa = std::move(sa), sb = std::move(sb), same](Tape<T>& t, std::size_t self) {
    auto g = t.grad_in(self);
    auto da = t.grad_sink(ida);
    auto db = t.grad_sink(idb);
    const T* x = t.value(ida).raw();
    const T* y = t.value(idb).raw();
    auto visit = [&](auto f) {
      if (same) {
        for (std::size_t i = 0; i < g.size(); ++i) f(i, i, i);
      } else {
        for_each_broadcast(out_shape, sa, sb, f);
      }
    };
    switch (kind) {
      case Binary::add:
        visit([&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (!da.empty()) da[ia] += g[i];
          if (!db.empty()) db[ib] += g[i];
        });
        break;
      case Binary::sub:
        visit([&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (!da.empty()) da[ia] += g[i];
          if (!db.empty()) db[ib] -= g[i];
        });
        break;
      case Binary::mul:
        visit([&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (!da.empty()) da[ia] += g[i] * y[ib];
          if (!db.empty()) db[ib] += g[i] * x[ia];
        });
        break;
      case Binary::div:
        visit([&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (!da.empty()) da[ia] += g[i] / y[ib];
          if (!db.empty()) db[ib] -= g[i] * x[ia] / (y[ib] * y[ib]);
        });
        break;
    }
  };
  return tape.record(op_kind, {ida, idb}, std::move(out), std::move(backward));
}

template <typename T>
Var<T> unary(Unary kind, const Var<T>& a) {
  Tape<T>& tape = a.tape();
  const Tensor<T>& x = a.value();
  Tensor<T> out(x.shape());
  const std::size_t n = x.numel();
  const T floor = static_cast<T>(kLogFloor);
  OpKind op_kind = OpKind::relu;
  switch (kind) {
    case Unary::relu:
      op_kind = OpKind::relu;
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
      if (tape.tracking_branches()) {
        for (std::size_t i = 0; i < n; ++i) tape.note_branch(x[i] > T{0});
      }
      break;
    case Unary::sigmoid:
      op_kind = OpKind::sigmoid;
      for (std::size_t i = 0; i < n; ++i) out[i] = stable_sigmoid(x[i]);
      break;
    case Unary::log:
      op_kind = OpKind::log;
      for (std::size_t i = 0; i < n; ++i) out[i] = std::log(std::max(x[i], floor));
      if (tape.tracking_branches()) {
        for (std::size_t i = 0; i < n; ++i) tape.note_branch(x[i] > floor);
      }
      break;
    case Unary::exp:
      op_kind = OpKind::exp;
      for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(x[i]);
      break;
  }
  const std::size_t id = a.id();
  auto backward = [kind, id, floor](Tape<T>& t, std::size_t self) {
    auto g = t.grad_in(self);
    auto dx = t.grad_sink(id);
    const T* xv = t.value(id).raw();
    const T* yv = t.value(self).raw();
    switch (kind) {
      case Unary::relu:
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (xv[i] > T{0}) dx[i] += g[i];
        }
        break;
      case Unary::sigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * yv[i] * (T{1} - yv[i]);
        break;
      case Unary::log:
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (xv[i] > floor) dx[i] += g[i] / xv[i];
        }
        break;
      case Unary::exp:
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * yv[i];
        break;
    }
  };
  return tape.record(op_kind, {id}, std::move(out), std::move(backward));
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  const Tensor<T>& x = a.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * factor;
  const std::size_t id = a.id();
  return a.tape().record(OpKind::scale, {id}, std::move(out), [id, factor](Tape<T>& t, std::size_t self) {
    auto g = t.grad_in(self);
    auto dx = t.grad_sink(id);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> clamp_min(const Var<T>& a, T floor) {
  Tape<T>& tape = a.tape();
  const Tensor<T>& x = a.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::max(x[i], floor);
  if (tape.tracking_branches()) {
    for (std::size_t i = 0; i < x.numel(); ++i) tape.note_branch(x[i] > floor);
  }
  const std::size_t id = a.id();
  return tape.record(OpKind::clamp_min, {id}, std::move(out), [id, floor](Tape<T>& t, std::size_t self) {
    auto g = t.grad_in(self);
    auto dx = t.grad_sink(id);
    const T* xv = t.value(id).raw();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > floor) dx[i] += g[i];
    }
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = shared_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require_rank(av.shape(), 2, "matmul");
  require_rank(bv.shape(), 2, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw ShapeError("matmul inner extents differ: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  Tensor<T> out({m, n});
  MapMat<T>(out.raw(), m, n).noalias() = ConstMapMat<T>(av.raw(), m, k) * ConstMapMat<T>(bv.raw(), k, n);
  const std::size_t ida = a.id(), idb = b.id();
  return tape.record(OpKind::matmul, {ida, idb}, std::move(out), [=](Tape<T>& t, std::size_t self) {
    ConstMapMat<T> g(t.grad_in(self).data(), m, n);
    if (auto da = t.grad_sink(ida); !da.empty()) {
      MapMat<T>(da.data(), m, k).noalias() += g * ConstMapMat<T>(t.value(idb).raw(), k, n).transpose();
    }
    if (auto db = t.grad_sink(idb); !db.empty()) {
      MapMat<T>(db.data(), k, n).noalias() += ConstMapMat<T>(t.value(ida).raw(), m, k).transpose() * g;
    }
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  const Tensor<T>& x = a.value();
  require_rank(x.shape(), 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor<T> out({c, r});
  MapMat<T>(out.raw(), c, r) = ConstMapMat<T>(x.raw(), r, c).transpose();
  const std::size_t id = a.id();
  return a.tape().record(OpKind::transpose, {id}, std::move(out), [=](Tape<T>& t, std::size_t self) {
    auto dx = t.grad_sink(id);
    MapMat<T>(dx.data(), r, c) += ConstMapMat<T>(t.grad_in(self).data(), c, r).transpose();
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, std::size_t stride, std::size_t padding) {
  Tape<T>& tape = shared_tape(input, kernel);
  const Tensor<T>& x = input.value();
  const Tensor<T>& w = kernel.value();
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d kernel");
  if (stride == 0) throw std::invalid_argument("conv2d stride must be positive");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin) {
    throw ShapeError("conv2d channel mismatch: input " + shape_string(x.shape()) + ", kernel " +
                     shape_string(w.shape()));
  }
  const long span_h = static_cast<long>(h + 2 * padding) - static_cast<long>(kh);
  const long span_w = static_cast<long>(wd + 2 * padding) - static_cast<long>(kw);
  if (span_h < 0 || span_w < 0 || span_h % static_cast<long>(stride) != 0 ||
      span_w % static_cast<long>(stride) != 0) {
    throw ShapeError("conv2d output extent is not a positive integer: input " + shape_string(x.shape()) +
                     ", kernel " + shape_string(w.shape()) + ", stride " + std::to_string(stride) + ", padding " +
                     std::to_string(padding));
  }
  const std::size_t oh = static_cast<std::size_t>(span_h) / stride + 1;
  const std::size_t ow = static_cast<std::size_t>(span_w) / stride + 1;
  const std::size_t plane = oh * ow;
  const std::size_t kdim = cin * kh * kw;
  const std::size_t cols = n * plane;

  auto col = std::make_shared<std::vector<T>>();
  im2col(x, kh, kw, stride, padding, oh, ow, *col);
  RowMat<T> y = ConstMapMat<T>(w.raw(), cout, kdim) * ConstMapMat<T>(col->data(), kdim, cols);
  Tensor<T> out({n, cout, oh, ow});
  for (std::size_t ni = 0; ni < n; ++ni) {
    for (std::size_t co = 0; co < cout; ++co) {
      std::copy_n(y.data() + co * cols + ni * plane, plane, out.raw() + (ni * cout + co) * plane);
    }
  }
  const bool keep = tape.any_requires_grad({input.id(), kernel.id()});
  if (!keep) col.reset();
  const std::size_t idx = input.id(), idw = kernel.id();
  const Shape xs = x.shape();
  return tape.record(OpKind::conv2d, {idx, idw}, std::move(out), [=](Tape<T>& t, std::size_t self) {
    auto g = t.grad_in(self);
    RowMat<T> gy(cout, cols);
    for (std::size_t ni = 0; ni < n; ++ni) {
      for (std::size_t co = 0; co < cout; ++co) {
        std::copy_n(g.data() + (ni * cout + co) * plane, plane, gy.data() + co * cols + ni * plane);
      }
    }
    if (auto dw = t.grad_sink(idw); !dw.empty()) {
      MapMat<T>(dw.data(), cout, kdim).noalias() += gy * ConstMapMat<T>(col->data(), kdim, cols).transpose();
    }
    if (auto dx = t.grad_sink(idx); !dx.empty()) {
      RowMat<T> dcol = ConstMapMat<T>(t.value(idw).raw(), cout, kdim).transpose() * gy;
      col2im(dcol.data(), xs, kh, kw, stride, padding, oh, ow, dx);
    }
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& input) {
  const Tensor<T>& x = input.value();
  require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc{0};
    const T* p = x.raw() + i * plane;
    for (std::size_t k = 0; k < plane; ++k) acc += p[k];
    out[i] = acc / static_cast<T>(plane);
  }
  const std::size_t id = input.id();
  return input.tape().record(OpKind::global_avg_pool, {id}, std::move(out), [=](Tape<T>& t, std::size_t self) {
    auto g = t.grad_in(self);
    auto dx = t.grad_sink(id);
    const T inv = T{1} / static_cast<T>(plane);
    for (std::size_t i = 0; i < n * c; ++i) {
      const T v = g[i] * inv;
      T* p = dx.data() + i * plane;
      for (std::size_t k = 0; k < plane; ++k) p[k] += v;
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& input) {
  const Tensor<T>& x = input.value();
  require_rank(x.shape(), 2, "softmax");
  const std::size_t n = x.dim(0), k = x.dim(1);
  Tensor<T> out({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = x.raw() + i * k;
    T* dst = out.raw() + i * k;
    const T mx = *std::max_element(row, row + k);
    T total{0};
    for (std::size_t j = 0; j < k; ++j) {
      dst[j] = std::exp(row[j] - mx);
      total += dst[j];
    }
    for (std::size_t j = 0; j < k; ++j) dst[j] /= total;
  }
  const std::size_t id = input.id();
  return input.tape().record(OpKind::softmax, {id}, std::move(out), [=](Tape<T>& t, std::size_t self) {
    auto g = t.grad_in(self);
    auto dx = t.grad_sink(id);
    const T* y = t.value(self).raw();
    for (std::size_t i = 0; i < n; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < k; ++j) dot += g[i * k + j] * y[i * k + j];
      for (std::size_t j = 0; j < k; ++j) dx[i * k + j] += y[i * k + j] * (g[i * k + j] - dot);
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  const Tensor<T>& x = a.value();
  T acc{0};
  for (auto v : x.data()) acc += v;
  const std::size_t id = a.id();
  return a.tape().record(OpKind::sum, {id}, Tensor<T>::scalar(acc), [id](Tape<T>& t, std::size_t self) {
    const T g = t.grad_in(self)[0];
    for (auto& d : t.grad_sink(id)) d += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.value().numel()));
}

template <typename T>
Var<T> row_sum(const Var<T>& a) {
  const Tensor<T>& x = a.value();
  require_rank(x.shape(), 2, "row_sum");
  const std::size_t n = x.dim(0), k = x.dim(1);
  Tensor<T> out({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    T acc{0};
    for (std::size_t j = 0; j < k; ++j) acc += x[i * k + j];
    out[i] = acc;
  }
  const std::size_t id = a.id();
  return a.tape().record(OpKind::row_sum, {id}, std::move(out), [=](Tape<T>& t, std::size_t self) {
    auto g = t.grad_in(self);
    auto dx = t.grad_sink(id);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) dx[i * k + j] += g[i];
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  const std::size_t id = a.id();
  return a.tape().record(OpKind::reshape, {id}, std::move(out), [id](Tape<T>& t, std::size_t self) {
    auto g = t.grad_in(self);
    auto dx = t.grad_sink(id);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& a, std::span<const std::size_t> rows) {
  const Tensor<T>& x = a.value();
  require_rank(x.shape(), 2, "gather_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (rows.empty()) throw ShapeError("gather_rows needs at least one row from " + shape_string(x.shape()));
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Tensor<T> out({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) {
      throw std::out_of_range("gather_rows index " + std::to_string(idx[r]) + " outside " + shape_string(x.shape()));
    }
    std::copy_n(x.raw() + idx[r] * d, d, out.raw() + r * d);
  }
  const std::size_t id = a.id();
  return a.tape().record(OpKind::gather_rows, {id}, std::move(out),
                         [id, d, idx = std::move(idx)](Tape<T>& t, std::size_t self) {
                           auto g = t.grad_in(self);
                           auto dx = t.grad_sink(id);
                           for (std::size_t r = 0; r < idx.size(); ++r) {
                             for (std::size_t j = 0; j < d; ++j) dx[idx[r] * d + j] += g[r * d + j];
                           }
                         });
}

template <typename T>
Var<T> pairwise_sq_dist(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = shared_tape(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require_rank(av.shape(), 2, "pairwise_sq_dist");
  require_rank(bv.shape(), 2, "pairwise_sq_dist");
  const std::size_t n = av.dim(0), m = bv.dim(0), d = av.dim(1);
  if (bv.dim(1) != d) {
    throw ShapeError("pairwise_sq_dist feature widths differ: " + shape_string(av.shape()) + " vs " +
                     shape_string(bv.shape()));
  }
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      T acc{0};
      for (std::size_t k = 0; k < d; ++k) {
        const T diff = av[i * d + k] - bv[j * d + k];
        acc += diff * diff;
      }
      out[i * m + j] = acc;
    }
  }
  const std::size_t ida = a.id(), idb = b.id();
  return tape.record(OpKind::pairwise_sq_dist, {ida, idb}, std::move(out), [=](Tape<T>& t, std::size_t self) {
    auto g = t.grad_in(self);
    auto da = t.grad_sink(ida);
    auto db = t.grad_sink(idb);
    const T* x = t.value(ida).raw();
    const T* y = t.value(idb).raw();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        const T gij = T{2} * g[i * m + j];
        if (gij == T{0}) continue;
        for (std::size_t k = 0; k < d; ++k) {
          const T diff = gij * (x[i * d + k] - y[j * d + k]);
          if (!da.empty()) da[i * d + k] += diff;
          if (!db.empty()) db[j * d + k] -= diff;
        }
      }
    }
  });
}

template <typename T>
void require_simplex(const Tensor<T>& probs, double tolerance, const char* what) {
  if (probs.rank() != 2) throw ShapeError(std::string(what) + " expects [N,K] probabilities, got " + shape_string(probs.shape()));
  const std::size_t k = probs.dim(1);
  for (std::size_t i = 0; i < probs.dim(0); ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double v = probs[i * k + j];
      if (v < -tolerance || v > 1.0 + tolerance) {
        throw std::invalid_argument(std::string(what) + ": row " + std::to_string(i) + " has entry outside [0,1]");
      }
      total += v;
    }
    if (std::abs(total - 1.0) > tolerance) {
      throw std::invalid_argument(std::string(what) + ": row " + std::to_string(i) + " sums to " + std::to_string(total));
    }
  }
}

#define DCAN_INSTANTIATE_OPS(T)                                                              \
  template Var<T> binary(Binary, const Var<T>&, const Var<T>&);                              \
  template Var<T> unary(Unary, const Var<T>&);                                               \
  template Var<T> scale(const Var<T>&, T);                                                   \
  template Var<T> clamp_min(const Var<T>&, T);                                               \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                      \
  template Var<T> transpose(const Var<T>&);                                                  \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, std::size_t, std::size_t);            \
  template Var<T> global_avg_pool(const Var<T>&);                                            \
  template Var<T> softmax(const Var<T>&);                                                    \
  template Var<T> sum(const Var<T>&);                                                        \
  template Var<T> mean(const Var<T>&);                                                       \
  template Var<T> row_sum(const Var<T>&);                                                    \
  template Var<T> reshape(const Var<T>&, Shape);                                             \
  template Var<T> gather_rows(const Var<T>&, std::span<const std::size_t>);                  \
  template Var<T> pairwise_sq_dist(const Var<T>&, const Var<T>&);                           \
  template void require_simplex(const Tensor<T>&, double, const char*);

DCAN_INSTANTIATE_OPS(float)
DCAN_INSTANTIATE_OPS(double)

}  // namespace dcan
