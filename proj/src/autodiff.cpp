#include "dynloc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

#include "dynloc/errors.hpp"
#include "dynloc/gemm.hpp"

namespace dynloc {

namespace {

constexpr double kProbClampLo = 1e-7;
constexpr double kProbClampHi = 1.0 - 1e-7;

std::size_t shape_numel(const std::vector<std::size_t>& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const std::vector<std::size_t>& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

[[noreturn]] void shape_error(const std::string& op, const Tensor& a) {
  throw InvalidArgument(op + ": bad shape " + shape_str(a.shape));
}

[[noreturn]] void shape_error(const std::string& op, const Tensor& a, const Tensor& b) {
  throw InvalidArgument(op + ": incompatible shapes " + shape_str(a.shape) + " and " +
                        shape_str(b.shape));
}

struct ConvGeom {
  std::size_t batch, cin, h, w;      // input
  std::size_t cout, kh, kw;          // kernel
  std::size_t oh, ow;                // output spatial
  std::size_t stride, pad;
  bool batched;                      // rank-4 input
};

// Output size of a strided convolution; throws if it would be empty.
std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride,
                          std::size_t pad) {
  const std::ptrdiff_t num =
      static_cast<std::ptrdiff_t>(in + 2 * pad) - static_cast<std::ptrdiff_t>(k);
  if (num < 0) throw InvalidArgument("conv2d: kernel larger than padded input");
  return static_cast<std::size_t>(num) / stride + 1;
}

ConvGeom conv_geometry(const Tensor& x, const Tensor& w, const Conv2dSpec& spec) {
  ConvGeom g;
  if (x.rank() == 3) {
    g.batched = false;
    g.batch = 1;
    g.cin = x.shape[0];
    g.h = x.shape[1];
    g.w = x.shape[2];
  } else if (x.rank() == 4) {
    g.batched = true;
    g.batch = x.shape[0];
    g.cin = x.shape[1];
    g.h = x.shape[2];
    g.w = x.shape[3];
  } else {
    shape_error("conv2d input", x);
  }
  if (w.rank() != 4) shape_error("conv2d weight", w);
  g.cout = w.shape[0];
  g.kh = w.shape[2];
  g.kw = w.shape[3];
  if (w.shape[1] != g.cin) shape_error("conv2d", x, w);
  g.stride = spec.stride;
  g.pad = spec.pad;
  if (g.stride == 0) throw InvalidArgument("conv2d: stride must be positive");
  g.oh = conv_out_size(g.h, g.kh, g.stride, g.pad);
  g.ow = conv_out_size(g.w, g.kw, g.stride, g.pad);
  return g;
}

// Gathers receptive fields of x (N,C,H,W) into col (N*OH*OW, C*kh*kw).
void im2col(const double* x, const ConvGeom& g, double* col) {
  const std::size_t k = g.cin * g.kh * g.kw;
  const std::size_t plane = g.h * g.w;
  for (std::size_t n = 0; n < g.batch; ++n) {
    const double* xn = x + n * g.cin * plane;
    for (std::size_t oh = 0; oh < g.oh; ++oh) {
      for (std::size_t ow = 0; ow < g.ow; ++ow) {
        double* row = col + ((n * g.oh + oh) * g.ow + ow) * k;
        const std::ptrdiff_t h0 =
            static_cast<std::ptrdiff_t>(oh * g.stride) - static_cast<std::ptrdiff_t>(g.pad);
        const std::ptrdiff_t w0 =
            static_cast<std::ptrdiff_t>(ow * g.stride) - static_cast<std::ptrdiff_t>(g.pad);
        for (std::size_t c = 0; c < g.cin; ++c) {
          const double* xc = xn + c * plane;
          for (std::size_t ki = 0; ki < g.kh; ++ki) {
            const std::ptrdiff_t h = h0 + static_cast<std::ptrdiff_t>(ki);
            double* dst = row + (c * g.kh + ki) * g.kw;
            if (h < 0 || h >= static_cast<std::ptrdiff_t>(g.h)) {
              std::memset(dst, 0, g.kw * sizeof(double));
              continue;
            }
            const double* src = xc + static_cast<std::size_t>(h) * g.w;
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
              const std::ptrdiff_t ww = w0 + static_cast<std::ptrdiff_t>(kj);
              dst[kj] = (ww < 0 || ww >= static_cast<std::ptrdiff_t>(g.w))
                            ? 0.0
                            : src[static_cast<std::size_t>(ww)];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds col rows back into x (N,C,H,W).
void col2im(const double* col, const ConvGeom& g, double* x) {
  const std::size_t k = g.cin * g.kh * g.kw;
  const std::size_t plane = g.h * g.w;
  for (std::size_t n = 0; n < g.batch; ++n) {
    double* xn = x + n * g.cin * plane;
    for (std::size_t oh = 0; oh < g.oh; ++oh) {
      for (std::size_t ow = 0; ow < g.ow; ++ow) {
        const double* row = col + ((n * g.oh + oh) * g.ow + ow) * k;
        const std::ptrdiff_t h0 =
            static_cast<std::ptrdiff_t>(oh * g.stride) - static_cast<std::ptrdiff_t>(g.pad);
        const std::ptrdiff_t w0 =
            static_cast<std::ptrdiff_t>(ow * g.stride) - static_cast<std::ptrdiff_t>(g.pad);
        for (std::size_t c = 0; c < g.cin; ++c) {
          double* xc = xn + c * plane;
          for (std::size_t ki = 0; ki < g.kh; ++ki) {
            const std::ptrdiff_t h = h0 + static_cast<std::ptrdiff_t>(ki);
            if (h < 0 || h >= static_cast<std::ptrdiff_t>(g.h)) continue;
            const double* src = row + (c * g.kh + ki) * g.kw;
            double* dst = xc + static_cast<std::size_t>(h) * g.w;
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
              const std::ptrdiff_t ww = w0 + static_cast<std::ptrdiff_t>(kj);
              if (ww >= 0 && ww < static_cast<std::ptrdiff_t>(g.w)) {
                dst[static_cast<std::size_t>(ww)] += src[kj];
              }
            }
          }
        }
      }
    }
  }
}

// (N,C,H,W) -> rows (N*H*W, C)
void nchw_to_rows(const double* x, std::size_t n, std::size_t c, std::size_t hw,
                  double* rows) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x + i * c * hw;
    double* ri = rows + i * hw * c;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* xc = xi + ch * hw;
      for (std::size_t p = 0; p < hw; ++p) ri[p * c + ch] = xc[p];
    }
  }
}

// rows (N*H*W, C) -> (N,C,H,W), accumulating
void rows_to_nchw_add(const double* rows, std::size_t n, std::size_t c, std::size_t hw,
                      double* x) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ri = rows + i * hw * c;
    double* xi = x + i * c * hw;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* xc = xi + ch * hw;
      for (std::size_t p = 0; p < hw; ++p) xc[p] += ri[p * c + ch];
    }
  }
}

void axpy(double a, const std::vector<double>& x, std::vector<double>& y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
  values.assign(shape_numel(shape), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> v)
    : shape(std::move(s)), values(std::move(v)) {
  if (values.size() != shape_numel(shape)) {
    throw InvalidArgument("tensor: values length does not match shape");
  }
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::full(std::vector<std::size_t> s, double v) {
  Tensor t(std::move(s));
  std::fill(t.values.begin(), t.values.end(), v);
  return t;
}

std::size_t Tensor::numel() const { return values.size(); }

std::vector<double>& Tensor::ensure_grad() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
  return grad;
}

Tape::Id Tape::push_node(Tensor v, bool needs_grad) {
  nodes_.push_back(Node{std::move(v), {}, needs_grad, nullptr});
  return nodes_.size() - 1;
}

std::vector<double>& Tape::node_grad(Id id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
  return n.grad;
}

void Tape::record(Id out, std::function<void()> fn) {
  if (nodes_[out].needs_grad) records_.push_back({out, std::move(fn)});
}

const Tensor& Tape::value(Id id) const { return nodes_.at(id).value; }

const std::vector<double>& Tape::grad(Id id) const { return nodes_.at(id).grad; }

Tape::Id Tape::constant(Tensor v) { return push_node(std::move(v), false); }

Tape::Id Tape::leaf(Tensor* param) {
  if (param == nullptr) throw InvalidArgument("leaf: null parameter");
  if (!param->requires_grad) throw InvalidArgument("leaf: parameter does not require grad");
  auto it = leaf_ids_.find(param);
  if (it != leaf_ids_.end()) return it->second;
  Id id = push_node(*param, true);
  nodes_[id].param = param;
  leaf_ids_.emplace(param, id);
  return id;
}

Tape::Id Tape::matmul(Id a, Id b) {
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0]) {
    shape_error("matmul", ta, tb);
  }
  const std::size_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
  Tensor out({m, n});
  gemm_nn(m, n, k, ta.values.data(), k, tb.values.data(), n, out.values.data(), n, false);
  Id o = push_node(std::move(out), wants(a) || wants(b));
  record(o, [this, a, b, o, m, n, k] {
    const auto& g = nodes_[o].grad;
    if (wants(a)) {
      gemm_nt(m, k, n, g.data(), n, nodes_[b].value.values.data(), n,
              node_grad(a).data(), k, true);
    }
    if (wants(b)) {
      gemm_tn(k, n, m, nodes_[a].value.values.data(), k, g.data(), n,
              node_grad(b).data(), n, true);
    }
  });
  return o;
}

Tape::Id Tape::bmm(Id a, Id b) {
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  if (ta.rank() != 3 || tb.rank() != 3 || ta.shape[0] != tb.shape[0] ||
      ta.shape[2] != tb.shape[1]) {
    shape_error("bmm", ta, tb);
  }
  const std::size_t bs = ta.shape[0], m = ta.shape[1], k = ta.shape[2], n = tb.shape[2];
  Tensor out({bs, m, n});
  for (std::size_t i = 0; i < bs; ++i) {
    gemm_nn(m, n, k, ta.values.data() + i * m * k, k, tb.values.data() + i * k * n, n,
            out.values.data() + i * m * n, n, false);
  }
  Id o = push_node(std::move(out), wants(a) || wants(b));
  record(o, [this, a, b, o, bs, m, n, k] {
    const auto& g = nodes_[o].grad;
    for (std::size_t i = 0; i < bs; ++i) {
      const double* gi = g.data() + i * m * n;
      if (wants(a)) {
        gemm_nt(m, k, n, gi, n, nodes_[b].value.values.data() + i * k * n, n,
                node_grad(a).data() + i * m * k, k, true);
      }
      if (wants(b)) {
        gemm_tn(k, n, m, nodes_[a].value.values.data() + i * m * k, k, gi, n,
                node_grad(b).data() + i * k * n, n, true);
      }
    }
  });
  return o;
}

Tape::Id Tape::bmm_nt(Id a, Id b) {
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  if (ta.rank() != 3 || tb.rank() != 3 || ta.shape[0] != tb.shape[0] ||
      ta.shape[2] != tb.shape[2]) {
    shape_error("bmm_nt", ta, tb);
  }
  const std::size_t bs = ta.shape[0], m = ta.shape[1], k = ta.shape[2], n = tb.shape[1];
  Tensor out({bs, m, n});
  for (std::size_t i = 0; i < bs; ++i) {
    gemm_nt(m, n, k, ta.values.data() + i * m * k, k, tb.values.data() + i * n * k, k,
            out.values.data() + i * m * n, n, false);
  }
  Id o = push_node(std::move(out), wants(a) || wants(b));
  record(o, [this, a, b, o, bs, m, n, k] {
    const auto& g = nodes_[o].grad;
    for (std::size_t i = 0; i < bs; ++i) {
      const double* gi = g.data() + i * m * n;
      if (wants(a)) {
        gemm_nn(m, k, n, gi, n, nodes_[b].value.values.data() + i * n * k, k,
                node_grad(a).data() + i * m * k, k, true);
      }
      if (wants(b)) {
        gemm_tn(n, k, m, gi, n, nodes_[a].value.values.data() + i * m * k, k,
                node_grad(b).data() + i * n * k, k, true);
      }
    }
  });
  return o;
}

Tape::Id Tape::conv2d(Id x, Id w, Id bias, const Conv2dSpec& spec) {
  const Tensor& tx = nodes_[x].value;
  const Tensor& tw = nodes_[w].value;
  const Tensor& tb = nodes_[bias].value;
  ConvGeom g = conv_geometry(tx, tw, spec);
  if (tb.rank() != 1 || tb.shape[0] != g.cout) shape_error("conv2d bias", tb);

  const std::size_t k = g.cin * g.kh * g.kw;
  const std::size_t rows = g.batch * g.oh * g.ow;
  std::vector<double> col(rows * k);
  im2col(tx.values.data(), g, col.data());

  // flat (rows, cout) = col (rows, k) * W^T, then repack to NCHW + bias
  std::vector<double> flat(rows * g.cout);
  gemm_nt(rows, g.cout, k, col.data(), k, tw.values.data(), k, flat.data(), g.cout, false);

  Tensor out(g.batched ? std::vector<std::size_t>{g.batch, g.cout, g.oh, g.ow}
                       : std::vector<std::size_t>{g.cout, g.oh, g.ow});
  const std::size_t ohw = g.oh * g.ow;
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t c = 0; c < g.cout; ++c) {
      double* dst = out.values.data() + (n * g.cout + c) * ohw;
      const double* src = flat.data() + n * ohw * g.cout + c;
      const double bv = tb.values[c];
      for (std::size_t p = 0; p < ohw; ++p) dst[p] = src[p * g.cout] + bv;
    }
  }

  Id o = push_node(std::move(out), wants(x) || wants(w) || wants(bias));
  record(o, [this, x, w, bias, o, g] {
    const auto& gr = nodes_[o].grad;
    const std::size_t k = g.cin * g.kh * g.kw;
    const std::size_t rows = g.batch * g.oh * g.ow;
    const std::size_t ohw = g.oh * g.ow;
    // dY as (rows, cout)
    std::vector<double> gflat(rows * g.cout);
    nchw_to_rows(gr.data(), g.batch, g.cout, ohw, gflat.data());
    if (wants(bias)) {
      auto& gb = node_grad(bias);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* row = gflat.data() + r * g.cout;
        for (std::size_t c = 0; c < g.cout; ++c) gb[c] += row[c];
      }
    }
    if (wants(w)) {
      // recompute col rather than saving it; the gemm dominates
      std::vector<double> col(rows * k);
      im2col(nodes_[x].value.values.data(), g, col.data());
      gemm_tn(g.cout, k, rows, gflat.data(), g.cout, col.data(), k,
              node_grad(w).data(), k, true);
    }
    if (wants(x)) {
      std::vector<double> dcol(rows * k);
      gemm_nn(rows, k, g.cout, gflat.data(), g.cout, nodes_[w].value.values.data(), k,
              dcol.data(), k, false);
      col2im(dcol.data(), g, node_grad(x).data());
    }
  });
  return o;
}

Tape::Id Tape::transposed_conv2d(Id x, Id w, Id bias, const Conv2dSpec& spec) {
  const Tensor& tx = nodes_[x].value;
  const Tensor& tw = nodes_[w].value;
  const Tensor& tb = nodes_[bias].value;
  if (tw.rank() != 4) shape_error("transposed_conv2d weight", tw);
  const bool batched = tx.rank() == 4;
  if (!batched && tx.rank() != 3) shape_error("transposed_conv2d input", tx);
  const std::size_t batch = batched ? tx.shape[0] : 1;
  const std::size_t cin = batched ? tx.shape[1] : tx.shape[0];
  const std::size_t hin = batched ? tx.shape[2] : tx.shape[1];
  const std::size_t win = batched ? tx.shape[3] : tx.shape[2];
  if (tw.shape[0] != cin) shape_error("transposed_conv2d", tx, tw);
  const std::size_t cout = tw.shape[1], kh = tw.shape[2], kw = tw.shape[3];
  if (spec.stride == 0) throw InvalidArgument("transposed_conv2d: stride must be positive");
  const std::ptrdiff_t hout_s = static_cast<std::ptrdiff_t>((hin - 1) * spec.stride + kh) -
                                2 * static_cast<std::ptrdiff_t>(spec.pad);
  const std::ptrdiff_t wout_s = static_cast<std::ptrdiff_t>((win - 1) * spec.stride + kw) -
                                2 * static_cast<std::ptrdiff_t>(spec.pad);
  if (hout_s <= 0 || wout_s <= 0) throw InvalidArgument("transposed_conv2d: empty output");
  const std::size_t hout = static_cast<std::size_t>(hout_s);
  const std::size_t wout = static_cast<std::size_t>(wout_s);
  if (tb.rank() != 1 || tb.shape[0] != cout) shape_error("transposed_conv2d bias", tb);

  // The output plays the role of a convolution's input: conv(out) -> x.
  ConvGeom g;
  g.batch = batch;
  g.cin = cout;
  g.h = hout;
  g.w = wout;
  g.cout = cin;
  g.kh = kh;
  g.kw = kw;
  g.oh = hin;
  g.ow = win;
  g.stride = spec.stride;
  g.pad = spec.pad;
  g.batched = batched;

  const std::size_t k = cout * kh * kw;
  const std::size_t rows = batch * hin * win;

  // x as (rows, cin), then dcol = xrows * Wmat (cin, k), scattered to output
  std::vector<double> xrows(rows * cin);
  nchw_to_rows(tx.values.data(), batch, cin, hin * win, xrows.data());
  std::vector<double> col(rows * k);
  gemm_nn(rows, k, cin, xrows.data(), cin, tw.values.data(), k, col.data(), k, false);

  Tensor out(batched ? std::vector<std::size_t>{batch, cout, hout, wout}
                     : std::vector<std::size_t>{cout, hout, wout});
  col2im(col.data(), g, out.values.data());
  const std::size_t ohw = hout * wout;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < cout; ++c) {
      double* dst = out.values.data() + (n * cout + c) * ohw;
      const double bv = tb.values[c];
      for (std::size_t p = 0; p < ohw; ++p) dst[p] += bv;
    }
  }

  Id o = push_node(std::move(out), wants(x) || wants(w) || wants(bias));
  record(o, [this, x, w, bias, o, g, batch, cin, cout, hin, win, k, rows] {
    const auto& gr = nodes_[o].grad;
    const std::size_t ohw = g.h * g.w;
    if (wants(bias)) {
      auto& gb = node_grad(bias);
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t c = 0; c < cout; ++c) {
          const double* src = gr.data() + (n * cout + c) * ohw;
          double s = 0.0;
          for (std::size_t p = 0; p < ohw; ++p) s += src[p];
          gb[c] += s;
        }
      }
    }
    // col of upstream grad w.r.t. the (virtual) conv input
    std::vector<double> gcol(rows * k);
    im2col(gr.data(), g, gcol.data());
    if (wants(x)) {
      std::vector<double> gx(rows * cin);
      gemm_nt(rows, cin, k, gcol.data(), k, nodes_[w].value.values.data(), k, gx.data(),
              cin, false);
      rows_to_nchw_add(gx.data(), batch, cin, hin * win, node_grad(x).data());
    }
    if (wants(w)) {
      std::vector<double> xrows(rows * cin);
      nchw_to_rows(nodes_[x].value.values.data(), batch, cin, hin * win, xrows.data());
      gemm_tn(cin, k, rows, xrows.data(), cin, gcol.data(), k, node_grad(w).data(), k,
              true);
    }
  });
  return o;
}

Tape::Id Tape::add(Id a, Id b) {
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  const bool bias_like = tb.rank() == 1 && ta.rank() >= 1 &&
                         ta.shape.back() == tb.shape[0] && !ta.same_shape(tb);
  if (!ta.same_shape(tb) && !bias_like) shape_error("add", ta, tb);
  Tensor out = ta;
  out.requires_grad = false;
  if (bias_like) {
    const std::size_t n = tb.shape[0];
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += tb.values[i % n];
  } else {
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += tb.values[i];
  }
  Id o = push_node(std::move(out), wants(a) || wants(b));
  record(o, [this, a, b, o, bias_like] {
    const auto& g = nodes_[o].grad;
    if (wants(a)) axpy(1.0, g, node_grad(a));
    if (wants(b)) {
      auto& gb = node_grad(b);
      if (bias_like) {
        const std::size_t n = gb.size();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
      } else {
        axpy(1.0, g, gb);
      }
    }
  });
  return o;
}

Tape::Id Tape::sub(Id a, Id b) {
  const Tensor& ta = nodes_[a].value;
  const Tensor& tb = nodes_[b].value;
  if (!ta.same_shape(tb)) shape_error("sub", ta, tb);
  Tensor out = ta;
  out.requires_grad = false;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] -= tb.values[i];
  Id o = push_node(std::move(out), wants(a) || wants(b));
  record(o, [this, a, b, o] {
    const auto& g = nodes_[o].grad;
    if (wants(a)) axpy(1.0, g, node_grad(a));
    if (wants(b)) axpy(-1.0, g, node_grad(b));
  });
  return o;
}

Tape::Id Tape::scale(Id x, double s) {
  Tensor out = nodes_[x].value;
  out.requires_grad = false;
  for (double& v : out.values) v *= s;
  Id o = push_node(std::move(out), wants(x));
  record(o, [this, x, o, s] { axpy(s, nodes_[o].grad, node_grad(x)); });
  return o;
}

Tape::Id Tape::relu(Id x) {
  Tensor out = nodes_[x].value;
  out.requires_grad = false;
  for (double& v : out.values) v = v > 0.0 ? v : 0.0;
  Id o = push_node(std::move(out), wants(x));
  record(o, [this, x, o] {
    const auto& g = nodes_[o].grad;
    const auto& xv = nodes_[x].value.values;
    auto& gx = node_grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += g[i];
    }
  });
  return o;
}

Tape::Id Tape::softmax_rows(Id x) {
  const Tensor& tx = nodes_[x].value;
  if (tx.rank() < 1) shape_error("softmax_rows", tx);
  const std::size_t n = tx.shape.back();
  const std::size_t rows = tx.numel() / n;
  Tensor out = tx;
  out.requires_grad = false;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.values.data() + r * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
  }
  Id o = push_node(std::move(out), wants(x));
  record(o, [this, x, o, rows, n] {
    const auto& g = nodes_[o].grad;
    const auto& z = nodes_[o].value.values;
    auto& gx = node_grad(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = g.data() + r * n;
      const double* zr = z.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * zr[j];
      double* gxr = gx.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) gxr[j] += zr[j] * (gr[j] - dot);
    }
  });
  return o;
}

Tape::Id Tape::reshape(Id x, std::vector<std::size_t> shape) {
  const Tensor& tx = nodes_[x].value;
  if (shape_numel(shape) != tx.numel()) {
    throw InvalidArgument("reshape: element count mismatch for " + shape_str(shape));
  }
  Tensor out(std::move(shape), tx.values);
  Id o = push_node(std::move(out), wants(x));
  record(o, [this, x, o] { axpy(1.0, nodes_[o].grad, node_grad(x)); });
  return o;
}

Tape::Id Tape::concat(const std::vector<Id>& xs, std::size_t axis) {
  if (xs.empty()) throw InvalidArgument("concat: no inputs");
  const Tensor& first = nodes_[xs[0]].value;
  if (axis >= first.rank()) throw InvalidArgument("concat: axis out of range");
  std::vector<std::size_t> out_shape = first.shape;
  std::size_t total_axis = 0;
  for (Id id : xs) {
    const Tensor& t = nodes_[id].value;
    if (t.rank() != first.rank()) shape_error("concat", first, t);
    for (std::size_t d = 0; d < t.rank(); ++d) {
      if (d != axis && t.shape[d] != first.shape[d]) shape_error("concat", first, t);
    }
    total_axis += t.shape[axis];
  }
  out_shape[axis] = total_axis;

  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first.shape[d];
  for (std::size_t d = axis + 1; d < first.rank(); ++d) inner *= first.shape[d];

  Tensor out(out_shape);
  std::size_t offset = 0;
  bool ng = false;
  for (Id id : xs) {
    const Tensor& t = nodes_[id].value;
    ng = ng || wants(id);
    const std::size_t span = t.shape[axis] * inner;
    for (std::size_t i = 0; i < outer; ++i) {
      std::memcpy(out.values.data() + i * total_axis * inner + offset,
                  t.values.data() + i * span, span * sizeof(double));
    }
    offset += span;
  }
  Id o = push_node(std::move(out), ng);
  std::vector<Id> inputs = xs;
  record(o, [this, inputs, o, outer, inner, total_axis] {
    const auto& g = nodes_[o].grad;
    std::size_t offset = 0;
    for (Id id : inputs) {
      const std::size_t span = nodes_[id].value.numel() / outer;
      if (wants(id)) {
        auto& gi = node_grad(id);
        for (std::size_t i = 0; i < outer; ++i) {
          const double* src = g.data() + i * total_axis * inner + offset;
          double* dst = gi.data() + i * span;
          for (std::size_t j = 0; j < span; ++j) dst[j] += src[j];
        }
      }
      offset += span;
    }
  });
  return o;
}

Tape::Id Tape::mean(Id x) {
  const Tensor& tx = nodes_[x].value;
  if (tx.numel() == 0) throw InvalidArgument("mean: empty tensor");
  double s = 0.0;
  for (double v : tx.values) s += v;
  const double n = static_cast<double>(tx.numel());
  Id o = push_node(Tensor::scalar(s / n), wants(x));
  record(o, [this, x, o, n] {
    const double g = nodes_[o].grad[0] / n;
    auto& gx = node_grad(x);
    for (double& v : gx) v += g;
  });
  return o;
}

Tape::Id Tape::l2_norm_rows(Id x) {
  const Tensor& tx = nodes_[x].value;
  if (tx.rank() != 2) shape_error("l2_norm_rows", tx);
  const std::size_t rows = tx.shape[0], n = tx.shape[1];
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = tx.values.data() + r * n;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += row[j] * row[j];
    out.values[r] = std::sqrt(s);
  }
  Id o = push_node(std::move(out), wants(x));
  record(o, [this, x, o, rows, n] {
    const auto& g = nodes_[o].grad;
    const auto& y = nodes_[o].value.values;
    const auto& xv = nodes_[x].value.values;
    auto& gx = node_grad(x);
    for (std::size_t r = 0; r < rows; ++r) {
      if (y[r] == 0.0) continue;  // subgradient 0 at the exact-zero residual
      const double s = g[r] / y[r];
      const double* row = xv.data() + r * n;
      double* grow = gx.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) grow[j] += s * row[j];
    }
  });
  return o;
}

Tape::Id Tape::bce(Id prob, Id label) {
  const Tensor& tp = nodes_[prob].value;
  const Tensor& tl = nodes_[label].value;
  if (!tp.same_shape(tl)) shape_error("bce", tp, tl);
  Tensor out(tp.shape);
  for (std::size_t i = 0; i < tp.numel(); ++i) {
    const double p = std::clamp(tp.values[i], kProbClampLo, kProbClampHi);
    const double d = tl.values[i];
    out.values[i] = -(d * std::log(p) + (1.0 - d) * std::log(1.0 - p));
  }
  Id o = push_node(std::move(out), wants(prob) || wants(label));
  record(o, [this, prob, label, o] {
    const auto& g = nodes_[o].grad;
    const auto& pv = nodes_[prob].value.values;
    const auto& lv = nodes_[label].value.values;
    if (wants(prob)) {
      auto& gp = node_grad(prob);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (pv[i] <= kProbClampLo || pv[i] >= kProbClampHi) continue;  // clamped flat
        gp[i] += g[i] * (pv[i] - lv[i]) / (pv[i] * (1.0 - pv[i]));
      }
    }
    if (wants(label)) {
      auto& gl = node_grad(label);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double p = std::clamp(pv[i], kProbClampLo, kProbClampHi);
        gl[i] += g[i] * (std::log(1.0 - p) - std::log(p));
      }
    }
  });
  return o;
}

Tape::Id Tape::grl(Id x, const GrlConfig& cfg) {
  if (!std::isfinite(cfg.lambda) || cfg.lambda < 0.0) {
    throw InvalidArgument("grl: lambda must be finite and non-negative");
  }
  Tensor out = nodes_[x].value;  // bitwise identity
  out.requires_grad = false;
  const double lambda = cfg.lambda;
  Id o = push_node(std::move(out), wants(x));
  record(o, [this, x, o, lambda] {
    const auto& g = nodes_[o].grad;
    auto& gx = node_grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += -lambda * g[i];
  });
  return o;
}

void Tape::backward(Id root) {
  if (backward_done_) throw InvalidArgument("backward: tape already consumed");
  if (nodes_.at(root).value.numel() != 1) {
    throw InvalidArgument("backward: root must be scalar");
  }
  backward_done_ = true;
  node_grad(root)[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!nodes_[it->out].grad.empty()) it->backward();
  }
  for (auto& [param, id] : leaf_ids_) {
    auto& n = nodes_[id];
    if (n.grad.empty()) continue;
    auto& g = n.param->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  }
}

void sgd_step(const std::vector<Tensor*>& params, double lr) {
  if (!(lr > 0.0)) throw InvalidArgument("sgd_step: lr must be positive");
  for (Tensor* p : params) {
    if (p->grad.size() != p->values.size()) {
      throw InvalidArgument("sgd_step: parameter missing gradient");
    }
  }
  for (Tensor* p : params) {
    for (std::size_t i = 0; i < p->values.size(); ++i) {
      p->values[i] -= lr * p->grad[i];
    }
    p->grad.clear();
  }
}

double grad_check(const ScalarGraphBuilder& build, const Tensor& point, double step,
                  const std::vector<std::size_t>& skip) {
  if (!(step > 0.0)) throw InvalidArgument("grad_check: step must be positive");

  Tensor x = point;
  x.requires_grad = true;
  x.zero_grad();
  {
    Tape tape;
    Tape::Id in = tape.leaf(&x);
    Tape::Id out = build(tape, in);
    tape.backward(out);
  }
  const std::vector<double> analytic = x.grad;

  auto eval = [&](const Tensor& p) {
    Tape tape;
    Tape::Id out = build(tape, tape.constant(p));
    const Tensor& v = tape.value(out);
    if (v.numel() != 1) throw InvalidArgument("grad_check: function is not scalar");
    if (!std::isfinite(v.values[0])) throw InvalidArgument("grad_check: non-finite value");
    return v.values[0];
  };

  double max_err = 0.0;
  Tensor probe = point;
  probe.requires_grad = false;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    if (std::find(skip.begin(), skip.end(), i) != skip.end()) continue;
    const double orig = probe.values[i];
    probe.values[i] = orig + step;
    const double up = eval(probe);
    probe.values[i] = orig - step;
    const double down = eval(probe);
    probe.values[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    if (!std::isfinite(numeric)) throw InvalidArgument("grad_check: non-finite difference");
    const double err = std::abs(analytic[i] - numeric) /
                       std::max(1.0, std::abs(analytic[i]));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

namespace {

constexpr char kCheckpointMagic[4] = {'A', 'D', 'D', 'L'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("checkpoint: truncated stream");
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& out,
                      const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  out.write(kCheckpointMagic, 4);
  write_pod(out, kCheckpointVersion);
  write_pod(out, static_cast<std::uint64_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    write_pod(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(out, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t d : t->shape) write_pod(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t->values.data()),
              static_cast<std::streamsize>(t->values.size() * sizeof(double)));
  }
  if (!out) throw IoError("checkpoint: write failed");
}

std::vector<std::pair<std::string, Tensor>> read_checkpoint(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw IoError("checkpoint: bad magic");
  }
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = read_pod<std::uint64_t>(in);
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = read_pod<std::uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = read_pod<std::uint32_t>(in);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(read_pod<std::uint64_t>(in));
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.values.data()),
            static_cast<std::streamsize>(t.values.size() * sizeof(double)));
    if (!in) throw IoError("checkpoint: truncated tensor " + name);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace dynloc
