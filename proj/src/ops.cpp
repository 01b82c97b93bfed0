#include "cseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace cseg::ops {

namespace {

// [N,C,H,W] view over a rank-3 or rank-4 spatial tensor.
struct Layout {
  std::size_t n, c, h, w;
  std::size_t plane() const { return h * w; }
};

Layout spatial_layout(const Tensor& t, const char* op) {
  if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2)};
  if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
  throw std::invalid_argument(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + shape_string(t.shape()));
}

Shape spatial_shape(std::size_t rank, const Layout& l) {
  if (rank == 3) return {l.c, l.h, l.w};
  return {l.n, l.c, l.h, l.w};
}

// Index range [lo, hi) of an extent-n axis for which i + d stays in range.
inline void valid_range(std::ptrdiff_t n, std::ptrdiff_t d, std::ptrdiff_t& lo, std::ptrdiff_t& hi) {
  lo = std::max<std::ptrdiff_t>(0, -d);
  hi = std::min<std::ptrdiff_t>(n, n - d);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
}

struct ConvGeometry {
  Layout in;
  std::size_t cout, kh, kw;
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Unfolds one [C,H,W] map into columns [C*kH*kW, H*W] with zero padding.
void im2col(const ConvGeometry& g, const double* src, double* cols) {
  const auto H = static_cast<std::ptrdiff_t>(g.in.h), W = static_cast<std::ptrdiff_t>(g.in.w);
  const auto KH = static_cast<std::ptrdiff_t>(g.kh), KW = static_cast<std::ptrdiff_t>(g.kw);
  const std::size_t plane = g.in.plane();
  for (std::size_t c = 0; c < g.in.c; ++c) {
    const double* sp = src + c * plane;
    for (std::ptrdiff_t ky = 0; ky < KH; ++ky) {
      const std::ptrdiff_t dy = ky - KH / 2;
      for (std::ptrdiff_t kx = 0; kx < KW; ++kx) {
        const std::ptrdiff_t dx = kx - KW / 2;
        double* row = cols + ((c * g.kh + static_cast<std::size_t>(ky)) * g.kw + static_cast<std::size_t>(kx)) * plane;
        std::fill(row, row + plane, 0.0);
        std::ptrdiff_t y0, y1, x0, x1;
        valid_range(H, dy, y0, y1);
        valid_range(W, dx, x0, x1);
        for (std::ptrdiff_t y = y0; y < y1; ++y) {
          std::copy(sp + (y + dy) * W + dx + x0, sp + (y + dy) * W + dx + x1, row + y * W + x0);
        }
      }
    }
  }
}

// Adjoint of im2col: scatters columns back onto a [C,H,W] accumulator.
void col2im_add(const ConvGeometry& g, const double* cols, double* dst) {
  const auto H = static_cast<std::ptrdiff_t>(g.in.h), W = static_cast<std::ptrdiff_t>(g.in.w);
  const auto KH = static_cast<std::ptrdiff_t>(g.kh), KW = static_cast<std::ptrdiff_t>(g.kw);
  const std::size_t plane = g.in.plane();
  for (std::size_t c = 0; c < g.in.c; ++c) {
    double* dp = dst + c * plane;
    for (std::ptrdiff_t ky = 0; ky < KH; ++ky) {
      const std::ptrdiff_t dy = ky - KH / 2;
      for (std::ptrdiff_t kx = 0; kx < KW; ++kx) {
        const std::ptrdiff_t dx = kx - KW / 2;
        const double* row =
            cols + ((c * g.kh + static_cast<std::size_t>(ky)) * g.kw + static_cast<std::size_t>(kx)) * plane;
        std::ptrdiff_t y0, y1, x0, x1;
        valid_range(H, dy, y0, y1);
        valid_range(W, dx, x0, x1);
        for (std::ptrdiff_t y = y0; y < y1; ++y) {
          double* __restrict d = dp + (y + dy) * W + dx;
          const double* __restrict r = row + y * W;
          for (std::ptrdiff_t i = x0; i < x1; ++i) d[i] += r[i];
        }
      }
    }
  }
}

void conv_forward(const ConvGeometry& g, const double* x, const double* k, const double* b, double* out) {
  const auto plane = static_cast<Eigen::Index>(g.in.plane());
  const auto patch = static_cast<Eigen::Index>(g.in.c * g.kh * g.kw);
  const auto cout = static_cast<Eigen::Index>(g.cout);
  std::vector<double> cols(static_cast<std::size_t>(patch * plane));
  ConstMatrixMap kmat(k, cout, patch);
  ConstMatrixMap cmat(cols.data(), patch, plane);
  for (std::size_t n = 0; n < g.in.n; ++n) {
    im2col(g, x + n * g.in.c * g.in.plane(), cols.data());
    MatrixMap omat(out + n * g.cout * g.in.plane(), cout, plane);
    omat.noalias() = kmat * cmat;
    for (Eigen::Index co = 0; co < cout; ++co) omat.row(co).array() += b[co];
  }
}

void conv_backward(const ConvGeometry& g, const double* x, const double* k, const double* gout, double* gx,
                   double* gk, double* gb) {
  const auto plane = static_cast<Eigen::Index>(g.in.plane());
  const auto patch = static_cast<Eigen::Index>(g.in.c * g.kh * g.kw);
  const auto cout = static_cast<Eigen::Index>(g.cout);
  std::vector<double> cols(static_cast<std::size_t>(patch * plane));
  ConstMatrixMap kmat(k, cout, patch);
  MatrixMap cmat(cols.data(), patch, plane);
  for (std::size_t n = 0; n < g.in.n; ++n) {
    ConstMatrixMap gomat(gout + n * g.cout * g.in.plane(), cout, plane);
    if (gb) {
      // Plain loop: Eigen's vectorised sum peels by address, so its order varies.
      const double* go = gout + n * g.cout * g.in.plane();
      for (std::size_t co = 0; co < g.cout; ++co) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.in.plane(); ++i) acc += go[co * g.in.plane() + i];
        gb[co] += acc;
      }
    }
    if (gk) {
      im2col(g, x + n * g.in.c * g.in.plane(), cols.data());
      MatrixMap gkmat(gk, cout, patch);
      gkmat.noalias() += gomat * cmat.transpose();
    }
    if (gx) {
      cmat.noalias() = kmat.transpose() * gomat;
      col2im_add(g, cols.data(), gx + n * g.in.c * g.in.plane());
    }
  }
}

}  // namespace

Var conv2d(GradTape& tape, Var input, Var kernels, Var bias) {
  const Tensor& x = tape.value(input);
  const Tensor& k = tape.value(kernels);
  const Tensor& b = tape.value(bias);
  const Layout in = spatial_layout(x, "conv2d");
  if (k.rank() != 4) {
    throw std::invalid_argument("conv2d: kernels must be [Cout,Cin,kH,kW], got " + shape_string(k.shape()));
  }
  const ConvGeometry g{in, k.dim(0), k.dim(2), k.dim(3)};
  if (k.dim(1) != in.c) {
    throw std::invalid_argument("conv2d: channel axis mismatch, input has " + std::to_string(in.c) +
                                " channels but kernels expect " + std::to_string(k.dim(1)));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) {
    throw std::invalid_argument("conv2d: kernel extents must be odd, got " + std::to_string(g.kh) + "x" +
                                std::to_string(g.kw));
  }
  if (b.rank() != 1 || b.dim(0) != g.cout) {
    throw std::invalid_argument("conv2d: bias axis mismatch, expected [" + std::to_string(g.cout) + "], got " +
                                shape_string(b.shape()));
  }

  Tensor out(spatial_shape(x.rank(), Layout{in.n, g.cout, in.h, in.w}));
  conv_forward(g, x.data(), k.data(), b.data(), out.data());

  return tape.record(std::move(out), {input, kernels, bias},
                     [g, input, kernels](const GradTape& t, const Tensor&, const Tensor& gout, std::span<Tensor* const> grad) {
                       conv_backward(g, t.value(input).data(), t.value(kernels).data(), gout.data(),
                                     grad[0] ? grad[0]->data() : nullptr, grad[1] ? grad[1]->data() : nullptr,
                                     grad[2] ? grad[2]->data() : nullptr);
                     });
}

Var relu(GradTape& tape, Var input) {
  const Tensor& x = tape.value(input);
  Tensor out(x.shape());
  // NaN passes through so that bad inputs surface in the loss.
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] < 0.0 ? 0.0 : x[i];
  return tape.record(std::move(out), {input},
                     [input](const GradTape& t, const Tensor&, const Tensor& gout, std::span<Tensor* const> grad) {
                       const Tensor& x = t.value(input);
                       Tensor& gx = *grad[0];
                       for (std::size_t i = 0; i < x.size(); ++i) {
                         if (x[i] > 0.0) gx[i] += gout[i];
                       }
                     });
}

Var maxpool2(GradTape& tape, Var input) {
  const Tensor& x = tape.value(input);
  const Layout in = spatial_layout(x, "maxpool2");
  if (in.h % 2 != 0 || in.w % 2 != 0) {
    throw std::invalid_argument("maxpool2: spatial extents must be even, got " + std::to_string(in.h) + "x" +
                                std::to_string(in.w));
  }
  const Layout out_l{in.n, in.c, in.h / 2, in.w / 2};
  Tensor out(spatial_shape(x.rank(), out_l));
  // Flat input index of each output's winning element.
  std::vector<std::size_t> argmax(out.size());
  const std::size_t planes = in.n * in.c;
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data() + p * in.plane();
    for (std::size_t y = 0; y < out_l.h; ++y) {
      for (std::size_t xx = 0; xx < out_l.w; ++xx) {
        const std::size_t base = 2 * y * in.w + 2 * xx;
        const std::size_t cand[4] = {base, base + 1, base + in.w, base + in.w + 1};
        std::size_t best = cand[0];
        for (int j = 1; j < 4; ++j) {
          if (src[cand[j]] > src[best]) best = cand[j];
        }
        const std::size_t o = p * out_l.plane() + y * out_l.w + xx;
        out[o] = src[best];
        argmax[o] = p * in.plane() + best;
      }
    }
  }
  return tape.record(std::move(out), {input},
                     [argmax = std::move(argmax)](const GradTape&, const Tensor&, const Tensor& gout, std::span<Tensor* const> grad) {
                       Tensor& gx = *grad[0];
                       for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += gout[o];
                     });
}

Var upsample2(GradTape& tape, Var input) {
  const Tensor& x = tape.value(input);
  const Layout in = spatial_layout(x, "upsample2");
  const Layout out_l{in.n, in.c, in.h * 2, in.w * 2};
  Tensor out(spatial_shape(x.rank(), out_l));
  const std::size_t planes = in.n * in.c;
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data() + p * in.plane();
    double* dst = out.data() + p * out_l.plane();
    for (std::size_t y = 0; y < out_l.h; ++y) {
      for (std::size_t xx = 0; xx < out_l.w; ++xx) dst[y * out_l.w + xx] = src[(y / 2) * in.w + xx / 2];
    }
  }
  return tape.record(std::move(out), {input},
                     [in, out_l](const GradTape&, const Tensor&, const Tensor& gout, std::span<Tensor* const> grad) {
                       Tensor& gx = *grad[0];
                       const std::size_t planes = in.n * in.c;
                       for (std::size_t p = 0; p < planes; ++p) {
                         const double* src = gout.data() + p * out_l.plane();
                         double* dst = gx.data() + p * in.plane();
                         for (std::size_t y = 0; y < out_l.h; ++y) {
                           for (std::size_t xx = 0; xx < out_l.w; ++xx) {
                             dst[(y / 2) * in.w + xx / 2] += src[y * out_l.w + xx];
                           }
                         }
                       }
                     });
}

Var concat_channels(GradTape& tape, Var a, Var b) {
  const Tensor& ta = tape.value(a);
  const Tensor& tb = tape.value(b);
  if (tb.empty()) return tape.record(ta, {a}, [](const GradTape&, const Tensor&, const Tensor& gout, std::span<Tensor* const> grad) {
    Tensor& ga = *grad[0];
    for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
  });
  if (ta.empty()) return tape.record(tb, {b}, [](const GradTape&, const Tensor&, const Tensor& gout, std::span<Tensor* const> grad) {
    Tensor& gb = *grad[0];
    for (std::size_t i = 0; i < gout.size(); ++i) gb[i] += gout[i];
  });

  const Layout la = spatial_layout(ta, "concat_channels");
  const Layout lb = spatial_layout(tb, "concat_channels");
  if (ta.rank() != tb.rank() || la.n != lb.n) {
    throw std::invalid_argument("concat_channels: batch axis mismatch " + shape_string(ta.shape()) + " vs " +
                                shape_string(tb.shape()));
  }
  if (la.h != lb.h || la.w != lb.w) {
    throw std::invalid_argument("concat_channels: spatial axes mismatch " + shape_string(ta.shape()) + " vs " +
                                shape_string(tb.shape()));
  }
  const Layout out_l{la.n, la.c + lb.c, la.h, la.w};
  Tensor out(spatial_shape(ta.rank(), out_l));
  const std::size_t sa = la.c * la.plane(), sb = lb.c * lb.plane();
  for (std::size_t n = 0; n < la.n; ++n) {
    std::copy_n(ta.data() + n * sa, sa, out.data() + n * (sa + sb));
    std::copy_n(tb.data() + n * sb, sb, out.data() + n * (sa + sb) + sa);
  }
  return tape.record(std::move(out), {a, b},
                     [n = la.n, sa, sb](const GradTape&, const Tensor&, const Tensor& gout, std::span<Tensor* const> grad) {
                       for (std::size_t i = 0; i < n; ++i) {
                         const double* src = gout.data() + i * (sa + sb);
                         if (grad[0]) {
                           double* dst = grad[0]->data() + i * sa;
                           for (std::size_t j = 0; j < sa; ++j) dst[j] += src[j];
                         }
                         if (grad[1]) {
                           double* dst = grad[1]->data() + i * sb;
                           for (std::size_t j = 0; j < sb; ++j) dst[j] += src[sa + j];
                         }
                       }
                     });
}

double sigmoid_value(double z) {
  // Largest double below 1 and smallest normal double keep the output inside (0,1).
  constexpr double kHi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
  constexpr double kLo = std::numeric_limits<double>::min();
  double s;
  if (z >= 0.0) {
    s = 1.0 / (1.0 + std::exp(-z));
  } else {
    const double e = std::exp(z);
    s = e / (1.0 + e);
  }
  return std::clamp(s, kLo, kHi);
}

Var sigmoid(GradTape& tape, Var input) {
  const Tensor& x = tape.value(input);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid_value(x[i]);
  return tape.record(std::move(out), {input},
                     [](const GradTape&, const Tensor& s, const Tensor& gout, std::span<Tensor* const> grad) {
                       Tensor& gx = *grad[0];
                       for (std::size_t i = 0; i < s.size(); ++i) gx[i] += gout[i] * s[i] * (1.0 - s[i]);
                     });
}

Var dropout(GradTape& tape, Var input, double rate, Rng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout: rate must lie in [0,1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return input;
  const Tensor& x = tape.value(input);
  const double scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (auto& m : mask) m = rng.uniform() < rate ? 0.0 : scale;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * mask[i];
  return tape.record(std::move(out), {input},
                     [mask = std::move(mask)](const GradTape&, const Tensor&, const Tensor& gout, std::span<Tensor* const> grad) {
                       Tensor& gx = *grad[0];
                       for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += gout[i] * mask[i];
                     });
}

Var mul(GradTape& tape, Var a, Var b) {
  const Tensor& ta = tape.value(a);
  const Tensor& tb = tape.value(b);
  check_same_shape(ta, tb, "mul");
  Tensor out(ta.shape());
  for (std::size_t i = 0; i < ta.size(); ++i) out[i] = ta[i] * tb[i];
  return tape.record(std::move(out), {a, b},
                     [a, b](const GradTape& t, const Tensor&, const Tensor& gout, std::span<Tensor* const> grad) {
                       const Tensor& ta = t.value(a);
                       const Tensor& tb = t.value(b);
                       for (std::size_t i = 0; i < gout.size(); ++i) {
                         if (grad[0]) (*grad[0])[i] += gout[i] * tb[i];
                         if (grad[1]) (*grad[1])[i] += gout[i] * ta[i];
                       }
                     });
}

Var sum(GradTape& tape, Var input) {
  const Tensor& x = tape.value(input);
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return tape.record(Tensor::scalar(acc), {input},
                     [](const GradTape&, const Tensor&, const Tensor& gout, std::span<Tensor* const> grad) {
                       Tensor& gx = *grad[0];
                       const double g = gout[0];
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
                     });
}

}  // namespace cseg::ops
