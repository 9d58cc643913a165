#include "advseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace advseg {
namespace {

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using CMap = Eigen::Map<const ArrayX<Scalar>>;

template <typename Scalar>
using MMap = Eigen::Map<ArrayX<Scalar>>;

template <typename Scalar>
Graph<Scalar>& graph_of(const Var<Scalar>& v) {
  if (!v.valid()) throw Error("op applied to an unbound Var");
  return *v.graph();
}

template <typename Scalar>
void same_graph(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.graph() != b.graph()) throw Error("op inputs belong to different graphs");
}

// Length of the flat input-strided window that covers every valid output
// position of a k^3 valid conv: out(x,y,z) lives at x*Y*Z + y*Z + z.
Index conv_span(const FmDims& in, const Extent3& out) {
  return (out[0] - 1) * in.y * in.z + (out[1] - 1) * in.z + out[2];
}

}  // namespace

template <typename Scalar>
Var<Scalar> conv3d_valid(const Var<Scalar>& input, const Var<Scalar>& kernels, const Var<Scalar>& bias) {
  same_graph(input, kernels);
  same_graph(input, bias);
  Graph<Scalar>& g = graph_of(input);
  const FmDims in = FmDims::of(input.shape());
  const Shape& ks = kernels.shape();
  if (ks.size() != 5 || ks[2] != ks[3] || ks[3] != ks[4]) {
    throw ShapeError("conv3d_valid: kernels must be [C_out,C_in,k,k,k], got " + to_string(ks));
  }
  const Index co_n = ks[0], k = ks[2], k3 = k * k * k;
  if (ks[1] != in.c) {
    throw ShapeError("conv3d_valid: kernel expects " + std::to_string(ks[1]) + " input channels, input has " +
                     std::to_string(in.c));
  }
  if (bias.shape() != Shape{co_n}) {
    throw ShapeError("conv3d_valid: bias must be [" + std::to_string(co_n) + "], got " + to_string(bias.shape()));
  }
  if (in.x < k || in.y < k || in.z < k) {
    throw ShapeError("conv3d_valid: spatial extent " + to_string(in.extent()) + " smaller than kernel " +
                     std::to_string(k));
  }
  const Extent3 oe{in.x - k + 1, in.y - k + 1, in.z - k + 1};
  const Index yz = in.y * in.z, vin = in.spatial(), vout = oe[0] * oe[1] * oe[2];
  const Index span = conv_span(in, oe);

  std::vector<Index> offsets;
  offsets.reserve(static_cast<std::size_t>(k3));
  for (Index a = 0; a < k; ++a)
    for (Index b = 0; b < k; ++b)
      for (Index c = 0; c < k; ++c) offsets.push_back(a * yz + b * in.z + c);

  Tensor<Scalar> out(in.with(co_n, oe));
  const Scalar* x = input.value().data();
  const Scalar* w = kernels.value().data();
  const Scalar* bv = bias.value().data();
  ArrayX<Scalar> acc(span);
  for (Index n = 0; n < in.n; ++n) {
    for (Index co = 0; co < co_n; ++co) {
      acc.setConstant(bv[co]);
      for (Index ci = 0; ci < in.c; ++ci) {
        const Scalar* src = x + (n * in.c + ci) * vin;
        const Scalar* wk = w + (co * in.c + ci) * k3;
        for (Index t = 0; t < k3; ++t) acc += wk[t] * CMap<Scalar>(src + offsets[t], span);
      }
      Scalar* dst = out.data() + (n * co_n + co) * vout;
      for (Index ox = 0; ox < oe[0]; ++ox)
        for (Index oy = 0; oy < oe[1]; ++oy)
          std::copy_n(acc.data() + ox * yz + oy * in.z, oe[2], dst + (ox * oe[1] + oy) * oe[2]);
    }
  }

  auto backward = [in, oe, co_n, k3, yz, vin, vout, span, offsets](Graph<Scalar>& gr, Index self) {
    const auto& ids = gr.inputs(self);
    const Index xi = ids[0], wi = ids[1], bi = ids[2];
    const Scalar* dy = gr.out_grad(self).data();
    const Scalar* x = gr.value(xi).data();
    const Scalar* w = gr.value(wi).data();
    const bool need_x = gr.requires_grad(xi), need_w = gr.requires_grad(wi), need_b = gr.requires_grad(bi);
    Scalar* dx = need_x ? gr.grad_buffer(xi).data() : nullptr;
    Scalar* dw = need_w ? gr.grad_buffer(wi).data() : nullptr;
    Scalar* db = need_b ? gr.grad_buffer(bi).data() : nullptr;
    ArrayX<Scalar> dacc = ArrayX<Scalar>::Zero(span);
    for (Index n = 0; n < in.n; ++n) {
      for (Index co = 0; co < co_n; ++co) {
        const Scalar* dyc = dy + (n * co_n + co) * vout;
        for (Index ox = 0; ox < oe[0]; ++ox)
          for (Index oy = 0; oy < oe[1]; ++oy)
            std::copy_n(dyc + (ox * oe[1] + oy) * oe[2], oe[2], dacc.data() + ox * yz + oy * in.z);
        if (db) db[co] += CMap<Scalar>(dyc, vout).sum();
        for (Index ci = 0; ci < in.c; ++ci) {
          const Index base = (n * in.c + ci) * vin;
          const Scalar* wk = w + (co * in.c + ci) * k3;
          for (Index t = 0; t < k3; ++t) {
            if (dw) dw[(co * in.c + ci) * k3 + t] += (dacc * CMap<Scalar>(x + base + offsets[t], span)).sum();
            if (dx) MMap<Scalar>(dx + base + offsets[t], span) += wk[t] * dacc;
          }
        }
      }
    }
  };
  return g.record("conv3d_valid", std::move(out), {input.id(), kernels.id(), bias.id()}, backward);
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& x, Scalar slope) {
  if (!(slope >= Scalar(0) && slope < Scalar(1))) throw Error("leaky_relu: slope must lie in [0,1)");
  Graph<Scalar>& g = graph_of(x);
  const auto& xv = x.value().array();
  Tensor<Scalar> out(x.shape(), (xv >= Scalar(0)).select(xv, slope * xv));
  auto backward = [slope](Graph<Scalar>& gr, Index self) {
    const Index xi = gr.inputs(self)[0];
    const auto& xv = gr.value(xi).array();
    gr.grad_buffer(xi).array() += (xv > Scalar(0)).select(gr.out_grad(self).array(), slope * gr.out_grad(self).array());
  };
  return g.record("leaky_relu", std::move(out), {x.id()}, backward);
}

template <typename Scalar>
Var<Scalar> softmax_xent_mean(const Var<Scalar>& logits, std::span<const std::int32_t> targets) {
  Graph<Scalar>& g = graph_of(logits);
  const FmDims d = FmDims::of(logits.shape());
  const Index v = d.spatial(), count = d.n * v;
  if (static_cast<Index>(targets.size()) != count) {
    throw ShapeError("softmax_xent_mean: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(count) + " voxels");
  }
  for (auto t : targets) {
    if (t < 0 || t >= d.c) {
      throw Error("softmax_xent_mean: label " + std::to_string(t) + " outside [0," + std::to_string(d.c) + ")");
    }
  }
  const Scalar* z = logits.value().data();
  // Softmax is kept for the adjoint.
  Tensor<Scalar> prob(logits.shape());
  double total = 0.0;
  for (Index n = 0; n < d.n; ++n) {
    for (Index i = 0; i < v; ++i) {
      const Scalar* zi = z + n * d.c * v + i;
      Scalar* pi = prob.data() + n * d.c * v + i;
      Scalar m = zi[0];
      for (Index c = 1; c < d.c; ++c) m = std::max(m, zi[c * v]);
      Scalar s = 0;
      for (Index c = 0; c < d.c; ++c) s += std::exp(zi[c * v] - m);
      for (Index c = 0; c < d.c; ++c) pi[c * v] = std::exp(zi[c * v] - m) / s;
      const std::int32_t t = targets[static_cast<std::size_t>(n * v + i)];
      total += static_cast<double>(m + std::log(s) - zi[t * v]);
    }
  }
  Tensor<Scalar> out = Tensor<Scalar>::constant({}, static_cast<Scalar>(total / static_cast<double>(count)));
  std::vector<std::int32_t> labels(targets.begin(), targets.end());
  auto backward = [d, v, count, prob = std::move(prob), labels = std::move(labels)](Graph<Scalar>& gr, Index self) {
    const Index li = gr.inputs(self)[0];
    const Scalar scale = gr.out_grad(self)[0] / static_cast<Scalar>(count);
    Scalar* dz = gr.grad_buffer(li).data();
    for (Index n = 0; n < d.n; ++n) {
      for (Index i = 0; i < v; ++i) {
        const Index base = n * d.c * v + i;
        const std::int32_t t = labels[static_cast<std::size_t>(n * v + i)];
        for (Index c = 0; c < d.c; ++c) {
          dz[base + c * v] += scale * (prob[base + c * v] - (c == t ? Scalar(1) : Scalar(0)));
        }
      }
    }
  };
  return g.record("softmax_xent_mean", std::move(out), {logits.id()}, std::move(backward));
}

template <typename Scalar>
Var<Scalar> upsample_repeat(const Var<Scalar>& fm, Index factor) {
  if (factor < 1) throw Error("upsample_repeat: factor must be >= 1");
  Graph<Scalar>& g = graph_of(fm);
  const FmDims d = FmDims::of(fm.shape());
  const Extent3 oe{d.x * factor, d.y * factor, d.z * factor};
  const Index vin = d.spatial(), vout = oe[0] * oe[1] * oe[2];
  // Output voxel -> source voxel, shared by forward and adjoint.
  std::vector<Index> src(static_cast<std::size_t>(vout));
  for (Index x = 0; x < oe[0]; ++x)
    for (Index y = 0; y < oe[1]; ++y)
      for (Index z = 0; z < oe[2]; ++z)
        src[static_cast<std::size_t>((x * oe[1] + y) * oe[2] + z)] = ((x / factor) * d.y + y / factor) * d.z + z / factor;
  Tensor<Scalar> out(d.with(d.c, oe));
  const Scalar* in = fm.value().data();
  for (Index m = 0; m < d.n * d.c; ++m)
    for (Index o = 0; o < vout; ++o) out[m * vout + o] = in[m * vin + src[static_cast<std::size_t>(o)]];
  auto backward = [d, vin, vout, src = std::move(src)](Graph<Scalar>& gr, Index self) {
    const Index xi = gr.inputs(self)[0];
    const Scalar* dy = gr.out_grad(self).data();
    Scalar* dx = gr.grad_buffer(xi).data();
    for (Index m = 0; m < d.n * d.c; ++m)
      for (Index o = 0; o < vout; ++o) dx[m * vin + src[static_cast<std::size_t>(o)]] += dy[m * vout + o];
  };
  return g.record("upsample_repeat", std::move(out), {fm.id()}, std::move(backward));
}

template <typename Scalar>
Var<Scalar> crop(const Var<Scalar>& fm, const Extent3& offset, const Extent3& extent) {
  Graph<Scalar>& g = graph_of(fm);
  const FmDims d = FmDims::of(fm.shape());
  const Extent3 se = d.extent();
  for (int a = 0; a < 3; ++a) {
    if (offset[a] < 0 || extent[a] < 0 || offset[a] + extent[a] > se[a]) {
      throw ShapeError("crop: window " + to_string(extent) + " at " + to_string(offset) + " exceeds extent " +
                       to_string(se));
    }
  }
  const Index vin = d.spatial(), vout = extent[0] * extent[1] * extent[2];
  auto for_rows = [=](auto&& fn) {
    for (Index m = 0; m < d.n * d.c; ++m)
      for (Index x = 0; x < extent[0]; ++x)
        for (Index y = 0; y < extent[1]; ++y)
          fn(m * vin + ((x + offset[0]) * d.y + y + offset[1]) * d.z + offset[2],
             m * vout + (x * extent[1] + y) * extent[2]);
  };
  Tensor<Scalar> out(d.with(d.c, extent));
  const Scalar* in = fm.value().data();
  for_rows([&](Index s, Index t) { std::copy_n(in + s, extent[2], out.data() + t); });
  auto backward = [for_rows, extent](Graph<Scalar>& gr, Index self) {
    const Index xi = gr.inputs(self)[0];
    const Scalar* dy = gr.out_grad(self).data();
    Scalar* dx = gr.grad_buffer(xi).data();
    for_rows([&](Index s, Index t) { MMap<Scalar>(dx + s, extent[2]) += CMap<Scalar>(dy + t, extent[2]); });
  };
  return g.record("crop", std::move(out), {fm.id()}, backward);
}

template <typename Scalar>
Var<Scalar> center_crop(const Var<Scalar>& fm, const Extent3& target) {
  const Extent3 se = FmDims::of(fm.shape()).extent();
  Extent3 offset{};
  for (int a = 0; a < 3; ++a) {
    if (target[a] > se[a]) {
      throw ShapeError("center_crop: target " + to_string(target) + " larger than source " + to_string(se));
    }
    offset[a] = crop_offset(se[a], target[a]);
  }
  return crop(fm, offset, target);
}

template <typename Scalar>
Var<Scalar> concat_channels(std::span<const Var<Scalar>> fms) {
  if (fms.empty()) throw Error("concat_channels: empty input list");
  Graph<Scalar>& g = graph_of(fms[0]);
  const FmDims d0 = FmDims::of(fms[0].shape());
  std::vector<Index> ids, channels;
  Index total = 0;
  for (const auto& f : fms) {
    same_graph(fms[0], f);
    const FmDims d = FmDims::of(f.shape());
    if (d.extent() != d0.extent() || d.n != d0.n || d.batched != d0.batched) {
      throw ShapeError("concat_channels: shape " + to_string(f.shape()) + " does not match " +
                       to_string(fms[0].shape()));
    }
    ids.push_back(f.id());
    channels.push_back(d.c);
    total += d.c;
  }
  const Index v = d0.spatial();
  Tensor<Scalar> out(d0.with(total, d0.extent()));
  for (Index n = 0; n < d0.n; ++n) {
    Index at = 0;
    for (std::size_t i = 0; i < fms.size(); ++i) {
      const Index len = channels[i] * v;
      std::copy_n(fms[i].value().data() + n * len, len, out.data() + (n * total + at) * v);
      at += channels[i];
    }
  }
  auto backward = [channels, total, v, batch = d0.n](Graph<Scalar>& gr, Index self) {
    const Scalar* dy = gr.out_grad(self).data();
    const auto& ids = gr.inputs(self);
    Index at = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const Index len = channels[i] * v;
      if (gr.requires_grad(ids[i])) {
        Scalar* dx = gr.grad_buffer(ids[i]).data();
        for (Index n = 0; n < batch; ++n) MMap<Scalar>(dx + n * len, len) += CMap<Scalar>(dy + (n * total + at) * v, len);
      }
      at += channels[i];
    }
  };
  return g.record("concat_channels", std::move(out), std::move(ids), backward);
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Graph<Scalar>& g = graph_of(x);
  auto backward = [](Graph<Scalar>& gr, Index self) {
    const Index xi = gr.inputs(self)[0];
    gr.grad_buffer(xi).array() += gr.out_grad(self)[0];
  };
  return g.record("sum", Tensor<Scalar>::constant({}, x.value().array().sum()), {x.id()}, backward);
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
  same_graph(a, b);
  if (a.shape() != b.shape()) throw ShapeError("add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  auto backward = [](Graph<Scalar>& gr, Index self) {
    for (Index i : gr.inputs(self))
      if (gr.requires_grad(i)) gr.grad_buffer(i).array() += gr.out_grad(self).array();
  };
  return graph_of(a).record("add", Tensor<Scalar>(a.shape(), a.value().array() + b.value().array()),
                            {a.id(), b.id()}, backward);
}

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
  same_graph(a, b);
  if (a.shape() != b.shape()) throw ShapeError("sub: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  auto backward = [](Graph<Scalar>& gr, Index self) {
    const auto& ids = gr.inputs(self);
    if (gr.requires_grad(ids[0])) gr.grad_buffer(ids[0]).array() += gr.out_grad(self).array();
    if (gr.requires_grad(ids[1])) gr.grad_buffer(ids[1]).array() -= gr.out_grad(self).array();
  };
  return graph_of(a).record("sub", Tensor<Scalar>(a.shape(), a.value().array() - b.value().array()),
                            {a.id(), b.id()}, backward);
}

template <typename Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& x) {
  auto backward = [s](Graph<Scalar>& gr, Index self) {
    gr.grad_buffer(gr.inputs(self)[0]).array() += s * gr.out_grad(self).array();
  };
  return graph_of(x).record("scale", Tensor<Scalar>(x.shape(), s * x.value().array()), {x.id()}, backward);
}

template <typename Scalar>
Tensor<Scalar> softmax_channels(const Tensor<Scalar>& logits) {
  const FmDims d = FmDims::of(logits.shape());
  const Index v = d.spatial();
  Tensor<Scalar> prob(logits.shape());
  for (Index n = 0; n < d.n; ++n) {
    for (Index i = 0; i < v; ++i) {
      const Index base = n * d.c * v + i;
      Scalar m = logits[base];
      for (Index c = 1; c < d.c; ++c) m = std::max(m, logits[base + c * v]);
      Scalar s = 0;
      for (Index c = 0; c < d.c; ++c) s += std::exp(logits[base + c * v] - m);
      for (Index c = 0; c < d.c; ++c) prob[base + c * v] = std::exp(logits[base + c * v] - m) / s;
    }
  }
  return prob;
}

template <typename Scalar>
std::vector<std::int32_t> argmax_channels(const Tensor<Scalar>& logits) {
  const FmDims d = FmDims::of(logits.shape());
  const Index v = d.spatial();
  std::vector<std::int32_t> out(static_cast<std::size_t>(d.n * v));
  for (Index n = 0; n < d.n; ++n) {
    for (Index i = 0; i < v; ++i) {
      const Index base = n * d.c * v + i;
      std::int32_t best = 0;
      for (Index c = 1; c < d.c; ++c)
        if (logits[base + c * v] > logits[base + best * v]) best = static_cast<std::int32_t>(c);
      out[static_cast<std::size_t>(n * v + i)] = best;
    }
  }
  return out;
}

#define ADVSEG_INSTANTIATE_OPS(S)                                                                 \
  template Var<S> conv3d_valid(const Var<S>&, const Var<S>&, const Var<S>&);                      \
  template Var<S> leaky_relu(const Var<S>&, S);                                                   \
  template Var<S> softmax_xent_mean(const Var<S>&, std::span<const std::int32_t>);                \
  template Var<S> upsample_repeat(const Var<S>&, Index);                                          \
  template Var<S> crop(const Var<S>&, const Extent3&, const Extent3&);                            \
  template Var<S> center_crop(const Var<S>&, const Extent3&);                                     \
  template Var<S> concat_channels(std::span<const Var<S>>);                                       \
  template Var<S> sum(const Var<S>&);                                                             \
  template Var<S> operator+(const Var<S>&, const Var<S>&);                                        \
  template Var<S> operator-(const Var<S>&, const Var<S>&);                                        \
  template Var<S> operator*(S, const Var<S>&);                                                    \
  template Tensor<S> softmax_channels(const Tensor<S>&);                                          \
  template std::vector<std::int32_t> argmax_channels(const Tensor<S>&);

ADVSEG_INSTANTIATE_OPS(float)
ADVSEG_INSTANTIATE_OPS(double)

#undef ADVSEG_INSTANTIATE_OPS

}  // namespace advseg
