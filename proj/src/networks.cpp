#include "advseg/networks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>

#include "advseg/rng.hpp"

namespace advseg {

void SegmenterSpec::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("segmenter spec: " + what); };
  if (in_channels < 1) fail("in_channels must be >= 1");
  if (classes < 2) fail("classes must be >= 2");
  if (static_cast<int>(pathway_fms.size()) != kPathwayLayers) fail("each pathway needs exactly 8 conv layers");
  if (hidden_fms.size() != 2) fail("exactly two hidden 1^3 layers (9 and 10) are required");
  for (int f : pathway_fms)
    if (f < 1) fail("feature-map counts must be >= 1");
  for (int f : hidden_fms)
    if (f < 1) fail("feature-map counts must be >= 1");
  if (downsample < 1) fail("downsample factor must be >= 1");
  if (!(slope >= 0.0 && slope < 1.0)) fail("activation slope must lie in [0,1)");
  const Index rf = receptive_field(*this);
  if (train_extent < rf || low_train_extent < rf) {
    fail("training extents must be >= the pathway receptive field " + std::to_string(rf));
  }
  if ((low_train_extent - rf + 1) * downsample < train_extent - rf + 1) {
    fail("upsampled context output is smaller than the normal-pathway output");
  }
}

void DiscriminatorSpec::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("discriminator spec: " + what); };
  if (fms.size() != 4) fail("exactly four conv layers are required");
  for (int f : fms)
    if (f < 1) fail("feature-map counts must be >= 1");
  if (kernel < 1) fail("kernel must be >= 1");
  if (domain_classes != 2) fail("domain_classes must be 2");
  if (!(slope >= 0.0 && slope < 1.0)) fail("activation slope must lie in [0,1)");
}

TapSet default_taps() { return parse_taps("L4,6,8,10"); }

std::string_view to_string(Pathway p) {
  switch (p) {
    case Pathway::normal: return "normal";
    case Pathway::low: return "low";
    case Pathway::fused: return "fused";
  }
  return "?";
}

Pathway pathway_from_string(std::string_view s) {
  if (s == "normal") return Pathway::normal;
  if (s == "low") return Pathway::low;
  if (s == "fused" || s == "post-fusion") return Pathway::fused;
  throw ConfigError("unknown pathway '" + std::string(s) + "'");
}

TapSet parse_taps(std::string_view text) {
  if (text.size() < 2 || (text[0] != 'L' && text[0] != 'l')) {
    throw ConfigError("tap list must look like L10 or L4,6,8,10, got '" + std::string(text) + "'");
  }
  std::string_view rest = text.substr(1);
  if (rest.size() >= 2 && rest.front() == '(' && rest.back() == ')') rest = rest.substr(1, rest.size() - 2);
  TapSet taps;
  while (!rest.empty()) {
    auto comma = rest.find(',');
    auto item = rest.substr(0, comma);
    int layer = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), layer);
    if (ec != std::errc() || ptr != item.data() + item.size()) {
      throw ConfigError("bad layer number '" + std::string(item) + "' in tap list '" + std::string(text) + "'");
    }
    if (layer >= 1 && layer <= kPathwayLayers) {
      taps.push_back({Pathway::normal, layer});
      taps.push_back({Pathway::low, layer});
    } else if (layer == kFusedFirstLayer || layer == kFusedLastLayer) {
      taps.push_back({Pathway::fused, layer});
    } else {
      throw ConfigError("tap layer " + std::to_string(layer) + " outside 1..10");
    }
    rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
  }
  validate_taps(taps);
  return taps;
}

std::string format_taps(const TapSet& taps) {
  std::vector<int> layers;
  for (const auto& t : taps)
    if (std::find(layers.begin(), layers.end(), t.layer) == layers.end()) layers.push_back(t.layer);
  std::string s = "L";
  for (std::size_t i = 0; i < layers.size(); ++i) s += (i ? "," : "") + std::to_string(layers[i]);
  return s;
}

void validate_taps(const TapSet& taps) {
  if (taps.empty()) throw ConfigError("tap set must contain at least one tap");
  for (std::size_t i = 0; i < taps.size(); ++i) {
    const auto& t = taps[i];
    const bool ok = t.pathway == Pathway::fused ? (t.layer == kFusedFirstLayer || t.layer == kFusedLastLayer)
                                                : (t.layer >= 1 && t.layer <= kPathwayLayers);
    if (!ok) {
      throw ConfigError("invalid tap (" + std::string(to_string(t.pathway)) + "," + std::to_string(t.layer) + ")");
    }
    for (std::size_t j = 0; j < i; ++j)
      if (taps[j] == t) throw ConfigError("duplicate tap in tap set");
  }
}

Index receptive_field(std::span<const Index> kernels) {
  Index rf = 1;
  for (Index k : kernels) rf += k - 1;
  return rf;
}

Index receptive_field(const DiscriminatorSpec& spec) {
  std::vector<Index> ks(spec.fms.size(), spec.kernel);
  ks.push_back(1);
  return receptive_field(ks);
}

Index receptive_field(const SegmenterSpec&) {
  std::vector<Index> ks(kPathwayLayers, kPathwayKernel);
  ks.insert(ks.end(), 3, 1);  // layers 9, 10 and the classifier
  return receptive_field(ks);
}

Index output_extent(const SegmenterSpec& spec, Index normal_extent) {
  return normal_extent - receptive_field(spec) + 1;
}

Index low_extent_for(const SegmenterSpec& spec, Index normal_extent, Index max_shift) {
  const Index out = output_extent(spec, normal_extent);
  const Index d = spec.downsample;
  if (out < 1) throw ShapeError("normal extent " + std::to_string(normal_extent) + " is below the receptive field");
  // An even surplus is impossible for even D with odd output; accept odd then.
  const bool parity_possible = !(d % 2 == 0 && out % 2 == 1);
  for (Index lo = (out + d - 1) / d;; ++lo) {
    const Index surplus = lo * d - out;
    if (surplus >= 2 * max_shift && (!parity_possible || surplus % 2 == 0)) {
      return lo + receptive_field(spec) - 1;
    }
  }
}

Index tap_channels(const SegmenterSpec& spec, const TapSet& taps) {
  Index c = 0;
  for (const auto& t : taps) {
    c += t.pathway == Pathway::fused ? spec.hidden_fms.at(static_cast<std::size_t>(t.layer - kFusedFirstLayer))
                                     : spec.pathway_fms.at(static_cast<std::size_t>(t.layer - 1));
  }
  return c;
}

Index tap_extent(const SegmenterSpec& spec, const TapPoint& tap, Index normal_extent, Index low_extent) {
  switch (tap.pathway) {
    case Pathway::normal: return normal_extent - tap.layer * (kPathwayKernel - 1);
    case Pathway::low: return low_extent - tap.layer * (kPathwayKernel - 1);
    case Pathway::fused: return normal_extent - kPathwayLayers * (kPathwayKernel - 1);
  }
  (void)spec;
  return 0;
}

namespace {

template <typename Scalar>
Tensor<Scalar> he_normal(Shape shape, Index fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar>
std::pair<std::size_t, std::size_t> add_conv(ParameterSet<Scalar>& params, const std::string& prefix, Index c_in,
                                             Index c_out, Index k, Rng& rng) {
  params.add(prefix + ".kernels", he_normal<Scalar>({c_out, c_in, k, k, k}, c_in * k * k * k, rng));
  params.add(prefix + ".bias", Tensor<Scalar>(Shape{c_out}));
  return {params.size() - 2, params.size() - 1};
}

}  // namespace

template <typename Scalar>
Segmenter<Scalar>::Segmenter(SegmenterSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng = make_stream(seed, streams::kSegmenterInit);
  auto build_pathway = [&](const std::string& name, std::vector<Layer>& layers) {
    Index c_in = spec_.in_channels;
    for (int l = 0; l < kPathwayLayers; ++l) {
      const Index c_out = spec_.pathway_fms[static_cast<std::size_t>(l)];
      auto [k, b] = add_conv(params_, "seg." + name + ".layer" + std::to_string(l + 1), c_in, c_out, kPathwayKernel, rng);
      layers.push_back({k, b});
      c_in = c_out;
    }
  };
  build_pathway("path_norm", normal_);
  build_pathway("path_low", low_);
  Index c_in = 2 * static_cast<Index>(spec_.pathway_fms.back());
  for (int h = 0; h < 2; ++h) {
    const Index c_out = spec_.hidden_fms[static_cast<std::size_t>(h)];
    auto [k, b] = add_conv(params_, "seg.fused.layer" + std::to_string(kFusedFirstLayer + h), c_in, c_out, 1, rng);
    hidden_.push_back({k, b});
    c_in = c_out;
  }
  auto [k, b] = add_conv(params_, std::string("seg.classifier"), c_in, Index(spec_.classes), 1, rng);
  classifier_ = {k, b};
}

template <typename Scalar>
Var<Scalar> Segmenter<Scalar>::apply(Graph<Scalar>& g, const Layer& layer, const Var<Scalar>& x, bool trainable,
                                     bool activate) {
  auto y = conv3d_valid(x, g.parameter(params_[layer.kernels], trainable), g.parameter(params_[layer.bias], trainable));
  return activate ? leaky_relu(y, static_cast<Scalar>(spec_.slope)) : y;
}

template <typename Scalar>
SegmenterOutputs<Scalar> Segmenter<Scalar>::forward(Graph<Scalar>& g, const Tensor<Scalar>& normal,
                                                    const Tensor<Scalar>& low, const TapSet& taps,
                                                    const ForwardOptions& options) {
  for (const auto& t : taps) {
    if (t.pathway == Pathway::fused ? (t.layer != kFusedFirstLayer && t.layer != kFusedLastLayer)
                                    : (t.layer < 1 || t.layer > kPathwayLayers)) {
      throw ConfigError("invalid tap layer " + std::to_string(t.layer));
    }
  }
  int need_normal = 0, need_low = 0;
  bool need_fused = options.logits;
  for (const auto& t : taps) {
    if (t.pathway == Pathway::normal) need_normal = std::max(need_normal, t.layer);
    if (t.pathway == Pathway::low) need_low = std::max(need_low, t.layer);
    if (t.pathway == Pathway::fused) need_fused = true;
  }
  if (need_fused) need_normal = need_low = kPathwayLayers;

  const FmDims dn = FmDims::of(normal.shape()), dl = FmDims::of(low.shape());
  if (dn.c != spec_.in_channels || dl.c != spec_.in_channels) {
    throw ShapeError("segmenter expects " + std::to_string(spec_.in_channels) + " input channels");
  }
  if (dn.n != dl.n) throw ShapeError("normal and context batches differ in size");
  const Index shrink = kPathwayKernel - 1;
  for (Index e : dn.extent())
    if (e < need_normal * shrink + 1) throw ShapeError("input too small for architecture: normal extent " + to_string(dn.extent()));
  for (Index e : dl.extent())
    if (e < need_low * shrink + 1) throw ShapeError("input too small for architecture: context extent " + to_string(dl.extent()));

  std::map<TapPoint, Var<Scalar>> tapped;
  auto want = [&](Pathway p, int layer) {
    return std::find(taps.begin(), taps.end(), TapPoint{p, layer}) != taps.end();
  };
  auto run_pathway = [&](const Tensor<Scalar>& input, const std::vector<Layer>& layers, Pathway p, int depth) {
    Var<Scalar> h = g.constant(input);
    for (int l = 0; l < depth; ++l) {
      h = apply(g, layers[static_cast<std::size_t>(l)], h, options.trainable, true);
      if (want(p, l + 1)) tapped[{p, l + 1}] = h;
    }
    return h;
  };
  Var<Scalar> hn = run_pathway(normal, normal_, Pathway::normal, need_normal);
  Var<Scalar> hl = run_pathway(low, low_, Pathway::low, need_low);

  SegmenterOutputs<Scalar> out;
  if (need_fused) {
    const Extent3 ne = FmDims::of(hn.shape()).extent();
    Var<Scalar> up = upsample_repeat(hl, Index(spec_.downsample));
    const Extent3 ue = FmDims::of(up.shape()).extent();
    Extent3 offset{};
    for (int a = 0; a < 3; ++a) {
      offset[a] = crop_offset(ue[a], ne[a]) + options.low_shift[a];
      if (ue[a] < ne[a] || offset[a] < 0 || offset[a] + ne[a] > ue[a]) {
        throw ShapeError("input too small for architecture: upsampled context " + to_string(ue) +
                         " cannot cover normal output " + to_string(ne));
      }
    }
    std::vector<Var<Scalar>> parts{hn, crop(up, offset, ne)};
    Var<Scalar> h = concat_channels<Scalar>(parts);
    for (int i = 0; i < 2; ++i) {
      h = apply(g, hidden_[static_cast<std::size_t>(i)], h, options.trainable, true);
      if (want(Pathway::fused, kFusedFirstLayer + i)) tapped[{Pathway::fused, kFusedFirstLayer + i}] = h;
    }
    if (options.logits) out.logits = apply(g, classifier_, h, options.trainable, false);
  }
  for (const auto& t : taps) out.taps.push_back(tapped.at(t));
  return out;
}

template <typename Scalar>
Discriminator<Scalar>::Discriminator(DiscriminatorSpec spec, Index tap_channels, std::uint64_t seed)
    : spec_(std::move(spec)), tap_channels_(tap_channels) {
  spec_.validate();
  if (tap_channels < 1) throw ConfigError("discriminator needs at least one input channel");
  Rng rng = make_stream(seed, streams::kDiscriminatorInit);
  Index c_in = tap_channels;
  for (std::size_t l = 0; l < spec_.fms.size(); ++l) {
    add_conv(params_, "disc.layer" + std::to_string(l + 1), c_in, Index(spec_.fms[l]), Index(spec_.kernel), rng);
    c_in = spec_.fms[l];
  }
  add_conv(params_, std::string("disc.classifier"), c_in, Index(spec_.domain_classes), 1, rng);
}

template <typename Scalar>
Var<Scalar> Discriminator<Scalar>::forward(Graph<Scalar>& g, const Var<Scalar>& tap_tensor, bool trainable) {
  const FmDims d = FmDims::of(tap_tensor.shape());
  if (d.c != tap_channels_) {
    throw ShapeError("discriminator expects " + std::to_string(tap_channels_) + " channels, got " + std::to_string(d.c));
  }
  const Index rf = receptive_field(spec_);
  for (Index e : d.extent())
    if (e < rf) throw ShapeError("discriminator input " + to_string(d.extent()) + " below receptive field " + std::to_string(rf));
  Var<Scalar> h = tap_tensor;
  const std::size_t layers = spec_.fms.size() + 1;
  for (std::size_t l = 0; l < layers; ++l) {
    h = conv3d_valid(h, g.parameter(params_[2 * l], trainable), g.parameter(params_[2 * l + 1], trainable));
    if (l + 1 < layers) h = leaky_relu(h, static_cast<Scalar>(spec_.slope));
  }
  return h;
}

template <typename Scalar>
Var<Scalar> assemble_tap_tensor(const TapSet& taps, std::span<const Var<Scalar>> activations, Index downsample) {
  if (taps.empty()) throw Error("assemble_tap_tensor: no taps");
  if (taps.size() != activations.size()) throw Error("assemble_tap_tensor: tap/activation count mismatch");
  std::vector<Var<Scalar>> maps;
  Extent3 smallest{};
  for (std::size_t i = 0; i < taps.size(); ++i) {
    Var<Scalar> m = taps[i].pathway == Pathway::low ? upsample_repeat(activations[i], downsample) : activations[i];
    const Extent3 e = FmDims::of(m.shape()).extent();
    for (int a = 0; a < 3; ++a) smallest[a] = i == 0 ? e[a] : std::min(smallest[a], e[a]);
    maps.push_back(m);
  }
  for (auto& m : maps) m = center_crop(m, smallest);
  return concat_channels<Scalar>(maps);
}

template <typename Scalar>
Var<Scalar> domain_loss(const Var<Scalar>& logits, std::span<const std::int32_t> domains) {
  const FmDims d = FmDims::of(logits.shape());
  if (static_cast<Index>(domains.size()) != d.n) throw ShapeError("domain_loss: one domain label per sample required");
  std::vector<std::int32_t> targets;
  targets.reserve(static_cast<std::size_t>(d.n * d.spatial()));
  for (Index n = 0; n < d.n; ++n) targets.insert(targets.end(), static_cast<std::size_t>(d.spatial()), domains[static_cast<std::size_t>(n)]);
  return softmax_xent_mean(logits, std::span<const std::int32_t>(targets));
}

template <typename Scalar>
std::vector<std::int32_t> domain_predictions(const Tensor<Scalar>& logits) {
  const FmDims d = FmDims::of(logits.shape());
  const Tensor<Scalar> p = softmax_channels(logits);
  const Index v = d.spatial();
  std::vector<std::int32_t> out;
  for (Index n = 0; n < d.n; ++n) {
    std::int32_t best = 0;
    double best_mean = -1.0;
    for (Index c = 0; c < d.c; ++c) {
      double m = 0.0;
      for (Index i = 0; i < v; ++i) m += static_cast<double>(p[(n * d.c + c) * v + i]);
      if (m > best_mean) best_mean = m, best = static_cast<std::int32_t>(c);
    }
    out.push_back(best);
  }
  return out;
}

template class Segmenter<float>;
template class Segmenter<double>;
template class Discriminator<float>;
template class Discriminator<double>;
template Var<float> assemble_tap_tensor(const TapSet&, std::span<const Var<float>>, Index);
template Var<double> assemble_tap_tensor(const TapSet&, std::span<const Var<double>>, Index);
template Var<float> domain_loss(const Var<float>&, std::span<const std::int32_t>);
template Var<double> domain_loss(const Var<double>&, std::span<const std::int32_t>);
template std::vector<std::int32_t> domain_predictions(const Tensor<float>&);
template std::vector<std::int32_t> domain_predictions(const Tensor<double>&);

}  // namespace advseg
