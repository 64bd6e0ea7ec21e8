#pragma once

// The trainable model: a strided convolutional backbone producing a feature
// pyramid plus auxiliary segmentation logits, and a decoder that refines a
// set of curve queries (content + dynamic 3D anchor points + normalized range)
// against the pyramid, followed by the lane prediction head.

#include "curvelane/geometry.hpp"
#include "curvelane/image.hpp"
#include "curvelane/lane_model.hpp"
#include "curvelane/nn.hpp"
#include "curvelane/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace curvelane {

class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class CoeffMode {
  direct,        // polynomial coefficients regressed from the query content
  anchor_fit,    // least-squares fit of the refined anchors over active points
  anchor_offset  // anchor fit plus a regressed correction
};

inline const char* to_string(CoeffMode m) {
  switch (m) {
    case CoeffMode::direct: return "direct";
    case CoeffMode::anchor_fit: return "anchor_fit";
    case CoeffMode::anchor_offset: return "anchor_offset";
  }
  return "?";
}

inline CoeffMode coeff_mode_from_string(const std::string& s) {
  if (s == "direct") return CoeffMode::direct;
  if (s == "anchor_fit") return CoeffMode::anchor_fit;
  if (s == "anchor_offset") return CoeffMode::anchor_offset;
  throw ModelError("unknown coefficient mode '" + s + "'");
}

struct ModelConfig {
  ImageSize image{360, 480};
  std::vector<int> stage_channels{16, 24, 32, 48, 64, 64};  // one stride-2 conv per stage
  int levels = 4;                                           // pyramid = last `levels` stages
  int seg_channels = 16;
  int dim = 64;
  int layers = 6;
  int queries = 16;
  int heads = 4;
  int samples = 4;  // sampling offsets per anchor point
  int anchors = 40;
  int poly_order = 3;
  int pe_dim = 8;  // sinusoid features per coordinate
  double pe_base = 10000.0;
  int ffn_dim = 128;
  bool self_attention = true;
  bool range_restriction = true;
  bool zero_init_refine = false;
  bool detach_anchors = false;  // stop gradients through anchors between layers
  CoeffMode coeff_mode = CoeffMode::direct;
  double coeff_scale = 10.0;  // meters per unit of regressed coefficient
  double range_softplus_beta = 50.0;
  double offset_init = 0.5;  // radius step of the initial sampling pattern (level px)
  double init_range_start = 0.01;
  double init_range_end = 0.99;
  double anchor_spread = 0.0;  // initial anchors of the queries offset evenly over [-spread, spread] in x
  WorldBox box{};

  int stages() const { return static_cast<int>(stage_channels.size()); }
  int first_level_stage() const { return stages() - levels; }
  int level_stride(int l) const { return 1 << (first_level_stage() + l + 1); }

  void validate() const {
    if (stage_channels.empty()) throw ModelError("model.stage_channels must not be empty");
    if (levels < 1 || levels > stages()) throw ModelError("model.levels must be in [1, number of stages]");
    if (dim <= 0 || dim % heads != 0) throw ModelError("model.dim must be a positive multiple of model.heads");
    if (layers < 1 || queries < 1 || samples < 1 || anchors < 2 || poly_order < 0) {
      throw ModelError("model: layers, queries, samples must be >= 1 and anchors >= 2");
    }
    if (pe_dim <= 0 || pe_dim % 2) throw ModelError("model.pe_dim must be positive and even");
    const int s = level_stride(0);
    if (image.height % s != 0 || image.width % s != 0) {
      throw ModelError("image size " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                       " is not divisible by the first pyramid stride " + std::to_string(s));
    }
    if (!(anchor_spread >= 0)) throw ModelError("model.anchor_spread must be >= 0");
    if (!(init_range_start >= 0 && init_range_start < init_range_end && init_range_end <= 1)) {
      throw ModelError("model: initial range must satisfy 0 <= start < end <= 1");
    }
  }

  /// Spatial extent of pyramid level l (stride-2 padded convs round up).
  LevelExtent level_extent(int l) const {
    int h = image.height, w = image.width;
    for (int s = 0; s <= first_level_stage() + l; ++s) {
      h = (h + 1) / 2;
      w = (w + 1) / 2;
    }
    return {h, w};
  }

  std::vector<double> y_positions() const { return uniform_y_positions(anchors, box.y); }
};

// ---------------------------------------------------------------------------

template <class S>
using Tensor = ag::Tensor<S>;

template <class S>
struct BackboneOutput {
  std::vector<Tensor<S>> levels;  // each {D, h_l, w_l}
  Tensor<S> seg_logits;           // {1, h_0, w_0}
};

template <class S>
Tensor<S> image_tensor(const Image& img) {
  // HWC [0,1] -> CHW centered
  std::vector<S> v(img.data.size());
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      for (int ch = 0; ch < img.channels; ++ch) {
        v[ch * plane + static_cast<std::size_t>(r) * img.width + c] = static_cast<S>(img.at(r, c, ch) - 0.5f);
      }
  return Tensor<S>::constant({img.channels, img.height, img.width}, std::move(v));
}

template <class S>
struct Backbone {
  std::vector<nn::Conv2d<S>> stages;
  std::vector<nn::Conv2d<S>> proj;
  nn::Conv2d<S> seg1, seg2;
  int first_level = 0;

  Backbone() = default;
  Backbone(nn::ParamStore<S>& ps, const ModelConfig& cfg) : first_level(cfg.first_level_stage()) {
    int in = 3;
    for (int s = 0; s < cfg.stages(); ++s) {
      stages.emplace_back(ps, "backbone.stage" + std::to_string(s), in, cfg.stage_channels[s], 3, 2, 1);
      in = cfg.stage_channels[s];
    }
    for (int l = 0; l < cfg.levels; ++l) {
      proj.emplace_back(ps, "backbone.proj" + std::to_string(l), cfg.stage_channels[first_level + l], cfg.dim, 1, 1, 0);
    }
    seg1 = nn::Conv2d<S>(ps, "seg.conv1", cfg.stage_channels[first_level], cfg.seg_channels, 3, 1, 1);
    seg2 = nn::Conv2d<S>(ps, "seg.conv2", cfg.seg_channels, 1, 1, 1, 0);
  }

  BackboneOutput<S> operator()(const Tensor<S>& image) const {
    BackboneOutput<S> out;
    Tensor<S> x = image;
    for (std::size_t s = 0; s < stages.size(); ++s) {
      x = ag::relu(stages[s](x));
      if (static_cast<int>(s) >= first_level) {
        if (static_cast<int>(s) == first_level) out.seg_logits = seg2(ag::relu(seg1(x)));
        out.levels.push_back(proj[s - first_level](x));
      }
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Curve queries

/// Decoder state for Q queries: content {Q, D}, anchor x and z {Q, N} in
/// meters at the fixed y positions, and range start/end {Q, 1} in [0, 1].
template <class S>
struct QueryState {
  Tensor<S> content;
  Tensor<S> x, z;
  Tensor<S> start, end;

  int count() const { return content.defined() ? content.dim(0) : 0; }
};

template <class S>
QueryState<S> concat_states(const QueryState<S>& a, const QueryState<S>& b) {
  if (a.count() == 0) return b;
  if (b.count() == 0) return a;
  return {ag::concat_rows<S>({a.content, b.content}), ag::concat_rows<S>({a.x, b.x}), ag::concat_rows<S>({a.z, b.z}),
          ag::concat_rows<S>({a.start, b.start}), ag::concat_rows<S>({a.end, b.end})};
}

/// Per-point sampling mask from the query ranges: 1 where the anchor y lies
/// in [y0 + s*span, y0 + e*span). A query whose window holds no anchor keeps
/// the anchor closest to the window center.
inline std::vector<std::uint8_t> range_mask(const std::vector<double>& starts, const std::vector<double>& ends,
                                            const std::vector<double>& ys, const Interval& span) {
  const std::size_t q = starts.size(), n = ys.size();
  std::vector<std::uint8_t> mask(q * n, 0);
  for (std::size_t i = 0; i < q; ++i) {
    int active = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const bool on = in_range_window(ys[j], {starts[i], ends[i]}, span);
      mask[i * n + j] = on;
      active += on;
    }
    if (active == 0) {
      const double center = span.lo + 0.5 * (starts[i] + ends[i]) * span.span();
      std::size_t best = 0;
      for (std::size_t j = 1; j < n; ++j)
        if (std::abs(ys[j] - center) < std::abs(ys[best] - center)) best = j;
      mask[i * n + best] = 1;
    }
  }
  return mask;
}

template <class S>
std::vector<double> as_doubles(const Tensor<S>& t) {
  return {t.values().begin(), t.values().end()};
}

/// Image validity of normalized projections {P, 2}: inside [0,1]^2.
template <class S>
std::vector<std::uint8_t> projection_validity(const Tensor<S>& uv) {
  std::vector<std::uint8_t> v(uv.dim(0));
  for (int i = 0; i < uv.dim(0); ++i) {
    const S u = uv[2 * i], w = uv[2 * i + 1];
    v[i] = u >= S(0) && u <= S(1) && w >= S(0) && w <= S(1);
  }
  return v;
}

/// Masked mean of bilinear samples over all levels and anchor points of each
/// query: sum(mask * sample) / max(sum(mask), eps) with mask shared by levels.
template <class S>
Tensor<S> context_feature(const std::vector<Tensor<S>>& levels, const Tensor<S>& uv, const std::vector<std::uint8_t>& mask,
                          int points, double eps = 1e-6) {
  const int q = uv.dim(0) / points;
  const int nl = static_cast<int>(levels.size());
  std::vector<S> w(mask.size(), S(0));
  for (int i = 0; i < q; ++i) {
    int count = 0;
    for (int n = 0; n < points; ++n) count += mask[static_cast<std::size_t>(i) * points + n];
    const double denom = std::max(static_cast<double>(count * nl), eps);
    for (int n = 0; n < points; ++n) {
      const std::size_t k = static_cast<std::size_t>(i) * points + n;
      w[k] = mask[k] ? static_cast<S>(1.0 / denom) : S(0);
    }
  }
  Tensor<S> acc;
  for (const auto& lv : levels) {
    Tensor<S> part = ag::group_weighted_sum(ag::bilinear_gather(lv, uv), points, w);
    acc = acc.defined() ? ag::add(acc, part) : part;
  }
  return acc;
}

/// Everything one decoder layer produced, kept for supervision and plots.
template <class S>
struct LayerTrace {
  QueryState<S> state;                   // after refinement
  std::vector<S> attention;              // {Q*M, L*N*K} normalized weights
  std::vector<std::uint8_t> sample_mask;  // {Q, N} range mask used for sampling
};

template <class S>
struct DecoderLayer {
  nn::MultiHeadAttention<S> self_attn;
  nn::LayerNorm<S> norm1, norm2, norm3;
  nn::Mlp<S> offset_mlp;
  nn::Linear<S> attn_weights;
  nn::Conv2d<S> value_proj;
  nn::Linear<S> out_proj;
  nn::Mlp<S> ffn;

  DecoderLayer() = default;
  DecoderLayer(nn::ParamStore<S>& ps, const std::string& name, const ModelConfig& cfg) {
    const int d = cfg.dim, m = cfg.heads, l = cfg.levels, n = cfg.anchors, k = cfg.samples;
    if (cfg.self_attention) {
      self_attn = nn::MultiHeadAttention<S>(ps, name + ".self_attn", d, m);
      norm1 = nn::LayerNorm<S>(ps, name + ".norm1", d);
    }
    offset_mlp.fc1 = nn::Linear<S>(ps, name + ".offset.fc1", 2 * d, d);
    // Initial sampling pattern: head m looks along direction 2*pi*m/M at
    // radii offset_init * (k + 1).
    std::vector<double> pattern(static_cast<std::size_t>(m) * l * n * k * 2);
    for (int hm = 0; hm < m; ++hm) {
      const double th = 2.0 * M_PI * hm / m;
      for (int lv = 0; lv < l; ++lv)
        for (int pn = 0; pn < n; ++pn)
          for (int sk = 0; sk < k; ++sk) {
            const std::size_t i = ((((static_cast<std::size_t>(hm) * l + lv) * n + pn) * k + sk) * 2);
            const double r = k == 1 ? 0.0 : cfg.offset_init * (sk + 1);
            pattern[i] = r * std::cos(th);
            pattern[i + 1] = r * std::sin(th);
          }
    }
    offset_mlp.fc2 = nn::Linear<S>::zeros(ps, name + ".offset.fc2", d, m * l * n * k * 2, pattern);
    attn_weights = nn::Linear<S>::zeros(ps, name + ".attn_weights", d, m * l * n * k);
    value_proj = nn::Conv2d<S>(ps, name + ".value_proj", d, d, 1, 1, 0);
    out_proj = nn::Linear<S>(ps, name + ".out_proj", d, d);
    norm2 = nn::LayerNorm<S>(ps, name + ".norm2", d);
    ffn = nn::Mlp<S>(ps, name + ".ffn", d, cfg.ffn_dim, d);
    norm3 = nn::LayerNorm<S>(ps, name + ".norm3", d);
  }
};

/// Lane outputs of the final decoder layer.
template <class S>
struct HeadOutput {
  Tensor<S> logits;             // {Q, 1}
  Tensor<S> coeff_x, coeff_z;   // {Q, R+1}, in t = (y - y0) / span, meters
  Tensor<S> sampled_x, sampled_z;  // {Q, N} curve evaluated at the anchor y positions
  Tensor<S> y_start, y_end;     // {Q, 1} meters
};

template <class S>
struct FrameOutput {
  std::vector<LayerTrace<S>> layers;
  HeadOutput<S> head;
  Tensor<S> seg_logits;
  Tensor<S> content;  // final content {Q, D}
};

/// Range (s, e) to metric boundaries: y_start = y0 + s*span and
/// y_end = min(y_start + span * softplus_beta(e - s), y1).
template <class S>
std::pair<Tensor<S>, Tensor<S>> range_to_boundary(const Tensor<S>& start, const Tensor<S>& end, const Interval& span,
                                                  double beta) {
  Tensor<S> ys = ag::add_scalar(ag::scale(start, S(span.span())), S(span.lo));
  Tensor<S> gap = ag::scale(ag::softplus(ag::sub(end, start), S(beta)), S(span.span()));
  Tensor<S> ye = ag::clamp(ag::add(ys, gap), S(-1e30), S(span.hi));
  return {ys, ye};
}

/// Powers t^r of the normalized anchor positions: {N, R+1}.
inline std::vector<double> power_basis(const std::vector<double>& ys, const Interval& span, int order) {
  std::vector<double> v;
  for (double y : ys) {
    const double t = (y - span.lo) / span.span();
    double p = 1.0;
    for (int r = 0; r <= order; ++r, p *= t) v.push_back(p);
  }
  return v;
}

/// Weighted least-squares projector rows: for each query, the (R+1) x N
/// matrix mapping anchor values to coefficients over its masked points.
inline std::vector<double> masked_fit_operator(const std::vector<double>& basis, const std::vector<std::uint8_t>& mask,
                                               int n, int order) {
  const int terms = order + 1;
  Eigen::MatrixXd v(n, terms);
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < terms; ++r) v(i, r) = basis[static_cast<std::size_t>(i) * terms + r];
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, n);
  int active = 0;
  for (int i = 0; i < n; ++i) {
    w(i, i) = mask[i] ? 1.0 : 0.0;
    active += mask[i];
  }
  // Small ridge keeps short windows (fewer than R+1 points) well posed.
  const double ridge = active >= terms ? 0.0 : 1e-6;
  const Eigen::MatrixXd a = v.transpose() * w * v + ridge * Eigen::MatrixXd::Identity(terms, terms);
  const Eigen::MatrixXd op = a.ldlt().solve(v.transpose() * w);
  std::vector<double> out(static_cast<std::size_t>(terms) * n);
  for (int r = 0; r < terms; ++r)
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(r) * n + i] = op(r, i);
  return out;
}

template <class S>
class Model {
 public:
  explicit Model(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg), params_(seed) {
    cfg_.validate();
    ys_ = cfg_.y_positions();
    auto& ps = params_;
    backbone_ = Backbone<S>(ps, cfg_);
    const int q = cfg_.queries, d = cfg_.dim, n = cfg_.anchors;
    init_content_ = ps.normal("query.content", {q, d}, 1.0);
    init_x_ = ps.normal("query.anchor_x", {q, n}, 1.0);
    if (cfg_.anchor_spread > 0 && q > 1) {
      auto& v = init_x_.mutable_values();
      for (int i = 0; i < q; ++i)
        for (int j = 0; j < n; ++j) v[static_cast<std::size_t>(i) * n + j] += S(cfg_.anchor_spread * (2.0 * i / (q - 1) - 1.0));
    }
    init_z_ = ps.normal("query.anchor_z", {q, n}, 1.0);
    const double ls = std::log(std::max(cfg_.init_range_start, 1e-4) / (1 - std::max(cfg_.init_range_start, 1e-4)));
    const double g = (cfg_.init_range_end - cfg_.init_range_start) / (1 - cfg_.init_range_start);
    const double lg = std::log(std::min(g, 1 - 1e-4) / (1 - std::min(g, 1 - 1e-4)));
    init_start_logit_ = ps.constant("query.range_start", {q, 1}, ls);
    init_gap_logit_ = ps.constant("query.range_gap", {q, 1}, lg);
    pe_mlp_ = nn::Mlp<S>(ps, "pos_embed", 3 * n * cfg_.pe_dim, d, d);
    for (int l = 0; l < cfg_.layers; ++l) layers_.emplace_back(ps, "decoder" + std::to_string(l), cfg_);
    refine_ = cfg_.zero_init_refine ? nn::Linear<S>::zeros(ps, "refine", d, 2 * n + 2)
                                    : nn::Linear<S>(ps, "refine", d, 2 * n + 2, true, 0.01);
    cls_ = nn::Linear<S>(ps, "head.cls", d, 1);
    coeff_ = cfg_.coeff_mode == CoeffMode::anchor_offset
                 ? nn::Linear<S>::zeros(ps, "head.coeff", d, 2 * (cfg_.poly_order + 1))
                 : nn::Linear<S>(ps, "head.coeff", d, 2 * (cfg_.poly_order + 1));
    temporal_attn_ = nn::MultiHeadAttention<S>(ps, "temporal.attn", d, cfg_.heads);
    temporal_norm_ = nn::LayerNorm<S>(ps, "temporal.norm", d);
    basis_ = power_basis(ys_, cfg_.box.y, cfg_.poly_order);
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<double>& y_positions() const { return ys_; }
  nn::ParamStore<S>& params() { return params_; }
  const nn::ParamStore<S>& params() const { return params_; }
  const nn::MultiHeadAttention<S>& temporal_attention() const { return temporal_attn_; }
  const nn::LayerNorm<S>& temporal_norm() const { return temporal_norm_; }

  BackboneOutput<S> encode(const Image& img) const {
    if (img.height != cfg_.image.height || img.width != cfg_.image.width) {
      throw ModelError("image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                       ", model expects " + std::to_string(cfg_.image.height) + "x" + std::to_string(cfg_.image.width));
    }
    return backbone_(image_tensor<S>(img));
  }

  QueryState<S> initial_state() const {
    QueryState<S> s;
    s.content = init_content_;
    s.x = init_x_;
    s.z = init_z_;
    s.start = ag::sigmoid(init_start_logit_);
    s.end = ag::add(s.start, ag::mul(ag::add_scalar(ag::scale(s.start, S(-1)), S(1)), ag::sigmoid(init_gap_logit_)));
    return s;
  }

  /// Positional embedding: MLP over sinusoids of box-normalized x, y, z.
  Tensor<S> positional_embedding(const Tensor<S>& x, const Tensor<S>& z) const {
    const int q = x.dim(0), n = x.dim(1);
    const auto& box = cfg_.box;
    const S pe_scale = S(2 * M_PI), base = S(cfg_.pe_base);
    Tensor<S> xn = ag::scale(ag::add_scalar(x, S(-box.x.lo)), S(1 / box.x.span()));
    Tensor<S> zn = ag::scale(ag::add_scalar(z, S(-box.z.lo)), S(1 / box.z.span()));
    std::vector<S> yv(static_cast<std::size_t>(q) * n);
    for (int i = 0; i < q; ++i)
      for (int j = 0; j < n; ++j) yv[static_cast<std::size_t>(i) * n + j] = S((ys_[j] - box.y.lo) / box.y.span());
    Tensor<S> yn = Tensor<S>::constant({q, n}, std::move(yv));
    Tensor<S> feats = ag::concat_cols<S>({ag::sinusoidal(xn, cfg_.pe_dim, base, pe_scale),
                                          ag::sinusoidal(yn, cfg_.pe_dim, base, pe_scale),
                                          ag::sinusoidal(zn, cfg_.pe_dim, base, pe_scale)});
    return pe_mlp_(feats);
  }

  /// Sampling mask {Q, N} for the given state.
  std::vector<std::uint8_t> sampling_mask(const QueryState<S>& s) const {
    if (!cfg_.range_restriction) return std::vector<std::uint8_t>(static_cast<std::size_t>(s.count()) * ys_.size(), 1);
    return range_mask(as_doubles(s.start), as_doubles(s.end), ys_, cfg_.box.y);
  }

  /// Curve cross-attention of one layer. Returns the sampled features
  /// {Q, D} before the output projection and records the weights.
  Tensor<S> cross_attention(const DecoderLayer<S>& layer, const std::vector<Tensor<S>>& levels, const CameraRig& rig,
                            const QueryState<S>& s, const std::vector<std::uint8_t>& mask,
                            std::vector<S>* attention_out = nullptr) const {
    const int q = s.count(), n = cfg_.anchors, m = cfg_.heads, l = cfg_.levels, k = cfg_.samples;
    const Tensor<S> uv = ag::project_normalized(s.x, ys_, s.z, rig);
    const auto valid = projection_validity(uv);
    std::vector<std::uint8_t> ctx_mask(valid.size());
    for (std::size_t i = 0; i < valid.size(); ++i) ctx_mask[i] = valid[i] && mask[i];
    const Tensor<S> fc = context_feature(levels, uv, ctx_mask, n);
    const Tensor<S> offsets = layer.offset_mlp(ag::concat_cols<S>({fc, s.content}));
    std::vector<std::uint8_t> amask(static_cast<std::size_t>(q) * m * l * n * k);
    for (int qi = 0; qi < q; ++qi)
      for (int hm = 0; hm < m; ++hm)
        for (int lv = 0; lv < l; ++lv)
          for (int pn = 0; pn < n; ++pn)
            for (int sk = 0; sk < k; ++sk) {
              amask[(((static_cast<std::size_t>(qi) * m + hm) * l + lv) * n + pn) * k + sk] =
                  mask[static_cast<std::size_t>(qi) * n + pn];
            }
    const Tensor<S> logits = ag::reshape(layer.attn_weights(s.content), {q * m, l * n * k});
    const Tensor<S> attn = ag::masked_softmax_rows(logits, amask);
    if (attention_out) *attention_out = attn.values();
    std::vector<Tensor<S>> values;
    for (const auto& lv : levels) values.push_back(layer.value_proj(lv));
    return ag::deformable_sample(values, uv, offsets, attn, {q, m, l, n, k});
  }

  /// Applies refinement deltas {Q, 2N+2} in inverse-sigmoid space.
  QueryState<S> refine(const QueryState<S>& s, const Tensor<S>& deltas) const {
    const int n = cfg_.anchors;
    const S eps = S(1e-5);
    auto update = [&](const Tensor<S>& v, const Interval& iv, const Tensor<S>& d) {
      Tensor<S> u = ag::clamp(ag::scale(ag::add_scalar(v, S(-iv.lo)), S(1 / iv.span())), eps, S(1) - eps);
      return ag::add_scalar(ag::scale(ag::sigmoid(ag::add(ag::logit(u), d)), S(iv.span())), S(iv.lo));
    };
    QueryState<S> out;
    out.content = s.content;
    out.x = update(s.x, cfg_.box.x, ag::slice_cols(deltas, 0, n));
    out.z = update(s.z, cfg_.box.z, ag::slice_cols(deltas, n, n));
    const Tensor<S> st = ag::clamp(s.start, eps, S(1) - eps);
    out.start = ag::sigmoid(ag::add(ag::logit(st), ag::slice_cols(deltas, 2 * n, 1)));
    // the end moves inside (start, 1) through its relative gap
    const Tensor<S> one_minus_s = ag::add_scalar(ag::scale(s.start, S(-1)), S(1));
    const Tensor<S> gap = ag::clamp(ag::mul(ag::sub(s.end, s.start), reciprocal(one_minus_s)), eps, S(1) - eps);
    const Tensor<S> new_gap = ag::sigmoid(ag::add(ag::logit(gap), ag::slice_cols(deltas, 2 * n + 1, 1)));
    out.end = ag::add(out.start, ag::mul(ag::add_scalar(ag::scale(out.start, S(-1)), S(1)), new_gap));
    return out;
  }

  /// One decoder layer.
  LayerTrace<S> layer_forward(int index, const std::vector<Tensor<S>>& levels, const CameraRig& rig,
                              const QueryState<S>& in) const {
    const auto& layer = layers_[index];
    QueryState<S> s = in;
    if (cfg_.self_attention) {
      const Tensor<S> qk = ag::add(s.content, positional_embedding(s.x, s.z));
      s.content = layer.norm1(ag::add(s.content, layer.self_attn(qk, qk, s.content)));
    }
    LayerTrace<S> trace;
    trace.sample_mask = sampling_mask(s);
    const Tensor<S> sampled = cross_attention(layer, levels, rig, s, trace.sample_mask, &trace.attention);
    s.content = layer.norm2(ag::add(s.content, layer.out_proj(sampled)));
    s.content = layer.norm3(ag::add(s.content, layer.ffn(s.content)));
    trace.state = refine(s, refine_(s.content));
    return trace;
  }

  HeadOutput<S> head(const QueryState<S>& s, const std::vector<std::uint8_t>& mask) const {
    HeadOutput<S> h;
    const int q = s.count(), n = cfg_.anchors, terms = cfg_.poly_order + 1;
    h.logits = cls_(s.content);
    Tensor<S> cx, cz;
    if (cfg_.coeff_mode != CoeffMode::direct) {
      std::vector<Tensor<S>> rows_x, rows_z;
      for (int i = 0; i < q; ++i) {
        const std::vector<std::uint8_t> m(mask.begin() + static_cast<std::ptrdiff_t>(i) * n,
                                          mask.begin() + static_cast<std::ptrdiff_t>(i + 1) * n);
        const auto op = masked_fit_operator(basis_, m, n, cfg_.poly_order);
        const Tensor<S> opt = Tensor<S>::constant({terms, n}, std::vector<S>(op.begin(), op.end()));
        rows_x.push_back(ag::linear(ag::gather_rows(s.x, {i}), opt, Tensor<S>()));
        rows_z.push_back(ag::linear(ag::gather_rows(s.z, {i}), opt, Tensor<S>()));
      }
      cx = ag::concat_rows(rows_x);
      cz = ag::concat_rows(rows_z);
    }
    if (cfg_.coeff_mode != CoeffMode::anchor_fit) {
      const Tensor<S> c = ag::scale(coeff_(s.content), S(cfg_.coeff_scale));
      const Tensor<S> rx = ag::slice_cols(c, 0, terms), rz = ag::slice_cols(c, terms, terms);
      cx = cx.defined() ? ag::add(cx, rx) : rx;
      cz = cz.defined() ? ag::add(cz, rz) : rz;
    }
    h.coeff_x = cx;
    h.coeff_z = cz;
    const Tensor<S> basis = Tensor<S>::constant({n, terms}, std::vector<S>(basis_.begin(), basis_.end()));
    h.sampled_x = ag::linear(cx, basis, Tensor<S>());
    h.sampled_z = ag::linear(cz, basis, Tensor<S>());
    std::tie(h.y_start, h.y_end) = range_to_boundary(s.start, s.end, cfg_.box.y, cfg_.range_softplus_beta);
    return h;
  }

  /// Runs the decoder from an explicit initial state.
  FrameOutput<S> decode(const BackboneOutput<S>& feats, const CameraRig& rig, const QueryState<S>& init) const {
    FrameOutput<S> out;
    out.seg_logits = feats.seg_logits;
    QueryState<S> s = init;
    for (int l = 0; l < cfg_.layers; ++l) {
      if (l > 0 && cfg_.detach_anchors) {
        s.x = s.x.detach();
        s.z = s.z.detach();
        s.start = s.start.detach();
        s.end = s.end.detach();
      }
      out.layers.push_back(layer_forward(l, feats.levels, rig, s));
      s = out.layers.back().state;
    }
    out.content = s.content;
    out.head = head(s, sampling_mask(s));
    return out;
  }

  FrameOutput<S> forward(const Image& img, const CameraRig& rig) const {
    return decode(encode(img), rig, initial_state());
  }

 private:
  static Tensor<S> reciprocal(const Tensor<S>& t) {
    return ag::unary(t, [](S v) { return S(1) / v; }, [](S, S y) { return -y * y; });
  }

  ModelConfig cfg_;
  nn::ParamStore<S> params_;
  std::vector<double> ys_;
  std::vector<double> basis_;
  Backbone<S> backbone_;
  Tensor<S> init_content_, init_x_, init_z_, init_start_logit_, init_gap_logit_;
  nn::Mlp<S> pe_mlp_;
  std::vector<DecoderLayer<S>> layers_;
  nn::Linear<S> refine_, cls_, coeff_;
  nn::MultiHeadAttention<S> temporal_attn_;
  nn::LayerNorm<S> temporal_norm_;
};

/// Converts head outputs of one frame to lanes (all queries, unthresholded).
template <class S>
std::vector<PolyLane> to_poly_lanes(const HeadOutput<S>& h, const Interval& span) {
  std::vector<PolyLane> out;
  const int q = h.logits.dim(0), terms = h.coeff_x.dim(1);
  for (int i = 0; i < q; ++i) {
    Eigen::VectorXd cx(terms), cz(terms);
    for (int r = 0; r < terms; ++r) {
      cx[r] = static_cast<double>(h.coeff_x[static_cast<std::size_t>(i) * terms + r]);
      cz[r] = static_cast<double>(h.coeff_z[static_cast<std::size_t>(i) * terms + r]);
    }
    PolyLane l;
    l.confidence = ag::sigmoid_value(static_cast<double>(h.logits[i]));
    l.y_start = static_cast<double>(h.y_start[i]);
    l.y_end = static_cast<double>(h.y_end[i]);
    l.coeffs_x = detail::unscale_poly(cx, span.lo, span.span());
    l.coeffs_z = detail::unscale_poly(cz, span.lo, span.span());
    out.push_back(std::move(l));
  }
  return out;
}

}  // namespace curvelane
