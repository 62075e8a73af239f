#include "dsvpr/dsformer.hpp"

#include <algorithm>
#include <cmath>

#include "dsvpr/errors.hpp"
#include "dsvpr/rng.hpp"

namespace dsvpr {

void DsFormerConfig::validate() const {
  if (layers < 0) throw ConfigError("layers must be >= 0");
  if (heads < 1) throw ConfigError("heads must be >= 1");
  if (dim < 1 || dim % heads != 0)
    throw ConfigError("dim must be a positive multiple of heads");
  if (ffn_ratio < 1) throw ConfigError("ffn_ratio must be >= 1");
  if (rpe_clip < 0) throw ConfigError("rpe_clip must be >= 0");
  if (descriptor_dim < 1) throw ConfigError("descriptor_dim must be >= 1");
  if (input_side < 16 || input_side % 16 != 0)
    throw ConfigError("input_side must be a positive multiple of 16");
  if (!(gem_p_init > 0.0)) throw ConfigError("gem_p_init must be positive");
  if (backbone_c1 < 4 || backbone_c1 % 4 != 0)
    throw ConfigError("backbone_c1 must be a positive multiple of 4");
  if (backbone_c2 < 1) throw ConfigError("backbone_c2 must be >= 1");
}

void DsFormerWeights::add(std::string name, Tensor t) {
  index_.emplace(name, params_.size());
  params_.emplace_back(std::move(name), std::move(t));
}

Tensor DsFormerWeights::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw DataError("model has no parameter '" + name + "'");
  return params_[it->second].second;
}

bool DsFormerWeights::has_param(const std::string& name) const {
  return index_.count(name) != 0;
}

void DsFormerWeights::set_requires_grad(bool v) {
  for (auto& [name, t] : params_) t.set_requires_grad(v);
}

std::int64_t DsFormerWeights::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

DsFormerWeights DsFormerWeights::build(
    const DsFormerConfig& cfg,
    const std::function<Tensor(const std::string&, const std::vector<std::int64_t>&)>& make) {
  cfg.validate();
  DsFormerWeights w;
  w.config = cfg;
  auto add = [&](const std::string& name, const std::vector<std::int64_t>& shape) {
    w.add(name, make(name, shape));
  };

  const std::int64_t c1 = cfg.backbone_c1, c2 = cfg.backbone_c2;
  const std::int64_t cq = c1 / 4, ch = c1 / 2;
  add("backbone.conv0.w", {cq, 3, 3, 3});
  add("backbone.conv0.b", {cq});
  add("backbone.conv1.w", {ch, cq, 3, 3});
  add("backbone.conv1.b", {ch});
  add("backbone.conv2.w", {c1, ch, 3, 3});
  add("backbone.conv2.b", {c1});
  add("backbone.conv3.w", {c2, c1, 3, 3});
  add("backbone.conv3.b", {c2});

  const std::int64_t c = cfg.dim;
  add("proj.1.w", {c1, c});
  add("proj.2.w", {c2, c});
  add("pos.1", {cfg.fine_tokens(), c});
  add("pos.2", {cfg.coarse_tokens(), c});

  const std::int64_t dk = cfg.head_dim();
  const std::int64_t span = 2 * cfg.rpe_clip + 1;
  const std::int64_t table_rows = span * span;
  const std::int64_t hidden = static_cast<std::int64_t>(cfg.ffn_ratio) * c;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string lp = "layer." + std::to_string(l) + ".";
    if (cfg.use_self_encoder) {
      for (int s : {1, 2}) {
        const std::string sp = lp + "self." + std::to_string(s) + ".";
        add(sp + "ln1.gamma", {c});
        add(sp + "ln1.beta", {c});
        add(sp + "wq", {c, c});
        add(sp + "wk", {c, c});
        add(sp + "wv", {c, c});
        add(sp + "wo", {c, c});
        if (cfg.use_irpe) {
          add(sp + "rpe_q", {table_rows, dk});
          add(sp + "rpe_k", {table_rows, dk});
          add(sp + "rpe_v", {table_rows, dk});
        }
        add(sp + "ln2.gamma", {c});
        add(sp + "ln2.beta", {c});
        add(sp + "ffn.w1", {c, hidden});
        add(sp + "ffn.b1", {hidden});
        add(sp + "ffn.w2", {hidden, c});
        add(sp + "ffn.b2", {c});
      }
    }
    if (cfg.use_cross_encoder) {
      const std::string cp = lp + "cross.";
      add(cp + "ln1.gamma", {c});
      add(cp + "ln1.beta", {c});
      add(cp + "wq", {c, c});
      add(cp + "wk", {c, c});
      add(cp + "wv", {c, c});
      add(cp + "wo", {c, c});
      add(cp + "ln2.gamma", {c});
      add(cp + "ln2.beta", {c});
      add(cp + "ffn.w1", {c, hidden});
      add(cp + "ffn.b1", {hidden});
      add(cp + "ffn.w2", {hidden, c});
      add(cp + "ffn.b2", {c});
    }
  }
  add("gem.p.1", {1});
  add("gem.p.2", {1});
  add("head.w", {2 * c, cfg.descriptor_dim});
  return w;
}

DsFormerWeights DsFormerWeights::init(const DsFormerConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  auto make = [&](const std::string& name, const std::vector<std::int64_t>& shape) {
    const bool zero = name.ends_with(".beta") || name.ends_with(".b") ||
                      name.ends_with(".b1") || name.ends_with(".b2") ||
                      name.starts_with("pos.") || name.find("rpe_") != std::string::npos;
    if (name.ends_with(".gamma")) return Tensor::full(shape, 1.0, true);
    if (name.starts_with("gem.p")) return Tensor::full(shape, cfg.gem_p_init, true);
    if (zero) return Tensor::zeros(shape, true);
    // Weight matrices: uniform in +-1/sqrt(fan_in). Stored input-by-output,
    // so fan_in is the leading extent; conv kernels fold in the window.
    std::int64_t fan_in;
    if (shape.size() == 4) fan_in = shape[1] * shape[2] * shape[3];
    else fan_in = shape[0];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> values(static_cast<std::size_t>(n));
    for (auto& v : values) v = rng.uniform(-bound, bound);
    return Tensor::from_data(shape, std::move(values), true);
  };
  return build(cfg, make);
}

DsFormerWeights DsFormerWeights::from_store(const WeightStore& store, const DsFormerConfig& cfg) {
  auto make = [&](const std::string& name, const std::vector<std::int64_t>& shape) {
    Tensor t = store.tensor(name);
    if (t.shape() != shape)
      throw DataError("checkpoint weight '" + name + "' has a shape that does not match the configuration");
    return t;
  };
  DsFormerWeights w = build(cfg, make);
  if (store.size() != w.params_.size())
    throw DataError("checkpoint holds " + std::to_string(store.size()) +
                    " tensors but the configuration expects " + std::to_string(w.params_.size()));
  return w;
}

WeightStore DsFormerWeights::to_store() const {
  WeightStore store;
  for (const auto& [name, t] : params_) store.put_tensor(name, t);
  return store;
}

EncoderLayerWeights DsFormerWeights::layer(int i) const {
  if (i < 0 || i >= config.layers) throw IndexError("encoder layer index out of range");
  const std::string lp = "layer." + std::to_string(i) + ".";
  EncoderLayerWeights lw;
  if (config.use_self_encoder) {
    auto make_self = [&](int s) {
      const std::string sp = lp + "self." + std::to_string(s) + ".";
      SelfBlockWeights sw{
          .ln1 = {param(sp + "ln1.gamma"), param(sp + "ln1.beta")},
          .wq = param(sp + "wq"),
          .wk = param(sp + "wk"),
          .wv = param(sp + "wv"),
          .wo = param(sp + "wo"),
          .rpe_q = {},
          .rpe_k = {},
          .rpe_v = {},
          .ln2 = {param(sp + "ln2.gamma"), param(sp + "ln2.beta")},
          .ffn = {param(sp + "ffn.w1"), param(sp + "ffn.b1"), param(sp + "ffn.w2"),
                  param(sp + "ffn.b2")}};
      if (config.use_irpe) {
        sw.rpe_q = param(sp + "rpe_q");
        sw.rpe_k = param(sp + "rpe_k");
        sw.rpe_v = param(sp + "rpe_v");
      }
      return sw;
    };
    lw.self1 = make_self(1);
    lw.self2 = make_self(2);
  }
  if (config.use_cross_encoder) {
    const std::string cp = lp + "cross.";
    lw.cross = CrossBlockWeights{
        .ln1 = {param(cp + "ln1.gamma"), param(cp + "ln1.beta")},
        .wq = param(cp + "wq"),
        .wk = param(cp + "wk"),
        .wv = param(cp + "wv"),
        .wo = param(cp + "wo"),
        .ln2 = {param(cp + "ln2.gamma"), param(cp + "ln2.beta")},
        .ffn = {param(cp + "ffn.w1"), param(cp + "ffn.b1"), param(cp + "ffn.w2"),
                param(cp + "ffn.b2")}};
  }
  return lw;
}

std::vector<int> rpe_buckets(int rows, int cols, int clip) {
  if (rows < 1 || cols < 1 || clip < 0)
    throw ParameterError("rpe_buckets: invalid grid or clip");
  const int n = rows * cols;
  const int span = 2 * clip + 1;
  std::vector<int> buckets(static_cast<std::size_t>(n) * n);
  for (int a = 0; a < n; ++a) {
    const int ra = a / cols, ca = a % cols;
    for (int b = 0; b < n; ++b) {
      const int rb = b / cols, cb = b % cols;
      const int dr = std::clamp(ra - rb, -clip, clip);
      const int dc = std::clamp(ca - cb, -clip, clip);
      buckets[static_cast<std::size_t>(a) * n + b] = (dr + clip) * span + (dc + clip);
    }
  }
  return buckets;
}

std::pair<Tensor, Tensor> toy_backbone(const Tensor& image, const DsFormerWeights& w) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw DimensionError("toy_backbone: image must be [3 x H x W]");
  if (image.dim(1) % 16 != 0 || image.dim(2) % 16 != 0)
    throw DimensionError("toy_backbone: image sides must be multiples of 16");
  Tensor x = silu(conv2d(image, w.param("backbone.conv0.w"), w.param("backbone.conv0.b"), 2, 1));
  x = silu(conv2d(x, w.param("backbone.conv1.w"), w.param("backbone.conv1.b"), 2, 1));
  Tensor f1 = silu(conv2d(x, w.param("backbone.conv2.w"), w.param("backbone.conv2.b"), 2, 1));
  Tensor f2 = silu(conv2d(f1, w.param("backbone.conv3.w"), w.param("backbone.conv3.b"), 2, 1));
  return {f1, f2};
}

Tensor project_and_patchify(const Tensor& fmap, const Tensor& proj, const Tensor& pos) {
  if (fmap.rank() != 3) throw DimensionError("project_and_patchify: feature map must be 3-D");
  const std::int64_t cf = fmap.dim(0), h = fmap.dim(1), wd = fmap.dim(2);
  if (proj.rank() != 2 || proj.dim(0) != cf)
    throw DimensionError("project_and_patchify: projection row count must match map channels");
  Tensor flat = transpose(reshape(fmap, {cf, h * wd}));  // [N x C_f], row-major raster
  return add(matmul(flat, proj), pos);
}

namespace {

// Scaled dot-product attention over pre-projected q/k/v, one head slice at
// a time. Optional bias tables follow the contextual scheme: two extra
// logit terms plus a value-side table gathered through the same buckets.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& wo, int heads,
                 const Tensor* rpe_q, const Tensor* rpe_k, const Tensor* rpe_v,
                 const std::vector<int>& buckets) {
  const std::int64_t c = q.dim(1);
  if (c % heads != 0) throw DimensionError("attention: width must divide evenly across heads");
  const std::int64_t dk = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<std::size_t>(heads));
  for (int i = 0; i < heads; ++i) {
    Tensor qi = slice_cols(q, i * dk, dk);
    Tensor ki = slice_cols(k, i * dk, dk);
    Tensor vi = slice_cols(v, i * dk, dk);
    Tensor logits = scalar_mul(matmul(qi, transpose(ki)), scale);
    if (rpe_q) {
      logits = add(logits, rpe_logits_q(qi, *rpe_q, buckets));
      logits = add(logits, rpe_logits_k(ki, *rpe_k, buckets));
    }
    Tensor attn = softmax_rows(logits);
    Tensor oi = matmul(attn, vi);
    if (rpe_v) oi = add(oi, rpe_values(attn, *rpe_v, buckets));
    head_outs.push_back(oi);
  }
  return matmul(concat_cols(head_outs), wo);
}

Tensor ffn_apply(const Tensor& x, const FfnWeights& f) {
  return add_rows(matmul(silu(add_rows(matmul(x, f.w1), f.b1)), f.w2), f.b2);
}

}  // namespace

Tensor mhsa_irpe(const Tensor& tokens, const SelfBlockWeights& w, int heads,
                 const std::vector<int>& buckets) {
  if (tokens.rank() != 2) throw DimensionError("mhsa_irpe: tokens must be [N x C]");
  const std::int64_t n = tokens.dim(0);
  const bool has_rpe = w.rpe_q.has_value();
  if (has_rpe) {
    if (!w.rpe_k || !w.rpe_v)
      throw ConfigError("mhsa_irpe: position tables must be provided together");
    if (buckets.size() != static_cast<std::size_t>(n) * n)
      throw DimensionError("mhsa_irpe: bucket table must cover all token pairs");
  }
  Tensor q = matmul(tokens, w.wq);
  Tensor k = matmul(tokens, w.wk);
  Tensor v = matmul(tokens, w.wv);
  return attention(q, k, v, w.wo, heads, has_rpe ? &*w.rpe_q : nullptr,
                   has_rpe ? &*w.rpe_k : nullptr, has_rpe ? &*w.rpe_v : nullptr, buckets);
}

std::pair<Tensor, Tensor> mhca_shared(const Tensor& z1, const Tensor& z2,
                                      const CrossBlockWeights& w, int heads) {
  if (z1.rank() != 2 || z2.rank() != 2 || z1.dim(1) != z2.dim(1))
    throw DimensionError("mhca_shared: streams must be [N1 x C] and [N2 x C]");
  static const std::vector<int> no_buckets;
  auto attend = [&](const Tensor& za, const Tensor& zb) {
    Tensor q = matmul(za, w.wq);
    Tensor k = matmul(zb, w.wk);
    Tensor v = matmul(zb, w.wv);
    return attention(q, k, v, w.wo, heads, nullptr, nullptr, nullptr, no_buckets);
  };
  return {attend(z1, z2), attend(z2, z1)};
}

std::pair<Tensor, Tensor> encoder_block(const Tensor& z1, const Tensor& z2,
                                        const EncoderLayerWeights& lw,
                                        const DsFormerConfig& cfg,
                                        const std::vector<int>& buckets1,
                                        const std::vector<int>& buckets2) {
  Tensor a = z1, b = z2;
  if (cfg.use_self_encoder) {
    if (!lw.self1 || !lw.self2) throw ConfigError("encoder_block: self-attention weights missing");
    auto stream = [&](const Tensor& z, const SelfBlockWeights& sw, const std::vector<int>& bk) {
      Tensor t = add(z, mhsa_irpe(layer_norm(z, sw.ln1.gamma, sw.ln1.beta), sw, cfg.heads, bk));
      return add(t, ffn_apply(layer_norm(t, sw.ln2.gamma, sw.ln2.beta), sw.ffn));
    };
    a = stream(a, *lw.self1, buckets1);
    b = stream(b, *lw.self2, buckets2);
  }
  if (cfg.use_cross_encoder) {
    if (!lw.cross) throw ConfigError("encoder_block: cross-attention weights missing");
    const CrossBlockWeights& cw = *lw.cross;
    Tensor h1 = layer_norm(a, cw.ln1.gamma, cw.ln1.beta);
    Tensor h2 = layer_norm(b, cw.ln1.gamma, cw.ln1.beta);
    auto [x1, x2] = mhca_shared(h1, h2, cw, cfg.heads);
    Tensor t1 = add(a, x1);
    Tensor t2 = add(b, x2);
    a = add(t1, ffn_apply(layer_norm(t1, cw.ln2.gamma, cw.ln2.beta), cw.ffn));
    b = add(t2, ffn_apply(layer_norm(t2, cw.ln2.gamma, cw.ln2.beta), cw.ffn));
  }
  return {a, b};
}

Tensor descriptor_head(const Tensor& g1, const Tensor& g2, const Tensor& head_w) {
  Tensor cat = concat_vec(g1, g2);
  if (head_w.rank() != 2 || head_w.dim(0) != cat.dim(0))
    throw DimensionError("descriptor_head: projection rows must match pooled width");
  Tensor projected = matmul(reshape(cat, {1, cat.dim(0)}), head_w);
  return l2_normalize(reshape(projected, {head_w.dim(1)}));
}

Tensor dsformer_forward(const Tensor& image, const DsFormerWeights& w) {
  const DsFormerConfig& cfg = w.config;
  if (image.rank() != 3 || image.dim(0) != 3)
    throw DimensionError("dsformer_forward: image must be [3 x S x S]");
  if (image.dim(1) != cfg.input_side || image.dim(2) != cfg.input_side)
    throw DimensionError("dsformer_forward: image side " + std::to_string(image.dim(1)) +
                         " does not match configured input_side " +
                         std::to_string(cfg.input_side));
  auto maps = toy_backbone(image, w);
  Tensor z1 = project_and_patchify(maps.first, w.param("proj.1.w"), w.param("pos.1"));
  Tensor z2 = project_and_patchify(maps.second, w.param("proj.2.w"), w.param("pos.2"));
  std::vector<int> b1, b2;
  if (cfg.use_irpe && cfg.use_self_encoder && cfg.layers > 0) {
    b1 = rpe_buckets(cfg.fine_side(), cfg.fine_side(), cfg.rpe_clip);
    b2 = rpe_buckets(cfg.coarse_side(), cfg.coarse_side(), cfg.rpe_clip);
  }
  for (int l = 0; l < cfg.layers; ++l) {
    auto next = encoder_block(z1, z2, w.layer(l), cfg, b1, b2);
    z1 = next.first;
    z2 = next.second;
  }
  Tensor g1 = gem_pool(z1, w.param("gem.p.1"));
  Tensor g2 = gem_pool(z2, w.param("gem.p.2"));
  return descriptor_head(g1, g2, w.param("head.w"));
}

}  // namespace dsvpr
