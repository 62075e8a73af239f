#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dsvpr/tensor.hpp"
#include "dsvpr/weight_store.hpp"

namespace dsvpr {

// Dual-stream encoder configuration. Defaults match the full model; tests
// shrink input_side/dim/heads to keep runtimes sane.
struct DsFormerConfig {
  int layers = 3;
  int heads = 16;
  int dim = 128;            // token width C, split evenly across heads
  int ffn_ratio = 4;
  int rpe_clip = 7;         // relative offsets clamp to [-rpe_clip, rpe_clip]
  int descriptor_dim = 512;
  int input_side = 320;     // square input, must be divisible by 16
  bool use_irpe = true;
  bool use_self_encoder = true;
  bool use_cross_encoder = true;
  double gem_p_init = 3.0;
  int backbone_c1 = 32;     // fine stream channels (stride 8)
  int backbone_c2 = 64;     // coarse stream channels (stride 16)

  void validate() const;  // throws ConfigError
  int head_dim() const { return dim / heads; }
  int fine_side() const { return input_side / 8; }
  int coarse_side() const { return input_side / 16; }
  int fine_tokens() const { return fine_side() * fine_side(); }
  int coarse_tokens() const { return coarse_side() * coarse_side(); }
};

struct LayerNormWeights {
  Tensor gamma, beta;
};

struct FfnWeights {
  Tensor w1, b1, w2, b2;
};

// One stream's self-attention stack. The relative-position tables are
// engaged together or not at all, and are shared across heads.
struct SelfBlockWeights {
  LayerNormWeights ln1;
  Tensor wq, wk, wv, wo;
  std::optional<Tensor> rpe_q, rpe_k, rpe_v;
  LayerNormWeights ln2;
  FfnWeights ffn;
};

// Cross-attention shares every projection and the feed-forward between the
// two directions; that is the whole point of the block.
struct CrossBlockWeights {
  LayerNormWeights ln1;
  Tensor wq, wk, wv, wo;
  LayerNormWeights ln2;
  FfnWeights ffn;
};

struct EncoderLayerWeights {
  std::optional<SelfBlockWeights> self1, self2;
  std::optional<CrossBlockWeights> cross;
};

// Full parameter set, addressable by canonical dotted names. Parameter
// iteration order is creation order and is stable across runs, which the
// optimizer and the checkpoint format both rely on.
class DsFormerWeights {
 public:
  DsFormerConfig config;

  static DsFormerWeights init(const DsFormerConfig& cfg, std::uint64_t seed);
  static DsFormerWeights from_store(const WeightStore& store, const DsFormerConfig& cfg);
  WeightStore to_store() const;

  const std::vector<std::pair<std::string, Tensor>>& named_parameters() const { return params_; }
  Tensor param(const std::string& name) const;
  bool has_param(const std::string& name) const;
  EncoderLayerWeights layer(int index) const;
  void set_requires_grad(bool v);
  std::int64_t parameter_count() const;

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::unordered_map<std::string, std::size_t> index_;

  void add(std::string name, Tensor t);
  static DsFormerWeights build(const DsFormerConfig& cfg,
                               const std::function<Tensor(const std::string&,
                                                          const std::vector<std::int64_t>&)>& make);
};

// Buckets indexing the relative-position tables: flat N x N row-major over
// (query token, key token) pairs on a rows x cols raster, offsets clipped to
// [-clip, clip] per axis.
std::vector<int> rpe_buckets(int rows, int cols, int clip);

// Two feature maps from a strided conv stack: the fine map at 1/8 input
// resolution and the coarse map (computed from the fine one) at 1/16.
std::pair<Tensor, Tensor> toy_backbone(const Tensor& image, const DsFormerWeights& w);

// Flattens a [C_f x H x W] map into H*W tokens (row-major raster), projects
// each to the model width, and adds the learned per-position embedding.
Tensor project_and_patchify(const Tensor& fmap, const Tensor& proj, const Tensor& pos);

// Multi-head self-attention with optional contextual relative-position
// bias. `buckets` must be N x N when the tables are present; pass an empty
// vector otherwise.
Tensor mhsa_irpe(const Tensor& tokens, const SelfBlockWeights& w, int heads,
                 const std::vector<int>& buckets);

// Bidirectional cross-attention with one shared set of projections: first
// result attends z1 over z2, second attends z2 over z1.
std::pair<Tensor, Tensor> mhca_shared(const Tensor& z1, const Tensor& z2,
                                      const CrossBlockWeights& w, int heads);

// One pre-norm encoder layer over both streams: per-stream self-attention
// and feed-forward, then the shared cross-attention block. Config flags
// bypass entire sublayers.
std::pair<Tensor, Tensor> encoder_block(const Tensor& z1, const Tensor& z2,
                                        const EncoderLayerWeights& lw,
                                        const DsFormerConfig& cfg,
                                        const std::vector<int>& buckets1,
                                        const std::vector<int>& buckets2);

// Projects the concatenated pooled streams to the descriptor width and
// scales to unit length.
Tensor descriptor_head(const Tensor& g1, const Tensor& g2, const Tensor& head_w);

// Image [3 x S x S] to unit-norm descriptor [descriptor_dim].
Tensor dsformer_forward(const Tensor& image, const DsFormerWeights& w);

}  // namespace dsvpr
