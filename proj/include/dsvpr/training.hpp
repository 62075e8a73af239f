#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dsvpr/dsformer.hpp"
#include "dsvpr/rng.hpp"
#include "dsvpr/tensor.hpp"

namespace dsvpr {

// Large-margin cosine loss. With margin 0 and scale 1 this is plain softmax
// cross-entropy over cosine similarities.
struct LmclConfig {
  double scale = 30.0;
  double margin = 0.40;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  double lr_model = 1e-5;
  double lr_classifier = 1e-2;
  int batch = 32;
  int iters = 50;
  int epochs = 2;
  std::uint64_t seed = 1;
  LmclConfig lmcl;
  AdamConfig adam;
};

// One classification head per place group. Rows are class prototypes kept
// at unit length; they exist only during training.
struct ClassifierWeights {
  Tensor weight;  // [classes x descriptor_dim]
};

ClassifierWeights init_classifier(std::int64_t classes, std::int64_t dim, Rng& rng);

// descriptor [D] (unit norm), classifier [K x D] (unit rows), 0-based label.
Tensor lmcl_loss(const Tensor& descriptor, const Tensor& classifier, std::int64_t label,
                 const LmclConfig& cfg);

// First and second moment estimates keyed by parameter name. `step` doubles
// as the global iteration counter for group cycling.
struct AdamState {
  std::int64_t step = 0;
  std::unordered_map<std::string, std::vector<double>> m, v;
};

struct ParamGroup {
  std::vector<std::pair<std::string, Tensor>> params;
  double lr = 0.0;
  // Project rank-2 parameters back to unit-length rows after the update;
  // used for classifier prototypes.
  bool renormalize_rows = false;
};

// One Adam update across all groups. Parameters whose gradient was never
// touched this step are skipped entirely (no moment decay).
void optimizer_step(AdamState& state, const std::vector<ParamGroup>& groups,
                    const AdamConfig& cfg = {});

// Training view of one place group: parallel arrays of class ids and their
// member image ids.
struct TrainGroup {
  std::vector<std::string> class_ids;
  std::vector<std::vector<std::string>> members;
};

struct EpochResult {
  std::vector<double> losses;  // one mean batch loss per iteration
  double mean_loss = 0.0;
};

// Runs cfg.iters iterations. Iteration t trains group (state.step mod G):
// every batch slot picks a class uniformly at random from that group, then
// one of its images uniformly. Deterministic given the rng state. Empty
// groups or classes raise ConfigError.
EpochResult train_epoch(DsFormerWeights& model, std::vector<ClassifierWeights>& classifiers,
                        const std::vector<TrainGroup>& groups,
                        const std::function<Tensor(const std::string&)>& image_for,
                        AdamState& state, const TrainConfig& cfg, Rng& rng);

}  // namespace dsvpr
