#include "dsvpr/training.hpp"

#include <cmath>

#include "dsvpr/errors.hpp"

namespace dsvpr {

ClassifierWeights init_classifier(std::int64_t classes, std::int64_t dim, Rng& rng) {
  if (classes < 1 || dim < 1) throw ParameterError("classifier needs at least one class and one dim");
  std::vector<double> values(static_cast<std::size_t>(classes * dim));
  for (auto& v : values) v = rng.normal();
  for (std::int64_t r = 0; r < classes; ++r) {
    double norm_sq = 0.0;
    for (std::int64_t j = 0; j < dim; ++j) {
      const double v = values[static_cast<std::size_t>(r * dim + j)];
      norm_sq += v * v;
    }
    const double inv = 1.0 / std::max(std::sqrt(norm_sq), 1e-12);
    for (std::int64_t j = 0; j < dim; ++j) values[static_cast<std::size_t>(r * dim + j)] *= inv;
  }
  return {Tensor::from_data({classes, dim}, std::move(values), true)};
}

Tensor lmcl_loss(const Tensor& descriptor, const Tensor& classifier, std::int64_t label,
                 const LmclConfig& cfg) {
  if (!(cfg.scale > 0.0)) throw ParameterError("lmcl_loss: scale must be positive");
  if (cfg.margin < 0.0 || cfg.margin >= 1.0)
    throw ParameterError("lmcl_loss: margin must lie in [0, 1)");
  if (descriptor.rank() != 1 || classifier.rank() != 2 ||
      classifier.dim(1) != descriptor.dim(0))
    throw DimensionError("lmcl_loss: descriptor and classifier widths differ");
  const std::int64_t k = classifier.dim(0);
  if (label < 0 || label >= k)
    throw IndexError("lmcl_loss: label " + std::to_string(label) + " out of range");

  // cos_j = <w_j, d>; margin is pulled off the target class only.
  Tensor cos = reshape(matmul(classifier, reshape(descriptor, {descriptor.dim(0), 1})), {k});
  std::vector<double> margin_vec(static_cast<std::size_t>(k), 0.0);
  margin_vec[static_cast<std::size_t>(label)] = cfg.margin;
  Tensor logits = scalar_mul(sub(cos, Tensor::from_data({k}, std::move(margin_vec))), cfg.scale);
  return cross_entropy_logits(logits, label);
}

void optimizer_step(AdamState& state, const std::vector<ParamGroup>& groups,
                    const AdamConfig& cfg) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (const auto& group : groups) {
    for (const auto& [name, t] : group.params) {
      if (!t.has_grad()) continue;
      auto& data = const_cast<Tensor&>(t).data();
      const auto& grad = t.grad();
      auto& m = state.m[name];
      auto& v = state.v[name];
      if (m.empty()) m.assign(data.size(), 0.0);
      if (v.empty()) v.assign(data.size(), 0.0);
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        data[i] -= group.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      }
      if (group.renormalize_rows && t.rank() == 2) {
        const std::int64_t rows = t.dim(0), cols = t.dim(1);
        for (std::int64_t r = 0; r < rows; ++r) {
          double norm_sq = 0.0;
          for (std::int64_t j = 0; j < cols; ++j) {
            const double x = data[static_cast<std::size_t>(r * cols + j)];
            norm_sq += x * x;
          }
          const double inv = 1.0 / std::max(std::sqrt(norm_sq), 1e-12);
          for (std::int64_t j = 0; j < cols; ++j)
            data[static_cast<std::size_t>(r * cols + j)] *= inv;
        }
      }
    }
  }
}

EpochResult train_epoch(DsFormerWeights& model, std::vector<ClassifierWeights>& classifiers,
                        const std::vector<TrainGroup>& groups,
                        const std::function<Tensor(const std::string&)>& image_for,
                        AdamState& state, const TrainConfig& cfg, Rng& rng) {
  if (groups.empty()) throw ConfigError("train_epoch: no groups");
  if (classifiers.size() != groups.size())
    throw ConfigError("train_epoch: classifier count does not match group count");
  if (cfg.batch < 1 || cfg.iters < 1)
    throw ConfigError("train_epoch: batch and iters must be >= 1");
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].class_ids.empty())
      throw ConfigError("train_epoch: group " + std::to_string(g) + " has no classes");
    if (groups[g].class_ids.size() != groups[g].members.size())
      throw ConfigError("train_epoch: group " + std::to_string(g) + " class/member mismatch");
    for (std::size_t c = 0; c < groups[g].members.size(); ++c)
      if (groups[g].members[c].empty())
        throw ConfigError("train_epoch: class '" + groups[g].class_ids[c] + "' has no images");
  }

  EpochResult result;
  result.losses.reserve(static_cast<std::size_t>(cfg.iters));
  for (int it = 0; it < cfg.iters; ++it) {
    const std::size_t g = static_cast<std::size_t>(state.step) % groups.size();
    const TrainGroup& group = groups[g];
    ClassifierWeights& head = classifiers[g];

    for (auto& [name, t] : model.named_parameters()) const_cast<Tensor&>(t).zero_grad();
    head.weight.zero_grad();

    Tensor total;
    for (int slot = 0; slot < cfg.batch; ++slot) {
      const std::size_t cls = rng.uniform_index(group.class_ids.size());
      const std::size_t img = rng.uniform_index(group.members[cls].size());
      Tensor image = image_for(group.members[cls][img]);
      Tensor desc = dsformer_forward(image, model);
      Tensor loss = lmcl_loss(desc, head.weight, static_cast<std::int64_t>(cls), cfg.lmcl);
      total = slot == 0 ? loss : add(total, loss);
    }
    Tensor mean = scalar_mul(total, 1.0 / static_cast<double>(cfg.batch));
    if (!std::isfinite(mean.value()))
      throw EvaluationError("train_epoch: batch loss is not finite");
    mean.backward();

    std::vector<ParamGroup> param_groups;
    param_groups.push_back({model.named_parameters(), cfg.lr_model, false});
    param_groups.push_back(
        {{{"classifier." + std::to_string(g) + ".w", head.weight}}, cfg.lr_classifier, true});
    optimizer_step(state, param_groups, cfg.adam);
    result.losses.push_back(mean.value());
  }
  double acc = 0.0;
  for (double l : result.losses) acc += l;
  result.mean_loss = acc / static_cast<double>(result.losses.size());
  return result;
}

}  // namespace dsvpr
