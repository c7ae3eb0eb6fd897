#include "segnet/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "segnet/adam.hpp"
#include "segnet/config.hpp"
#include "segnet/io.hpp"
#include "segnet/rng.hpp"

namespace segnet::pipeline {

std::string to_string(LossKind loss) { return loss == LossKind::Bce ? "bce" : "bce_plus_dice"; }

LossKind parse_loss(const std::string& text) {
  if (text == "bce") return LossKind::Bce;
  if (text == "bce_plus_dice") return LossKind::BcePlusDice;
  throw ShapeError("unknown loss '" + text + "' (expected bce|bce_plus_dice)");
}

void TrainConfig::validate() const {
  model.validate();
  aug.validate();
  data.ratios.validate();
  adam.validate();
  if (epochs < 1) throw ShapeError("epochs must be at least 1");
  if (batch_size < 1) throw ShapeError("batch_size must be at least 1");
  if (eval_every < 1) throw ShapeError("eval_every must be at least 1");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ShapeError("threshold must lie in (0, 1)");
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
ad::NodeId bce_loss(ad::Graph<T>& g, ad::NodeId pred, const RegionMaskSet& truth) {
  return ad::bce_loss(g, pred, truth.to_tensor<T>());
}

template <typename T>
ad::NodeId soft_dice_loss(ad::Graph<T>& g, ad::NodeId pred, const RegionMaskSet& truth) {
  return ad::soft_dice_loss(g, pred, truth.to_tensor<T>());
}

template <typename T>
ad::NodeId training_loss(ad::Graph<T>& g, ad::NodeId pred, const BasicTensor<T>& target, LossKind kind) {
  const ad::NodeId bce = ad::bce_loss(g, pred, target);
  if (kind == LossKind::Bce) return bce;
  return ad::add(g, bce, ad::soft_dice_loss(g, pred, target));
}

template ad::NodeId bce_loss(ad::Graph<float>&, ad::NodeId, const RegionMaskSet&);
template ad::NodeId bce_loss(ad::Graph<double>&, ad::NodeId, const RegionMaskSet&);
template ad::NodeId soft_dice_loss(ad::Graph<float>&, ad::NodeId, const RegionMaskSet&);
template ad::NodeId soft_dice_loss(ad::Graph<double>&, ad::NodeId, const RegionMaskSet&);
template ad::NodeId training_loss(ad::Graph<float>&, ad::NodeId, const Tensor&, LossKind);
template ad::NodeId training_loss(ad::Graph<double>&, ad::NodeId, const Tensor64&, LossKind);

// ---------------------------------------------------------------------------
// Checkpoints

std::string encode_checkpoint(const Checkpoint& checkpoint) {
  io::Entries entries;
  for (const auto& [name, tensor] : checkpoint.params) entries.emplace(name, tensor);
  nlohmann::ordered_json meta = checkpoint.meta;
  meta["model"] = config::to_json(checkpoint.config);
  const std::string text = meta.dump();
  entries.emplace(kMetaEntry, ByteTensor({text.size()}, std::vector<std::uint8_t>(text.begin(), text.end())));
  return io::encode_container(entries);
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  io::Entries entries = io::decode_container(bytes);
  auto it = entries.find(kMetaEntry);
  if (it == entries.end() || !std::holds_alternative<ByteTensor>(it->second)) {
    throw io::FormatError(io::FormatErrorKind::Malformed, "checkpoint has no meta.json entry");
  }
  const auto& raw = std::get<ByteTensor>(it->second).values();
  Checkpoint cp;
  try {
    auto meta = nlohmann::ordered_json::parse(std::string(raw.begin(), raw.end()));
    cp.config = config::model_from_json(meta.at("model"));
    meta.erase("model");
    cp.meta = std::move(meta);
  } catch (const nlohmann::json::exception& e) {
    throw io::FormatError(io::FormatErrorKind::Malformed, "bad checkpoint metadata: " + std::string(e.what()));
  }
  entries.erase(it);
  for (auto& [name, tensor] : entries) {
    auto* f = std::get_if<Tensor>(&tensor);
    if (!f) throw io::FormatError(io::FormatErrorKind::Malformed, "parameter '" + name + "' is not f32");
    cp.params.emplace(name, std::move(*f));
  }
  return cp;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

data::DatasetSplit checkpoint_split(const Checkpoint& checkpoint, const std::vector<std::string>& ids) {
  const auto it = checkpoint.meta.find("data");
  if (it == checkpoint.meta.end()) throw ShapeError("checkpoint does not record a data split");
  const DataConfig dc = config::data_from_json(nlohmann::json::parse(it->dump()));
  return data::split_dataset(ids, dc.ratios, dc.split_seed);
}

// ---------------------------------------------------------------------------
// Training

nlohmann::ordered_json TrainHistory::to_json(bool include_timing) const {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& e : epochs) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["steps"] = e.steps;
    j["train_loss"] = e.train_loss;
    if (e.val_dsc) {
      j["val_dsc"] = {{"WT", (*e.val_dsc)[0]}, {"TC", (*e.val_dsc)[1]}, {"ET", (*e.val_dsc)[2]}};
    } else {
      j["val_dsc"] = nullptr;
    }
    j["best"] = e.best;
    if (include_timing) j["seconds"] = e.seconds;
    out.push_back(std::move(j));
  }
  return nlohmann::ordered_json{{"epochs", std::move(out)}};
}

namespace {

void check_sample_fits(const model::ModelConfig& config, const Sample& s) {
  const Shape want{config.input_size, config.input_size, config.input_channels};
  if (s.image.shape() != want) {
    throw ShapeError("sample " + s.id + " has shape " + shape_to_string(s.image.shape()) + " but the model expects " +
                     shape_to_string(want));
  }
}

nlohmann::ordered_json checkpoint_meta(const TrainConfig& config, std::size_t epoch, std::size_t steps) {
  nlohmann::ordered_json meta;
  meta["format"] = "segnet-checkpoint";
  meta["version"] = 1;
  meta["seed"] = config.seed;
  meta["data"] = config::to_json(config.data);
  meta["epoch"] = epoch;
  meta["steps"] = steps;
  return meta;
}

}  // namespace

TrainResult train(const TrainConfig& config, const data::Dataset& dataset, const data::DatasetSplit& split,
                  const ProgressFn& progress) {
  config.validate();
  if (split.train.empty()) throw ShapeError("training split is empty");
  std::vector<std::size_t> train_idx;
  for (const auto& id : split.train) train_idx.push_back(dataset.index_of(id));
  for (const auto& id : split.val) check_sample_fits(config.model, dataset.get(id));
  for (std::size_t i : train_idx) check_sample_fits(config.model, dataset.samples[i]);

  model::NamedParams<float> params = model::init_params(config.model, config.seed);
  AdamState<float> adam;
  adam.hyper = config.adam;

  TrainResult result;
  result.checkpoint = Checkpoint{config.model, params, checkpoint_meta(config, 0, 0)};
  const auto persist = [&] {
    if (!config.checkpoint.empty()) save_checkpoint(result.checkpoint, config.checkpoint);
  };
  persist();

  double best_score = -1.0;
  std::size_t steps = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    for (const auto& batch : data::batch_indices(train_idx.size(), config.batch_size, config.seed, epoch)) {
      NamedTensors<float> grads;
      for (std::size_t b : batch) {
        const std::size_t k = train_idx[b];
        const Sample s = augment::augment_sample(dataset.samples[k], config.aug, k, epoch);
        try {
          ad::Graph<float> g;
          const ad::NodeId pred = model::model_forward(g, g.constant(s.image), params, config.model);
          const ad::NodeId loss = training_loss(g, pred, s.masks.to_tensor<float>(), config.loss);
          loss_sum += static_cast<double>(g.value(loss)[0]);
          auto sample_grads = g.backward(loss);
          for (auto& [name, grad] : sample_grads) {
            auto [it, fresh] = grads.try_emplace(name, std::move(grad));
            if (!fresh) {
              auto dst = it->second.data();
              auto src = grad.data();
              for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
            }
          }
        } catch (const NonFiniteError& e) {
          throw RuntimeFailure("non-finite value in epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(steps + 1) + ", sample " + s.id + ": " + e.what() +
                               (config.checkpoint.empty() ? "" : "; last good checkpoint kept at " + config.checkpoint));
        }
      }
      const float inv = 1.0f / static_cast<float>(batch.size());
      for (auto& [name, grad] : grads) {
        for (auto& v : grad.data()) v *= inv;
      }
      adam_step(params, grads, adam);
      ++steps;
      for (const auto& [name, p] : params) {
        if (!p.all_finite()) {
          throw RuntimeFailure("parameter " + name + " became non-finite at step " + std::to_string(steps));
        }
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.steps = steps;
    rec.train_loss = loss_sum / static_cast<double>(train_idx.size());
    if (!std::isfinite(rec.train_loss)) throw RuntimeFailure("non-finite training loss in epoch " + std::to_string(epoch));

    const bool score_now = epoch % config.eval_every == 0 || epoch == config.epochs;
    if (split.val.empty()) {
      // Nothing to select on: keep the latest weights.
      rec.best = true;
    } else if (score_now) {
      const auto report = evaluate(config.model, params, dataset, split.val, config.threshold, config.hd95_mode);
      std::array<double, 3> dsc{};
      for (Region r : kRegions) dsc[static_cast<std::size_t>(r)] = report.mean_dsc(r);
      rec.val_dsc = dsc;
      const double score = (dsc[0] + dsc[1] + dsc[2]) / 3.0;
      rec.best = score > best_score;
      if (rec.best) best_score = score;
    }
    if (rec.best) {
      result.checkpoint = Checkpoint{config.model, params, checkpoint_meta(config, epoch, steps)};
      result.best_epoch = epoch;
      persist();
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.epochs.push_back(rec);
    if (progress) progress(rec);
  }
  result.steps = steps;
  return result;
}

TrainResult train(const TrainConfig& config, const data::Dataset& dataset, const ProgressFn& progress) {
  config.validate();
  return train(config, dataset, data::split_dataset(dataset.ids(), config.data.ratios, config.data.split_seed),
               progress);
}

// ---------------------------------------------------------------------------
// Evaluation and prediction

metrics::MetricsReport evaluate(const model::ModelConfig& config, const model::NamedParams<float>& params,
                                const data::Dataset& dataset, const std::vector<std::string>& ids, double threshold,
                                metrics::Hd95Mode mode) {
  model::check_params(config, params);
  if (!(threshold > 0.0 && threshold < 1.0)) throw ShapeError("threshold must lie in (0, 1)");
  for (const auto& id : ids) check_sample_fits(config, dataset.get(id));
  metrics::MetricsReport report(threshold, mode);
  for (const auto& id : ids) {
    const Sample& s = dataset.get(id);
    const Tensor probs = model::predict(s.image, params, config);
    report.add(id, metrics::evaluate_regions(probs, s.masks, threshold, mode));
  }
  return report;
}

metrics::MetricsReport evaluate(const Checkpoint& checkpoint, const data::Dataset& dataset,
                                const std::vector<std::string>& ids, double threshold, metrics::Hd95Mode mode) {
  return evaluate(checkpoint.config, checkpoint.params, dataset, ids, threshold, mode);
}

RegionMaskSet enforce_nesting(RegionMaskSet masks) {
  for (std::size_t y = 0; y < masks.wt.height(); ++y) {
    for (std::size_t x = 0; x < masks.wt.width(); ++x) {
      masks.tc.set(y, x, masks.tc.at(y, x) && masks.wt.at(y, x));
      masks.et.set(y, x, masks.et.at(y, x) && masks.tc.at(y, x));
    }
  }
  return masks;
}

Prediction predict(const Checkpoint& checkpoint, const Tensor& image, double threshold, bool nesting) {
  model::check_params(checkpoint.config, checkpoint.params);
  if (!(threshold > 0.0 && threshold < 1.0)) throw ShapeError("threshold must lie in (0, 1)");
  Sample probe;
  probe.image = image;
  check_sample_fits(checkpoint.config, probe);
  Prediction out;
  out.probabilities = model::predict(image, checkpoint.params, checkpoint.config);
  out.masks.wt = BinaryMask::threshold(out.probabilities, 0, threshold);
  out.masks.tc = BinaryMask::threshold(out.probabilities, 1, threshold);
  out.masks.et = BinaryMask::threshold(out.probabilities, 2, threshold);
  if (nesting) out.masks = enforce_nesting(std::move(out.masks));
  return out;
}

// ---------------------------------------------------------------------------
// Ablation

AblationResult ablate(const TrainConfig& config, const data::Dataset& dataset, const ProgressFn& progress) {
  config.validate();
  AblationResult result;
  result.split = data::split_dataset(dataset.ids(), config.data.ratios, config.data.split_seed);
  for (model::Variant v : {model::Variant::Baseline, model::Variant::Enhanced}) {
    TrainConfig c = config;
    c.model.variant = v;
    if (!c.checkpoint.empty()) {
      std::filesystem::path p(c.checkpoint);
      c.checkpoint = (p.parent_path() / (p.stem().string() + "_" + model::to_string(v) + p.extension().string())).string();
    }
    VariantResult vr;
    vr.variant = v;
    vr.parameter_count = model::parameter_count(c.model);
    vr.training = train(c, dataset, result.split, progress);
    vr.val = evaluate(vr.training.checkpoint, dataset, result.split.val, c.threshold, c.hd95_mode);
    vr.test = evaluate(vr.training.checkpoint, dataset, result.split.test, c.threshold, c.hd95_mode);
    result.variants.push_back(std::move(vr));
  }
  return result;
}

nlohmann::ordered_json AblationResult::to_json() const {
  nlohmann::ordered_json j;
  j["split"] = {{"seed", split.split_seed}, {"train", split.train}, {"val", split.val}, {"test", split.test}};
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& v : variants) {
    nlohmann::ordered_json r;
    r["variant"] = model::to_string(v.variant);
    r["parameter_count"] = v.parameter_count;
    r["best_epoch"] = v.training.best_epoch;
    r["steps"] = v.training.steps;
    r["val"] = v.val.to_json();
    r["test"] = v.test.to_json();
    r["history"] = v.training.history.to_json();
    rows.push_back(std::move(r));
  }
  j["variants"] = std::move(rows);
  return j;
}

std::string AblationResult::table() const {
  std::vector<std::pair<std::string, const metrics::MetricsReport*>> rows;
  for (const auto& v : variants) rows.emplace_back(model::to_string(v.variant), &v.val);
  return metrics::format_table(rows);
}

// ---------------------------------------------------------------------------
// Gradient checking

long double precise_bce(const Tensor64& pred, const Tensor64& target) {
  if (pred.shape() != target.shape()) throw ShapeError("precise_bce: shape mismatch");
  long double total = 0.0L;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const long double p = std::clamp<long double>(pred[i], 1e-7L, 1.0L - 1e-7L);
    const long double t = target[i];
    total -= t * std::log(p) + (1.0L - t) * std::log1p(-p);
  }
  return total / static_cast<long double>(pred.size());
}

GradcheckResult check_gradients(const LossBuilder& build, NamedTensors<double>& params,
                                const GradcheckOptions& options, const PreciseLoss& precise) {
  if (!(options.epsilon > 0.0)) throw ShapeError("gradcheck epsilon must be positive");
  ad::GradientMap<double> analytic;
  std::uint64_t base_pattern = 0;
  {
    ad::Graph<double> g;
    const ad::NodeId loss = build(g, params);
    base_pattern = g.activation_pattern();
    analytic = g.backward(loss);
  }
  struct Eval {
    long double loss;
    std::uint64_t pattern;
  };
  const auto evaluate_at = [&]() {
    ad::Graph<double> g;
    const ad::NodeId loss = build(g, params);
    const long double value = precise ? precise(g, loss) : static_cast<long double>(g.value(loss)[0]);
    return Eval{value, g.activation_pattern()};
  };

  GradcheckResult result;
  for (auto& [name, tensor] : params) {
    const auto grad_it = analytic.find(name);
    if (grad_it == analytic.end()) throw ShapeError("no gradient for parameter " + name);
    const auto& grad = grad_it->second;
    TensorCheck tc;
    Rng rng(derive_seed(options.seed, fnv1a(name)));
    const std::size_t n = tensor.size();
    const bool exhaustive = n <= options.coords_per_tensor;
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    std::size_t cursor = 0;
    while (tc.checked < std::min(n, options.coords_per_tensor) && cursor < n &&
           tc.skipped <= options.max_resamples) {
      std::size_t idx;
      if (exhaustive) {
        idx = pool[cursor++];
      } else {
        // Partial Fisher-Yates: distinct coordinates without replacement.
        const std::size_t j = cursor + static_cast<std::size_t>(rng.below(n - cursor));
        std::swap(pool[cursor], pool[j]);
        idx = pool[cursor++];
      }
      const double original = tensor[idx];
      tensor[idx] = original + options.epsilon;
      const Eval plus = evaluate_at();
      tensor[idx] = original - options.epsilon;
      const Eval minus = evaluate_at();
      tensor[idx] = original;
      if (plus.pattern != base_pattern || minus.pattern != base_pattern) {
        ++tc.skipped;
        continue;
      }
      const double numeric = static_cast<double>((plus.loss - minus.loss) / (2.0L * options.epsilon));
      const double a = grad[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      if (tc.checked == 0 || rel > tc.max_rel_error) {
        tc.max_rel_error = rel;
        tc.worst_index = idx;
      }
      ++tc.checked;
    }
    result.checked += tc.checked;
    result.skipped += tc.skipped;
    if (result.worst_tensor.empty() || tc.max_rel_error > result.max_rel_error) {
      result.max_rel_error = tc.max_rel_error;
      result.worst_tensor = name;
    }
    result.tensors.emplace(name, tc);
  }
  return result;
}

GradcheckResult gradcheck(const model::ModelConfig& config, const Sample& sample, const GradcheckOptions& options) {
  config.validate();
  sample.validate();
  check_sample_fits(config, sample);
  auto params = model::cast_params<double>(model::init_params(config, options.seed));
  const Tensor64 image = sample.image.cast<double>();
  const Tensor64 target = sample.masks.to_tensor<double>();
  const LossBuilder build = [&](ad::Graph<double>& g, const NamedTensors<double>& p) {
    const ad::NodeId pred = model::model_forward(g, g.constant(image), p, config);
    return ad::bce_loss(g, pred, target);
  };
  const PreciseLoss precise = [&](const ad::Graph<double>& g, ad::NodeId loss) {
    return precise_bce(g.value(g.inputs(loss).at(0)), target);
  };
  return check_gradients(build, params, options, precise);
}

}  // namespace segnet::pipeline
