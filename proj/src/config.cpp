#include "segnet/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "segnet/io.hpp"

namespace segnet::config {
namespace {

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported.
class Section {
 public:
  Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("'" + name_ + "' must be a JSON object");
  }

  template <typename Fn>
  void with(const char* key, Fn&& fn) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      fn(*it);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  void count(const char* key, std::size_t& out) {
    with(key, [&](const nlohmann::json& v) { out = as_count(v, key); });
  }

  void u64(const char* key, std::uint64_t& out) {
    with(key, [&](const nlohmann::json& v) {
      if (!v.is_number_unsigned()) throw ConfigError(where(key) + " must be a nonnegative integer");
      out = v.get<std::uint64_t>();
    });
  }

  void real(const char* key, double& out) {
    with(key, [&](const nlohmann::json& v) {
      if (!v.is_number()) throw ConfigError(where(key) + " must be a number");
      out = v.get<double>();
    });
  }

  void text(const char* key, std::string& out) {
    with(key, [&](const nlohmann::json& v) {
      if (!v.is_string()) throw ConfigError(where(key) + " must be a string");
      out = v.get<std::string>();
    });
  }

  template <std::size_t N>
  void counts(const char* key, std::array<std::size_t, N>& out) {
    with(key, [&](const nlohmann::json& v) {
      if (!v.is_array() || v.size() != N) {
        throw ConfigError(where(key) + " must be an array of " + std::to_string(N) + " integers");
      }
      for (std::size_t i = 0; i < N; ++i) out[i] = as_count(v[i], key);
    });
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError("unknown key '" + name_ + "." + key + "'");
    }
  }

 private:
  std::string where(const char* key) const { return "'" + name_ + "." + key + "'"; }

  std::size_t as_count(const nlohmann::json& v, const char* key) const {
    if (!v.is_number_unsigned()) throw ConfigError(where(key) + " must be a nonnegative integer");
    return v.get<std::size_t>();
  }

  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

template <typename Fn>
void validated(Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

Json to_json(const model::ModelConfig& c) {
  Json j;
  j["input_size"] = c.input_size;
  j["input_channels"] = c.input_channels;
  j["encoder_tap_widths"] = c.encoder_tap_widths;
  j["bottleneck_width"] = c.bottleneck_width;
  j["decoder_widths"] = c.decoder_widths;
  j["aspp_filters"] = c.aspp_filters;
  j["aspp_dilations"] = c.aspp_dilations;
  j["output_channels"] = c.output_channels;
  j["variant"] = model::to_string(c.variant);
  return j;
}

Json to_json(const augment::AugConfig& c) {
  Json j;
  j["rotation_deg"] = c.rotation_deg;
  j["shift_frac"] = c.shift_frac;
  j["zoom_frac"] = c.zoom_frac;
  j["hflip_prob"] = c.hflip_prob;
  j["seed"] = c.seed;
  return j;
}

Json to_json(const pipeline::DataConfig& c) {
  Json j;
  j["train_ratio"] = c.ratios.train;
  j["val_ratio"] = c.ratios.val;
  j["test_ratio"] = c.ratios.test;
  j["split_seed"] = c.split_seed;
  return j;
}

Json to_json(const pipeline::TrainConfig& c) {
  Json train;
  train["epochs"] = c.epochs;
  train["batch_size"] = c.batch_size;
  train["lr"] = c.adam.lr;
  train["beta1"] = c.adam.beta1;
  train["beta2"] = c.adam.beta2;
  train["epsilon"] = c.adam.epsilon;
  train["loss"] = pipeline::to_string(c.loss);
  train["seed"] = c.seed;
  train["checkpoint"] = c.checkpoint;
  train["eval_every"] = c.eval_every;
  train["threshold"] = c.threshold;
  train["hd95_mode"] = metrics::to_string(c.hd95_mode);
  Json j;
  j["model"] = to_json(c.model);
  j["aug"] = to_json(c.aug);
  j["train"] = std::move(train);
  j["data"] = to_json(c.data);
  return j;
}

model::ModelConfig model_from_json(const nlohmann::json& j) {
  model::ModelConfig c;
  Section s(j, "model");
  s.count("input_size", c.input_size);
  s.count("input_channels", c.input_channels);
  s.counts("encoder_tap_widths", c.encoder_tap_widths);
  s.count("bottleneck_width", c.bottleneck_width);
  s.counts("decoder_widths", c.decoder_widths);
  s.count("aspp_filters", c.aspp_filters);
  s.counts("aspp_dilations", c.aspp_dilations);
  s.count("output_channels", c.output_channels);
  s.with("variant", [&](const nlohmann::json& v) {
    if (!v.is_string()) throw ConfigError("'model.variant' must be a string");
    validated([&] { c.variant = model::parse_variant(v.get<std::string>()); });
  });
  s.finish();
  validated([&] { c.validate(); });
  return c;
}

augment::AugConfig aug_from_json(const nlohmann::json& j) {
  augment::AugConfig c;
  Section s(j, "aug");
  s.real("rotation_deg", c.rotation_deg);
  s.real("shift_frac", c.shift_frac);
  s.real("zoom_frac", c.zoom_frac);
  s.real("hflip_prob", c.hflip_prob);
  s.u64("seed", c.seed);
  s.finish();
  validated([&] { c.validate(); });
  return c;
}

pipeline::DataConfig data_from_json(const nlohmann::json& j) {
  pipeline::DataConfig c;
  Section s(j, "data");
  s.real("train_ratio", c.ratios.train);
  s.real("val_ratio", c.ratios.val);
  s.real("test_ratio", c.ratios.test);
  s.u64("split_seed", c.split_seed);
  s.finish();
  validated([&] { c.ratios.validate(); });
  return c;
}

pipeline::TrainConfig train_config_from_json(const nlohmann::json& j) {
  pipeline::TrainConfig c;
  Section top(j, "config");
  top.with("model", [&](const nlohmann::json& v) { c.model = model_from_json(v); });
  top.with("aug", [&](const nlohmann::json& v) { c.aug = aug_from_json(v); });
  top.with("data", [&](const nlohmann::json& v) { c.data = data_from_json(v); });
  top.with("train", [&](const nlohmann::json& v) {
    Section s(v, "train");
    s.count("epochs", c.epochs);
    s.count("batch_size", c.batch_size);
    s.real("lr", c.adam.lr);
    s.real("beta1", c.adam.beta1);
    s.real("beta2", c.adam.beta2);
    s.real("epsilon", c.adam.epsilon);
    s.with("loss", [&](const nlohmann::json& x) {
      if (!x.is_string()) throw ConfigError("'train.loss' must be a string");
      validated([&] { c.loss = pipeline::parse_loss(x.get<std::string>()); });
    });
    s.u64("seed", c.seed);
    s.text("checkpoint", c.checkpoint);
    s.count("eval_every", c.eval_every);
    s.real("threshold", c.threshold);
    s.with("hd95_mode", [&](const nlohmann::json& x) {
      if (!x.is_string()) throw ConfigError("'train.hd95_mode' must be a string");
      validated([&] { c.hd95_mode = metrics::parse_hd95_mode(x.get<std::string>()); });
    });
    s.finish();
  });
  top.finish();
  validated([&] { c.validate(); });
  return c;
}

pipeline::TrainConfig load_train_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return train_config_from_json(j);
}

std::string default_config_text() { return to_json(pipeline::TrainConfig{}).dump(2) + "\n"; }

}  // namespace segnet::config
