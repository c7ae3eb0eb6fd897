#include "segnet/cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "segnet/config.hpp"
#include "segnet/io.hpp"
#include "segnet/parallel.hpp"
#include "segnet/pipeline.hpp"

namespace segnet::cli {
namespace fs = std::filesystem;
namespace {

struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Every subcommand has a checking phase (failures exit 1) and a phase that
// writes output (failures exit 2).
using Action = std::function<void()>;
using Prepare = std::function<Action()>;

std::string dump(const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; }

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw ValidationError(std::string(what) + " not found: " + path);
}

void require_dir(const std::string& path, const char* what) {
  if (!fs::is_directory(path)) throw ValidationError(std::string(what) + " not found: " + path);
}

void check_fits(const model::ModelConfig& config, const data::Dataset& ds) {
  const Shape want{config.input_size, config.input_size, config.input_channels};
  for (const auto& s : ds.samples) {
    if (s.image.shape() != want) {
      throw ValidationError("sample " + s.id + " has shape " + shape_to_string(s.image.shape()) +
                            " but the model expects " + shape_to_string(want));
    }
  }
}

std::string epoch_line(const pipeline::EpochRecord& r) {
  char buf[160];
  if (r.val_dsc) {
    std::snprintf(buf, sizeof buf, "epoch %zu  steps %zu  loss %.6f  val dsc WT %.4f TC %.4f ET %.4f%s", r.epoch,
                  r.steps, r.train_loss, (*r.val_dsc)[0], (*r.val_dsc)[1], (*r.val_dsc)[2], r.best ? "  *" : "");
  } else {
    std::snprintf(buf, sizeof buf, "epoch %zu  steps %zu  loss %.6f", r.epoch, r.steps, r.train_loss);
  }
  return buf;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Residual U-Net with channel attention and ASPP for multi-region tumour segmentation", "segnet"};
  app.require_subcommand(0, 1);

  int threads = 0;
  bool print_config = false;
  app.add_option("--threads", threads, "Worker threads (default: SEGNET_THREADS, else 1)")->check(CLI::PositiveNumber);
  app.add_flag("--print-config", print_config, "Print the default configuration and exit");

  Prepare prepare;

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  std::string synth_out;
  std::size_t synth_n = 0, synth_size = 0, synth_channels = 4;
  std::uint64_t synth_seed = 0;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--n", synth_n, "Number of samples")->required();
  synth->add_option("--size", synth_size, "Image size (multiple of 32)")->required();
  synth->add_option("--seed", synth_seed, "Generator seed")->required();
  synth->add_option("--channels", synth_channels, "Image channels")->capture_default_str();
  synth->callback([&] {
    prepare = [&]() -> Action {
      if (synth_n < 1) throw ValidationError("--n must be at least 1");
      if (synth_size == 0 || synth_size % 32 != 0) throw ValidationError("--size must be a positive multiple of 32");
      if (synth_channels < 1) throw ValidationError("--channels must be positive");
      return [&] {
        const auto ds = data::generate_synthetic_dataset(synth_n, synth_size, synth_seed, synth_channels);
        data::save_dataset(ds, synth_out);
        out << "wrote " << ds.samples.size() << " samples to " << synth_out << "\n";
      };
    };
  });

  // train
  auto* train = app.add_subcommand("train", "Train a model");
  std::string train_config, train_data, train_out;
  train->add_option("--config", train_config, "Config JSON")->required();
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Output directory")->required();
  train->callback([&] {
    prepare = [&]() -> Action {
      require_file(train_config, "config");
      require_dir(train_data, "dataset");
      auto cfg = std::make_shared<pipeline::TrainConfig>(config::load_train_config(train_config));
      auto ds = std::make_shared<data::Dataset>(data::load_dataset(train_data));
      check_fits(cfg->model, *ds);
      const auto split = data::split_dataset(ds->ids(), cfg->data.ratios, cfg->data.split_seed);
      if (split.train.empty()) throw ValidationError("training split is empty");
      const fs::path dir(train_out);
      cfg->checkpoint = (cfg->checkpoint.empty() ? dir / "checkpoint.sgc" : dir / cfg->checkpoint).string();
      return [&, cfg, ds, dir] {
        fs::create_directories(dir);
        io::write_file(dir / "config.json", dump(config::to_json(*cfg)));
        const auto result = pipeline::train(*cfg, *ds, [&](const pipeline::EpochRecord& r) { err << epoch_line(r) << "\n"; });
        io::write_file(dir / "history.json", dump(result.history.to_json()));
        io::write_file(dir / "timing.json", dump(result.history.to_json(true)));
        out << "best epoch " << result.best_epoch << ", checkpoint " << cfg->checkpoint << "\n";
      };
    };
  });

  // eval
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on one split");
  std::string eval_checkpoint, eval_data, eval_split, eval_out, eval_mode = "max_of_directed";
  double eval_threshold = 0.5;
  eval->add_option("--checkpoint", eval_checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--split", eval_split, "train, val or test")->required()->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--out", eval_out, "Report JSON path")->required();
  eval->add_option("--threshold", eval_threshold, "Probability threshold")->capture_default_str();
  eval->add_option("--hd95-mode", eval_mode, "max_of_directed or union_percentile")->capture_default_str();
  eval->callback([&] {
    prepare = [&]() -> Action {
      require_file(eval_checkpoint, "checkpoint");
      require_dir(eval_data, "dataset");
      if (!(eval_threshold > 0.0 && eval_threshold < 1.0)) throw ValidationError("--threshold must lie in (0, 1)");
      const auto mode = metrics::parse_hd95_mode(eval_mode);
      auto cp = std::make_shared<pipeline::Checkpoint>(pipeline::load_checkpoint(eval_checkpoint));
      model::check_params(cp->config, cp->params);
      auto ds = std::make_shared<data::Dataset>(data::load_dataset(eval_data));
      check_fits(cp->config, *ds);
      auto ids = pipeline::checkpoint_split(*cp, ds->ids()).part(eval_split);
      return [&, cp, ds, ids, mode] {
        const auto report = pipeline::evaluate(*cp, *ds, ids, eval_threshold, mode);
        io::write_file(eval_out, dump(report.to_json()));
        out << metrics::format_table({{eval_split, &report}});
      };
    };
  });

  // predict
  auto* pred = app.add_subcommand("predict", "Segment one image");
  std::string pred_checkpoint, pred_image, pred_out;
  double pred_threshold = 0.5;
  bool pred_nesting = false;
  pred->add_option("--checkpoint", pred_checkpoint, "Checkpoint file")->required();
  pred->add_option("--image", pred_image, "Image tensor file (f32, S x S x C)")->required();
  pred->add_option("--out", pred_out, "Output directory")->required();
  pred->add_option("--threshold", pred_threshold, "Probability threshold")->capture_default_str();
  pred->add_flag("--enforce-nesting", pred_nesting, "Clip ET to TC and TC to WT");
  pred->callback([&] {
    prepare = [&]() -> Action {
      require_file(pred_checkpoint, "checkpoint");
      require_file(pred_image, "image");
      if (!(pred_threshold > 0.0 && pred_threshold < 1.0)) throw ValidationError("--threshold must lie in (0, 1)");
      auto cp = std::make_shared<pipeline::Checkpoint>(pipeline::load_checkpoint(pred_checkpoint));
      model::check_params(cp->config, cp->params);
      auto image = std::make_shared<Tensor>(io::read_f32_file(pred_image));
      const Shape want{cp->config.input_size, cp->config.input_size, cp->config.input_channels};
      if (image->shape() != want) {
        throw ValidationError("image has shape " + shape_to_string(image->shape()) + ", model expects " +
                              shape_to_string(want));
      }
      return [&, cp, image] {
        const auto p = pipeline::predict(*cp, *image, pred_threshold, pred_nesting);
        const fs::path dir(pred_out);
        fs::create_directories(dir);
        io::write_tensor_file(dir / "probabilities.sgt", p.probabilities);
        io::write_tensor_file(dir / "masks.sgt", p.masks.to_tensor<std::uint8_t>());
        out << "WT " << p.masks.wt.count() << "  TC " << p.masks.tc.count() << "  ET " << p.masks.et.count()
            << " pixels\n";
      };
    };
  });

  // ablate
  auto* abl = app.add_subcommand("ablate", "Train baseline and enhanced variants and compare");
  std::string abl_config, abl_data, abl_out;
  abl->add_option("--config", abl_config, "Config JSON")->required();
  abl->add_option("--data", abl_data, "Dataset directory")->required();
  abl->add_option("--out", abl_out, "Output directory")->required();
  abl->callback([&] {
    prepare = [&]() -> Action {
      require_file(abl_config, "config");
      require_dir(abl_data, "dataset");
      auto cfg = std::make_shared<pipeline::TrainConfig>(config::load_train_config(abl_config));
      auto ds = std::make_shared<data::Dataset>(data::load_dataset(abl_data));
      check_fits(cfg->model, *ds);
      if (data::split_dataset(ds->ids(), cfg->data.ratios, cfg->data.split_seed).train.empty()) {
        throw ValidationError("training split is empty");
      }
      const fs::path dir(abl_out);
      cfg->checkpoint = (dir / (cfg->checkpoint.empty() ? "checkpoint.sgc" : cfg->checkpoint)).string();
      return [&, cfg, ds, dir] {
        fs::create_directories(dir);
        const auto result = pipeline::ablate(*cfg, *ds, [&](const pipeline::EpochRecord& r) { err << epoch_line(r) << "\n"; });
        io::write_file(dir / "ablation.json", dump(result.to_json()));
        std::ostringstream table;
        table << result.table();
        for (const auto& v : result.variants) {
          table << model::to_string(v.variant) << ": " << v.parameter_count << " parameters\n";
        }
        io::write_file(dir / "ablation.txt", table.str());
        out << table.str();
      };
    };
  });

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the miniature model in 64-bit");
  std::string gc_variant;
  std::uint64_t gc_seed = 0;
  std::size_t gc_coords = 20;
  double gc_tol = 1e-5;
  gc->add_option("--variant", gc_variant, "baseline or enhanced (default: both)")
      ->check(CLI::IsMember({"baseline", "enhanced"}));
  gc->add_option("--seed", gc_seed, "Seed for parameters, sample and coordinates")->capture_default_str();
  gc->add_option("--coords", gc_coords, "Coordinates per parameter tensor")->capture_default_str();
  gc->add_option("--tolerance", gc_tol, "Pass threshold on the max relative error")->capture_default_str();
  gc->callback([&] {
    prepare = [&]() -> Action {
      if (gc_coords < 1) throw ValidationError("--coords must be at least 1");
      std::vector<model::Variant> variants;
      if (gc_variant.empty()) {
        variants = {model::Variant::Baseline, model::Variant::Enhanced};
      } else {
        variants = {model::parse_variant(gc_variant)};
      }
      return [&, variants] {
        bool ok = true;
        for (auto v : variants) {
          const auto cfg = model::ModelConfig::miniature(v);
          const Sample s = data::generate_sample(0, cfg.input_size, gc_seed, cfg.input_channels);
          pipeline::GradcheckOptions opts;
          opts.seed = gc_seed;
          opts.coords_per_tensor = gc_coords;
          const auto t0 = std::chrono::steady_clock::now();
          const auto r = pipeline::gradcheck(cfg, s, opts);
          const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          char buf[256];
          std::snprintf(buf, sizeof buf,
                        "%-8s max relative error %.3e (%s)  coords %zu  kinks skipped %zu  %.1fs  %s\n",
                        model::to_string(v).c_str(), r.max_rel_error, r.worst_tensor.c_str(), r.checked, r.skipped,
                        sec, r.passed(gc_tol) ? "PASS" : "FAIL");
          out << buf;
          ok = ok && r.passed(gc_tol);
        }
        if (!ok) throw pipeline::RuntimeFailure("gradient check exceeded tolerance");
      };
    };
  });

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kValidation;
  }

  if (print_config) {
    out << config::default_config_text();
    return kOk;
  }
  if (!prepare) {
    err << app.help();
    return kValidation;
  }
  set_num_threads(threads > 0 ? threads : threads_from_env(1));

  Action action;
  try {
    action = prepare();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }
  try {
    action();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace segnet::cli
