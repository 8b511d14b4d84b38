#include "commands.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <ostream>

#include <CLI11.hpp>

#include "config.hpp"
#include "mrcl/checkpoint.hpp"
#include "mrcl/errors.hpp"

namespace mrcl::cli {

namespace fs = std::filesystem;

namespace {

RunConfig load_config(const std::string& path, const std::vector<std::string>& sets) {
  RunConfig cfg = parse_config_file(path);
  for (const auto& s : sets) apply_override(cfg, s);
  return cfg;
}

void write_snapshot(const fs::path& dir, const std::string& text, bool overwrite) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  const fs::path path = dir / "config.toml";
  if (!overwrite && fs::exists(path)) return;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

int cmd_pretrain(const std::string& config, const std::vector<std::string>& sets, bool dry_run, bool resume,
                 std::ostream& out) {
  RunConfig cfg = load_config(config, sets);
  if (resume && cfg.pretrain.run_dir.empty()) throw ConfigError("--resume needs run.dir to name an existing run");
  cfg.pretrain.run_dir = resolve_run_dir(cfg);
  cfg.validate();
  const std::string text = to_toml(cfg);
  if (dry_run) {
    out << text;
    return kExitOk;
  }
  require_dataset_root(cfg.pretrain.dataset, "dataset.root");
  write_snapshot(cfg.pretrain.run_dir, text, !resume);
  train::PretrainOptions opts;
  opts.resume = resume;
  opts.log = &out;
  opts.config_text = text;
  const fs::path ckpt = train::pretrain(cfg.pretrain, opts);
  out << "run dir: " << cfg.pretrain.run_dir.string() << "\n";
  out << "checkpoint: " << ckpt.string() << "\n";
  return kExitOk;
}

int cmd_probe(const std::string& checkpoint, const std::string& config, const std::vector<std::string>& sets,
              std::ostream& out) {
  RunConfig cfg = load_config(config, sets);
  cfg.validate();
  if (!fs::is_regular_file(checkpoint)) throw CheckpointError("checkpoint does not exist: " + checkpoint);
  const auto train_spec = cfg.probe_train_spec();
  const auto test_spec = cfg.probe_test_spec();
  require_dataset_root(train_spec, "probe.root");
  const data::Dataset train_set = train_spec.load();
  if (!train_set.labeled()) throw ConfigError("probe dataset " + data::to_string(train_spec.name) + " is unlabeled");
  const data::Dataset test_set = test_spec.load();
  eval::ProbeConfig probe = cfg.probe;
  probe.seed = cfg.pretrain.train.seed;
  const auto result = eval::linear_probe(fs::path(checkpoint), train_set, test_set, probe);
  out << std::fixed << std::setprecision(4) << "train top-1: " << result.train_top1 << "\n"
      << "top-1: " << result.top1 << "\n";
  return kExitOk;
}

int cmd_ablate(const std::string& config, const std::vector<std::string>& sets, std::ostream& out) {
  RunConfig cfg = load_config(config, sets);
  cfg.pretrain.run_dir = resolve_run_dir(cfg);
  cfg.validate();
  const eval::SweepSpec spec = cfg.sweep_spec();
  spec.validate();
  require_dataset_root(spec.base.dataset, "dataset.root");
  require_dataset_root(spec.probe_train, "probe.root");
  write_snapshot(cfg.pretrain.run_dir, to_toml(cfg), false);
  const eval::SweepReport report = eval::run_sweep(spec, &out);
  out << report.summary();
  out << "report: " << (spec.out_dir / "report.jsonl").string() << "\n";
  const bool any_ok = std::any_of(report.cells.begin(), report.cells.end(), [](const auto& c) { return c.ok; });
  return any_ok ? kExitOk : kExitRuntime;
}

Image standardized_to_pixels(const Image& img, const vit::ViTConfig& mc) {
  Image out = img;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        const double v = img.at(y, x, c) * mc.input_std[c] + mc.input_mean[c];
        out.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

int cmd_reconstruct_demo(const std::string& checkpoint, const std::string& image, double ratio,
                         const std::string& strategy, std::uint64_t seed, int scale, const std::string& output,
                         std::ostream& out) {
  if (scale < 1) throw ConfigError("--scale must be >= 1");
  const masking::MaskStrategy strat = masking::parse_strategy(strategy);
  if (!fs::is_regular_file(checkpoint)) throw CheckpointError("checkpoint does not exist: " + checkpoint);
  const auto state = train::load_checkpoint<float>(checkpoint);
  const auto& model = state.model;
  const auto& mc = model.config();

  data::AugConfig aug;
  aug.output_size = {mc.image_height, mc.image_width};
  const data::LabeledImage src{data::read_image(image), data::kUnlabeled};
  const Image original = data::eval_view(src, aug).pixels;

  Rng rng = make_rng({seed, tag(Stream::kMask)});
  const auto plan = masking::make_mask_plan(mc.num_patches(), ratio, strat, rng, {mc.grid_rows(), mc.grid_cols()});
  const auto patches = model.prepare(original);
  const auto rep = model.encode(model.embed_patches(patches, plan), plan);
  const Image recon = standardized_to_pixels(masking::unpatchify(model.decode(rep)), mc);

  Image masked = original;
  const int p = mc.patch_size;
  for (int idx : plan.masked()) {
    const int gy = idx / mc.grid_cols();
    const int gx = idx % mc.grid_cols();
    for (int y = gy * p; y < (gy + 1) * p; ++y) {
      for (int x = gx * p; x < (gx + 1) * p; ++x) {
        for (int c = 0; c < original.channels; ++c) masked.at(y, x, c) = 0.5f;
      }
    }
  }

  const int gap = 2;
  const int h = original.height;
  const int w = original.width;
  Image panel(h * scale, (3 * w + 2 * gap) * scale, 3, 1.0f);
  const Image* parts[3] = {&original, &masked, &recon};
  for (int k = 0; k < 3; ++k) {
    const int x0 = k * (w + gap);
    for (int y = 0; y < h * scale; ++y) {
      for (int x = 0; x < w * scale; ++x) {
        for (int c = 0; c < 3; ++c) panel.at(y, x0 * scale + x, c) = parts[k]->at(y / scale, x / scale, c);
      }
    }
  }
  data::write_image(panel, output);
  out << "masked " << plan.masked().size() << " of " << mc.num_patches() << " patches\n"
      << "wrote " << output << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Masked reconstruction contrastive pretraining", "mrcl"};
  app.require_subcommand(1);

  std::string config;
  std::vector<std::string> sets;
  bool dry_run = false;
  bool resume = false;
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain an encoder");
  pretrain->add_option("--config,-c", config, "TOML config file")->required();
  pretrain->add_option("--set", sets, "Override, e.g. train.mask_ratio=0.2 (repeatable)");
  pretrain->add_flag("--dry-run", dry_run, "Validate and print the resolved config");
  pretrain->add_flag("--resume", resume, "Continue from run.dir/checkpoints/latest.ckpt");

  std::string checkpoint;
  auto* probe = app.add_subcommand("probe", "Linear-probe a checkpoint");
  probe->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  probe->add_option("--config,-c", config, "TOML config file")->required();
  probe->add_option("--set", sets, "Override (repeatable)");

  auto* ablate = app.add_subcommand("ablate", "Run a pretrain+probe sweep");
  ablate->add_option("--config,-c", config, "TOML config file")->required();
  ablate->add_option("--set", sets, "Override (repeatable)");

  std::string image;
  std::string output = "reconstruction.png";
  std::string strategy = "random";
  double ratio = 0.75;
  std::uint64_t seed = 0;
  int scale = 4;
  auto* demo = app.add_subcommand("reconstruct-demo", "Write original | masked | reconstructed panels");
  demo->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  demo->add_option("--image", image, "Input image")->required();
  demo->add_option("--mask-ratio,-r", ratio, "Fraction of patches to mask");
  demo->add_option("--strategy", strategy, "random, blockwise or gridwise");
  demo->add_option("--seed", seed, "Mask seed");
  demo->add_option("--scale", scale, "Nearest-neighbour upscale factor");
  demo->add_option("--out,-o", output, "Output image path");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (pretrain->parsed()) return cmd_pretrain(config, sets, dry_run, resume, out);
    if (probe->parsed()) return cmd_probe(checkpoint, config, sets, out);
    if (ablate->parsed()) return cmd_ablate(config, sets, out);
    return cmd_reconstruct_demo(checkpoint, image, ratio, strategy, seed, scale, output, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace mrcl::cli
