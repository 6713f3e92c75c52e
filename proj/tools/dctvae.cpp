// SPDX-License-Identifier: Apache-2.0
//
// dctvae: train, evaluate, diagnose, compress, sample and sweep.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dctvae/checkpoint.hpp"
#include "dctvae/diagnostics.hpp"
#include "dctvae/eval.hpp"
#include "dctvae/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace dctvae;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out.flush()) throw std::runtime_error("cannot write " + path.string());
}

fs::path root() { return data_root(fs::current_path() / "data"); }

// Test pixels in codec units from an explicit IDX file or the config's split.
Tensor<double> test_pixels(const RunConfig& cfg, const std::string& data, std::uint64_t seed, std::string& source,
                           std::string& checksum) {
  Dataset d;
  if (data.empty()) {
    d = load_training_data(cfg.data, root(), seed).test;
  } else {
    const fs::path p = fs::path(data).is_absolute() || fs::exists(data) ? fs::path(data) : root() / data;
    d = load_idx(p);
  }
  source = d.source;
  checksum = d.checksum();
  return epoch_pixels(cfg, d, true, 0);
}

nlohmann::ordered_json base_manifest(const std::string& command, const RunConfig& cfg, std::uint64_t seed,
                                     const std::string& ckpt) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["seed"] = seed;
  j["checkpoint"] = ckpt;
  j["config"] = config_text(cfg);
  return j;
}

template <class Fn>
int with_checkpoint(const std::string& path, Fn&& fn) {
  if (checkpoint_precision(path) == Precision::kFloat64) {
    const auto ckpt = read_checkpoint<double>(path);
    return fn(*restore_model(ckpt));
  }
  const auto ckpt = read_checkpoint<float>(path);
  return fn(*restore_model(ckpt));
}

int cmd_train(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed,
              const std::string& resume, int stop_after, int epochs) {
  RunConfig cfg = config.empty() ? RunConfig{} : load_config(config);
  if (seed) cfg.trainer.seed = *seed;
  if (epochs >= 0) cfg.trainer.epochs = epochs;
  const TrainingData data = load_training_data(cfg.data, root(), cfg.trainer.seed);
  TrainOptions opts;
  opts.out_dir = out;
  if (!resume.empty()) opts.resume = resume;
  if (stop_after >= 0) opts.stop_after = stop_after;
  opts.on_metrics = [](const EpochMetrics& m) {
    std::cout << "epoch " << m.epoch << ' ' << m.split << " nelbo " << m.nelbo_nats << " kl " << m.kl_nats
              << " diff " << m.diff_nats << " skips " << m.skips << std::endl;
  };
  if (cfg.trainer.precision == Precision::kFloat64)
    run_training<double>(cfg, data, opts);
  else
    run_training<float>(cfg, data, opts);
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, int iw, std::uint64_t seed, const std::string& out) {
  return with_checkpoint(ckpt, [&](const auto& model) {
    std::string source, checksum;
    const auto pixels = test_pixels(model.config(), data, seed, source, checksum);
    const auto r = nll_bound(model, pixels, iw, seed, model.config().eval.batch_size);
    auto j = base_manifest("eval", model.config(), seed, ckpt);
    j["data"] = source;
    j["data_checksum"] = checksum;
    j["items"] = pixels.dim(0);
    j["importance_samples"] = r.importance_samples;
    j["nll_nats"] = r.nats;
    j["bits_per_dim"] = r.bits_per_dim;
    std::cout << "nll " << r.nats << " nats, " << r.bits_per_dim << " bits/dim (k=" << iw << ", "
              << pixels.dim(0) << " items)\n";
    if (!out.empty()) write_text(fs::path(out) / "eval.json", j.dump(2) + "\n");
    return 0;
  });
}

int cmd_diagnose(const std::string& ckpt, const std::string& data, const std::string& out, std::uint64_t seed,
                 int n_mc) {
  return with_checkpoint(ckpt, [&](const auto& model) {
    const RunConfig& cfg = model.config();
    std::string source, checksum;
    const auto pixels = test_pixels(cfg, data, seed, source, checksum);
    DiagnosticsOptions o;
    o.delta = cfg.eval.au_threshold;
    o.n_mc = n_mc > 0 ? n_mc : cfg.eval.n_mc;
    o.batch_size = cfg.eval.batch_size;
    o.seed = seed;
    o.dataset = source;
    const auto rep = collapse_report(model, pixels, o);
    const auto grid = default_kl_grid(rep.per_unit_kl);
    const fs::path dir(out);
    write_text(dir / "collapse.json", rep.to_json() + "\n");
    write_text(dir / "kl_cdf.csv", kl_cdf_csv(grid, kl_cdf(rep.per_unit_kl, grid)));
    auto j = base_manifest("diagnose", cfg, seed, ckpt);
    j["data"] = source;
    j["data_checksum"] = checksum;
    write_text(dir / "manifest.json", j.dump(2) + "\n");
    std::cout << "active units " << rep.au << " of " << rep.units() << ", mean kl/unit " << rep.kl_per_unit()
              << ", below 1e-2: " << rep.fraction_below(1e-2) << "\n";
    return 0;
  });
}

int cmd_compress(const std::string& ckpt, const std::string& image, const std::string& out, double tau,
                 std::uint64_t seed, int layers, int factor) {
  return with_checkpoint(ckpt, [&](const auto& model) {
    const RgbImage img = load_ppm(image);
    CompressOptions o;
    o.tau = tau;
    o.seed = seed;
    o.baseline_layers = layers;
    o.image_id = fs::path(image).stem().string();
    const auto res = compress_image(img, model, o);
    const fs::path dir(out);
    fs::create_directories(dir);
    write_file_bytes(dir / "image.dcti", res.bitstream);
    write_ppm(res.reconstruction, dir / "reconstruction.ppm");
    std::string records = res.record.to_json() + "\n";
    if (model.codec()) {
      write_ppm(res.context_image, dir / "context.ppm");
      if (decompress_image(res.bitstream, model, o) != res.reconstruction)
        throw std::runtime_error("bitstream does not reproduce the reconstruction");
    }
    if (factor > 1) {
      const RgbImage down = downsample_baseline(img, factor);
      RateDistortionRecord rec;
      rec.image_id = o.image_id;
      rec.bpp = 24.0 / (factor * factor);
      rec.psnr = psnr(to_planar(img), to_planar(down), 255.0);
      rec.msssim = msssim(to_planar(img), to_planar(down), 255.0);
      rec.method = "downsample " + std::to_string(factor) + "x";
      records += rec.to_json() + "\n";
      write_ppm(down, dir / "downsample.ppm");
    }
    write_text(dir / "rd.jsonl", records);
    auto j = base_manifest("compress", model.config(), seed, ckpt);
    j["image"] = image;
    j["tau"] = tau;
    j["bitstream_bytes"] = res.bitstream.size();
    write_text(dir / "manifest.json", j.dump(2) + "\n");
    std::cout << records;
    return 0;
  });
}

template <class T>
void write_samples(const JointModel<T>& model, const std::string& out, int count, double tau, std::uint64_t seed) {
  const ModelConfig& m = model.model_config();
  const int side = m.image_side;
  const auto batch = make_batch(model, Tensor<double>({count, m.image_channels, side, side}));
  Rng noise_rng(derive_seed(seed, 0x5a));
  Rng prior_rng(derive_seed(seed, 0x5b));
  const auto noise = draw_noise<T>(m, count, noise_rng);
  const auto images = partial_reconstruction(model, batch, 0, tau, noise, prior_rng);
  const int cols = std::max(1, static_cast<int>(std::ceil(std::sqrt(count))));
  const int rows = (count + cols - 1) / cols;
  Tensor<double> sheet({3, rows * side, cols * side});
  for (int n = 0; n < count; ++n)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
          sheet[(static_cast<std::size_t>(c) * rows * side + (n / cols) * side + y) * cols * side + (n % cols) * side + x] =
              255.0 * images.at(n, std::min(c, m.image_channels - 1), y, x);
  write_ppm(from_planar(sheet), out);
  std::cout << "wrote " << count << " samples to " << out << "\n";
}

int cmd_sample(const std::string& ckpt, const std::string& out, int count, double tau, std::uint64_t seed) {
  return with_checkpoint(ckpt, [&](const auto& model) {
    write_samples(model, out, count, tau, seed);
    return 0;
  });
}

int cmd_sweep(const std::string& configs, const std::string& out, std::optional<std::uint64_t> seed) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(configs))
    if (e.is_regular_file() && (e.path().extension() == ".ini" || e.path().extension() == ".cfg"))
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .ini or .cfg files in " + configs);
  std::vector<RunConfig> cfgs;
  for (const auto& f : files) {
    cfgs.push_back(load_config(f.string()));
    if (seed) cfgs.back().trainer.seed = *seed;
  }
  for (const auto& c : cfgs)
    if (c.data.train_images != cfgs.front().data.train_images || c.data.test_images != cfgs.front().data.test_images)
      throw std::runtime_error("sweep configs must share one dataset");
  const TrainingData data = load_training_data(cfgs.front().data, root(), cfgs.front().trainer.seed);
  const auto table = depth_sweep(cfgs, data);
  const std::string csv = sweep_csv(table);
  if (!out.empty()) write_text(fs::path(out) / "sweep.csv", csv);
  std::cout << csv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical VAE with a DCT context and a diffusion prior"};
  app.require_subcommand(1);

  std::string config, out, resume, ckpt, data, image, configs;
  std::uint64_t seed = 0;
  int stop_after = -1, epochs = -1, iw = 1, n_mc = 0, layers = 2, factor = 4, count = 16;
  double tau = 0.1, sample_tau = 1.0;

  auto* train = app.add_subcommand("train", "Train a model and write checkpoints, metrics and a manifest");
  train->add_option("--config", config, "Run configuration (INI)")->check(CLI::ExistingFile);
  train->add_option("--out", out, "Output directory")->required();
  auto* train_seed = train->add_option("--seed", seed, "Overrides trainer.seed");
  train->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--stop-after", stop_after, "Stop once this many epochs have completed");
  train->add_option("--epochs", epochs, "Overrides trainer.epochs");

  auto* eval = app.add_subcommand("eval", "Negative log-likelihood bound on a test set");
  eval->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data, "IDX images (default: the config's test split)");
  eval->add_option("--iw", iw, "Importance samples")->check(CLI::PositiveNumber);
  eval->add_option("--seed", seed, "Noise seed");
  eval->add_option("--out", out, "Directory for eval.json");

  auto* diagnose = app.add_subcommand("diagnose", "Per-unit KL, active units and the KL CDF");
  diagnose->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  diagnose->add_option("--data", data, "IDX images (default: the config's test split)");
  diagnose->add_option("--out", out, "Output directory")->required();
  diagnose->add_option("--seed", seed, "Noise seed");
  diagnose->add_option("--mc", n_mc, "Posterior samples per image (default: eval.n_mc)");

  auto* compress = app.add_subcommand("compress", "Tile, encode and reconstruct a PPM image");
  compress->add_option("--ckpt", ckpt, "Checkpoint of an RGB model")->required()->check(CLI::ExistingFile);
  compress->add_option("--image", image, "P6 image")->required()->check(CLI::ExistingFile);
  compress->add_option("--out", out, "Output directory")->required();
  compress->add_option("--tau", tau, "Temperature for untransmitted latents")->check(CLI::NonNegativeNumber);
  compress->add_option("--seed", seed, "Noise seed");
  compress->add_option("--layers", layers, "Posterior layers sent by no-context models");
  compress->add_option("--downsample", factor, "Also report a block-downsampling baseline (1 disables)");

  auto* sample = app.add_subcommand("sample", "Unconditional samples as a PPM contact sheet");
  sample->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  sample->add_option("--out", out, "Output PPM")->required();
  sample->add_option("--count", count, "Number of samples")->check(CLI::PositiveNumber);
  sample->add_option("--tau", sample_tau, "Prior temperature")->check(CLI::NonNegativeNumber);
  sample->add_option("--seed", seed, "Noise seed");

  auto* sweep = app.add_subcommand("sweep", "Train each config in a directory and tabulate collapse metrics");
  sweep->add_option("--configs", configs, "Directory of INI configs")->required()->check(CLI::ExistingDirectory);
  sweep->add_option("--out", out, "Directory for sweep.csv");
  auto* sweep_seed = sweep->add_option("--seed", seed, "Overrides trainer.seed of every config");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(train))
      return cmd_train(config, out, train_seed->count() ? std::optional(seed) : std::nullopt, resume, stop_after,
                       epochs);
    if (app.got_subcommand(eval)) return cmd_eval(ckpt, data, iw, seed, out);
    if (app.got_subcommand(diagnose)) return cmd_diagnose(ckpt, data, out, seed, n_mc);
    if (app.got_subcommand(compress)) return cmd_compress(ckpt, image, out, tau, seed, layers, factor);
    if (app.got_subcommand(sample)) return cmd_sample(ckpt, out, count, sample_tau, seed);
    if (app.got_subcommand(sweep))
      return cmd_sweep(configs, out, sweep_seed->count() ? std::optional(seed) : std::nullopt);
  } catch (const std::exception& e) {
    std::cerr << "dctvae: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
