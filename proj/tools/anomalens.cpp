// anomalens: command line front end for the detection pipeline.
//
//   anomalens <gen|train-vq|encode|train-ar|detect|eval|ablate|run> --config cfg.json
//             [--out dir] [--seed N] [--png]

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "anomalens/pipeline.hpp"

namespace fs = std::filesystem;
using namespace anomalens;

namespace {

// Mid-axial slice, min-max scaled to 8-bit grey.
void write_png_slice(const fs::path& path, const Volume& v) {
  const int z = v.shape[0] / 2, H = v.shape[1], W = v.shape[2];
  float lo = v(z, 0, 0), hi = lo;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      lo = std::min(lo, v(z, y, x));
      hi = std::max(hi, v(z, y, x));
    }
  const float scale = hi > lo ? 255.0f / (hi - lo) : 0.0f;
  std::vector<png_byte> pixels(static_cast<std::size_t>(H) * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      pixels[static_cast<std::size_t>(y) * W + x] = static_cast<png_byte>(std::lround((v(z, y, x) - lo) * scale));

  fs::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw std::runtime_error("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("libpng: out of memory");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng: failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < H; ++y) png_write_row(png, &pixels[static_cast<std::size_t>(y) * W]);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer-based anomaly detection on paired uptake/anatomy phantoms"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(pipeline::kVersion));

  std::string config_path, out_dir = "run", ablate_kind = "all", kernel;
  std::uint64_t seed = 0;
  int count = 0;
  double t = -1, epsilon = -1;
  bool png = false, full = false, quiet = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory")->capture_default_str();
    sub->add_option("--seed", seed, "master seed (overrides the config)");
    sub->add_flag("--png", png, "render mid-axial slices of volumes and maps");
    sub->add_flag("-q,--quiet", quiet, "no progress messages");
    return sub;
  };
  auto* gen = common(app.add_subcommand("gen", "generate phantoms and the split manifest"));
  gen->add_option("--count", count, "number of phantoms (overrides the config)")->check(CLI::PositiveNumber);
  common(app.add_subcommand("train-vq", "train the uptake and anatomy VQ-GANs"));
  common(app.add_subcommand("encode", "encode every volume to token grids"));
  common(app.add_subcommand("train-ar", "train the autoregressive models"));
  auto* detect = common(app.add_subcommand("detect", "write anomaly maps for the detection split"));
  detect->add_option("--t", t, "likelihood threshold for resampling")->check(CLI::Range(0.0, 1.0));
  detect->add_option("--kernel", kernel, "KDE kernel")
      ->check(CLI::IsMember({"gaussian", "tophat", "epanechnikov", "exponential", "linear", "cosine"}));
  detect->add_option("--epsilon", epsilon, "bandwidth regularizer")->check(CLI::NonNegativeNumber);
  common(app.add_subcommand("eval", "score anomaly maps against ground truth"));
  auto* ablate = common(app.add_subcommand("ablate", "codebook and kernel/epsilon ablation grids"));
  ablate->add_option("--kind", ablate_kind, "codebook, kde or all")
      ->check(CLI::IsMember({"codebook", "kde", "all"}))
      ->capture_default_str();
  ablate->add_flag("--full", full, "full codebook grid instead of the 2x2 smoke grid (slow)");
  common(app.add_subcommand("run", "gen through eval in one go"));

  CLI11_PARSE(app, argc, argv);
  const auto* sub = app.get_subcommands().front();
  const std::string stage = sub->get_name();

  try {
    auto cfg = pipeline::load_config(config_path);
    if (sub->count("--seed")) cfg.seed = seed;
    if (count > 0) cfg.count = count;
    if (t >= 0) cfg.detect.t = t;
    if (!kernel.empty()) cfg.detect.kde.kernel = anomaly::parse_kernel(kernel);
    if (epsilon >= 0) cfg.detect.kde.epsilon = epsilon;
    if (full) cfg.ablate.full = true;
    cfg.validate();

    pipeline::Options opt;
    opt.workers = pipeline::workers_from_env();
    if (!quiet) opt.log = [](const std::string& m) { std::cerr << m << "\n"; };
    if (png) opt.png = write_png_slice;

    const fs::path out(out_dir);
    if (stage == "gen") pipeline::run_gen(cfg, out, opt);
    else if (stage == "train-vq") pipeline::run_train_vq(cfg, out, opt);
    else if (stage == "encode") pipeline::run_encode(cfg, out, opt);
    else if (stage == "train-ar") pipeline::run_train_ar(cfg, out, opt);
    else if (stage == "detect") pipeline::run_detect(cfg, out, opt);
    else if (stage == "eval") {
      const auto res = pipeline::run_eval(cfg, out, opt);
      if (!quiet) std::cout << res.summary.dump(2) << "\n";
    } else if (stage == "ablate") pipeline::run_ablate(cfg, out, ablate_kind, opt);
    else pipeline::run_all(cfg, out, opt);
  } catch (const pipeline::MissingStageError& e) {
    std::cerr << "anomalens " << stage << ": " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "anomalens " << stage << ": configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "anomalens " << stage << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}
