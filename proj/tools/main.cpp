// SPDX-License-Identifier: Apache-2.0
//
// polypseg command line: train / infer / eval / bench / gradcheck / synth.
// Exit codes: 0 success, 1 contract or data errors, 2 usage errors.

#include <cmath>
#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "polypseg/bench.hpp"
#include "polypseg/gradcheck.hpp"
#include "polypseg/image_io.hpp"
#include "polypseg/model.hpp"
#include "polypseg/train.hpp"

namespace {

using namespace polypseg;

int cmd_train(const std::string& manifest_path, int epochs, double lr, int batch,
              int size, std::uint64_t seed, const std::string& out_path,
              const std::string& loss_log) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.lr = static_cast<float>(lr);
  cfg.batch_size = batch;
  cfg.input_size = size;
  cfg.seed = seed;
  SampleManifest manifest = load_manifest(manifest_path);
  TrainResult result = train(cfg, manifest);
  save_weights(result.params, out_path);
  if (!loss_log.empty()) {
    write_text_file(loss_log, format_loss_log(result.epoch_loss));
  }
  std::printf("trained %d epochs on %zu samples; final loss %.6f; weights -> %s\n",
              epochs, manifest.samples.size(),
              result.epoch_loss.empty() ? 0.0 : result.epoch_loss.back(),
              out_path.c_str());
  return 0;
}

int cmd_infer(const std::string& weights, const std::string& image_path,
              const std::string& out_path, double threshold,
              const std::string& overlay_path) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ContractError("infer: threshold must be in (0,1)");
  }
  ModelParams params = load_weights(weights);
  const ImageBuffer original = read_pnm(image_path);
  const int size = params.arch.input_size;
  const Tensor input =
      normalize_image(resize_bilinear(original, size, size));
  const Tensor prob = model_forward(std::as_const(params), input);

  // Binarize at model resolution, then map back to the source resolution.
  ImageBuffer mask_small;
  mask_small.w = size;
  mask_small.h = size;
  mask_small.channels = 1;
  mask_small.pixels.resize(static_cast<std::size_t>(size) * size);
  for (int i = 0; i < size * size; ++i) {
    mask_small.pixels[i] =
        prob.data[i] >= static_cast<float>(threshold) ? 255 : 0;
  }
  const ImageBuffer mask = resize_nearest(mask_small, original.w, original.h);
  write_pnm(mask, out_path);

  if (!overlay_path.empty()) {
    ImageBuffer overlay;
    overlay.w = original.w;
    overlay.h = original.h;
    overlay.channels = 3;
    overlay.pixels.resize(static_cast<std::size_t>(original.w) * original.h * 3);
    for (int y = 0; y < original.h; ++y) {
      for (int x = 0; x < original.w; ++x) {
        const bool pos = mask.at(y, x) != 0;
        for (int c = 0; c < 3; ++c) {
          const int base = original.channels == 3 ? original.at(y, x, c)
                                                  : original.at(y, x, 0);
          int v = base;
          if (pos) {
            // 0.5*pixel + 0.5*(255,0,0)
            v = static_cast<int>(
                std::lround(0.5 * base + 0.5 * (c == 0 ? 255.0 : 0.0)));
          }
          overlay.at(y, x, c) = static_cast<std::uint8_t>(v);
        }
      }
    }
    write_pnm(overlay, overlay_path);
  }
  std::printf("mask -> %s\n", out_path.c_str());
  return 0;
}

int cmd_eval(const std::string& weights, const std::string& manifest_path,
             const std::string& report_path, double threshold, bool micro) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ContractError("eval: threshold must be in (0,1)");
  }
  ModelParams params = load_weights(weights);
  SampleManifest manifest = load_manifest(manifest_path);
  EvalResult res = evaluate(params, manifest, static_cast<float>(threshold));
  write_text_file(report_path, res.csv);
  std::printf("macro mean: miou=%.4f dsc=%.4f recall=%.4f precision=%.4f "
              "accuracy=%.4f f2=%.4f\n",
              res.mean.miou, res.mean.dsc, res.mean.recall, res.mean.precision,
              res.mean.accuracy, res.mean.f2);
  if (micro) {
    std::printf("micro (pooled pixels): miou=%.4f dsc=%.4f recall=%.4f "
                "precision=%.4f accuracy=%.4f f2=%.4f\n",
                res.micro.miou, res.micro.dsc, res.micro.recall,
                res.micro.precision, res.micro.accuracy, res.micro.f2);
  }
  std::printf("report -> %s\n", report_path.c_str());
  return 0;
}

int cmd_bench(const std::string& weights, int size, int iters, int warmup,
              int workers, const std::string& csv_path) {
  ModelParams params = load_weights(weights);
  BenchReport report = run_benchmark(params, size, iters, warmup, workers);
  std::fputs(format_bench_text(report).c_str(), stdout);
  if (!csv_path.empty()) {
    write_text_file(csv_path, format_bench_csv(report));
  }
  return 0;
}

int cmd_gradcheck(double eps, double tol) {
  GradCheckReport report = run_gradcheck(eps, tol);
  for (const auto& c : report.cases) {
    std::printf("%-38s max_rel_err=%.3e  %s\n", c.name.c_str(), c.max_rel_err,
                c.passed ? "ok" : "FAIL");
  }
  std::printf("%zu checks, eps=%g tol=%g: %s\n", report.cases.size(), report.eps,
              report.tol, report.all_passed ? "all passed" : "FAILURES");
  return report.all_passed ? 0 : 1;
}

int cmd_synth(int n, int size, std::uint64_t seed, const std::string& out_dir) {
  SampleManifest m = gen_synthetic(n, size, seed, out_dir);
  std::printf("wrote %zu samples under %s (manifest.csv)\n", m.samples.size(),
              out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"polyp segmentation engine"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "train on a manifest");
  std::string train_manifest, train_out, train_loss_log;
  int train_epochs = 1, train_batch = 1, train_size = 512;
  double train_lr = 1e-4;
  std::uint64_t train_seed = 1;
  train_cmd->add_option("--manifest", train_manifest)->required();
  train_cmd->add_option("--epochs", train_epochs)->required();
  train_cmd->add_option("--lr", train_lr)->required();
  train_cmd->add_option("--batch", train_batch)->required();
  train_cmd->add_option("--size", train_size)->required();
  train_cmd->add_option("--seed", train_seed)->required();
  train_cmd->add_option("--out", train_out)->required();
  train_cmd->add_option("--loss-log", train_loss_log);

  // infer
  auto* infer_cmd = app.add_subcommand("infer", "segment one image");
  std::string infer_weights, infer_image, infer_out, infer_overlay;
  double infer_threshold = 0.5;
  infer_cmd->add_option("--weights", infer_weights)->required();
  infer_cmd->add_option("--image", infer_image)->required();
  infer_cmd->add_option("--out", infer_out)->required();
  infer_cmd->add_option("--threshold", infer_threshold);
  infer_cmd->add_option("--overlay", infer_overlay);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate on a manifest");
  std::string eval_weights, eval_manifest, eval_report;
  double eval_threshold = 0.5;
  bool eval_micro = false;
  eval_cmd->add_option("--weights", eval_weights)->required();
  eval_cmd->add_option("--manifest", eval_manifest)->required();
  eval_cmd->add_option("--report", eval_report)->required();
  eval_cmd->add_option("--threshold", eval_threshold);
  eval_cmd->add_flag("--micro", eval_micro);

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "measure inference FPS");
  std::string bench_weights, bench_csv;
  int bench_size = 512, bench_iters = 100, bench_warmup = 10, bench_workers = 0;
  bench_cmd->add_option("--weights", bench_weights)->required();
  bench_cmd->add_option("--size", bench_size);
  bench_cmd->add_option("--iters", bench_iters);
  bench_cmd->add_option("--warmup", bench_warmup);
  bench_cmd->add_option("--workers", bench_workers);
  bench_cmd->add_option("--csv", bench_csv);

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference suite");
  double grad_eps = 1e-3, grad_tol = 1e-4;
  grad_cmd->add_option("--eps", grad_eps);
  grad_cmd->add_option("--tol", grad_tol);

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
  int synth_n = 8, synth_size = 64;
  std::uint64_t synth_seed = 1;
  std::string synth_dir;
  synth_cmd->add_option("--n", synth_n)->required();
  synth_cmd->add_option("--size", synth_size)->required();
  synth_cmd->add_option("--seed", synth_seed)->required();
  synth_cmd->add_option("--out-dir", synth_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    std::cerr << app.help() << "\n";
    return 2;
  }

  try {
    if (*train_cmd) {
      return cmd_train(train_manifest, train_epochs, train_lr, train_batch,
                       train_size, train_seed, train_out, train_loss_log);
    }
    if (*infer_cmd) {
      return cmd_infer(infer_weights, infer_image, infer_out, infer_threshold,
                       infer_overlay);
    }
    if (*eval_cmd) {
      return cmd_eval(eval_weights, eval_manifest, eval_report, eval_threshold,
                      eval_micro);
    }
    if (*bench_cmd) {
      return cmd_bench(bench_weights, bench_size, bench_iters, bench_warmup,
                       bench_workers, bench_csv);
    }
    if (*grad_cmd) {
      return cmd_gradcheck(grad_eps, grad_tol);
    }
    if (*synth_cmd) {
      return cmd_synth(synth_n, synth_size, synth_seed, synth_dir);
    }
  } catch (const polypseg::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
