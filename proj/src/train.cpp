// SPDX-License-Identifier: Apache-2.0
#include "polypseg/train.hpp"

#include <cstdio>
#include <fstream>
#include <numeric>

#include "polypseg/rng.hpp"

namespace polypseg {

double dice_bce_loss(const Tensor& pred, const Tensor& target) {
  Tape t;
  const int p = t.leaf(pred, false);
  return static_cast<double>(t.value(t.dice_bce_loss(p, target)).data[0]);
}

namespace {

struct LoadedSample {
  Tensor image;  // (1,3,S,S)
  Tensor mask;   // (1,1,S,S)
};

LoadedSample load_sample(const std::string& image_path,
                         const std::string& mask_path, int size) {
  LoadedSample s;
  try {
    s.image = normalize_image(resize_bilinear(read_pnm(image_path), size, size));
  } catch (const Error& e) {
    throw IoError(std::string("failed to load image '") + image_path +
                  "': " + e.what());
  }
  try {
    s.mask = binarize_mask(resize_nearest(read_pnm(mask_path), size, size));
  } catch (const Error& e) {
    throw IoError(std::string("failed to load mask '") + mask_path +
                  "': " + e.what());
  }
  return s;
}

Tensor stack_batch(const std::vector<const Tensor*>& items) {
  const Dims d0 = items[0]->dims;
  Tensor out({static_cast<int>(items.size()), d0.c, d0.h, d0.w});
  const std::int64_t per = d0.count();
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::copy(items[i]->data.begin(), items[i]->data.end(),
              out.data.begin() + static_cast<std::int64_t>(i) * per);
  }
  return out;
}

void validate(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ContractError("train: epochs must be >= 1");
  if (cfg.batch_size < 1) throw ContractError("train: batch_size must be >= 1");
  if (cfg.input_size < 16 || cfg.input_size % 16 != 0) {
    throw ConfigError("train: input_size must be a positive multiple of 16");
  }
  if (!(cfg.lr > 0.0f)) throw ContractError("train: lr must be > 0");
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const SampleManifest& manifest) {
  validate(cfg);
  if (manifest.samples.empty()) {
    throw ContractError("train: manifest lists no samples");
  }

  // Desk-scale: decode and resize the whole dataset up front.
  std::vector<LoadedSample> data;
  data.reserve(manifest.samples.size());
  for (const auto& [image, mask] : manifest.samples) {
    data.push_back(load_sample(image, mask, cfg.input_size));
  }

  ArchConfig arch;
  arch.input_size = cfg.input_size;
  ModelParams params = build_model(arch);
  init_params(params, cfg.seed);

  const std::vector<std::string> trainable = params.trainable_names();
  AdamState adam(AdamConfig{cfg.lr, 0.9f, 0.999f, 1e-8f});

  Rng shuffle_rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.epoch_loss.reserve(cfg.epochs);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Tensor*> images, masks;
      for (std::size_t i = start; i < end; ++i) {
        images.push_back(&data[order[i]].image);
        masks.push_back(&data[order[i]].mask);
      }
      const Tensor batch_x = stack_batch(images);
      const Tensor batch_y = stack_batch(masks);

      Tape tape;
      const int x = tape.leaf(batch_x, false);
      TapeModelForward fwd = model_forward_tape(tape, params, x);
      const int loss = tape.dice_bce_loss(fwd.output, batch_y);
      loss_sum += static_cast<double>(tape.value(loss).data[0]);
      ++steps;
      tape.backward(loss);

      std::vector<Tensor*> plist;
      std::vector<const Tensor*> glist;
      plist.reserve(fwd.leaves.size());
      glist.reserve(fwd.leaves.size());
      for (const auto& [name, id] : fwd.leaves) {
        plist.push_back(&params.at(name));
        glist.push_back(&tape.grad(id));
      }
      adam_step(plist, glist, adam);
    }
    result.epoch_loss.push_back(loss_sum / steps);
  }

  result.optimizer_steps = adam.step_count;
  result.params = std::move(params);
  return result;
}

EvalResult evaluate_with(const Predictor& predict, const SampleManifest& manifest,
                         int input_size, float threshold) {
  if (manifest.samples.empty()) {
    throw ContractError("evaluate: manifest lists no samples");
  }
  EvalResult res;
  ConfusionCounts pooled;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
    const auto& [image_path, mask_path] = manifest.samples[i];
    LoadedSample s = load_sample(image_path, mask_path, input_size);
    const Tensor pred = predict(static_cast<int>(i), s.image);
    const ConfusionCounts c = confusion_counts(pred, s.mask, threshold);
    pooled += c;
    res.names.push_back(image_path);
    res.rows.push_back(compute_metrics(c));
  }
  res.mean = aggregate_dataset(res.rows);
  res.micro = compute_metrics(pooled);
  res.csv = format_metrics_csv(res.names, res.rows, res.mean);
  return res;
}

EvalResult evaluate(const ModelParams& params, const SampleManifest& manifest,
                    float threshold) {
  return evaluate_with(
      [&params](int, const Tensor& image) {
        return model_forward(params, image, ForwardOptions{});
      },
      manifest, params.arch.input_size, threshold);
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << content;
  if (!f) throw IoError("write failed for '" + path + "'");
}

std::string format_loss_log(const std::vector<double>& epoch_loss) {
  std::string out = "epoch,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < epoch_loss.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f\n", i + 1, epoch_loss[i]);
    out += buf;
  }
  return out;
}

}  // namespace polypseg
