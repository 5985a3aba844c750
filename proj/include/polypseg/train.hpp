// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "polypseg/image_io.hpp"
#include "polypseg/metrics.hpp"
#include "polypseg/model.hpp"

namespace polypseg {

struct TrainConfig {
  int epochs = 1;
  int batch_size = 1;
  float lr = 1e-4f;
  std::uint64_t seed = 1;
  int input_size = 512;  // divisible by 16
  float threshold = 0.5f;
  // loss: BCE + Dice, the only configured kind.
};

/// Mean of -[y ln p + (1-y) ln(1-p)] with p clamped to [1e-7, 1-1e-7], plus
/// 1 - (2*sum(p*y)+1)/(sum(p)+sum(y)+1) over the whole batch.
double dice_bce_loss(const Tensor& pred, const Tensor& target);

struct TrainResult {
  ModelParams params;
  std::vector<double> epoch_loss;   // mean step loss per epoch
  std::int64_t optimizer_steps = 0;
};

/// Full training loop: He init, seeded shuffling, batched tape forward,
/// Adam updates. Deterministic per config; same seed twice gives
/// bit-identical weights.
TrainResult train(const TrainConfig& cfg, const SampleManifest& manifest);

struct EvalResult {
  std::vector<std::string> names;     // image paths
  std::vector<MetricRow> rows;        // per-image metrics
  MetricRow mean;                     // macro average (the reported row)
  MetricRow micro;                    // pooled-pixel alternative
  std::string csv;                    // formatted report
};

/// Per-image inference + metrics at `threshold`. Images are resized
/// (bilinear) and masks resized (nearest) to the model's input size.
/// Never mutates params.
EvalResult evaluate(const ModelParams& params, const SampleManifest& manifest,
                    float threshold);

/// Same protocol with an injected predictor (index, image tensor) -> mask
/// probabilities; used to validate the metric plumbing independently of the
/// network.
using Predictor = std::function<Tensor(int index, const Tensor& image)>;
EvalResult evaluate_with(const Predictor& predict, const SampleManifest& manifest,
                         int input_size, float threshold);

void write_text_file(const std::string& path, const std::string& content);

/// Loss log CSV: header `epoch,loss`, one row per epoch.
std::string format_loss_log(const std::vector<double>& epoch_loss);

}  // namespace polypseg
