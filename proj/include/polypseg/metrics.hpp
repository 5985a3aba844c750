// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "polypseg/tensor.hpp"

namespace polypseg {

/// Per-image pixel confusion at a binarization threshold. The four counts
/// always partition the image.
struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;

  std::int64_t total() const { return tp + fp + fn + tn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

/// The six reported metrics, each in [0,1].
struct MetricRow {
  double miou = 0.0;
  double dsc = 0.0;
  double recall = 0.0;
  double precision = 0.0;
  double accuracy = 0.0;
  double f2 = 0.0;
  std::optional<double> fps;
};

/// Pixel p counts as positive iff pred >= threshold. Requires matching
/// shapes, gt values in {0,1} and threshold in (0,1).
ConfusionCounts confusion_counts(const Tensor& pred, const Tensor& gt,
                                 float threshold);

/// IoU = tp/(tp+fp+fn), DSC = 2tp/(2tp+fp+fn), recall = tp/(tp+fn),
/// precision = tp/(tp+fp), accuracy = (tp+tn)/total,
/// F2 = 5tp/(5tp+4fn+fp). When tp+fp+fn == 0 (empty prediction against an
/// empty mask) IoU, DSC, F2, precision and recall are all 1 by convention.
MetricRow compute_metrics(const ConfusionCounts& c);

/// Arithmetic mean per metric over images (macro average).
MetricRow aggregate_dataset(const std::vector<MetricRow>& rows);

/// CSV report: header `image,miou,dsc,recall,precision,accuracy,f2`, one row
/// per image and a final MEAN row, 4 decimal places.
std::string format_metrics_csv(const std::vector<std::string>& names,
                               const std::vector<MetricRow>& rows,
                               const MetricRow& mean);

}  // namespace polypseg
