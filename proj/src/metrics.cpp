// SPDX-License-Identifier: Apache-2.0
#include "polypseg/metrics.hpp"

#include <cstdio>

namespace polypseg {

ConfusionCounts confusion_counts(const Tensor& pred, const Tensor& gt,
                                 float threshold) {
  if (!(pred.dims == gt.dims)) {
    throw ContractError("confusion_counts: pred " + pred.dims.str() +
                        " vs gt " + gt.dims.str());
  }
  if (!(threshold > 0.0f && threshold < 1.0f)) {
    throw ContractError("confusion_counts: threshold must be in (0,1)");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const float g = gt.data[i];
    if (g != 0.0f && g != 1.0f) {
      throw ContractError("confusion_counts: ground truth must be binary, found " +
                          std::to_string(g));
    }
    const bool p = pred.data[i] >= threshold;
    const bool t = g == 1.0f;
    if (p && t) ++c.tp;
    else if (p && !t) ++c.fp;
    else if (!p && t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

MetricRow compute_metrics(const ConfusionCounts& c) {
  if (c.tp < 0 || c.fp < 0 || c.fn < 0 || c.tn < 0 || c.total() <= 0) {
    throw ContractError("compute_metrics: counts must partition a positive total");
  }
  MetricRow r;
  const double tp = static_cast<double>(c.tp);
  const double fp = static_cast<double>(c.fp);
  const double fn = static_cast<double>(c.fn);
  const double tn = static_cast<double>(c.tn);
  if (c.tp + c.fp + c.fn == 0) {
    // Empty prediction against an empty mask: perfect by convention.
    r.miou = r.dsc = r.f2 = r.precision = r.recall = 1.0;
  } else {
    r.miou = tp / (tp + fp + fn);
    r.dsc = 2.0 * tp / (2.0 * tp + fp + fn);
    r.recall = c.tp + c.fn == 0 ? 1.0 : tp / (tp + fn);
    r.precision = c.tp + c.fp == 0 ? 1.0 : tp / (tp + fp);
    r.f2 = 5.0 * tp / (5.0 * tp + 4.0 * fn + fp);
  }
  r.accuracy = (tp + tn) / (tp + fp + fn + tn);
  return r;
}

MetricRow aggregate_dataset(const std::vector<MetricRow>& rows) {
  if (rows.empty()) {
    throw ContractError("aggregate_dataset: empty metric list");
  }
  MetricRow mean;
  for (const MetricRow& r : rows) {
    mean.miou += r.miou;
    mean.dsc += r.dsc;
    mean.recall += r.recall;
    mean.precision += r.precision;
    mean.accuracy += r.accuracy;
    mean.f2 += r.f2;
  }
  const double n = static_cast<double>(rows.size());
  mean.miou /= n;
  mean.dsc /= n;
  mean.recall /= n;
  mean.precision /= n;
  mean.accuracy /= n;
  mean.f2 /= n;
  return mean;
}

namespace {

void append_row(std::string& out, const std::string& name, const MetricRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f\n",
                name.c_str(), r.miou, r.dsc, r.recall, r.precision, r.accuracy,
                r.f2);
  out += buf;
}

}  // namespace

std::string format_metrics_csv(const std::vector<std::string>& names,
                               const std::vector<MetricRow>& rows,
                               const MetricRow& mean) {
  if (names.size() != rows.size()) {
    throw ContractError("format_metrics_csv: name/row count mismatch");
  }
  std::string out = "image,miou,dsc,recall,precision,accuracy,f2\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    append_row(out, names[i], rows[i]);
  }
  append_row(out, "MEAN", mean);
  return out;
}

}  // namespace polypseg
