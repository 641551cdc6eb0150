#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace tcsa {

struct SegMetrics {
  std::vector<double> dsc;  // per class
  double mean_dsc = 0.0;
  double miou = 0.0;
};

// DSC_c = 2|P∩G| / (|P|+|G|); IoU with the union. A class absent from both
// prediction and ground truth scores 1.
inline SegMetrics segmentation_metrics(const std::vector<int>& pred, const std::vector<int>& gt,
                                       std::size_t num_classes) {
  if (pred.size() != gt.size()) throw std::invalid_argument("metrics: mask size mismatch");
  std::vector<std::size_t> inter(num_classes, 0), psize(num_classes, 0), gsize(num_classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= 0 && static_cast<std::size_t>(pred[i]) < num_classes) psize[pred[i]]++;
    if (gt[i] >= 0 && static_cast<std::size_t>(gt[i]) < num_classes) gsize[gt[i]]++;
    if (pred[i] == gt[i] && pred[i] >= 0 && static_cast<std::size_t>(pred[i]) < num_classes)
      inter[pred[i]]++;
  }
  SegMetrics m;
  double iou_sum = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double denom = static_cast<double>(psize[c] + gsize[c]);
    const double d = denom == 0.0 ? 1.0 : 2.0 * static_cast<double>(inter[c]) / denom;
    m.dsc.push_back(d);
    m.mean_dsc += d;
    const double uni = static_cast<double>(psize[c] + gsize[c] - inter[c]);
    iou_sum += uni == 0.0 ? 1.0 : static_cast<double>(inter[c]) / uni;
  }
  m.mean_dsc /= static_cast<double>(num_classes);
  m.miou = iou_sum / static_cast<double>(num_classes);
  return m;
}

}  // namespace tcsa
