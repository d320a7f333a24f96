// Loss terms and the composite objective
//   L = L_bcls + alpha * L_mcls + beta * L_mig + gamma * L_mtg
// The image-grounding term is masked to samples whose image is manipulated;
// token grounding always contributes (all-real labelings are valid
// supervision).

#pragma once

#include <optional>
#include <vector>

#include "mmdg/tensor.hpp"

namespace mmdg {

struct CornerBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

// Throws InputError unless x1 <= x2 and y1 <= y2 (zero area permitted).
void validate_box(const CornerBox& b);

CornerBox cxcywh_to_corners(double cx, double cy, double w, double h);

double box_area(const CornerBox& b);
double box_iou(const CornerBox& a, const CornerBox& b);
// Plain-value GIoU in (-1, 1]; independent of the autodiff route.
double giou_value(const CornerBox& a, const CornerBox& b);

struct LossWeights {
  double alpha = 1.0;
  double beta = 0.1;
  double gamma = 1.0;

  void validate() const;
};

struct LossBreakdown {
  double bcls = 0;
  double mcls = 0;
  double mig = 0;
  double mtg = 0;
  double total = 0;
  bool mig_active = false;  // any image-manipulated sample in the batch
  bool mtg_active = true;
};

// Mean over rows of -log softmax(logits)[label]; thin alias over the
// numeric-core primitive so all losses live behind one header.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);

// Mean absolute difference over the 4 normalized coordinates.
Tensor l1_box(const Tensor& pred_cxcywh, const CornerBox& target);

// 1 - GIoU(pred, target), built from differentiable primitives so the
// gradient reaches the box parameterization.
Tensor giou_loss(const Tensor& pred_cxcywh, const CornerBox& target);

// Weighted combination; mig is absent when no sample in the batch had a
// manipulated image.
struct CompositeLoss {
  Tensor total;
  LossBreakdown numbers;
};
CompositeLoss composite_loss(const Tensor& bcls, const Tensor& mcls,
                             const std::optional<Tensor>& mig, const Tensor& mtg,
                             const LossWeights& weights);

}  // namespace mmdg
