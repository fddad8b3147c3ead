#pragma once

// Rotated-box detection metrics: all-point interpolated AP per class and
// IoU threshold, COCO-style averages over 0.50:0.05:0.95, AR at a
// per-image detection cap and centre-point accuracy/recall.

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "drn/annotation.hpp"
#include "drn/geometry.hpp"

namespace drn {

inline constexpr std::array<double, 10> kCocoThresholds = {0.50, 0.55, 0.60, 0.65, 0.70,
                                                           0.75, 0.80, 0.85, 0.90, 0.95};

struct MatchResult {
  // Indexed like the input detections.
  std::vector<bool> true_positive;
  std::vector<int> matched_gt;  // -1 when unmatched
  std::vector<double> iou;      // IoU with the matched GT, else 0
  int unmatched_gt = 0;
};

// Greedy in descending score, ties by input index. A detection takes the
// unmatched same-class GT with the highest IoU if that IoU reaches the
// threshold.
MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<ObjectAnnotation>& gts, double iou_threshold);

// One scored detection after matching, pooled across images.
struct ScoredMatch {
  double score = 0.0;
  bool true_positive = false;
};

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

// Precision/recall at every distinct score, so equal-score detections
// enter together and their order does not matter.
std::vector<PrPoint> pr_curve(std::vector<ScoredMatch> matches, int num_gt);
// All-point interpolated area under the curve; 0 when there are no
// detections. Undefined (throws) for num_gt == 0.
double average_precision(const std::vector<ScoredMatch>& matches, int num_gt);

struct CenterPointMetrics {
  double accuracy = 0.0;
  double recall = 0.0;
  int predicted = 0;
  int correct = 0;
  int num_gt = 0;
};

struct EvalOptions {
  int max_detections = 300;  // per image, by score
};

struct MetricReport {
  // class -> AP at each of kCocoThresholds; classes without GT are absent.
  std::map<int, std::array<double, 10>> per_class_ap;
  std::map<int, std::array<double, 10>> per_class_recall;
  std::map<int, std::vector<PrPoint>> pr_curves_50;
  double map = 0.0;  // mean over thresholds and classes
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ar = 0.0;  // at max_detections
  int max_detections = 300;
  CenterPointMetrics center;
  int num_images = 0;
  int num_gt = 0;
  int num_detections = 0;
};

// `detections[i]` belongs to `ground_truth[i]`.
MetricReport coco_metrics(const std::vector<SceneAnnotation>& ground_truth,
                          const std::vector<std::vector<Detection>>& detections,
                          const EvalOptions& options = {});

// Correct iff the box matches an unmatched same-class GT at IoU >= 0.5.
CenterPointMetrics center_point_metrics(const std::vector<SceneAnnotation>& ground_truth,
                                        const std::vector<std::vector<Detection>>& detections);

std::string report_to_json(const MetricReport& report);

// Detection dumps share the annotation schema plus a "score" per object.
void write_detections(const std::filesystem::path& path,
                      const std::vector<SceneAnnotation>& images,
                      const std::vector<std::vector<Detection>>& detections);
std::vector<std::vector<Detection>> read_detections(const std::filesystem::path& path,
                                                    const std::vector<SceneAnnotation>& images);

}  // namespace drn
