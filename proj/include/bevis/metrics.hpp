#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace bevis {

struct SemanticMetrics {
  double miou = 0.0;
  double oacc = 0.0;
  double macc = 0.0;
  std::vector<std::optional<double>> class_iou;  // empty for classes absent from GT
  std::vector<std::optional<double>> class_acc;
};

/// Accumulates a confusion matrix over any number of scenes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);
  void add(std::span<const int> pred, std::span<const int> gt);
  SemanticMetrics metrics() const;
  std::size_t num_classes() const { return k_; }

 private:
  std::size_t k_;
  std::vector<std::size_t> counts_;  // gt × pred
};

SemanticMetrics semantic_metrics(std::span<const int> pred, std::span<const int> gt,
                                 std::size_t num_classes);

/// A predicted or GT instance: its class, confidence and sorted point set.
struct Segment {
  int semantic_class = 0;
  double confidence = 1.0;
  std::vector<std::size_t> points;
};

/// One segment per instance id (in ascending id order) with the majority class
/// of its points and confidence = segment size / point count.
std::vector<Segment> segments_from_labels(std::span<const int> instances,
                                          std::span<const int> semantics,
                                          std::size_t num_classes);

struct MatchMatrix {
  std::size_t num_pred = 0;
  std::size_t num_gt = 0;
  std::vector<std::size_t> intersection;  // num_pred × num_gt
  std::vector<std::size_t> union_size;
  std::vector<double> iou;

  double at(std::size_t p, std::size_t g) const { return iou[p * num_gt + g]; }
};

MatchMatrix match_matrix(std::span<const Segment> pred, std::span<const Segment> gt);

/// Per prediction whether it is a true positive at `threshold`. Predictions of
/// each class are visited by descending confidence (ties: lower index) and
/// take the unmatched same-class GT segment of highest IoU (ties: lower index)
/// if that IoU is at least the threshold.
std::vector<bool> greedy_match(std::span<const Segment> pred, std::span<const Segment> gt,
                               const MatchMatrix& matches, double threshold);

/// Area under the all-point interpolated precision/recall curve. `hits`
/// lists detections by descending confidence.
double average_precision(const std::vector<bool>& hits, std::size_t num_gt);

/// Per-class AP; empty for classes without GT instances.
std::vector<std::optional<double>> ap_at_overlap(std::span<const Segment> pred,
                                                 std::span<const Segment> gt,
                                                 double threshold, std::size_t num_classes);

/// Collects scored detections over scenes for AP at a set of thresholds.
class ApAccumulator {
 public:
  ApAccumulator(std::vector<double> thresholds, std::size_t num_classes);
  void add(std::span<const Segment> pred, std::span<const Segment> gt);
  /// [threshold][class]
  std::vector<std::vector<std::optional<double>>> per_class() const;
  const std::vector<double>& thresholds() const { return thresholds_; }

 private:
  struct Detection {
    double confidence;
    std::size_t order;  // arrival order, breaks confidence ties
    std::vector<bool> hit;  // per threshold
  };
  std::vector<double> thresholds_;
  std::size_t k_;
  std::size_t arrivals_ = 0;
  std::vector<std::vector<Detection>> detections_;  // per class
  std::vector<std::size_t> gt_counts_;
};

struct ApReport {
  std::vector<double> thresholds;                             // 0.25, 0.5, 0.75, then 0.5:0.95
  std::vector<std::vector<std::optional<double>>> per_class;  // [threshold][class]
  double ap = 0.0;    // mean over 0.5:0.95
  double ap25 = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
};

/// Strict thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> strict_thresholds();
ApReport make_ap_report(const ApAccumulator& acc);
ApReport strict_ap(std::span<const Segment> pred, std::span<const Segment> gt,
                   std::size_t num_classes);
/// Accumulator with every threshold an ApReport needs.
ApAccumulator make_report_accumulator(std::size_t num_classes);

/// Mean over the classes that have a value; 0 when none do.
double mean_present(std::span<const std::optional<double>> values);

}  // namespace bevis
