#include "bevis/metrics.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>

namespace bevis {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : k_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) throw std::invalid_argument("ConfusionMatrix: no classes");
}

void ConfusionMatrix::add(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("semantic metrics: length mismatch");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || gt[i] < 0 || static_cast<std::size_t>(pred[i]) >= k_ ||
        static_cast<std::size_t>(gt[i]) >= k_) {
      throw std::out_of_range("semantic metrics: class out of range at point " + std::to_string(i));
    }
    ++counts_[static_cast<std::size_t>(gt[i]) * k_ + static_cast<std::size_t>(pred[i])];
  }
}

SemanticMetrics ConfusionMatrix::metrics() const {
  SemanticMetrics m;
  m.class_iou.resize(k_);
  m.class_acc.resize(k_);
  std::size_t total = 0, correct = 0;
  for (std::size_t c = 0; c < k_; ++c) {
    std::size_t gt_count = 0, pred_count = 0;
    for (std::size_t o = 0; o < k_; ++o) {
      gt_count += counts_[c * k_ + o];
      pred_count += counts_[o * k_ + c];
    }
    const std::size_t tp = counts_[c * k_ + c];
    total += gt_count;
    correct += tp;
    if (gt_count == 0) continue;
    m.class_iou[c] = static_cast<double>(tp) / static_cast<double>(gt_count + pred_count - tp);
    m.class_acc[c] = static_cast<double>(tp) / static_cast<double>(gt_count);
  }
  m.oacc = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  m.miou = mean_present(m.class_iou);
  m.macc = mean_present(m.class_acc);
  return m;
}

SemanticMetrics semantic_metrics(std::span<const int> pred, std::span<const int> gt,
                                 std::size_t num_classes) {
  ConfusionMatrix cm(num_classes);
  cm.add(pred, gt);
  return cm.metrics();
}

double mean_present(std::span<const std::optional<double>> values) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& v : values)
    if (v) {
      sum += *v;
      ++count;
    }
  return count ? sum / static_cast<double>(count) : 0.0;
}

std::vector<Segment> segments_from_labels(std::span<const int> instances,
                                          std::span<const int> semantics,
                                          std::size_t num_classes) {
  if (instances.size() != semantics.size()) {
    throw std::invalid_argument("segments_from_labels: length mismatch");
  }
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (instances[i] < 0) throw std::invalid_argument("segments_from_labels: negative instance id");
    members[instances[i]].push_back(i);
  }
  std::vector<Segment> out;
  const auto n = static_cast<double>(instances.size());
  for (auto& [id, pts] : members) {
    std::vector<std::size_t> votes(num_classes, 0);
    for (std::size_t i : pts) {
      const int s = semantics[i];
      if (s < 0 || static_cast<std::size_t>(s) >= num_classes) {
        throw std::out_of_range("segments_from_labels: class out of range");
      }
      ++votes[static_cast<std::size_t>(s)];
    }
    Segment seg;
    seg.semantic_class = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    seg.confidence = static_cast<double>(pts.size()) / n;
    seg.points = std::move(pts);
    out.push_back(std::move(seg));
  }
  return out;
}

MatchMatrix match_matrix(std::span<const Segment> pred, std::span<const Segment> gt) {
  MatchMatrix m;
  m.num_pred = pred.size();
  m.num_gt = gt.size();
  m.intersection.assign(m.num_pred * m.num_gt, 0);
  m.union_size.assign(m.num_pred * m.num_gt, 0);
  m.iou.assign(m.num_pred * m.num_gt, 0.0);
  std::map<std::size_t, std::size_t> gt_of_point;
  for (std::size_t g = 0; g < gt.size(); ++g)
    for (std::size_t p : gt[g].points) gt_of_point[p] = g;
  for (std::size_t p = 0; p < pred.size(); ++p) {
    for (std::size_t pt : pred[p].points) {
      auto it = gt_of_point.find(pt);
      if (it != gt_of_point.end()) ++m.intersection[p * m.num_gt + it->second];
    }
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const std::size_t idx = p * m.num_gt + g;
      m.union_size[idx] = pred[p].points.size() + gt[g].points.size() - m.intersection[idx];
      if (m.union_size[idx]) {
        m.iou[idx] = static_cast<double>(m.intersection[idx]) / static_cast<double>(m.union_size[idx]);
      }
    }
  }
  return m;
}

namespace {

std::vector<std::size_t> confidence_order(std::span<const Segment> pred) {
  std::vector<std::size_t> order(pred.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return pred[a].confidence > pred[b].confidence;
  });
  return order;
}

}  // namespace

std::vector<bool> greedy_match(std::span<const Segment> pred, std::span<const Segment> gt,
                               const MatchMatrix& matches, double threshold) {
  std::vector<bool> hit(pred.size(), false);
  std::vector<bool> taken(gt.size(), false);
  for (std::size_t p : confidence_order(pred)) {
    std::size_t best = gt.size();
    double best_iou = -1.0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (taken[g] || gt[g].semantic_class != pred[p].semantic_class) continue;
      if (matches.at(p, g) > best_iou) {
        best_iou = matches.at(p, g);
        best = g;
      }
    }
    if (best < gt.size() && best_iou >= threshold) {
      taken[best] = true;
      hit[p] = true;
    }
  }
  return hit;
}

double average_precision(const std::vector<bool>& hits, std::size_t num_gt) {
  if (num_gt == 0) throw std::invalid_argument("average_precision: no GT instances");
  std::vector<double> precision(hits.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    if (hits[i]) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
  }
  // Each true positive adds 1/num_gt recall at the best precision reachable
  // from its rank onwards.
  double area = 0.0, envelope = 0.0;
  for (std::size_t i = hits.size(); i-- > 0;) {
    envelope = std::max(envelope, precision[i]);
    if (hits[i]) area += envelope;
  }
  return area / static_cast<double>(num_gt);
}

std::vector<std::optional<double>> ap_at_overlap(std::span<const Segment> pred,
                                                 std::span<const Segment> gt,
                                                 double threshold, std::size_t num_classes) {
  ApAccumulator acc({threshold}, num_classes);
  acc.add(pred, gt);
  return acc.per_class()[0];
}

ApAccumulator::ApAccumulator(std::vector<double> thresholds, std::size_t num_classes)
    : thresholds_(std::move(thresholds)), k_(num_classes), detections_(num_classes),
      gt_counts_(num_classes, 0) {}

void ApAccumulator::add(std::span<const Segment> pred, std::span<const Segment> gt) {
  for (const auto* set : {&pred, &gt})
    for (const auto& s : *set)
      if (s.semantic_class < 0 || static_cast<std::size_t>(s.semantic_class) >= k_) {
        throw std::out_of_range("ApAccumulator: segment class out of range");
      }
  const auto matches = match_matrix(pred, gt);
  std::vector<std::vector<bool>> hits;
  for (double t : thresholds_) hits.push_back(greedy_match(pred, gt, matches, t));
  for (std::size_t p : confidence_order(pred)) {
    Detection d{pred[p].confidence, arrivals_++, {}};
    for (const auto& h : hits) d.hit.push_back(h[p]);
    detections_[static_cast<std::size_t>(pred[p].semantic_class)].push_back(std::move(d));
  }
  for (const auto& g : gt) ++gt_counts_[static_cast<std::size_t>(g.semantic_class)];
}

std::vector<std::vector<std::optional<double>>> ApAccumulator::per_class() const {
  std::vector<std::vector<std::optional<double>>> out(thresholds_.size(),
                                                      std::vector<std::optional<double>>(k_));
  for (std::size_t c = 0; c < k_; ++c) {
    if (gt_counts_[c] == 0) continue;
    auto dets = detections_[c];
    std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
      if (a.confidence != b.confidence) return a.confidence > b.confidence;
      return a.order < b.order;
    });
    for (std::size_t t = 0; t < thresholds_.size(); ++t) {
      std::vector<bool> hits;
      for (const auto& d : dets) hits.push_back(d.hit[t]);
      out[t][c] = average_precision(hits, gt_counts_[c]);
    }
  }
  return out;
}

std::vector<double> strict_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(static_cast<double>(50 + 5 * i) / 100.0);
  return t;
}

ApAccumulator make_report_accumulator(std::size_t num_classes) {
  std::vector<double> t{0.25};
  for (double s : strict_thresholds()) t.push_back(s);
  return ApAccumulator(std::move(t), num_classes);
}

ApReport make_ap_report(const ApAccumulator& acc) {
  ApReport r;
  r.thresholds = acc.thresholds();
  r.per_class = acc.per_class();
  auto mean_at = [&](double t) {
    for (std::size_t i = 0; i < r.thresholds.size(); ++i)
      if (r.thresholds[i] == t) return mean_present(r.per_class[i]);
    throw std::invalid_argument("ApReport: threshold " + std::to_string(t) + " not evaluated");
  };
  r.ap25 = mean_at(0.25);
  r.ap50 = mean_at(0.5);
  r.ap75 = mean_at(0.75);
  double sum = 0.0;
  const auto strict = strict_thresholds();
  for (double t : strict) sum += mean_at(t);
  r.ap = sum / static_cast<double>(strict.size());
  return r;
}

ApReport strict_ap(std::span<const Segment> pred, std::span<const Segment> gt,
                   std::size_t num_classes) {
  auto acc = make_report_accumulator(num_classes);
  acc.add(pred, gt);
  return make_ap_report(acc);
}

}  // namespace bevis
