#include "drn/evaluation.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "drn/synth_data.hpp"

namespace drn {

using nlohmann::json;

namespace {

std::vector<std::size_t> score_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

std::vector<Detection> top_k(const std::vector<Detection>& dets, int k) {
  if (static_cast<int>(dets.size()) <= k) return dets;
  std::vector<Detection> out;
  const auto order = score_order(dets);
  // Keep the survivors in their original relative order.
  std::vector<std::size_t> keep(order.begin(), order.begin() + k);
  std::sort(keep.begin(), keep.end());
  for (std::size_t i : keep) out.push_back(dets[i]);
  return out;
}

}  // namespace

MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<ObjectAnnotation>& gts, double iou_threshold) {
  MatchResult r;
  r.true_positive.assign(dets.size(), false);
  r.matched_gt.assign(dets.size(), -1);
  r.iou.assign(dets.size(), 0.0);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t d : score_order(dets)) {
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].class_id != dets[d].class_id) continue;
      const double iou = rotated_iou(dets[d].box, gts[g].box);
      if (iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou >= iou_threshold) {
      taken[best] = true;
      r.true_positive[d] = true;
      r.matched_gt[d] = best;
      r.iou[d] = best_iou;
    }
  }
  r.unmatched_gt = static_cast<int>(std::count(taken.begin(), taken.end(), false));
  return r;
}

std::vector<PrPoint> pr_curve(std::vector<ScoredMatch> matches, int num_gt) {
  if (num_gt <= 0) throw std::invalid_argument("pr_curve: no ground truth for this class");
  std::stable_sort(matches.begin(), matches.end(),
                   [](const ScoredMatch& a, const ScoredMatch& b) { return a.score > b.score; });
  std::vector<PrPoint> curve;
  int tp = 0, seen = 0;
  for (std::size_t i = 0; i < matches.size(); ++i) {
    tp += matches[i].true_positive;
    ++seen;
    const bool group_end = i + 1 == matches.size() || matches[i + 1].score != matches[i].score;
    if (group_end) curve.push_back({double(tp) / num_gt, double(tp) / seen});
  }
  return curve;
}

double average_precision(const std::vector<ScoredMatch>& matches, int num_gt) {
  const std::vector<PrPoint> curve = pr_curve(matches, num_gt);
  // Interpolated precision: running maximum from the right.
  std::vector<double> interp(curve.size());
  double best = 0.0;
  for (std::size_t i = curve.size(); i-- > 0;) {
    best = std::max(best, curve[i].precision);
    interp[i] = best;
  }
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    ap += (curve[i].recall - prev_recall) * interp[i];
    prev_recall = curve[i].recall;
  }
  return ap;
}

MetricReport coco_metrics(const std::vector<SceneAnnotation>& ground_truth,
                          const std::vector<std::vector<Detection>>& detections,
                          const EvalOptions& options) {
  if (ground_truth.size() != detections.size()) {
    throw std::invalid_argument("coco_metrics: " + std::to_string(ground_truth.size()) +
                                " images but " + std::to_string(detections.size()) +
                                " detection lists");
  }
  MetricReport rep;
  rep.max_detections = options.max_detections;
  rep.num_images = static_cast<int>(ground_truth.size());

  std::map<int, int> gt_count;
  for (const auto& img : ground_truth)
    for (const auto& o : img.objects) ++gt_count[o.class_id];
  for (const auto& [cls, n] : gt_count) rep.num_gt += n;

  std::vector<std::vector<Detection>> capped;
  for (const auto& d : detections) {
    capped.push_back(top_k(d, options.max_detections));
    rep.num_detections += static_cast<int>(capped.back().size());
  }

  for (std::size_t t = 0; t < kCocoThresholds.size(); ++t) {
    std::map<int, std::vector<ScoredMatch>> pooled;
    std::map<int, int> matched;
    for (std::size_t i = 0; i < ground_truth.size(); ++i) {
      const MatchResult m = match_detections(capped[i], ground_truth[i].objects, kCocoThresholds[t]);
      for (std::size_t d = 0; d < capped[i].size(); ++d) {
        pooled[capped[i][d].class_id].push_back({capped[i][d].score, bool(m.true_positive[d])});
        matched[capped[i][d].class_id] += m.true_positive[d];
      }
    }
    for (const auto& [cls, n] : gt_count) {
      rep.per_class_ap[cls][t] = average_precision(pooled[cls], n);
      rep.per_class_recall[cls][t] = double(matched[cls]) / n;
      if (t == 0) rep.pr_curves_50[cls] = pr_curve(pooled[cls], n);
    }
  }

  if (!gt_count.empty()) {
    const double nc = static_cast<double>(gt_count.size());
    for (const auto& [cls, aps] : rep.per_class_ap) {
      rep.ap50 += aps[0] / nc;
      rep.ap75 += aps[5] / nc;
      for (double a : aps) rep.map += a / (nc * kCocoThresholds.size());
    }
    for (const auto& [cls, rs] : rep.per_class_recall)
      for (double r : rs) rep.ar += r / (nc * kCocoThresholds.size());
  }
  rep.center = center_point_metrics(ground_truth, capped);
  return rep;
}

CenterPointMetrics center_point_metrics(const std::vector<SceneAnnotation>& ground_truth,
                                        const std::vector<std::vector<Detection>>& detections) {
  if (ground_truth.size() != detections.size()) {
    throw std::invalid_argument("center_point_metrics: image count mismatch");
  }
  CenterPointMetrics c;
  for (std::size_t i = 0; i < ground_truth.size(); ++i) {
    const MatchResult m = match_detections(detections[i], ground_truth[i].objects, 0.5);
    c.predicted += static_cast<int>(detections[i].size());
    c.correct += static_cast<int>(std::count(m.true_positive.begin(), m.true_positive.end(), true));
    c.num_gt += static_cast<int>(ground_truth[i].objects.size());
  }
  c.accuracy = c.predicted > 0 ? double(c.correct) / c.predicted : 0.0;
  c.recall = c.num_gt > 0 ? double(c.correct) / c.num_gt : 0.0;
  return c;
}

std::string report_to_json(const MetricReport& r) {
  json classes = json::object();
  for (const auto& [cls, aps] : r.per_class_ap) {
    json curve = json::array();
    for (const PrPoint& p : r.pr_curves_50.at(cls)) curve.push_back({p.recall, p.precision});
    classes[std::to_string(cls)] = {{"ap", aps},
                                    {"recall", r.per_class_recall.at(cls)},
                                    {"pr_curve_50", curve}};
  }
  json j = {{"thresholds", kCocoThresholds},
            {"mAP", r.map},
            {"AP50", r.ap50},
            {"AP75", r.ap75},
            {"AR" + std::to_string(r.max_detections), r.ar},
            {"max_detections", r.max_detections},
            {"center_point",
             {{"accuracy", r.center.accuracy},
              {"recall", r.center.recall},
              {"predicted", r.center.predicted},
              {"correct", r.center.correct}}},
            {"num_images", r.num_images},
            {"num_gt", r.num_gt},
            {"num_detections", r.num_detections},
            {"classes", classes}};
  return j.dump(2) + "\n";
}

void write_detections(const std::filesystem::path& path,
                      const std::vector<SceneAnnotation>& images,
                      const std::vector<std::vector<Detection>>& detections) {
  if (images.size() != detections.size()) {
    throw std::invalid_argument("write_detections: image count mismatch");
  }
  std::string text;
  for (std::size_t i = 0; i < images.size(); ++i) {
    json objs = json::array();
    for (const Detection& d : detections[i]) {
      const Vec2 c = d.box.center();
      objs.push_back({{"class", d.class_id},
                      {"cx", c.x},
                      {"cy", c.y},
                      {"w", d.box.w},
                      {"h", d.box.h},
                      {"theta_deg", d.box.theta * 180.0 / kPi},
                      {"score", d.score}});
    }
    text += json{{"image", images[i].image_id},
                 {"width", images[i].width},
                 {"height", images[i].height},
                 {"objects", objs}}
                .dump() +
            "\n";
  }
  write_file_atomic(path, text);
}

std::vector<std::vector<Detection>> read_detections(const std::filesystem::path& path,
                                                    const std::vector<SceneAnnotation>& images) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open detections " + path.string());
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < images.size(); ++i) index[images[i].image_id] = i;
  std::vector<std::vector<Detection>> out(images.size());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(where + ": parse error: " + e.what());
    }
    const std::string id = j.value("image", std::string{});
    const auto it = index.find(id);
    if (it == index.end()) throw std::runtime_error(where + ": unknown image '" + id + "'");
    for (const json& o : j.at("objects")) {
      Detection d;
      try {
        d.class_id = o.at("class").get<int>();
        d.box.cx = o.at("cx").get<double>();
        d.box.cy = o.at("cy").get<double>();
        d.box.w = o.at("w").get<double>();
        d.box.h = o.at("h").get<double>();
        d.box.theta = canonical_angle(o.at("theta_deg").get<double>() * kPi / 180.0);
        d.score = o.at("score").get<double>();
      } catch (const json::exception& e) {
        throw std::runtime_error(where + ": bad detection record: " + e.what());
      }
      out[it->second].push_back(d);
    }
  }
  return out;
}

}  // namespace drn
