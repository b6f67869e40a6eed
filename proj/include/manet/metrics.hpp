#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "manet/episodes.hpp"

namespace manet {

/// pooled: class IoU = Σ intersections / Σ unions over episodes.
/// mean: class IoU = mean of per-episode IoUs.
enum class IouMode { kPooled, kMean };

std::string to_string(IouMode mode);
IouMode iou_mode_from_string(const std::string& name);

/// |pred ∧ gt| / |pred ∨ gt|, and 1 when both are empty. Values > 0.5 are foreground.
double binary_iou(const torch::Tensor& pred, const torch::Tensor& gt);

struct IouStats {
  std::int64_t intersection = 0;
  std::int64_t union_count = 0;
  double iou_sum = 0.0;
  std::int64_t episodes = 0;

  void add(std::int64_t inter, std::int64_t uni);
  void merge(const IouStats& other);
  double iou(IouMode mode) const;
};

class MetricsAccumulator {
 public:
  /// Adds one episode: the class bucket and foreground bucket get pred vs gt,
  /// the background bucket gets their complements.
  void update(const torch::Tensor& pred, const torch::Tensor& gt, ClassId class_id);
  /// Sums counts of another accumulator (parallel shards).
  void merge(const MetricsAccumulator& other);

  double class_iou(ClassId c, IouMode mode) const;
  /// Mean class IoU over the classes that received episodes.
  double miou(IouMode mode) const;
  double fb_iou(IouMode mode) const;

  const std::map<ClassId, IouStats>& per_class() const { return per_class_; }
  const IouStats& foreground() const { return fg_; }
  const IouStats& background() const { return bg_; }
  std::int64_t episodes_seen() const { return episodes_; }

 private:
  std::map<ClassId, IouStats> per_class_;
  IouStats fg_;
  IouStats bg_;
  std::int64_t episodes_ = 0;
};

struct RunResult {
  std::uint64_t seed = 0;
  double miou = 0.0;
  double fb_iou = 0.0;
  std::int64_t episodes = 0;
};

struct MetricsReport {
  double miou = 0.0;    // mean of per_class_iou
  double fb_iou = 0.0;  // (fg_iou + bg_iou) / 2
  double fg_iou = 0.0;
  double bg_iou = 0.0;
  std::map<ClassId, double> per_class_iou;  // averaged over runs
  std::vector<RunResult> runs;
  double mean_over_runs = 0.0;  // mean of runs[].miou
  IouMode iou_mode = IouMode::kPooled;
};

/// One accumulator per run; seeds label the runs. Throws ContractError when empty.
MetricsReport report(const std::vector<MetricsAccumulator>& runs, const std::vector<std::uint64_t>& seeds,
                     IouMode mode = IouMode::kPooled);

nlohmann::json to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& doc);

/// Aligned text table: one row per run and a mean row (fold, mIoU, FB-IoU).
std::string render_table(const MetricsReport& report, int fold);

}  // namespace manet
