#include "manet/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "manet/errors.hpp"

namespace manet {

std::string to_string(IouMode mode) { return mode == IouMode::kPooled ? "pooled" : "mean"; }

IouMode iou_mode_from_string(const std::string& name) {
  if (name == "pooled") return IouMode::kPooled;
  if (name == "mean") return IouMode::kMean;
  throw ConfigError("unknown IoU mode '" + name + "' (expected pooled or mean)");
}

namespace {

std::pair<std::int64_t, std::int64_t> overlap(const torch::Tensor& pred, const torch::Tensor& gt) {
  if (pred.sizes() != gt.sizes()) {
    throw ContractError("IoU: prediction " + c10::str(pred.sizes()) + " vs ground truth " + c10::str(gt.sizes()));
  }
  auto p = pred.gt(0.5);
  auto g = gt.gt(0.5);
  return {torch::logical_and(p, g).sum().item<std::int64_t>(), torch::logical_or(p, g).sum().item<std::int64_t>()};
}

}  // namespace

double binary_iou(const torch::Tensor& pred, const torch::Tensor& gt) {
  auto [inter, uni] = overlap(pred, gt);
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

void IouStats::add(std::int64_t inter, std::int64_t uni) {
  intersection += inter;
  union_count += uni;
  iou_sum += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  episodes += 1;
}

void IouStats::merge(const IouStats& other) {
  intersection += other.intersection;
  union_count += other.union_count;
  iou_sum += other.iou_sum;
  episodes += other.episodes;
}

double IouStats::iou(IouMode mode) const {
  if (mode == IouMode::kMean) return episodes == 0 ? 0.0 : iou_sum / static_cast<double>(episodes);
  return union_count == 0 ? 1.0 : static_cast<double>(intersection) / static_cast<double>(union_count);
}

void MetricsAccumulator::update(const torch::Tensor& pred, const torch::Tensor& gt, ClassId class_id) {
  auto [inter, uni] = overlap(pred, gt);
  auto [bg_inter, bg_uni] = overlap(pred.le(0.5).to(torch::kFloat32), gt.le(0.5).to(torch::kFloat32));
  per_class_[class_id].add(inter, uni);
  fg_.add(inter, uni);
  bg_.add(bg_inter, bg_uni);
  episodes_ += 1;
}

void MetricsAccumulator::merge(const MetricsAccumulator& other) {
  for (const auto& [c, stats] : other.per_class_) per_class_[c].merge(stats);
  fg_.merge(other.fg_);
  bg_.merge(other.bg_);
  episodes_ += other.episodes_;
}

double MetricsAccumulator::class_iou(ClassId c, IouMode mode) const {
  auto it = per_class_.find(c);
  return it == per_class_.end() ? 0.0 : it->second.iou(mode);
}

double MetricsAccumulator::miou(IouMode mode) const {
  if (per_class_.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [c, stats] : per_class_) sum += stats.iou(mode);
  return sum / static_cast<double>(per_class_.size());
}

double MetricsAccumulator::fb_iou(IouMode mode) const { return 0.5 * (fg_.iou(mode) + bg_.iou(mode)); }

MetricsReport report(const std::vector<MetricsAccumulator>& runs, const std::vector<std::uint64_t>& seeds,
                     IouMode mode) {
  if (runs.empty()) throw ContractError("report needs at least one run");
  MetricsReport out;
  out.iou_mode = mode;
  std::map<ClassId, std::pair<double, int>> class_sums;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const auto& acc = runs[r];
    RunResult run;
    run.seed = r < seeds.size() ? seeds[r] : r;
    run.miou = acc.miou(mode);
    run.fb_iou = acc.fb_iou(mode);
    run.episodes = acc.episodes_seen();
    out.runs.push_back(run);
    out.mean_over_runs += run.miou;
    out.fg_iou += acc.foreground().iou(mode);
    out.bg_iou += acc.background().iou(mode);
    for (const auto& [c, stats] : acc.per_class()) {
      class_sums[c].first += stats.iou(mode);
      class_sums[c].second += 1;
    }
  }
  const double n = static_cast<double>(runs.size());
  out.mean_over_runs /= n;
  out.fg_iou /= n;
  out.bg_iou /= n;
  out.fb_iou = 0.5 * (out.fg_iou + out.bg_iou);
  for (const auto& [c, s] : class_sums) out.per_class_iou[c] = s.first / s.second;
  if (!out.per_class_iou.empty()) {
    for (const auto& [c, v] : out.per_class_iou) out.miou += v;
    out.miou /= static_cast<double>(out.per_class_iou.size());
  }
  return out;
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [c, v] : r.per_class_iou) per_class[std::to_string(c)] = v;
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& run : r.runs) {
    runs.push_back({{"seed", run.seed}, {"miou", run.miou}, {"fb_iou", run.fb_iou}, {"episodes", run.episodes}});
  }
  return {{"miou", r.miou},          {"fb_iou", r.fb_iou},     {"fg_iou", r.fg_iou},
          {"bg_iou", r.bg_iou},      {"per_class_iou", per_class}, {"runs", runs},
          {"mean_over_runs", r.mean_over_runs}, {"iou_mode", to_string(r.iou_mode)}};
}

MetricsReport report_from_json(const nlohmann::json& doc) {
  MetricsReport r;
  try {
    r.miou = doc.at("miou").get<double>();
    r.fb_iou = doc.at("fb_iou").get<double>();
    r.fg_iou = doc.at("fg_iou").get<double>();
    r.bg_iou = doc.at("bg_iou").get<double>();
    for (const auto& [k, v] : doc.at("per_class_iou").items()) r.per_class_iou[std::stoi(k)] = v.get<double>();
    for (const auto& run : doc.at("runs")) {
      r.runs.push_back({run.at("seed").get<std::uint64_t>(), run.at("miou").get<double>(),
                        run.at("fb_iou").get<double>(), run.at("episodes").get<std::int64_t>()});
    }
    r.mean_over_runs = doc.at("mean_over_runs").get<double>();
    r.iou_mode = iou_mode_from_string(doc.at("iou_mode").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed metrics report: ") + e.what());
  }
  return r;
}

std::string render_table(const MetricsReport& r, int fold) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-14s %8s %8s %8s\n", "run (seed)", "fold", "mIoU", "FB-IoU");
  out << line;
  for (const auto& run : r.runs) {
    std::snprintf(line, sizeof(line), "%-14llu %8d %8.2f %8.2f\n", static_cast<unsigned long long>(run.seed), fold,
                  100.0 * run.miou, 100.0 * run.fb_iou);
    out << line;
  }
  std::snprintf(line, sizeof(line), "%-14s %8d %8.2f %8.2f\n", "mean", fold, 100.0 * r.mean_over_runs,
                100.0 * r.fb_iou);
  out << line;
  out << "iou-mode: " << to_string(r.iou_mode) << "\n";
  for (const auto& [c, v] : r.per_class_iou) {
    std::snprintf(line, sizeof(line), "  class %3d  IoU %6.2f\n", c, 100.0 * v);
    out << line;
  }
  return out.str();
}

}  // namespace manet
