#pragma once

// Dataset layout: <data>/<sequence>/groundtruth.txt; results: <results>/<sequence>.txt.

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ubatrack/evalkit/io.hpp"
#include "ubatrack/evalkit/metrics.hpp"

namespace ubatrack {

// Sorted names of subdirectories holding a groundtruth.txt.
inline std::vector<std::string> list_sequences(const std::string& data_root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(data_root)) throw Error("not a directory: " + data_root);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(data_root))
    if (e.is_directory() && fs::exists(e.path() / "groundtruth.txt")) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw Error("no sequences under " + data_root);
  return names;
}

struct NamedResult {
  std::string name;
  SequenceResult result;
};

inline std::vector<NamedResult> load_results(const std::string& data_root, const std::string& results_dir) {
  std::vector<NamedResult> out;
  for (const auto& name : list_sequences(data_root)) {
    const auto gt_path = (std::filesystem::path(data_root) / name / "groundtruth.txt").string();
    const auto res_path = (std::filesystem::path(results_dir) / (name + ".txt")).string();
    auto r = read_results(res_path);
    r.gt = read_groundtruth(gt_path);
    check_line_count(res_path, r.boxes.size(), r.gt.size());
    out.push_back({name, std::move(r)});
  }
  return out;
}

inline nlohmann::json metrics_report(const std::vector<NamedResult>& results) {
  nlohmann::json rep;
  rep["sequences"] = nlohmann::json::object();
  std::vector<SequenceResult> set;
  for (const auto& [name, r] : results) {
    rep["sequences"][name] = {{"pr", center_precision(r)}, {"sr", success_auc(r)}, {"npr", norm_precision(r)}};
    set.push_back(r);
  }
  const auto f = f_score_lt(set);
  rep["overall"] = {{"pr", mean_over(set, [](const SequenceResult& r) { return center_precision(r); })},
                    {"sr", mean_over(set, success_auc)},
                    {"npr", mean_over(set, norm_precision)},
                    {"f", f.f},
                    {"f_pr", f.precision},
                    {"f_re", f.recall},
                    {"f_tau", f.tau}};
  return rep;
}

}  // namespace ubatrack
