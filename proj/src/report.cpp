#include "qrobust/report.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace qrobust {

std::string format_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

Json EvalReport::to_json() const {
  Json j;
  j["version"] = kToolkitVersion;
  j["clean_accuracy"] = clean_accuracy;
  j["clean_samples"] = clean_samples;
  Json rows = Json::array();
  for (const auto& r : attacks) {
    Json rj;
    rj["attack"] = attack_to_json(r.config);
    rj["samples"] = r.samples;
    rj["clean_accuracy"] = r.clean_accuracy;
    rj["accuracy"] = r.accuracy;
    rj["mean_norm"] = r.mean_norm;
    rj["mean_queries"] = r.mean_queries;
    rj["errors"] = r.errors;
    rj["no_ops"] = r.no_ops;
    if (r.within_threshold_pct >= 0) rj["within_threshold_pct"] = r.within_threshold_pct;
    rows.push_back(std::move(rj));
  }
  j["attacks"] = std::move(rows);
  j["mean_jr"] = mean_jr;
  j["jr_probe_samples"] = jr_probe_samples;
  Json fp;
  fp["total_params"] = footprint.total_params;
  fp["total_bits"] = footprint.total_bits;
  fp["total_bytes"] = footprint.total_bytes;
  fp["total_kb_exact"] = footprint.total_kb_exact;
  j["footprint"] = std::move(fp);
  if (!fold_accuracies.empty()) {
    j["fold_accuracies"] = fold_accuracies;
    j["fold_variance"] = fold_variance(fold_accuracies);
  }
  j["config"] = config_echo;
  return j;
}

std::string EvalReport::attacks_csv() const {
  std::string out = "attack,norm,eps,samples,clean_acc,adv_acc,mean_norm,mean_queries\n";
  for (const auto& r : attacks) {
    out += attack_kind_name(r.config.kind);
    out += ",";
    out += norm_name(r.config.norm);
    out += "," + format_g(r.config.eps);
    out += "," + std::to_string(r.samples);
    out += "," + format_g(r.clean_accuracy);
    out += "," + format_g(r.accuracy);
    out += "," + format_g(r.mean_norm);
    out += "," + format_g(r.mean_queries);
    out += "\n";
  }
  return out;
}

std::string footprint_csv(const FootprintReport& rep) {
  std::string out = "layer,params,bits_per_param,bytes\n";
  for (const auto& l : rep.per_layer) {
    out += l.name + "," + std::to_string(l.params) + "," + std::to_string(l.bits) + "," +
           std::to_string(l.bytes) + "\n";
  }
  out += "total," + std::to_string(rep.total_params) + ",," +
         std::to_string(rep.total_bytes) + "\n";
  out += "total_kb_exact,,," + format_g(rep.total_kb_exact) + "\n";
  return out;
}

std::string footprint_scheme_csv(
    const std::vector<std::pair<std::string, FootprintReport>>& rows) {
  std::string out = "scheme,params,total_bits,total_bytes,kb_exact\n";
  for (const auto& [name, rep] : rows) {
    out += name + "," + std::to_string(rep.total_params) + "," +
           std::to_string(rep.total_bits) + "," + std::to_string(rep.total_bytes) + "," +
           format_g(rep.total_kb_exact) + "\n";
  }
  return out;
}

std::string dat_series(const std::string& header,
                       const std::vector<std::pair<double, double>>& points) {
  std::string out = "# " + header + "\n";
  for (const auto& [x, y] : points) out += format_g(x) + " " + format_g(y) + "\n";
  return out;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write '" + path + "'");
  os << content;
}

void write_json_file(const std::string& path, const Json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

}  // namespace qrobust
