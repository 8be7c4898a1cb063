#pragma once

// Serialization of moment reports. CSV rows are one record time each with
// columns t, mean_i..., cov_ij..., stderr_ij... (upper triangle, row-major);
// the JSON document carries the same fields plus the raw second moments.
// All output uses '.' decimals, shortest round-trip doubles, and LF line
// endings so artifacts are byte-stable.

#include <mnl/expr.hpp>  // format_double
#include <mnl/sde.hpp>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

namespace mnl {

inline std::string to_csv(const MomentReport& report) {
  const int d = report.dimension;
  std::string out = "t";
  for (int i = 1; i <= d; ++i) out += ",mean_" + std::to_string(i);
  for (int i = 1; i <= d; ++i)
    for (int j = i; j <= d; ++j)
      out += ",cov_" + std::to_string(i) + std::to_string(j);
  for (int i = 1; i <= d; ++i)
    for (int j = i; j <= d; ++j)
      out += ",stderr_" + std::to_string(i) + std::to_string(j);
  out += '\n';
  for (const MomentRecord& r : report.records) {
    out += format_double(r.t);
    for (int i = 0; i < d; ++i) out += ',' + format_double(r.mean[i]);
    for (int i = 0; i < d; ++i)
      for (int j = i; j < d; ++j) out += ',' + format_double(r.covariance(i, j));
    for (int i = 0; i < d; ++i)
      for (int j = i; j < d; ++j)
        out += ',' + format_double(r.stderr_second(i, j));
    out += '\n';
  }
  return out;
}

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

inline nlohmann::json to_json(const MomentReport& report) {
  nlohmann::json doc;
  doc["dimension"] = report.dimension;
  doc["n_traj"] = report.n_traj;
  nlohmann::json records = nlohmann::json::array();
  for (const MomentRecord& r : report.records) {
    nlohmann::json rec;
    rec["t"] = r.t;
    rec["mean"] = vector_to_json(r.mean);
    rec["second_moment"] = matrix_to_json(r.second_moment);
    rec["covariance"] = matrix_to_json(r.covariance);
    rec["stderr"] = matrix_to_json(r.stderr_second);
    rec["stderr_mean"] = vector_to_json(r.stderr_mean);
    records.push_back(std::move(rec));
  }
  doc["records"] = std::move(records);
  return doc;
}

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(content.data(),
            static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("short write to '" + path.string() + "'");
}

}  // namespace mnl
