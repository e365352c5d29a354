#pragma once

#include <random>
#include <vector>

#include "camhfa/pooling.hpp"
#include "oracles.hpp"

namespace testing_support {

inline oracle::Mat to_mat(const camhfa::Tensor& t) {
  oracle::Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.data()[i * t.cols() + j];
  return m;
}

inline std::vector<oracle::Mat> to_mats(const camhfa::LayerwiseFeatures& z) {
  std::vector<oracle::Mat> out;
  for (const auto& layer : z.layers()) out.push_back(to_mat(layer));
  return out;
}

inline std::vector<oracle::Mat> queries_to_mats(const camhfa::Tensor& q) {
  std::vector<oracle::Mat> out(q.shape()[0], oracle::Mat(q.shape()[1], std::vector<double>(q.shape()[2])));
  for (std::size_t g = 0; g < q.shape()[0]; ++g)
    for (std::size_t l = 0; l < q.shape()[1]; ++l)
      for (std::size_t d = 0; d < q.shape()[2]; ++d) out[g][l][d] = q(g, l, d);
  return out;
}

inline oracle::Params to_oracle(const camhfa::CaMhfaParams& p) {
  return {p.omega_k_raw.values(), p.omega_v_raw.values(), to_mat(p.s_k), to_mat(p.s_v),
          queries_to_mats(p.queries), to_mat(p.w_out), p.b_out.values()};
}

inline double max_diff(const oracle::Mat& a, const camhfa::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b(i, j)));
  return m;
}

inline double max_diff(const std::vector<double>& a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testing_support
