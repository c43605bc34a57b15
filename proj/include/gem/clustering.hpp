#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "gem/gem.hpp"
#include "gem/kernels.hpp"
#include "gem/parallel.hpp"
#include "gem/rng.hpp"

namespace gem {

struct SimConfig {
  std::size_t n_points = 20;
  std::size_t dim = 5;
  std::vector<std::size_t> iterations = {3, 10, 30};
  std::vector<double> temperatures = {0.07, 0.1, 0.13, 0.18};
  double spectral_target = 0.6;
  std::uint64_t seed = 0;
  double cos_threshold = 0.99;

  void validate() const {
    if (n_points < 1) throw ParameterError("simulation: n_points must be >= 1");
    if (dim < 1) throw ParameterError("simulation: dim must be >= 1");
    for (double t : temperatures)
      if (!(t > 0.0)) throw ParameterError("simulation: temperatures must be > 0");
    if (!(spectral_target > 0.0)) throw ParameterError("simulation: spectral target must be > 0");
  }
};

struct ClusterLabels {
  std::size_t count = 0;
  std::vector<std::size_t> ids;  // component id per row, numbered by smallest member
};

/// Connected components of the graph linking rows whose cosine similarity is >= threshold.
inline ClusterLabels count_clusters(const Tensor& p, double cos_threshold = 0.99) {
  require_rank(p, 2, "count_clusters");
  const std::size_t n = p.rows();
  const Tensor unit = l2_normalize_rows(p);
  const Tensor sim = matmul_transposed(unit, unit);
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  const auto find = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (sim(i, j) >= cos_threshold) {
        const std::size_t a = find(i), b = find(j);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
      }
  ClusterLabels labels{0, std::vector<std::size_t>(n)};
  std::vector<std::size_t> id_of_root(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = find(i);
    if (id_of_root[r] == n) id_of_root[r] = labels.count++;
    labels.ids[i] = id_of_root[r];
  }
  return labels;
}

/// Mean cosine over pairs sharing a cluster; 1 when every cluster is a singleton.
inline double mean_within_cluster_cosine(const Tensor& p, const ClusterLabels& labels) {
  const Tensor unit = l2_normalize_rows(p);
  const Tensor sim = matmul_transposed(unit, unit);
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (std::size_t j = i + 1; j < p.rows(); ++j)
      if (labels.ids[i] == labels.ids[j]) {
        sum += sim(i, j);
        ++pairs;
      }
  return pairs ? sum / static_cast<double>(pairs) : 1.0;
}

struct SimCell {
  std::size_t iterations = 0;
  double tau = 0.0;
  Tensor attention;  // softmax(p^K p^Kᵀ / tau), n×n
  Tensor p;          // p^K, n×dim
  Tensor pca;        // n×2
  ClusterLabels clusters;
  double mean_within_cosine = 0.0;
};

struct SimResult {
  SimConfig config;
  Tensor p0;
  std::vector<SimCell> cells;  // iterations-major, in config order

  const SimCell& cell(std::size_t k_index, std::size_t tau_index) const {
    return cells.at(k_index * config.temperatures.size() + tau_index);
  }
};

/// Runs K self-self attention steps on a single-head state and records the final assignment.
inline SimCell iterate_cell(const Tensor& p0, std::size_t iterations, double tau, double cos_threshold) {
  SSAState state{p0.reshaped({1, p0.rows(), p0.cols()}), tau};
  for (std::size_t k = 0; k < iterations; ++k) state = self_self_attention_once(state);
  SimCell cell;
  cell.iterations = iterations;
  cell.tau = tau;
  cell.p = head(state.p, 0);
  cell.attention = self_self_attention_matrix(cell.p, tau);
  if (cell.p.rows() >= 2 && cell.p.cols() >= 2) {
    cell.pca = pca_2d(cell.p);
  } else {
    cell.pca = Tensor({cell.p.rows(), 2});
  }
  cell.clusters = count_clusters(cell.p, cos_threshold);
  cell.mean_within_cosine = mean_within_cluster_cosine(cell.p, cell.clusters);
  return cell;
}

/// Gaussian tokens through a Gaussian projection rescaled to the target spectral norm,
/// normalized, then iterated for each (iterations, temperature) cell. Deterministic in `seed`.
/// Cells are independent and may run on `jobs` threads without changing the result.
inline SimResult run_simulation(const SimConfig& cfg, std::size_t jobs = 1) {
  cfg.validate();
  GaussianRng rng(cfg.seed);
  const Tensor x = rng.normal_tensor({cfg.n_points, cfg.dim});
  Tensor w = rng.normal_tensor({cfg.dim, cfg.dim});
  const double sigma = spectral_norm(w);
  if (sigma > 0.0)
    for (auto& v : w.storage()) v = static_cast<float>(v * (cfg.spectral_target / sigma));
  SimResult result{cfg, l2_normalize_rows(matmul(x, w)), {}};
  const std::size_t nt = cfg.temperatures.size();
  result.cells.resize(cfg.iterations.size() * nt);
  parallel_for(result.cells.size(), jobs, [&](std::size_t i) {
    result.cells[i] = iterate_cell(result.p0, cfg.iterations[i / nt], cfg.temperatures[i % nt], cfg.cos_threshold);
  });
  return result;
}

inline std::string format_tau(double tau) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", tau);
  return buf;
}

inline std::string sim_cell_stem(std::size_t iterations, double tau) {
  return "sim_K" + std::to_string(iterations) + "_tau" + format_tau(tau);
}

inline std::string format_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

/// Writes `sim_K{K}_tau{tau}.csv` (point_id, pca_x, pca_y, cluster_id, p_0..p_{d-1}) and
/// `sim_K{K}_tau{tau}_attn.csv` for every cell. Returns the paths written.
inline std::vector<std::filesystem::path> emit_plot_data(const SimResult& result,
                                                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  for (const auto& cell : result.cells) {
    const std::string stem = sim_cell_stem(cell.iterations, cell.tau);
    const auto points_path = dir / (stem + ".csv");
    std::ofstream pts(points_path, std::ios::trunc);
    if (!pts) throw std::runtime_error("cannot write " + points_path.string());
    pts << "point_id,pca_x,pca_y,cluster_id";
    for (std::size_t j = 0; j < cell.p.cols(); ++j) pts << ",p_" << j;
    pts << "\n";
    for (std::size_t i = 0; i < cell.p.rows(); ++i) {
      pts << i << "," << format_float(cell.pca(i, 0)) << "," << format_float(cell.pca(i, 1)) << ","
          << cell.clusters.ids[i];
      for (std::size_t j = 0; j < cell.p.cols(); ++j) pts << "," << format_float(cell.p(i, j));
      pts << "\n";
    }
    written.push_back(points_path);

    const auto attn_path = dir / (stem + "_attn.csv");
    std::ofstream attn(attn_path, std::ios::trunc);
    if (!attn) throw std::runtime_error("cannot write " + attn_path.string());
    for (std::size_t i = 0; i < cell.attention.rows(); ++i) {
      for (std::size_t j = 0; j < cell.attention.cols(); ++j) {
        if (j) attn << ",";
        attn << format_float(cell.attention(i, j));
      }
      attn << "\n";
    }
    written.push_back(attn_path);
  }
  return written;
}

}  // namespace gem
