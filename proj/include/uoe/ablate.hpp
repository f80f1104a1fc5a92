#pragma once

// Expert-count / activation-ratio sweep: train one model per (n, r) grid
// cell, all from the same merged-weight initialization, plus one dense
// baseline with the same totals. The n axis varies the MLP expert count with
// the total MLP width held fixed; the attention expert count stays at the
// base architecture because it doubles as the head count, and changing it
// would change the model rather than its partition. The r axis scales the
// activated fraction of both sub-blocks, so every cell partitions the same
// dense twin and the r = 1 column must track the dense run.

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "uoe/config_file.hpp"
#include "uoe/model.hpp"
#include "uoe/train.hpp"

namespace uoe {

struct AblateCell {
  std::size_t n = 0;
  double r = 0.0;
  std::size_t k = 0;
  double final_ppl = 0.0;
  double flops_ratio = 0.0;
};

struct AblateReport {
  std::vector<AblateCell> cells;  // row-major over (n, r)
  double dense_final_ppl = 0.0;
};

inline std::vector<std::size_t> default_ablate_expert_grid() {
  return {2, 4, 8};
}
inline std::vector<double> default_ablate_ratio_grid() {
  return {0.25, 0.5, 0.75, 1.0};
}

inline AblateReport run_ablation(
    const RunConfig& base, const std::vector<std::uint8_t>& corpus,
    const std::vector<std::size_t>& expert_grid,
    const std::vector<double>& ratio_grid) {
  const std::size_t mlp_total = base.model.mlp_width();
  for (std::size_t n : expert_grid)
    if (mlp_total % n != 0)
      throw ConfigError("ablate: mlp width " + std::to_string(mlp_total) +
                        " not divisible by n=" + std::to_string(n));

  AblateReport report;
  {
    DenseTrainer<double> dense(DenseModel<double>::init(base.model),
                               base.train);
    const auto history = dense.run(corpus, "", "");
    report.dense_final_ppl = history.back().second.ppl;
  }
  for (std::size_t n : expert_grid)
    for (double r : ratio_grid) {
      AblateCell cell;
      cell.n = n;
      cell.r = r;
      cell.k = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::llround(r * double(n))));
      auto cfg = base.model;
      cfg.n_m = n;
      cfg.d_e = mlp_total / n;
      cfg.k_mlp = cell.k;
      cfg.k_attn = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::llround(r * double(cfg.n_a))));
      UoeTrainer<double> trainer(UoeModel<double>::init(cfg), base.train);
      const auto history = trainer.run(corpus, "", "");
      cell.final_ppl = history.back().second.ppl;
      cell.flops_ratio = history.back().second.flops_ratio;
      report.cells.push_back(cell);
    }
  return report;
}

inline std::string ablate_csv(const AblateReport& report) {
  std::ostringstream out;
  out << "n,r,k,final_ppl,flops_ratio,dense_final_ppl\n";
  for (const auto& c : report.cells)
    out << c.n << ',' << format_metric(c.r) << ',' << c.k << ','
        << format_metric(c.final_ppl) << ',' << format_metric(c.flops_ratio)
        << ',' << format_metric(report.dense_final_ppl) << '\n';
  return out.str();
}

}  // namespace uoe
