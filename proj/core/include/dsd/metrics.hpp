#pragma once

#include <array>
#include <cstddef>
#include <string_view>

namespace dsd {

struct MetricsRecord {
  std::size_t step = 0;
  double erank_z1 = 1.0;
  double erank_z2 = 1.0;
  double erank_pred = 1.0;
  double l_rec = 0.0;
  double l_main = 0.0;
  double l_velo = 0.0;
  double l_cls = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;

  double rank_gap() const noexcept { return erank_z2 - erank_pred; }
  // Column lookup by CSV name; throws for unknown names.
  double column(std::string_view name) const;
};

inline constexpr std::array<std::string_view, 10> kMetricsColumns = {
    "step", "erank_z1", "erank_z2", "erank_pred", "l_rec", "l_main", "l_velo", "l_cls", "grad_norm", "wall_ms"};

}  // namespace dsd
