#include "layerlens/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "layerlens/error.hpp"

namespace layerlens::analysis {
namespace {

std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double total = 0.0;
  for (double x : v) total += x;
  return total / static_cast<double>(v.size());
}

std::optional<double> pearson(const std::vector<double>& a,
                              const std::vector<double>& b) {
  const auto n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

RegimeRow make_row(const std::vector<const EvalRecord*>& members) {
  RegimeRow row;
  row.count = members.size();
  std::vector<double> errs, kls, rho_x, rho_y;
  for (const EvalRecord* r : members) {
    errs.push_back(*r->rel_err);
    if (std::isinf(r->kl)) {
      ++row.infinite_kl;
    } else {
      kls.push_back(r->kl);
    }
    rho_x.push_back(*r->rel_err);
    rho_y.push_back(r->kl);
  }
  row.mean_rel_err = mean_of(errs);
  row.mean_kl = mean_of(kls);
  row.rho = spearman(rho_x, rho_y);
  return row;
}

}  // namespace

std::optional<double> rel_err(const Eigen::Ref<const Eigen::VectorXd>& pred,
                              const Eigen::Ref<const Eigen::VectorXd>& target) {
  if (pred.size() != target.size()) {
    throw Error(ErrorKind::kConfig, "rel_err: dimension mismatch");
  }
  const double denom = target.norm();
  if (!(denom > 1e-12)) return std::nullopt;
  return (pred - target).norm() / denom;
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i + 1;
    while (j < order.size() && values[order[j]] == values[order[i]]) ++j;
    const double shared = 0.5 * static_cast<double>(i + 1 + j);  // mean of i+1..j
    for (std::size_t t = i; t < j; ++t) ranks[order[t]] = shared;
    i = j;
  }
  return ranks;
}

std::optional<double> spearman(std::span<const double> x,
                               std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 3) return std::nullopt;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::isnan(x[i]) || std::isnan(y[i])) return std::nullopt;
  }
  return pearson(average_ranks(x), average_ranks(y));
}

std::string_view regime_name(Regime r) {
  switch (r) {
    case Regime::kLow: return "low";
    case Regime::kMid: return "mid";
    case Regime::kHigh: return "high";
  }
  return "unknown";
}

RegimeTable bin_regimes(std::span<const EvalRecord> records) {
  RegimeTable table;
  std::vector<const EvalRecord*> valid;
  for (const auto& r : records) {
    if (r.rel_err) {
      valid.push_back(&r);
    } else {
      ++table.degenerate;
    }
  }
  if (valid.size() < 3) {
    throw Error(ErrorKind::kConfig,
                fmt::format("regime binning needs >= 3 records, got {}", valid.size()));
  }
  if (!records.empty()) table.map_class = records.front().map_class;
  std::vector<double> sorted;
  for (const auto* r : valid) sorted.push_back(*r->rel_err);
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  table.low_threshold = sorted[(n + 2) / 3 - 1];
  table.high_threshold = sorted[(2 * n + 2) / 3 - 1];

  std::array<std::vector<const EvalRecord*>, 3> bins;
  for (const auto* r : valid) {
    bins[static_cast<std::size_t>(regime_of(table, *r->rel_err))].push_back(r);
  }
  for (std::size_t b = 0; b < 3; ++b) table.rows[b] = make_row(bins[b]);
  table.overall = make_row(valid);
  return table;
}

Regime regime_of(const RegimeTable& table, double value) {
  if (value <= table.low_threshold) return Regime::kLow;
  if (value <= table.high_threshold) return Regime::kMid;
  return Regime::kHigh;
}

std::optional<double> median(std::vector<double> values) {
  if (values.empty()) return std::nullopt;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

LayerSummary summarize_layer(std::span<const EvalRecord> records,
                             std::span<const geom::GeometryRecord> geometry,
                             std::uint32_t layer) {
  LayerSummary s;
  s.layer = layer;
  s.count = records.size();

  std::vector<double> errs, kls, rho_x, rho_y;
  for (const auto& r : records) {
    if (!r.rel_err) {
      ++s.degenerate_rel_err;
      continue;
    }
    errs.push_back(*r.rel_err);
    rho_x.push_back(*r.rel_err);
    rho_y.push_back(r.kl);
    if (std::isinf(r.kl)) {
      ++s.infinite_kl;
    } else {
      kls.push_back(r.kl);
    }
  }
  s.mean_rel_err = mean_of(errs);
  s.median_rel_err = median(errs);
  s.mean_kl = mean_of(kls);
  s.spearman_rho = spearman(rho_x, rho_y);

  s.geometry_count = geometry.size();
  std::vector<double> res_norm, res_ratio, a_ft, a_rt, s_ft, s_rt, g_ft, g_rt;
  for (const auto& g : geometry) {
    res_norm.push_back(g.norm_res);
    if (g.norm_full > geom::kDegenerateNorm) {
      res_ratio.push_back(g.norm_res / g.norm_full);
    }
    if (g.full_tok) {
      a_ft.push_back(g.full_tok->abs_cos);
      s_ft.push_back(g.full_tok->signed_cos);
      g_ft.push_back(g.full_tok->angle_deg);
    } else {
      ++s.degenerate_full_tok;
    }
    if (g.res_tok) {
      a_rt.push_back(g.res_tok->abs_cos);
      s_rt.push_back(g.res_tok->signed_cos);
      g_rt.push_back(g.res_tok->angle_deg);
    } else {
      ++s.degenerate_res_tok;
    }
  }
  s.mean_residual_norm = mean_of(res_norm);
  s.median_residual_norm = median(res_norm);
  s.mean_residual_ratio = mean_of(res_ratio);
  s.mean_align_full_tok = mean_of(a_ft);
  s.mean_align_res_tok = mean_of(a_rt);
  s.mean_signed_full_tok = mean_of(s_ft);
  s.mean_signed_res_tok = mean_of(s_rt);
  s.mean_angle_full_tok = mean_of(g_ft);
  s.mean_angle_res_tok = mean_of(g_rt);

  if (!geometry.empty()) {
    for (std::size_t j = 0; j < geometry.front().projections.size(); ++j) {
      std::vector<double> pf, pt, pr;
      for (const auto& g : geometry) {
        const auto& e = g.projections.at(j);
        if (e.full) pf.push_back(*e.full);
        if (e.tok) pt.push_back(*e.tok);
        if (e.res) pr.push_back(*e.res);
      }
      s.projections.push_back({geometry.front().projections[j].k, mean_of(pf),
                               mean_of(pt), mean_of(pr)});
    }
  }
  return s;
}

ModelSummary model_summary(std::span<const LayerSummary> layers) {
  ModelSummary out;
  double total = 0.0;
  for (const auto& l : layers) {
    if (l.spearman_rho) {
      total += *l.spearman_rho;
      ++out.layers_used;
    } else {
      ++out.layers_excluded;
    }
  }
  if (out.layers_used == 0) {
    throw Error(ErrorKind::kCompute, "no layer has a defined Spearman rho");
  }
  out.mean_rho = total / static_cast<double>(out.layers_used);
  return out;
}

}  // namespace layerlens::analysis
