#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tfs/error.hpp"
#include "tfs/harness.hpp"
#include "tfs/metrics.hpp"
#include "tfs/protocols.hpp"

namespace tfs::report {

namespace fs = std::filesystem;
using protocols::Regime;

// One aggregated row: a regime's runs on one dataset at one labeled ratio.
struct RegimeSummary {
  Regime regime = Regime::kFT;
  metrics::AggregateResult aggregate;
  std::string init;            // e.g. "random_init", "tapt"
  std::string pseudo_labeler;  // "", "FT" or "TAPT"
};

struct ReportGroup {
  std::string dataset;
  double labeled_ratio = 0.0;
  std::string metric;
  std::vector<RegimeSummary> rows;  // in FT, TAPT, ST, STTI, TFS order

  const RegimeSummary* find(Regime r) const {
    for (const auto& row : rows) {
      if (row.regime == r) return &row;
    }
    return nullptr;
  }
  std::optional<double> gain(Regime r) const {
    const auto* ft = find(Regime::kFT);
    const auto* row = find(r);
    if (ft == nullptr || row == nullptr) return std::nullopt;
    return row->aggregate.mean - ft->aggregate.mean;
  }
  // FT + (TAPT − FT) + (ST − FT), present iff all three rows exist.
  std::optional<double> additive_reference() const {
    const auto *ft = find(Regime::kFT), *tapt = find(Regime::kTAPT), *st = find(Regime::kST);
    if (ft == nullptr || tapt == nullptr || st == nullptr) return std::nullopt;
    return metrics::additive_reference(ft->aggregate, tapt->aggregate, st->aggregate);
  }
};

// Initialization and pseudo-labeler implied by each regime's definition.
inline std::string default_init(Regime r) {
  return r == Regime::kFT || r == Regime::kST ? "random_init" : "tapt";
}
inline std::string default_pseudo_labeler(Regime r) {
  switch (r) {
    case Regime::kST:
    case Regime::kSTTI: return "FT";
    case Regime::kTFS: return "TAPT";
    default: return "";
  }
}

// Groups run records by (dataset, ratio) and aggregates test metrics per regime.
inline std::vector<ReportGroup> summarize(const std::vector<harness::RunRecord>& records) {
  if (records.empty()) throw MetricError("report: no run records");
  std::map<std::pair<std::string, int>, std::map<Regime, std::vector<const harness::RunRecord*>>>
      groups;
  for (const auto& r : records) {
    groups[{r.dataset, r.ratio_index}][protocols::regime_from_string(r.regime)].push_back(&r);
  }
  std::vector<ReportGroup> out;
  for (const auto& [key, by_regime] : groups) {
    ReportGroup g;
    g.dataset = key.first;
    for (const auto& [regime, runs] : by_regime) {
      std::vector<double> values;
      for (const auto* r : runs) {
        if (!g.metric.empty() && g.metric != r->metric) {
          throw MetricError("report: mixed metrics in " + g.dataset);
        }
        g.metric = r->metric;
        g.labeled_ratio = r->labeled_ratio;
        values.push_back(r->test_metric);
      }
      g.rows.push_back({regime, metrics::aggregate(values, protocols::to_string(regime), g.metric),
                        runs.front()->init_tag, runs.front()->pseudo_labeler});
    }
    out.push_back(std::move(g));
  }
  return out;
}

// ---- formatting ------------------------------------------------------------------

inline std::string percent(double v) {
  char buf[32];
  // Snap to 1e-9 first so binary noise such as 12.4999999999 prints as 12.5.
  const double pct = std::round(100.0 * v * 1e9) / 1e9 + 0.0;
  std::snprintf(buf, sizeof buf, "%.1f", pct);
  return buf;
}

inline std::string signed_percent(double v) {
  std::string s = percent(v);
  if (s == "-0.0") s = "0.0";
  return s[0] == '-' ? s : "+" + s;
}

inline std::string ratio_label(double ratio) {
  char buf[32];
  const double pct = 100.0 * ratio;
  if (pct >= 0.1 && std::fabs(pct * 10.0 - std::round(pct * 10.0)) < 1e-9) {
    std::snprintf(buf, sizeof buf, "%.1f%%", pct);
  } else {
    std::snprintf(buf, sizeof buf, "%g%%", pct);
  }
  return buf;
}

inline std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

// Aligned plain-text table; rows are vectors of cells.
inline std::string render_aligned(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (width.size() <= i) width.push_back(0);
      width[i] = std::max(width[i], r[i].size());
    }
  }
  std::string out;
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t i = 0; i < r.size(); ++i) {
      line += i + 1 == r.size() ? r[i] : pad(r[i], width[i] + 2);
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
  }
  return out;
}

inline std::string init_label(const std::string& init) {
  return init == "tapt" ? "TAPT*" : init;
}

struct RenderedReport {
  std::string text;
  std::string tsv;
  std::vector<std::string> warnings;
};

inline RenderedReport render(const std::vector<ReportGroup>& groups) {
  RenderedReport r;
  r.tsv =
      "dataset\tlabeled_ratio\tregime\tmetric\truns\tmean\tstd\tgain_over_ft\tmean_pct\tstd_pct\t"
      "gain_pct\n";
  std::map<std::string, std::vector<const ReportGroup*>> by_dataset;
  for (const auto& g : groups) {
    by_dataset[g.dataset].push_back(&g);
    const bool has_ft = g.find(Regime::kFT) != nullptr;
    if (!has_ft && g.rows.size() > 1) {
      r.warnings.push_back(g.dataset + " at " + ratio_label(g.labeled_ratio) +
                           ": no FT row, gains omitted");
    }
    const bool show_gain = has_ft && g.rows.size() > 1;
    std::vector<std::vector<std::string>> table;
    table.push_back({"Regime", "Mean", "Std"});
    if (show_gain) table.back().push_back("Gain");
    table.back().push_back("Runs");
    for (const auto& row : g.rows) {
      const auto& a = row.aggregate;
      std::vector<std::string> cells = {protocols::to_string(row.regime), percent(a.mean),
                                        percent(a.std)};
      const auto gain = g.gain(row.regime);
      if (show_gain) {
        cells.push_back(row.regime == Regime::kFT ? "" : "(" + signed_percent(*gain) + ")");
      }
      cells.push_back(std::to_string(a.values.size()));
      table.push_back(cells);
      char raw[160];
      std::snprintf(raw, sizeof raw, "%.17g\t%.17g\t", a.mean, a.std);
      r.tsv += g.dataset + "\t" + std::to_string(g.labeled_ratio) + "\t" +
               protocols::to_string(row.regime) + "\t" + g.metric + "\t" +
               std::to_string(a.values.size()) + "\t" + raw;
      if (has_ft) {
        std::snprintf(raw, sizeof raw, "%.17g", *gain);
        r.tsv += raw;
      }
      r.tsv += "\t" + percent(a.mean) + "\t" + percent(a.std) + "\t" +
               (has_ft ? signed_percent(*gain) : std::string()) + "\n";
    }
    r.text += g.dataset + ", " + ratio_label(g.labeled_ratio) + " labeled, test " + g.metric +
              " (%, mean and population std over runs)\n";
    r.text += render_aligned(table);
    if (const auto ref = g.additive_reference()) {
      r.text += "TAPT+ST reference: " + percent(*ref);
      if (const auto* tfs = g.find(Regime::kTFS)) {
        r.text += " (TFS " + percent(tfs->aggregate.mean) + ")";
      }
      r.text += "\n";
      char raw[64];
      std::snprintf(raw, sizeof raw, "%.17g", *ref);
      r.tsv += g.dataset + "\t" + std::to_string(g.labeled_ratio) + "\tTAPT+ST_reference\t" +
               g.metric + "\t\t" + raw + "\t\t\t" + percent(*ref) + "\t\t\n";
    }
    r.text += "\n";
  }
  // Initialization / pseudo-labeler comparison, one block per dataset that
  // has STTI runs, one score row per labeled ratio.
  for (const auto& [dataset, gs] : by_dataset) {
    const bool has_stti = std::any_of(gs.begin(), gs.end(), [](const ReportGroup* g) {
      return g->find(Regime::kSTTI) != nullptr;
    });
    if (!has_stti) continue;
    std::vector<Regime> cols;
    for (const Regime reg : protocols::kAllRegimes) {
      for (const auto* g : gs) {
        if (g->find(reg) != nullptr) {
          cols.push_back(reg);
          break;
        }
      }
    }
    std::vector<std::vector<std::string>> table;
    table.push_back({""});
    std::vector<std::string> init = {"Init."}, pseud = {"Pseud."};
    for (const Regime reg : cols) {
      table[0].push_back(protocols::to_string(reg));
      const RegimeSummary* any = nullptr;
      for (const auto* g : gs) {
        if ((any = g->find(reg)) != nullptr) break;
      }
      init.push_back(init_label(any->init.empty() ? default_init(reg) : any->init));
      const std::string p = any->pseudo_labeler;
      pseud.push_back(p.empty() ? "-" : p);
    }
    table.push_back(init);
    table.push_back(pseud);
    for (const auto* g : gs) {
      std::vector<std::string> row = {"Score (" + ratio_label(g->labeled_ratio) + ")"};
      for (const Regime reg : cols) {
        const auto* s = g->find(reg);
        row.push_back(s ? percent(s->aggregate.mean) : "");
      }
      table.push_back(row);
    }
    r.text += dataset + ": initialization and pseudo-labeler comparison (TAPT* = not finetuned)\n";
    r.text += render_aligned(table) + "\n";
  }
  for (const auto& w : r.warnings) r.text += "warning: " + w + "\n";
  return r;
}

// Writes report.txt and report.tsv to `out_dir`; returns the rendering.
inline RenderedReport emit_report(const std::vector<ReportGroup>& groups, const fs::path& out_dir) {
  if (groups.empty()) throw MetricError("report: nothing to report");
  auto r = render(groups);
  harness::write_text(out_dir / "report.txt", r.text);
  harness::write_text(out_dir / "report.tsv", r.tsv);
  return r;
}

inline RenderedReport emit_report(const std::vector<harness::RunRecord>& records,
                                  const fs::path& out_dir) {
  return emit_report(summarize(records), out_dir);
}

// Builds a group from externally computed means (std 0,
// one run each); used to check the table arithmetic.
inline ReportGroup group_from_means(const std::string& dataset, double ratio,
                                    const std::string& metric,
                                    const std::vector<std::pair<Regime, double>>& means) {
  ReportGroup g;
  g.dataset = dataset;
  g.labeled_ratio = ratio;
  g.metric = metric;
  for (const auto& [regime, mean] : means) {
    g.rows.push_back({regime,
                      metrics::aggregate(std::vector<double>{mean}, protocols::to_string(regime),
                                         metric),
                      default_init(regime), default_pseudo_labeler(regime)});
  }
  std::sort(g.rows.begin(), g.rows.end(),
            [](const RegimeSummary& a, const RegimeSummary& b) { return a.regime < b.regime; });
  return g;
}

}  // namespace tfs::report
