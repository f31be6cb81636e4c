#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "trinet/experiment.hpp"
#include "trinet/metrics.hpp"

namespace trinet {
namespace {

namespace fs = std::filesystem;

std::string fmt6(double v) {
  if (std::isnan(v)) return "-";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

std::string layers_str(const std::vector<std::int64_t>& layers) {
  std::string s;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(layers[i]);
  }
  return s;
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

struct FpGroup {
  std::vector<SweepRecord> recs;  // sorted by seed
};

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

}  // namespace

std::vector<VariantBest> reduce_records(const std::string& records_dir,
                                        const ReportMode& mode) {
  std::vector<fs::path> files;
  if (fs::exists(records_dir)) {
    for (const auto& entry : fs::directory_iterator(records_dir)) {
      if (entry.path().extension() == ".json") files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("report: no records under " + records_dir);

  std::map<std::string, FpGroup> groups;
  int n_failed = 0;
  for (const auto& f : files) {
    std::ifstream in(f);
    std::stringstream ss;
    ss << in.rdbuf();
    SweepRecord rec;
    try {
      rec = record_from_json(ss.str());
    } catch (const std::exception& e) {
      throw std::runtime_error("report: cannot parse " + f.string() + ": " + e.what());
    }
    if (rec.failed) {
      ++n_failed;
      continue;
    }
    groups[rec.fingerprint].recs.push_back(std::move(rec));
  }
  if (n_failed > 0) {
    std::fprintf(stderr, "warning: %d failed records skipped\n", n_failed);
  }

  // Aggregate each fingerprint over its seeds.
  struct Agg {
    VariantBest best;
  };
  std::map<std::string, std::vector<Agg>> by_variant;
  for (auto& [fp, group] : groups) {
    auto& recs = group.recs;
    std::sort(recs.begin(), recs.end(),
              [](const SweepRecord& a, const SweepRecord& b) { return a.seed < b.seed; });
    const SweepRecord& first = recs.front();
    for (const auto& r : recs) {
      if (r.val_adv_rhos != first.val_adv_rhos || r.test_adv_rhos != first.test_adv_rhos ||
          r.variant != first.variant || r.grid_index != first.grid_index) {
        throw std::runtime_error("report: inconsistent records for fingerprint " + fp);
      }
    }
    VariantBest vb;
    vb.variant = first.variant;
    vb.fingerprint = fp;
    vb.grid_index = first.grid_index;
    vb.lr = first.lr;
    vb.layers = first.layers;
    vb.weight_decay = first.weight_decay;
    vb.dropout = first.dropout;
    vb.rho = first.rho;
    vb.lambda = first.lambda;
    vb.n_seeds = static_cast<int>(recs.size());
    {
      std::vector<double> v;
      for (const auto& r : recs) v.push_back(r.test_natural);
      vb.natural_acc = mean_of(v);
      v.clear();
      for (const auto& r : recs) v.push_back(r.test_sparsity);
      vb.sparsity = mean_of(v);
    }
    vb.adv_rhos = first.test_adv_rhos;
    vb.adv_accs.assign(vb.adv_rhos.size(), 0.0);
    for (std::size_t k = 0; k < vb.adv_rhos.size(); ++k) {
      std::vector<double> v;
      for (const auto& r : recs) v.push_back(r.test_adv_accs[k]);
      vb.adv_accs[k] = mean_of(v);
    }
    if (recs.size() >= 2) {
      std::vector<std::vector<int>> preds;
      for (const auto& r : recs) preds.push_back(r.test_predictions);
      int K = 0;
      for (const auto& p : preds) {
        for (int c : p) K = std::max(K, c + 1);
      }
      vb.stability = stability_score(preds, std::max(K, 2));
    } else {
      vb.stability = std::numeric_limits<double>::quiet_NaN();
    }
    if (mode.criterion == ReportCriterion::best_by_natural) {
      std::vector<double> v;
      for (const auto& r : recs) v.push_back(r.val_acc);
      vb.selection = mean_of(v);
    } else {
      std::size_t at = first.val_adv_rhos.size();
      for (std::size_t k = 0; k < first.val_adv_rhos.size(); ++k) {
        if (first.val_adv_rhos[k] == mode.rho) at = k;
      }
      if (at == first.val_adv_rhos.size()) {
        std::string have;
        for (double r : first.val_adv_rhos) have += (have.empty() ? "" : ", ") + fmt_g(r);
        throw std::runtime_error("report: rho " + fmt_g(mode.rho) +
                                 " was not evaluated (available: " + have + ")");
      }
      std::vector<double> v;
      for (const auto& r : recs) v.push_back(r.val_adv_accs[at]);
      vb.selection = mean_of(v);
    }
    by_variant[vb.variant].push_back(Agg{std::move(vb)});
  }

  std::vector<VariantBest> out;
  for (const auto& name : canonical_variants()) {
    auto it = by_variant.find(name);
    if (it == by_variant.end()) {
      std::fprintf(stderr, "warning: no usable records for variant '%s'; omitted\n",
                   name.c_str());
      continue;
    }
    const Agg* winner = nullptr;
    for (const auto& agg : it->second) {
      if (!winner || agg.best.selection > winner->best.selection ||
          (agg.best.selection == winner->best.selection &&
           agg.best.grid_index < winner->best.grid_index)) {
        winner = &agg;
      }
    }
    out.push_back(winner->best);
  }
  if (out.empty()) throw std::runtime_error("report: no usable records");
  return out;
}

void write_reports(const std::vector<VariantBest>& best, const ReportMode& mode,
                   const std::string& out_dir) {
  if (best.empty()) throw std::invalid_argument("write_reports: no variants");
  fs::create_directories(out_dir);

  // Union of evaluated radii, ascending.
  std::set<double> rho_set;
  for (const auto& vb : best) {
    for (double r : vb.adv_rhos) rho_set.insert(r);
  }
  const std::vector<double> rhos(rho_set.begin(), rho_set.end());

  auto adv_at = [](const VariantBest& vb, double rho) {
    for (std::size_t k = 0; k < vb.adv_rhos.size(); ++k) {
      if (vb.adv_rhos[k] == rho) return vb.adv_accs[k];
    }
    return std::numeric_limits<double>::quiet_NaN();
  };

  {
    std::ofstream csv(fs::path(out_dir) / "report.csv", std::ios::binary | std::ios::trunc);
    csv << "variant,lr,layers,weight_decay,dropout,rho,lambda,seeds,natural_acc,stability,"
           "sparsity";
    for (double r : rhos) csv << ",adv@" << fmt_g(r);
    csv << "\n";
    for (const auto& vb : best) {
      csv << vb.variant << "," << fmt_g(vb.lr) << "," << layers_str(vb.layers) << ","
          << fmt_g(vb.weight_decay) << "," << fmt_g(vb.dropout) << "," << fmt_g(vb.rho) << ","
          << fmt_g(vb.lambda) << "," << vb.n_seeds << "," << fmt6(vb.natural_acc) << ","
          << (std::isnan(vb.stability) ? "" : fmt6(vb.stability)) << ","
          << fmt6(vb.sparsity);
      for (double r : rhos) {
        const double a = adv_at(vb, r);
        csv << "," << (std::isnan(a) ? "" : fmt6(a));
      }
      csv << "\n";
    }
  }

  {
    std::ofstream txt(fs::path(out_dir) / "report.txt", std::ios::binary | std::ios::trunc);
    txt << "selection: "
        << (mode.criterion == ReportCriterion::best_by_natural
                ? std::string("best_by_natural")
                : "best_by_adv (rho=" + fmt_g(mode.rho) + ")")
        << "\n\n";

    // Metric rows by variant columns, Table-3 style.
    std::vector<std::pair<std::string, std::vector<double>>> rows;
    {
      std::vector<double> acc, stab, sp;
      for (const auto& vb : best) acc.push_back(vb.natural_acc);
      rows.emplace_back("Accuracy", acc);
      for (double r : rhos) {
        std::vector<double> a;
        for (const auto& vb : best) a.push_back(adv_at(vb, r));
        rows.emplace_back("Adv. Accuracy (rho=" + fmt_g(r) + ")", a);
      }
      for (const auto& vb : best) stab.push_back(vb.stability);
      rows.emplace_back("Stability", stab);
      for (const auto& vb : best) sp.push_back(vb.sparsity);
      rows.emplace_back("Sparsity", sp);
    }
    std::size_t label_w = 0;
    for (const auto& [label, vals] : rows) label_w = std::max(label_w, label.size());
    label_w += 2;
    std::vector<std::size_t> col_w;
    for (const auto& vb : best) col_w.push_back(std::max<std::size_t>(vb.variant.size(), 8) + 2);

    txt << std::string(label_w, ' ');
    for (std::size_t c = 0; c < best.size(); ++c) txt << pad(best[c].variant, col_w[c]);
    txt << "\n";
    for (const auto& [label, vals] : rows) {
      txt << label << std::string(label_w - label.size(), ' ');
      for (std::size_t c = 0; c < vals.size(); ++c) txt << pad(fmt6(vals[c]), col_w[c]);
      txt << "\n";
    }

    txt << "\nchosen configurations\n";
    for (const auto& vb : best) {
      txt << "  " << vb.variant << ": lr=" << fmt_g(vb.lr)
          << " layers=" << layers_str(vb.layers) << " wd=" << fmt_g(vb.weight_decay)
          << " dropout=" << fmt_g(vb.dropout);
      if (vb.rho != 0.0) txt << " rho=" << fmt_g(vb.rho);
      if (vb.lambda != 0.0) txt << " lambda=" << fmt_g(vb.lambda);
      txt << " (seeds=" << vb.n_seeds << ", fp=" << vb.fingerprint << ")\n";
    }

    txt << "\nimprovement captured vs nominal\n";
    const VariantBest* nominal = nullptr;
    for (const auto& vb : best) {
      if (vb.variant == "nominal") nominal = &vb;
    }
    if (!nominal) {
      txt << "  n/a: no nominal records\n";
    } else {
      for (const auto& vb : best) {
        if (&vb == nominal) continue;
        txt << "  " << vb.variant << ":";
        if (nominal->natural_acc < 1.0) {
          txt << " Accuracy "
              << fmt6(improvement_captured(nominal->natural_acc, vb.natural_acc));
        } else {
          txt << " Accuracy -";
        }
        for (double r : rhos) {
          const double nom = adv_at(*nominal, r), v = adv_at(vb, r);
          txt << "  Adv@" << fmt_g(r) << " ";
          if (!std::isnan(nom) && !std::isnan(v) && nom < 1.0) {
            txt << fmt6(improvement_captured(nom, v));
          } else {
            txt << "-";
          }
        }
        txt << "\n";
      }
    }

    // One winner per metric; stability is a disagreement measure, so the
    // smallest value wins there.
    txt << "\nwins per metric\n";
    std::map<std::string, int> win_count;
    for (const auto& vb : best) win_count[vb.variant] = 0;
    auto declare = [&](const std::string& label, const std::vector<double>& vals,
                       bool lower_wins) {
      std::size_t w = vals.size();
      for (std::size_t c = 0; c < vals.size(); ++c) {
        if (std::isnan(vals[c])) continue;
        if (w == vals.size() || (lower_wins ? vals[c] < vals[w] : vals[c] > vals[w])) w = c;
      }
      if (w == vals.size()) return;
      txt << "  " << label << ": " << best[w].variant << "\n";
      ++win_count[best[w].variant];
    };
    for (const auto& [label, vals] : rows) {
      declare(label, vals, /*lower_wins=*/label == "Stability");
    }
    txt << "wins per variant:";
    for (const auto& vb : best) txt << " " << vb.variant << "=" << win_count[vb.variant];
    txt << "\n";
  }
}

}  // namespace trinet
