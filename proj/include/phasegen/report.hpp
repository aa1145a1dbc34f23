#pragma once
// Generative-quality evaluation stage and the cross-run report builder.

#include <algorithm>
#include <map>
#include <sstream>

#include "phasegen/evalgen.hpp"
#include "phasegen/pipeline.hpp"
#include "phasegen/plot.hpp"

namespace phasegen {

namespace detail {

inline const char* series_color(int i) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
    return palette[i % 8];
}

inline PhaseFraction pooled_fraction(const std::vector<Tile>& tiles, int k) {
    std::vector<int64_t> counts(k, 0);
    int64_t total = 0;
    for (const auto& t : tiles)
        for (uint8_t l : t.mask.labels)
            if (l != ClassMap::kIgnore) {
                ++counts[l];
                ++total;
            }
    require(total > 0, "no labeled pixels");
    std::vector<double> f(k);
    for (int i = 0; i < k; ++i) f[i] = static_cast<double>(counts[i]) / total;
    return PhaseFraction(f);
}

}  // namespace detail

/// `eval-gen`: distribution metrics + conditioning fidelity for one
/// generation run, with SVG diagnostics next to the run record.
inline RunRecord run_eval_gen(const ExperimentConfig& cfg, const fs::path& tiles_dir,
                              const fs::path& synth_dir, const fs::path& out_dir) {
    StageTimer timer;
    TileStore store = load_tile_store(tiles_dir);
    std::vector<Tile> real = store.split("train");
    require(real.size() >= 2, "need at least 2 real tiles");
    SyntheticCorpus synth = load_synthetic(synth_dir / "synthetic", store.num_classes);
    require(synth.tiles.size() >= 2, "need at least 2 synthetic tiles");

    const uint64_t seed = stage_seed(cfg, "eval-gen");
    const int knn_k = std::min<int>(3, static_cast<int>(
        std::min(real.size(), synth.tiles.size())) - 1);
    GenMetrics gm = compute_gen_metrics(real, synth.tiles, store.palette, seed,
                                        std::max(1, knn_k));

    std::vector<PhaseFraction> targets, realized, real_fracs;
    for (const auto& r : synth.records) {
        targets.push_back(r.target);
        realized.push_back(r.realized);
    }
    for (const auto& t : real) real_fracs.push_back(extract_fraction(t.mask));
    std::vector<ClassFidelity> fidelity = fraction_fidelity(targets, realized);
    std::vector<ClassHistogram> hists = fraction_histograms(real_fracs, realized);
    PhaseFraction real_ratio = detail::pooled_fraction(real, store.num_classes);
    PhaseFraction synth_ratio = detail::pooled_fraction(synth.tiles, store.num_classes);

    std::vector<PhaseFraction> all = real_fracs;
    all.insert(all.end(), realized.begin(), realized.end());
    PcaResult pca = pca_project(all);

    fs::create_directories(out_dir / "plots");
    for (int c = 0; c < store.num_classes; ++c) {
        const std::string& cname =
            c < static_cast<int>(store.class_names.size()) ? store.class_names[c]
                                                           : std::to_string(c);
        SvgPlot scatter("target vs realized: " + cname, "target fraction",
                        "realized fraction");
        std::vector<std::array<double, 2>> pts;
        for (size_t i = 0; i < targets.size(); ++i)
            pts.push_back({targets[i].f[c], realized[i].f[c]});
        scatter.add_points(pts, detail::series_color(c), "pairs");
        scatter.add_identity();
        scatter.write(out_dir / "plots" / ("fidelity_class" + std::to_string(c) + ".svg"));

        SvgPlot hist("fraction histogram: " + cname, "fraction", "density");
        hist.add_steps(hists[c].edges, hists[c].real_density, "#1f77b4", "real");
        hist.add_steps(hists[c].edges, hists[c].synth_density, "#d62728", "synthetic");
        hist.write(out_dir / "plots" / ("hist_class" + std::to_string(c) + ".svg"));
    }
    {
        SvgPlot pplot("fraction vectors, top-2 principal axes", "pc1", "pc2");
        std::vector<std::array<double, 2>> rp(pca.points.begin(),
                                              pca.points.begin() + real_fracs.size());
        std::vector<std::array<double, 2>> sp(pca.points.begin() + real_fracs.size(),
                                              pca.points.end());
        pplot.add_points(rp, "#1f77b4", "real");
        pplot.add_points(sp, "#d62728", "synthetic");
        pplot.write(out_dir / "plots" / "fraction_pca.svg");
    }

    RunRecord rec;
    rec.stage = "eval-gen";
    rec.config = json(cfg);
    rec.global_seed = cfg.seed;
    rec.stage_seed = seed;
    rec.seed_stream = "eval-gen";
    rec.timings["stage_seconds"] = timer.seconds();
    rec.metrics["fid_image"] = gm.fid_image;
    rec.metrics["fid_mask"] = gm.fid_mask;
    rec.metrics["is_image"] = json{{"mean", gm.is_image.mean}, {"std", gm.is_image.std}};
    rec.metrics["is_mask"] = json{{"mean", gm.is_mask.mean}, {"std", gm.is_mask.std}};
    rec.metrics["precision"] = gm.precision;
    rec.metrics["recall"] = gm.recall;
    json fj = json::array();
    for (const auto& f : fidelity) {
        json one = json{{"mae_pp", f.mae_pp}};
        if (f.r2) one["r2"] = *f.r2;
        fj.push_back(one);
    }
    rec.metrics["fraction_fidelity"] = fj;
    json hj = json::array();
    for (const auto& h : hists) {
        json one = json{{"real_tail_mass", h.real_tail_mass},
                        {"synth_tail_mass", h.synth_tail_mass}};
        if (h.tail_ratio) one["tail_ratio"] = *h.tail_ratio;
        hj.push_back(one);
    }
    rec.metrics["tail_masses"] = hj;
    rec.metrics["class_ratio_real"] = real_ratio.f;
    rec.metrics["class_ratio_synth"] = synth_ratio.f;
    rec.metrics["pca_explained"] = pca.explained;
    write_run_record(out_dir, rec);
    return rec;
}

// ---------------------------------------------------------------------------
// Cross-run report
// ---------------------------------------------------------------------------

struct ScalingPoint {
    int ratio = 0;
    std::vector<double> miou;               // one entry per seed
    std::vector<std::vector<double>> iou;   // per seed, per class
};

/// Collect run_record.json files below `root`.
inline std::vector<json> collect_records(const fs::path& root) {
    std::vector<json> out;
    if (!fs::exists(root)) return out;
    std::vector<fs::path> paths;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path().filename() == "run_record.json")
            paths.push_back(e.path());
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) out.push_back(json::parse(read_text_file(p)));
    return out;
}

inline double vec_mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / v.size();
}

inline double vec_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = vec_mean(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / v.size());
}

/// `report`: aggregate eval records into tables (JSON + CSV + text) and an
/// augmentation scaling curve. Every value is read back from run records so
/// the report stays consistent with what the stages measured.
inline RunRecord emit_report(const fs::path& records_root, const fs::path& out_dir) {
    std::vector<json> records = collect_records(records_root);
    require(!records.empty(), "no run records found under " + records_root.string());
    fs::create_directories(out_dir);

    std::map<int, ScalingPoint> by_ratio;
    json gen_eval;  // last eval-gen record wins
    json timings = json::array();
    for (const auto& r : records) {
        const std::string stage = r.at("stage").get<std::string>();
        timings.push_back({{"stage", stage},
                           {"seconds", r.at("timings").value("stage_seconds", 0.0)}});
        if (stage == "eval-seg") {
            const int ratio = r.at("metrics").value("ratio", -1);
            if (ratio < 0) continue;
            auto& pt = by_ratio[ratio];
            pt.ratio = ratio;
            const json& agg = r.at("metrics").at("aggregate");
            pt.miou.push_back(agg.at("miou").get<double>());
            pt.iou.push_back(agg.at("iou").get<std::vector<double>>());
        } else if (stage == "eval-gen") {
            gen_eval = r;
        }
    }

    json summary;
    summary["format_version"] = kRecordVersion;
    std::ostringstream txt, csv;
    txt << "augmentation scaling (test-set segmentation)\n";
    txt << "ratio  runs  miou_mean  miou_std\n";
    csv << "ratio,seed_index,miou";
    size_t k = 0;
    for (const auto& [ratio, pt] : by_ratio) k = std::max(k, pt.iou.empty() ? size_t(0) : pt.iou[0].size());
    for (size_t c = 0; c < k; ++c) csv << ",iou_" << c;
    csv << "\n";

    json scaling = json::array();
    std::vector<std::array<double, 2>> curve;
    std::vector<std::array<double, 3>> band;
    for (const auto& [ratio, pt] : by_ratio) {
        const double m = vec_mean(pt.miou), s = vec_std(pt.miou);
        char line[128];
        std::snprintf(line, sizeof(line), "%5d  %4zu  %9.4f  %8.4f\n", ratio,
                      pt.miou.size(), m, s);
        txt << line;
        json entry = {{"ratio", ratio},
                      {"runs", pt.miou.size()},
                      {"miou_mean", m},
                      {"miou_std", s},
                      {"miou", pt.miou}};
        std::vector<double> class_means;
        if (!pt.iou.empty()) {
            for (size_t c = 0; c < pt.iou[0].size(); ++c) {
                std::vector<double> col;
                for (const auto& row : pt.iou) col.push_back(row[c]);
                class_means.push_back(vec_mean(col));
            }
        }
        entry["iou_mean"] = class_means;
        scaling.push_back(entry);
        for (size_t i = 0; i < pt.miou.size(); ++i) {
            csv << ratio << "," << i << "," << pt.miou[i];
            for (double x : pt.iou[i]) csv << "," << x;
            csv << "\n";
        }
        curve.push_back({static_cast<double>(ratio), m});
        band.push_back({static_cast<double>(ratio), m - s, m + s});
    }
    summary["scaling"] = scaling;

    if (!curve.empty()) {
        SvgPlot plot("test MIoU vs synthetic-to-real ratio", "synthetic:real ratio",
                     "mean IoU");
        if (band.size() >= 2) plot.add_band(band, "#1f77b4");
        plot.add_line(curve, "#1f77b4", "mean over seeds");
        plot.add_points(curve, "#1f77b4");
        plot.write(out_dir / "scaling_curve.svg");
    }

    if (!by_ratio.empty()) {
        txt << "\nper-class IoU means by ratio\nratio";
        for (size_t c = 0; c < k; ++c) txt << "  class" << c;
        txt << "\n";
        for (const auto& entry : scaling) {
            txt << entry.at("ratio").get<int>();
            for (const auto& v : entry.at("iou_mean")) {
                char cell[32];
                std::snprintf(cell, sizeof(cell), "  %8.4f", v.get<double>());
                txt << cell;
            }
            txt << "\n";
        }
    }

    if (!gen_eval.is_null()) {
        const json& gm = gen_eval.at("metrics");
        summary["generation"] = gm;
        txt << "\ngeneration quality\n";
        txt << "fid_image " << gm.at("fid_image").get<double>() << "\n";
        txt << "fid_mask  " << gm.at("fid_mask").get<double>() << "\n";
        txt << "is_image  " << gm.at("is_image").at("mean").get<double>() << " +- "
            << gm.at("is_image").at("std").get<double>() << "\n";
        txt << "precision " << gm.at("precision").get<double>() << "  recall "
            << gm.at("recall").get<double>() << "\n";
        txt << "\nconditioning fidelity (per class)\nclass  r2  mae_pp\n";
        int c = 0;
        for (const auto& f : gm.at("fraction_fidelity")) {
            txt << c++ << "  ";
            if (f.contains("r2"))
                txt << f.at("r2").get<double>();
            else
                txt << "n/a";
            txt << "  " << f.at("mae_pp").get<double>() << "\n";
        }
        txt << "\npooled class ratios\nreal:  ";
        for (const auto& v : gm.at("class_ratio_real")) txt << v.get<double>() << " ";
        txt << "\nsynth: ";
        for (const auto& v : gm.at("class_ratio_synth")) txt << v.get<double>() << " ";
        txt << "\n";
    }
    summary["timings"] = timings;

    write_text_file(out_dir / "summary.json", summary.dump(2));
    write_text_file(out_dir / "scaling.csv", csv.str());
    write_text_file(out_dir / "report.txt", txt.str());

    RunRecord rec;
    rec.stage = "report";
    rec.config = json::object();
    rec.timings["stage_seconds"] = 0.0;
    rec.metrics["records_seen"] = records.size();
    rec.metrics["ratios"] = by_ratio.size();
    write_run_record(out_dir, rec);
    return rec;
}

}  // namespace phasegen
