// cacs: phantom cohorts, clinical reference calcium scoring, direct
// regression training, prediction, agreement evaluation, saliency overlays.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cacs/ct_volume.hpp"
#include "cacs/error.hpp"
#include "cacs/metrics.hpp"
#include "cacs/phantom.hpp"
#include "cacs/pipeline.hpp"
#include "cacs/refscore.hpp"
#include "cacs/report_io.hpp"

namespace {

using cacs::Error;
using cacs::ErrorKind;
using nlohmann::json;

double elapsed_seconds(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::array<int, 3> parse_dims(const std::string& s) {
    std::array<int, 3> dims;
    if (std::sscanf(s.c_str(), "%dx%dx%d", &dims[0], &dims[1], &dims[2]) != 3)
        cacs::fail(ErrorKind::Usage, "expected DIMS as NXxNYxNZ, got: " + s);
    return dims;
}

std::array<double, 3> parse_triple(const std::string& s) {
    std::array<double, 3> t;
    if (std::sscanf(s.c_str(), "%lf,%lf,%lf", &t[0], &t[1], &t[2]) != 3)
        cacs::fail(ErrorKind::Usage, "expected three comma-separated values, got: " + s);
    return t;
}

cacs::RangeI parse_range_i(const std::string& s) {
    cacs::RangeI r;
    if (std::sscanf(s.c_str(), "%d:%d", &r.lo, &r.hi) != 2)
        cacs::fail(ErrorKind::Usage, "expected range as LO:HI, got: " + s);
    return r;
}

cacs::RangeD parse_range_d(const std::string& s) {
    cacs::RangeD r;
    if (std::sscanf(s.c_str(), "%lf:%lf", &r.lo, &r.hi) != 2)
        cacs::fail(ErrorKind::Usage, "expected range as LO:HI, got: " + s);
    return r;
}

struct PhantomArgs {
    int count = 8;
    uint64_t seed = 7;
    std::string out;
    std::string dims = "64x64x24";
    std::string spacing = "1,1,3";
    std::string lesions = "0:4";
    std::string distractors = "0:2";
    std::string lesion_radius = "1:4";
    std::string peak_hu = "150:800";
    double noise = 5.0;
    bool no_truncate = false;
};

cacs::PhantomSpec spec_from_args(const PhantomArgs& a) {
    cacs::PhantomSpec spec;
    spec.seed = a.seed;
    spec.dims = parse_dims(a.dims);
    spec.spacing_mm = parse_triple(a.spacing);
    spec.lesion_count = parse_range_i(a.lesions);
    spec.distractor_count = parse_range_i(a.distractors);
    spec.lesion_radius_mm = parse_range_d(a.lesion_radius);
    spec.lesion_peak_hu = parse_range_d(a.peak_hu);
    spec.noise_sigma_hu = a.noise;
    spec.truncate_noise = !a.no_truncate;
    for (int i = 0; i < 3; ++i)
        spec.heart_center_mm[i] = spec.dims[i] * spec.spacing_mm[i] * 0.5;
    double ex = spec.dims[0] * spec.spacing_mm[0];
    double ey = spec.dims[1] * spec.spacing_mm[1];
    double ez = spec.dims[2] * spec.spacing_mm[2];
    spec.heart_radii_mm = {0.27 * ex, 0.24 * ey, 0.16 * ez};
    spec.validate();
    return spec;
}

int run_phantom(const PhantomArgs& args) {
    if (args.count < 1) cacs::fail(ErrorKind::Usage, "--count must be at least 1");
    if (args.out.empty()) cacs::fail(ErrorKind::Usage, "--out directory is required");
    auto t0 = std::chrono::steady_clock::now();
    cacs::PhantomSpec spec = spec_from_args(args);
    auto manifest = cacs::generate_cohort(spec, args.count, args.out);

    cacs::RunManifest run;
    run.command = "phantom";
    run.config = spec.to_json();
    run.config["count"] = args.count;
    for (const auto& e : manifest.entries) run.add_output(manifest.resolve(e));
    run.add_output(args.out + "/manifest.json");
    run.wall_seconds = elapsed_seconds(t0);
    run.write(args.out + "/manifest.run.json");

    auto counts = cacs::split_counts(args.count);
    std::printf("wrote %d phantoms to %s (split %d/%d/%d)\n", args.count, args.out.c_str(),
                counts[0], counts[1], counts[2]);
    return 0;
}

struct ResampleArgs {
    std::string input;
    std::string out;
    double thickness = 3.0;
    double increment = 1.5;
};

int run_resample(const ResampleArgs& args) {
    auto t0 = std::chrono::steady_clock::now();
    cacs::CtVolume vol = cacs::load_volume(args.input);
    cacs::CtVolume out = cacs::resample_z(vol, args.thickness, args.increment);
    cacs::save_volume(out, args.out);

    cacs::RunManifest run;
    run.command = "resample";
    run.config = {{"thickness_mm", args.thickness}, {"increment_mm", args.increment}};
    run.add_input(args.input);
    run.add_output(args.out);
    run.wall_seconds = elapsed_seconds(t0);
    run.write(args.out + ".run.json");
    std::printf("resampled %s: %d slices at %.2f mm -> %d slabs (%.2f mm thick, %.2f mm apart)\n",
                vol.subject_id().c_str(), vol.nz(), vol.sz(), out.nz(),
                out.effective_thickness_mm(), out.sz());
    return 0;
}

struct ScoreArgs {
    std::string input;
    std::string cohort;
    std::string split = "all";
    std::string box = "true";
    std::string locator;
    std::string out;
    std::string per_slice;
    bool as_json = false;
    bool phantom_floor = false;
    int min_slices = 0;  // 0: derive from phantom_floor
};

int effective_min_slices(bool phantom_floor, int min_slices) {
    if (min_slices > 0) return min_slices;
    return phantom_floor ? cacs::kPhantomMinSlices : cacs::kClinicalMinSlices;
}

int run_score(const ScoreArgs& args) {
    if (args.out.empty()) cacs::fail(ErrorKind::Usage, "--out is required");
    if (args.input.empty() == args.cohort.empty())
        cacs::fail(ErrorKind::Usage, "exactly one of --in or --cohort is required");
    auto t0 = std::chrono::steady_clock::now();

    std::optional<cacs::Locator> locator;
    if (args.box == "locator") {
        if (args.locator.empty())
            cacs::fail(ErrorKind::Usage, "--box locator requires --locator FILE");
        locator = cacs::load_locator(args.locator);
    } else if (args.box != "true" && args.box != "full") {
        cacs::fail(ErrorKind::Usage, "--box must be one of: true, locator, full");
    }

    const int min_slices = effective_min_slices(args.phantom_floor, args.min_slices);
    cacs::RunManifest run;
    run.command = "score";
    run.config = {{"box", args.box}, {"min_slices", min_slices}, {"split", args.split}};
    json rejected = json::array();

    struct Item {
        std::string path;
        std::optional<cacs::BoundingBox> box;
    };
    std::vector<Item> items;
    if (!args.input.empty()) {
        if (args.box == "true")
            cacs::fail(ErrorKind::Usage, "--box true needs a cohort manifest with heart boxes");
        items.push_back({args.input, std::nullopt});
    } else {
        auto manifest = cacs::load_manifest(args.cohort);
        run.add_input(args.cohort);
        for (const auto& e : manifest.entries) {
            if (args.split != "all" && e.split != args.split) continue;
            Item item{manifest.resolve(e), std::nullopt};
            if (args.box == "true") item.box = e.heart_box;
            items.push_back(std::move(item));
        }
    }

    std::vector<cacs::ScoreReport> reports;
    for (const auto& item : items) {
        cacs::CtVolume vol = cacs::load_volume(item.path);
        auto check = cacs::validate_for_scoring(vol, min_slices);
        if (!check.accepted) {
            std::fprintf(stderr, "excluded %s: %s\n", vol.subject_id().c_str(),
                         check.reason.c_str());
            rejected.push_back(json{{"subject_id", vol.subject_id()}, {"reason", check.reason}});
            continue;
        }
        std::optional<cacs::BoundingBox> box = item.box;
        if (locator) box = cacs::locate_heart(vol, *locator);
        reports.push_back(cacs::score_volume(vol, box));
    }

    if (args.as_json)
        cacs::write_score_json(args.out, reports);
    else
        cacs::write_score_csv(args.out, reports);
    if (!args.per_slice.empty()) cacs::write_per_slice_sidecar(args.per_slice, reports);

    run.config["rejected"] = rejected;
    run.add_output(args.out);
    run.wall_seconds = elapsed_seconds(t0);
    run.write(args.out + ".run.json");
    std::printf("scored %zu volumes (%zu excluded) -> %s\n", reports.size(), rejected.size(),
                args.out.c_str());
    return 0;
}

struct TrainLocatorArgs {
    std::string cohort;
    std::string out;
    int epochs = 12;
    int input_size = 32;
    uint64_t seed = 2;
    int max_subjects = 80;
};

int run_train_locator(const TrainLocatorArgs& args) {
    if (args.cohort.empty() || args.out.empty())
        cacs::fail(ErrorKind::Usage, "--cohort and --out are required");
    auto t0 = std::chrono::steady_clock::now();
    auto manifest = cacs::load_manifest(args.cohort);
    cacs::LocatorConfig cfg;
    cfg.epochs = args.epochs;
    cfg.input_size = args.input_size;
    cfg.seed = args.seed;
    cfg.max_train_subjects = args.max_subjects;
    cacs::Locator locator = cacs::train_locator(manifest, cfg);
    cacs::save_locator(locator, args.out);

    cacs::RunManifest run;
    run.command = "train-locator";
    run.config = {{"epochs", cfg.epochs},
                  {"input_size", cfg.input_size},
                  {"seed", cfg.seed},
                  {"max_subjects", cfg.max_train_subjects}};
    run.add_input(args.cohort);
    run.add_output(args.out);
    run.wall_seconds = elapsed_seconds(t0);
    run.write(args.out + ".run.json");
    std::printf("locator trained -> %s (%.1f s)\n", args.out.c_str(), run.wall_seconds);
    return 0;
}

struct TrainArgs {
    std::string cohort;
    std::string experiment = "i";
    std::string target = "agatston";
    std::string out;
    std::string log;
    int epochs = 50;
    int batch_size = 100;
    int input_size = 64;
    uint64_t seed = 1;
};

int run_train(const TrainArgs& args) {
    if (args.cohort.empty() || args.out.empty())
        cacs::fail(ErrorKind::Usage, "--cohort and --out are required");
    if (args.target != "agatston" && args.target != "volume")
        cacs::fail(ErrorKind::Usage, "--target must be agatston or volume");
    auto t0 = std::chrono::steady_clock::now();

    auto manifest = cacs::load_manifest(args.cohort);
    auto variant = cacs::ExperimentVariant::from_id(
        args.experiment, args.target == "volume" ? cacs::ExperimentVariant::Target::volume
                                                 : cacs::ExperimentVariant::Target::agatston);
    cacs::TrainConfig cfg;
    cfg.epochs = args.epochs;
    cfg.batch_size = args.batch_size;
    cfg.input_size = args.input_size;
    cfg.seed = args.seed;

    auto outcome = cacs::train_regressor(manifest, variant, cfg, args.out, args.log);

    cacs::RunManifest run;
    run.command = "train";
    run.config = {{"experiment", args.experiment}, {"target", args.target},
                  {"epochs", cfg.epochs},          {"batch_size", cfg.batch_size},
                  {"input_size", cfg.input_size},  {"seed", cfg.seed}};
    run.add_input(args.cohort);
    run.add_output(args.out);
    run.wall_seconds = elapsed_seconds(t0);
    run.write(args.out + ".run.json");

    std::printf("experiment %s (%s): best epoch %d, validation MAE %s (%.1f s)\n",
                args.experiment.c_str(), args.target.c_str(), outcome.best_epoch,
                cacs::format_double(outcome.best_val_mae).c_str(), run.wall_seconds);
    return 0;
}

struct PredictArgs {
    std::string input;
    std::string cohort;
    std::string split = "test";
    std::string model;
    std::string locator;
    std::string box = "locator";
    std::string out;
    bool as_json = false;
    bool phantom_floor = false;
    int min_slices = 0;
};

int run_predict(const PredictArgs& args) {
    if (args.model.empty() || args.out.empty())
        cacs::fail(ErrorKind::Usage, "--model and --out are required");
    if (args.input.empty() == args.cohort.empty())
        cacs::fail(ErrorKind::Usage, "exactly one of --in or --cohort is required");
    auto t0 = std::chrono::steady_clock::now();

    cacs::RegressorModel model = cacs::load_regressor(args.model);
    std::optional<cacs::Locator> locator;
    if (args.box == "locator") {
        if (args.locator.empty())
            cacs::fail(ErrorKind::Usage, "--box locator requires --locator FILE");
        locator = cacs::load_locator(args.locator);
    } else if (args.box != "true") {
        cacs::fail(ErrorKind::Usage, "--box must be true or locator");
    }

    struct Item {
        std::string path;
        std::optional<cacs::BoundingBox> box;
    };
    std::vector<Item> items;
    if (!args.input.empty()) {
        if (args.box == "true")
            cacs::fail(ErrorKind::Usage, "--box true needs a cohort manifest with heart boxes");
        items.push_back({args.input, std::nullopt});
    } else {
        auto manifest = cacs::load_manifest(args.cohort);
        for (const auto& e : manifest.entries) {
            if (args.split != "all" && e.split != args.split) continue;
            Item item{manifest.resolve(e), std::nullopt};
            if (args.box == "true") item.box = e.heart_box;
            items.push_back(std::move(item));
        }
    }

    const int min_slices = effective_min_slices(args.phantom_floor, args.min_slices);
    std::vector<cacs::ScoreReport> reports;
    json rejected = json::array();
    for (const auto& item : items) {
        cacs::CtVolume vol = cacs::load_volume(item.path);
        auto check = cacs::validate_for_scoring(vol, min_slices);
        if (!check.accepted) {
            std::fprintf(stderr, "excluded %s: %s\n", vol.subject_id().c_str(),
                         check.reason.c_str());
            rejected.push_back(json{{"subject_id", vol.subject_id()}, {"reason", check.reason}});
            continue;
        }
        double wall = 0.0;
        auto report = cacs::predict_subject(vol, model, item.box,
                                            locator ? &*locator : nullptr, &wall);
        std::printf("%s: %.3f s\n", report.subject_id.c_str(), wall);
        reports.push_back(std::move(report));
    }

    if (args.as_json)
        cacs::write_score_json(args.out, reports);
    else
        cacs::write_score_csv(args.out, reports);

    cacs::RunManifest run;
    run.command = "predict";
    run.config = {{"box", args.box}, {"split", args.split}, {"min_slices", min_slices},
                  {"rejected", rejected}};
    run.add_input(args.model);
    if (!args.cohort.empty()) run.add_input(args.cohort);
    run.add_output(args.out);
    run.wall_seconds = elapsed_seconds(t0);
    run.write(args.out + ".run.json");
    return 0;
}

struct EvalArgs {
    std::string ref;
    std::string pred;
    std::string variant = "i";
    std::string target = "agatston";
    std::string out;
    bool append = false;
    bool as_json = false;
};

int run_eval(const EvalArgs& args) {
    if (args.ref.empty() || args.pred.empty() || args.out.empty())
        cacs::fail(ErrorKind::Usage, "--ref, --pred and --out are required");
    auto t0 = std::chrono::steady_clock::now();

    auto ref_rows = cacs::read_score_csv(args.ref);
    auto pred_rows = cacs::read_score_csv(args.pred);

    std::vector<double> ref_scores, pred_scores;
    for (const auto& r : ref_rows) {
        const cacs::ScoreReport* match = nullptr;
        for (const auto& p : pred_rows)
            if (p.subject_id == r.subject_id) {
                match = &p;
                break;
            }
        if (!match) continue;
        if (args.target == "volume") {
            ref_scores.push_back(r.volume_mm3);
            pred_scores.push_back(match->volume_mm3);
        } else {
            ref_scores.push_back(r.agatston);
            pred_scores.push_back(match->agatston);
        }
    }
    if (ref_scores.size() < 2)
        cacs::fail(ErrorKind::Validation,
                   "evaluation needs at least 2 joined subjects, got " +
                       std::to_string(ref_scores.size()));

    auto stats = cacs::compare_score_vectors(ref_scores, pred_scores);
    cacs::EvalRow row{args.variant, args.target, stats};

    bool exists = std::filesystem::exists(args.out);
    if (args.append && exists) {
        std::string line = cacs::eval_row_csv(row);
        std::ofstream out(args.out, std::ios::app);
        if (!out) cacs::fail(ErrorKind::Io, "cannot append to " + args.out);
        out << line;
    } else {
        cacs::write_eval_table(args.out, {row});
    }

    if (args.as_json) {
        json j = {{"variant", args.variant}, {"target_kind", args.target},
                  {"icc", stats.icc},        {"ci_lo", stats.ci_lo},
                  {"ci_hi", stats.ci_hi},    {"kappa", stats.kappa_linear},
                  {"accuracy", stats.accuracy}, {"mae", stats.mae},
                  {"n", stats.n}};
        std::printf("%s\n", j.dump(2).c_str());
    } else {
        std::printf("variant %s (%s): icc %.4f [%.4f, %.4f], kappa %.4f, accuracy %.4f, "
                    "mae %.4f (n=%d)\n",
                    args.variant.c_str(), args.target.c_str(), stats.icc, stats.ci_lo,
                    stats.ci_hi, stats.kappa_linear, stats.accuracy, stats.mae, stats.n);
    }

    cacs::RunManifest run;
    run.command = "eval";
    run.config = {{"variant", args.variant}, {"target", args.target}, {"append", args.append}};
    run.add_input(args.ref);
    run.add_input(args.pred);
    run.add_output(args.out);
    run.wall_seconds = elapsed_seconds(t0);
    run.write(args.out + ".run.json");
    return 0;
}

struct SaliencyArgs {
    std::string input;
    std::string model;
    std::string locator;
    std::string cohort;
    std::string out;
    int slice = -1;  // -1: slice with the largest predicted contribution
};

int run_saliency(const SaliencyArgs& args) {
    if (args.input.empty() || args.model.empty() || args.out.empty())
        cacs::fail(ErrorKind::Usage, "--in, --model and --out are required");
    auto t0 = std::chrono::steady_clock::now();

    cacs::RegressorModel model = cacs::load_regressor(args.model);
    cacs::CtVolume vol = cacs::load_volume(args.input);

    std::optional<cacs::BoundingBox> box;
    std::optional<cacs::Locator> locator;
    if (!args.locator.empty()) {
        locator = cacs::load_locator(args.locator);
    } else if (!args.cohort.empty()) {
        auto manifest = cacs::load_manifest(args.cohort);
        for (const auto& e : manifest.entries)
            if (e.subject_id == vol.subject_id()) box = e.heart_box;
        if (!box)
            cacs::fail(ErrorKind::Usage,
                       "subject " + vol.subject_id() + " not found in " + args.cohort);
    } else {
        cacs::fail(ErrorKind::Usage, "--locator or --cohort (for the true box) is required");
    }

    double wall = 0.0;
    auto report =
        cacs::predict_subject(vol, model, box, locator ? &*locator : nullptr, &wall);
    const auto& per_slice = model.variant.target == cacs::ExperimentVariant::Target::agatston
                                ? report.per_slice_agatston
                                : report.per_slice_volume;
    int slice_idx = args.slice;
    if (slice_idx < 0) {
        slice_idx = 0;
        for (size_t i = 1; i < per_slice.size(); ++i)
            if (per_slice[i] > per_slice[static_cast<size_t>(slice_idx)])
                slice_idx = static_cast<int>(i);
    }
    if (slice_idx >= static_cast<int>(per_slice.size()))
        cacs::fail(ErrorKind::Usage, "--slice index out of box range");

    cacs::BoundingBox heart_box = box ? *box : cacs::locate_heart(vol, *locator);
    auto slices = cacs::prepare_slices(vol, heart_box, model.input_size, nullptr);
    const auto& prepared = slices[static_cast<size_t>(slice_idx)];
    cacs::Slice2d map = cacs::saliency_map(model, prepared);
    cacs::write_saliency_overlay_png(prepared.image, map, args.out);

    json sidecar = {{"method", "deconvnet back-projection from conv stage 3 "
                               "(argmax unpool, ReLU gate, transposed kernels)"},
                    {"subject_id", vol.subject_id()},
                    {"slice_in_box", slice_idx},
                    {"predicted_slice_score", per_slice[static_cast<size_t>(slice_idx)]},
                    {"heart_box", {{"lo", heart_box.lo}, {"hi", heart_box.hi}}}};
    cacs::write_text_atomic(args.out + ".json", sidecar.dump(2) + "\n");

    cacs::RunManifest run;
    run.command = "saliency";
    run.config = {{"slice", slice_idx}};
    run.add_input(args.input);
    run.add_input(args.model);
    run.add_output(args.out);
    run.wall_seconds = elapsed_seconds(t0);
    run.write(args.out + ".run.json");
    std::printf("saliency overlay for %s slice %d -> %s\n", vol.subject_id().c_str(),
                slice_idx, args.out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"coronary calcium scoring: phantoms, reference scorer, ConvNet regression"};
    app.require_subcommand(1);

    PhantomArgs phantom_args;
    auto* cmd_phantom = app.add_subcommand("phantom", "generate a synthetic phantom cohort");
    cmd_phantom->add_option("--count", phantom_args.count, "number of subjects");
    cmd_phantom->add_option("--seed", phantom_args.seed, "cohort seed");
    cmd_phantom->add_option("--out", phantom_args.out, "output directory")->required();
    cmd_phantom->add_option("--dims", phantom_args.dims, "volume dims NXxNYxNZ");
    cmd_phantom->add_option("--spacing", phantom_args.spacing, "voxel spacing mm SX,SY,SZ");
    cmd_phantom->add_option("--lesions", phantom_args.lesions, "lesion count range LO:HI");
    cmd_phantom->add_option("--distractors", phantom_args.distractors,
                            "distractor count range LO:HI");
    cmd_phantom->add_option("--lesion-radius", phantom_args.lesion_radius,
                            "lesion radius range mm LO:HI");
    cmd_phantom->add_option("--peak-hu", phantom_args.peak_hu, "lesion peak HU range LO:HI");
    cmd_phantom->add_option("--noise", phantom_args.noise, "noise sigma HU");
    cmd_phantom->add_flag("--no-truncate-noise", phantom_args.no_truncate,
                          "realism mode: do not truncate noise below 130 HU");

    ResampleArgs resample_args;
    auto* cmd_resample =
        app.add_subcommand("resample", "slab-average a volume onto the scoring z-grid");
    cmd_resample->add_option("--in", resample_args.input, "input CTVOL")->required();
    cmd_resample->add_option("--out", resample_args.out, "output CTVOL")->required();
    cmd_resample->add_option("--thickness", resample_args.thickness, "slab thickness mm");
    cmd_resample->add_option("--increment", resample_args.increment, "slab increment mm");

    ScoreArgs score_args;
    auto* cmd_score = app.add_subcommand("score", "reference Agatston/volume scoring");
    cmd_score->add_option("--in", score_args.input, "single CTVOL file");
    cmd_score->add_option("--cohort", score_args.cohort, "cohort manifest JSON");
    cmd_score->add_option("--split", score_args.split, "cohort split (train/validation/test/all)");
    cmd_score->add_option("--box", score_args.box, "scoring region: true, locator, full");
    cmd_score->add_option("--locator", score_args.locator, "locator checkpoint");
    cmd_score->add_option("--out", score_args.out, "output CSV (or JSON with --json)")->required();
    cmd_score->add_option("--per-slice", score_args.per_slice, "per-slice JSON sidecar path");
    cmd_score->add_flag("--json", score_args.as_json, "write JSON instead of CSV");
    cmd_score->add_flag("--phantom-floor", score_args.phantom_floor,
                        "lower the slice-count floor to 20 for desk-scale phantoms");
    cmd_score->add_option("--min-slices", score_args.min_slices, "explicit slice-count floor");

    TrainLocatorArgs trainloc_args;
    auto* cmd_trainloc = app.add_subcommand("train-locator", "train the per-axis heart locator");
    cmd_trainloc->add_option("--cohort", trainloc_args.cohort, "cohort manifest")->required();
    cmd_trainloc->add_option("--out", trainloc_args.out, "locator output file")->required();
    cmd_trainloc->add_option("--epochs", trainloc_args.epochs, "training epochs");
    cmd_trainloc->add_option("--input-size", trainloc_args.input_size, "classifier input size");
    cmd_trainloc->add_option("--seed", trainloc_args.seed, "training seed");
    cmd_trainloc->add_option("--max-subjects", trainloc_args.max_subjects,
                             "cap on training subjects (0 = all)");

    TrainArgs train_args;
    auto* cmd_train = app.add_subcommand("train", "train the regression ConvNet");
    cmd_train->add_option("--cohort", train_args.cohort, "cohort manifest")->required();
    cmd_train->add_option("--experiment", train_args.experiment, "variant: i, ii, iii, iv");
    cmd_train->add_option("--target", train_args.target, "agatston or volume");
    cmd_train->add_option("--epochs", train_args.epochs, "training epochs");
    cmd_train->add_option("--batch-size", train_args.batch_size, "mini-batch size");
    cmd_train->add_option("--input-size", train_args.input_size, "network input size");
    cmd_train->add_option("--seed", train_args.seed, "training seed");
    cmd_train->add_option("--out", train_args.out, "checkpoint output path")->required();
    cmd_train->add_option("--log", train_args.log, "per-epoch training log CSV");

    PredictArgs predict_args;
    auto* cmd_predict = app.add_subcommand("predict", "predict subject scores with a checkpoint");
    cmd_predict->add_option("--in", predict_args.input, "single CTVOL file");
    cmd_predict->add_option("--cohort", predict_args.cohort, "cohort manifest");
    cmd_predict->add_option("--split", predict_args.split, "cohort split to predict");
    cmd_predict->add_option("--model", predict_args.model, "regressor checkpoint")->required();
    cmd_predict->add_option("--locator", predict_args.locator, "locator checkpoint");
    cmd_predict->add_option("--box", predict_args.box, "bounding box source: locator or true");
    cmd_predict->add_option("--out", predict_args.out, "output CSV")->required();
    cmd_predict->add_flag("--json", predict_args.as_json, "write JSON instead of CSV");
    cmd_predict->add_flag("--phantom-floor", predict_args.phantom_floor,
                          "lower the slice-count floor to 20");
    cmd_predict->add_option("--min-slices", predict_args.min_slices, "explicit slice floor");

    EvalArgs eval_args;
    auto* cmd_eval = app.add_subcommand("eval", "agreement stats between two score CSVs");
    cmd_eval->add_option("--ref", eval_args.ref, "reference score CSV")->required();
    cmd_eval->add_option("--pred", eval_args.pred, "predicted score CSV")->required();
    cmd_eval->add_option("--variant", eval_args.variant, "experiment label for the row");
    cmd_eval->add_option("--target", eval_args.target, "agatston or volume");
    cmd_eval->add_option("--out", eval_args.out, "evaluation table CSV")->required();
    cmd_eval->add_flag("--append", eval_args.append, "append a row to an existing table");
    cmd_eval->add_flag("--json", eval_args.as_json, "print stats as JSON");

    SaliencyArgs saliency_args;
    auto* cmd_saliency = app.add_subcommand("saliency", "write a saliency heatmap overlay PNG");
    cmd_saliency->add_option("--in", saliency_args.input, "CTVOL file")->required();
    cmd_saliency->add_option("--model", saliency_args.model, "regressor checkpoint")->required();
    cmd_saliency->add_option("--locator", saliency_args.locator, "locator checkpoint");
    cmd_saliency->add_option("--cohort", saliency_args.cohort,
                             "manifest with true boxes (alternative to --locator)");
    cmd_saliency->add_option("--slice", saliency_args.slice,
                             "slice index within the box (default: highest predicted)");
    cmd_saliency->add_option("--out", saliency_args.out, "output PNG path")->required();

    try {
        app.parse(argc, argv);
        if (cmd_phantom->parsed()) return run_phantom(phantom_args);
        if (cmd_resample->parsed()) return run_resample(resample_args);
        if (cmd_score->parsed()) return run_score(score_args);
        if (cmd_trainloc->parsed()) return run_train_locator(trainloc_args);
        if (cmd_train->parsed()) return run_train(train_args);
        if (cmd_predict->parsed()) return run_predict(predict_args);
        if (cmd_eval->parsed()) return run_eval(eval_args);
        if (cmd_saliency->parsed()) return run_saliency(saliency_args);
        return 2;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.kind() == ErrorKind::Compute ? 1 : 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
