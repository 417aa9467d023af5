#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cacs/ct_volume.hpp"
#include "cacs/phantom.hpp"
#include "cacs/refscore.hpp"
#include "cacs/tensornet.hpp"

namespace cacs {

// One of the paper-style experiment combinations:
//   i: separate kernels, raw targets      ii: shared kernels, raw targets
// iii: separate kernels, log targets      iv: shared kernels, log targets
struct ExperimentVariant {
    enum class Target { agatston, volume };

    bool shared_kernels = false;
    bool log_targets = false;
    Target target = Target::agatston;

    static ExperimentVariant from_id(const std::string& id, Target target);
    std::string id() const;
    const char* target_name() const;
};

struct TrainConfig {
    int epochs = 50;
    int batch_size = 100;
    int input_size = 64;           // 256 for paper-scale inputs
    uint64_t seed = 1;
    std::vector<int> conv_channels;  // empty: variant default widths
    AdamConfig adam;                 // lr 0.01, beta1 0.9, beta2 0.999

    void validate() const;
};

// y >= 0 <-> t = ln(y + 1); the inverse clamps at zero.
double log_transform(double y);
double inverse_log_transform(double t);

// Fixed affine HU normalization from [-1024, 3071] onto [0, 1].
double normalize_hu(double hu);

struct PreparedSlice {
    Slice2d image;                   // normalized, padded to input_size^2
    std::array<double, 3> aux{};     // (sx, sy, sz) in mm, scaled by 1/10
    double target = 0.0;             // transformed target (train only)
    double target_raw = 0.0;
    int z = 0;                       // slice index within the box
    std::string subject_id;
};

// Crop to the cardiac box, pad each axial slice to the network input size,
// normalize, attach voxel dimensions. With a variant given, reference
// targets are computed per slice and transformed per the variant.
std::vector<PreparedSlice> prepare_slices(const CtVolume& vol, const BoundingBox& box,
                                          int input_size,
                                          const ExperimentVariant* variant);

// --- heart localization -------------------------------------------------

struct LocatorConfig {
    int input_size = 32;
    int epochs = 12;
    int batch_size = 100;
    uint64_t seed = 2;
    int max_train_subjects = 0;  // 0: use the whole train split
};

// Three per-axis slice classifiers; axis order: axial (z), coronal (y),
// sagittal (x).
struct Locator {
    std::vector<ConvNet> nets;
    int input_size = 32;
};

// Area-average resize to a square classifier input, then HU normalization.
Slice2d downsample_to(const Slice2d& slice, int target);

Locator train_locator(const CohortManifest& manifest, const LocatorConfig& config);

void save_locator(const Locator& locator, const std::string& path);
Locator load_locator(const std::string& path);

// Per axis, classify every slice; the axis extent is the longest consecutive
// run of probability > 0.5, dilated by one slice on each side.
BoundingBox locate_heart(const CtVolume& vol, Locator& locator);

// Slice probabilities for one axis (0 = axial/z, 1 = coronal/y,
// 2 = sagittal/x); exposed for evaluation.
std::vector<double> axis_slice_probabilities(const CtVolume& vol, Locator& locator, int axis);

// --- regression training -------------------------------------------------

struct EpochRecord {
    int epoch = 0;
    double train_mae = 0.0;
    double val_mae = 0.0;
    double wall_seconds = 0.0;
};

struct TrainOutcome {
    int best_epoch = 0;
    double best_val_mae = 0.0;
    std::vector<EpochRecord> history;
};

// Trains the Fig.-1 style regressor with L1 loss on shuffled slices and
// returns (and checkpoints) the epoch with minimal validation MAE, earlier
// epoch on ties. Deterministic in config.seed.
TrainOutcome train_regressor(const CohortManifest& manifest, const ExperimentVariant& variant,
                             const TrainConfig& config, const std::string& checkpoint_path,
                             const std::string& log_csv_path = {});

// --- prediction -----------------------------------------------------------

struct RegressorModel {
    ConvNet net;
    ExperimentVariant variant;
    int input_size = 64;
    nlohmann::json meta;
};

RegressorModel load_regressor(const std::string& checkpoint_path);

// Per-slice predictions are inverse-transformed when the variant used log
// targets, clamped at zero, and summed into the subject score.
ScoreReport predict_subject(const CtVolume& vol, RegressorModel& model,
                            const std::optional<BoundingBox>& box, Locator* locator,
                            double* wall_seconds = nullptr);

// --- saliency --------------------------------------------------------------

// Deconvnet-style back-projection from the third conv stage: the output
// gradient is taken at the stage-3 feature map, then repeatedly argmax-
// unpooled, ReLU-gated, and pushed through the transposed learned kernels
// down to the input plane. Result is |.|-reduced and normalized to [0, 1].
Slice2d saliency_map(RegressorModel& model, const PreparedSlice& slice);

void write_saliency_overlay_png(const Slice2d& base_normalized, const Slice2d& saliency,
                                const std::string& path);

}  // namespace cacs
