#include "cacs/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "cacs/error.hpp"
#include "cacs/png_io.hpp"
#include "cacs/report_io.hpp"
#include "cacs/rng.hpp"

namespace cacs {

using nlohmann::json;

namespace {

double elapsed_seconds(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// --- variants and transforms ---------------------------------------------

ExperimentVariant ExperimentVariant::from_id(const std::string& id, Target target) {
    ExperimentVariant v;
    v.target = target;
    if (id == "i") {
        v.shared_kernels = false;
        v.log_targets = false;
    } else if (id == "ii") {
        v.shared_kernels = true;
        v.log_targets = false;
    } else if (id == "iii") {
        v.shared_kernels = false;
        v.log_targets = true;
    } else if (id == "iv") {
        v.shared_kernels = true;
        v.log_targets = true;
    } else {
        fail(ErrorKind::Usage, "unknown experiment id: " + id + " (expected i, ii, iii, iv)");
    }
    return v;
}

std::string ExperimentVariant::id() const {
    if (!shared_kernels && !log_targets) return "i";
    if (shared_kernels && !log_targets) return "ii";
    if (!shared_kernels && log_targets) return "iii";
    return "iv";
}

const char* ExperimentVariant::target_name() const {
    return target == Target::agatston ? "agatston" : "volume";
}

void TrainConfig::validate() const {
    if (epochs < 1) fail(ErrorKind::Usage, "epochs must be >= 1");
    if (batch_size < 2) fail(ErrorKind::Usage, "batch size must be >= 2 (batch norm)");
    if (input_size < 64) fail(ErrorKind::Usage, "input size must be >= 64");
}

double log_transform(double y) {
    if (y < 0.0) fail(ErrorKind::Validation, "log transform needs a nonnegative score");
    return std::log1p(y);
}

double inverse_log_transform(double t) { return std::max(0.0, std::expm1(t)); }

double normalize_hu(double hu) {
    double t = (hu - kHuMin) / (kHuMax - kHuMin);
    return std::clamp(t, 0.0, 1.0);
}

// --- slice preparation -----------------------------------------------------

std::vector<PreparedSlice> prepare_slices(const CtVolume& vol, const BoundingBox& box,
                                          int input_size, const ExperimentVariant* variant) {
    CtVolume cropped = crop(vol, box);

    std::vector<double> per_slice_target;
    if (variant) {
        ScoreReport ref = score_volume(cropped);
        per_slice_target = variant->target == ExperimentVariant::Target::agatston
                               ? ref.per_slice_agatston
                               : ref.per_slice_volume;
    }

    std::vector<PreparedSlice> out;
    out.reserve(static_cast<size_t>(cropped.nz()));
    const std::array<double, 3> aux = {vol.sx() / 10.0, vol.sy() / 10.0, vol.sz() / 10.0};
    for (int z = 0; z < cropped.nz(); ++z) {
        PreparedSlice ps;
        ps.subject_id = vol.subject_id();
        ps.z = z;
        ps.aux = aux;
        Slice2d padded = pad_slice_to(extract_axial_slice(cropped, z), input_size, input_size);
        for (auto& v : padded.v) v = static_cast<float>(normalize_hu(v));
        ps.image = std::move(padded);
        if (variant) {
            ps.target_raw = per_slice_target[static_cast<size_t>(z)];
            ps.target = variant->log_targets ? log_transform(ps.target_raw) : ps.target_raw;
        }
        out.push_back(std::move(ps));
    }
    return out;
}

// --- locator ----------------------------------------------------------------

Slice2d downsample_to(const Slice2d& slice, int target) {
    if (target < 1) fail(ErrorKind::Validation, "downsample target must be positive");
    auto weights_1d = [](int in_len, int out_len) {
        // Overlap of output cell [o*s, (o+1)*s) with input cell [i, i+1),
        // s = in_len / out_len.
        std::vector<std::vector<std::pair<int, double>>> w(out_len);
        const double s = static_cast<double>(in_len) / out_len;
        for (int o = 0; o < out_len; ++o) {
            double a = o * s, b = (o + 1) * s;
            int i0 = static_cast<int>(std::floor(a));
            int i1 = std::min(in_len - 1, static_cast<int>(std::ceil(b)) - 1);
            for (int i = i0; i <= i1; ++i) {
                double ov = std::min(b, static_cast<double>(i + 1)) - std::max(a, static_cast<double>(i));
                if (ov > 0.0) w[o].emplace_back(i, ov / s);
            }
        }
        return w;
    };
    auto wr = weights_1d(slice.rows, target);
    auto wc = weights_1d(slice.cols, target);

    Slice2d tmp(target, slice.cols);
    for (int r = 0; r < target; ++r)
        for (int c = 0; c < slice.cols; ++c) {
            double acc = 0.0;
            for (const auto& [i, w] : wr[r]) acc += w * slice.at(i, c);
            tmp.at(r, c) = static_cast<float>(acc);
        }
    Slice2d out(target, target);
    for (int r = 0; r < target; ++r)
        for (int c = 0; c < target; ++c) {
            double acc = 0.0;
            for (const auto& [j, w] : wc[c]) acc += w * tmp.at(r, j);
            out.at(r, c) = static_cast<float>(acc);
        }
    return out;
}

namespace {

struct AxisSliceSet {
    std::vector<Slice2d> images;  // downsampled + normalized
    std::vector<double> labels;
};

int axis_dim(const CtVolume& vol, int axis) {
    return axis == 0 ? vol.nz() : axis == 1 ? vol.ny() : vol.nx();
}

Slice2d axis_slice(const CtVolume& vol, int axis, int idx) {
    if (axis == 0) return extract_axial_slice(vol, idx);
    if (axis == 1) return extract_coronal_slice(vol, idx);
    return extract_sagittal_slice(vol, idx);
}

int box_axis(int axis) { return axis == 0 ? 2 : axis == 1 ? 1 : 0; }

Slice2d to_classifier_input(const Slice2d& slice, int input_size) {
    Slice2d small = downsample_to(slice, input_size);
    for (auto& v : small.v) v = static_cast<float>(normalize_hu(v));
    return small;
}

void fill_batch(Tensor& x, const std::vector<Slice2d>& images, const std::vector<size_t>& order,
                size_t begin, size_t count) {
    for (size_t b = 0; b < count; ++b) {
        const Slice2d& img = images[order[begin + b]];
        double* dst = &x.at(static_cast<int>(b), 0, 0, 0);
        for (size_t i = 0; i < img.v.size(); ++i) dst[i] = img.v[i];
    }
}

// Numerically stable binary cross entropy on logits with a positive-class
// weight (the in-box slices are the minority); writes dL/dlogit.
double bce_loss(const Tensor& logits, const std::vector<double>& labels,
                const std::vector<size_t>& order, size_t begin, double pos_weight,
                Tensor* dlogits) {
    const size_t n = logits.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    double loss = 0.0;
    if (dlogits) *dlogits = Tensor::vec(static_cast<int>(n));
    for (size_t i = 0; i < n; ++i) {
        double y = logits.v[i];
        double t = labels[order[begin + i]];
        double w = t > 0.5 ? pos_weight : 1.0;
        loss += w * (std::max(y, 0.0) - y * t + std::log1p(std::exp(-std::abs(y)))) * inv_n;
        if (dlogits) {
            double p = 1.0 / (1.0 + std::exp(-y));
            dlogits->v[i] = w * (p - t) * inv_n;
        }
    }
    return loss;
}

std::vector<const CohortEntry*> sorted_split(const CohortManifest& manifest,
                                             const std::string& split, int cap) {
    auto entries = manifest.split(split);
    std::sort(entries.begin(), entries.end(),
              [](const CohortEntry* a, const CohortEntry* b) {
                  return a->subject_id < b->subject_id;
              });
    if (cap > 0 && static_cast<int>(entries.size()) > cap)
        entries.resize(static_cast<size_t>(cap));
    return entries;
}

AxisSliceSet collect_axis_slices(const std::vector<const CohortEntry*>& entries,
                                 const CohortManifest& manifest, int axis, int input_size) {
    AxisSliceSet set;
    for (const auto* e : entries) {
        CtVolume vol = load_volume(manifest.resolve(*e));
        const int dim = axis_dim(vol, axis);
        const int ba = box_axis(axis);
        for (int idx = 0; idx < dim; ++idx) {
            set.images.push_back(to_classifier_input(axis_slice(vol, axis, idx), input_size));
            set.labels.push_back(idx >= e->heart_box.lo[ba] && idx < e->heart_box.hi[ba] ? 1.0
                                                                                         : 0.0);
        }
    }
    return set;
}

}  // namespace

Locator train_locator(const CohortManifest& manifest, const LocatorConfig& config) {
    auto train_entries = sorted_split(manifest, "train", config.max_train_subjects);
    auto val_entries = sorted_split(manifest, "validation",
                                    config.max_train_subjects > 0
                                        ? std::max(8, config.max_train_subjects / 3)
                                        : 0);
    if (train_entries.empty()) fail(ErrorKind::Validation, "locator training split is empty");
    if (val_entries.empty()) fail(ErrorKind::Validation, "locator validation split is empty");

    Locator locator;
    locator.input_size = config.input_size;
    static const char* kAxisNames[3] = {"axial", "coronal", "sagittal"};

    for (int axis = 0; axis < 3; ++axis) {
        AxisSliceSet train_set = collect_axis_slices(train_entries, manifest, axis,
                                                     config.input_size);
        AxisSliceSet val_set = collect_axis_slices(val_entries, manifest, axis,
                                                   config.input_size);

        ConvNet net(ConvNetConfig::locator(config.input_size),
                    mix_seed(config.seed, static_cast<uint64_t>(axis)));
        AdamState adam_state;
        AdamConfig adam_cfg;

        double positives = 0.0;
        for (double t : train_set.labels) positives += t;
        double negatives = static_cast<double>(train_set.labels.size()) - positives;
        if (positives == 0.0)
            fail(ErrorKind::Validation, "locator training labels contain no in-box slices");
        const double pos_weight = std::sqrt(negatives / positives);

        std::vector<size_t> order(train_set.images.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Tensor aux_empty;

        for (int epoch = 1; epoch <= config.epochs; ++epoch) {
            Rng rng(mix_seed(config.seed, 0xa11a * static_cast<uint64_t>(axis + 1) + epoch));
            rng.shuffle(order);
            for (size_t begin = 0; begin < order.size(); begin += config.batch_size) {
                size_t count = std::min(order.size() - begin,
                                        static_cast<size_t>(config.batch_size));
                if (count < 2) continue;
                Tensor x(static_cast<int>(count), 1, config.input_size, config.input_size);
                fill_batch(x, train_set.images, order, begin, count);
                Tensor logits = net.forward(x, aux_empty, true);
                Tensor dlogits;
                bce_loss(logits, train_set.labels, order, begin, pos_weight, &dlogits);
                net.params().zero_grads();
                net.backward(dlogits);
                adam_update(net.params(), adam_state, adam_cfg);
            }
        }

        // Held-out slice accuracy gate.
        size_t hits = 0;
        std::vector<size_t> val_order(val_set.images.size());
        for (size_t i = 0; i < val_order.size(); ++i) val_order[i] = i;
        for (size_t begin = 0; begin < val_order.size(); begin += config.batch_size) {
            size_t count = std::min(val_order.size() - begin,
                                    static_cast<size_t>(config.batch_size));
            Tensor x(static_cast<int>(count), 1, config.input_size, config.input_size);
            fill_batch(x, val_set.images, val_order, begin, count);
            Tensor logits = net.forward(x, aux_empty, false);
            for (size_t i = 0; i < count; ++i) {
                bool pred = logits.v[i] > 0.0;  // sigmoid(y) > 0.5
                bool truth = val_set.labels[begin + i] > 0.5;
                hits += pred == truth;
            }
        }
        double acc = static_cast<double>(hits) / static_cast<double>(val_set.images.size());
        if (acc < 0.6)
            fail(ErrorKind::Compute, std::string("locator training diverged on the ") +
                                         kAxisNames[axis] + " axis (validation accuracy " +
                                         format_double(acc) + " < 0.6)");
        locator.nets.push_back(std::move(net));
    }
    return locator;
}

namespace {
constexpr char kLocMagic[8] = {'C', 'A', 'C', 'S', 'L', 'O', 'C', '1'};
}

void save_locator(const Locator& locator, const std::string& path) {
    if (locator.nets.size() != 3) fail(ErrorKind::Validation, "locator needs 3 nets");
    std::string blob(kLocMagic, sizeof(kLocMagic));
    for (int axis = 0; axis < 3; ++axis) {
        json meta = {{"axis", axis}, {"input_size", locator.input_size}};
        std::string net_blob = locator.nets[static_cast<size_t>(axis)].checkpoint_blob(meta);
        uint32_t len = static_cast<uint32_t>(net_blob.size());
        char len_le[4] = {static_cast<char>(len & 0xff), static_cast<char>((len >> 8) & 0xff),
                          static_cast<char>((len >> 16) & 0xff),
                          static_cast<char>((len >> 24) & 0xff)};
        blob.append(len_le, 4);
        blob.append(net_blob);
    }
    write_text_atomic(path, blob);
}

Locator load_locator(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open locator: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kLocMagic, 8) != 0)
        fail(ErrorKind::Format, "not a CACSLOC1 locator file: " + path);
    Locator locator;
    size_t off = 8;
    for (int axis = 0; axis < 3; ++axis) {
        if (off + 4 > bytes.size()) fail(ErrorKind::Format, "truncated locator file");
        uint32_t len = static_cast<uint32_t>(static_cast<unsigned char>(bytes[off])) |
                       (static_cast<uint32_t>(static_cast<unsigned char>(bytes[off + 1])) << 8) |
                       (static_cast<uint32_t>(static_cast<unsigned char>(bytes[off + 2])) << 16) |
                       (static_cast<uint32_t>(static_cast<unsigned char>(bytes[off + 3])) << 24);
        off += 4;
        if (off + len > bytes.size()) fail(ErrorKind::Format, "truncated locator file");
        json meta;
        locator.nets.push_back(ConvNet::load_checkpoint_blob(bytes.substr(off, len), &meta));
        locator.input_size = meta.at("input_size").get<int>();
        off += len;
    }
    return locator;
}

std::vector<double> axis_slice_probabilities(const CtVolume& vol, Locator& locator, int axis) {
    const int dim = axis_dim(vol, axis);
    const int S = locator.input_size;
    Tensor x(dim, 1, S, S);
    for (int idx = 0; idx < dim; ++idx) {
        Slice2d img = to_classifier_input(axis_slice(vol, axis, idx), S);
        double* dst = &x.at(idx, 0, 0, 0);
        for (size_t i = 0; i < img.v.size(); ++i) dst[i] = img.v[i];
    }
    Tensor aux_empty;
    Tensor logits = locator.nets[static_cast<size_t>(axis)].forward(x, aux_empty, false);
    std::vector<double> probs(static_cast<size_t>(dim));
    for (int i = 0; i < dim; ++i) probs[static_cast<size_t>(i)] = 1.0 / (1.0 + std::exp(-logits.v[i]));
    return probs;
}

BoundingBox locate_heart(const CtVolume& vol, Locator& locator) {
    if (locator.nets.size() != 3) fail(ErrorKind::Validation, "locator has no trained nets");
    static const char* kAxisNames[3] = {"axial", "coronal", "sagittal"};
    BoundingBox box;
    for (int axis = 0; axis < 3; ++axis) {
        auto probs = axis_slice_probabilities(vol, locator, axis);
        int best_start = -1, best_len = 0;
        int cur_start = -1, cur_len = 0;
        for (size_t i = 0; i <= probs.size(); ++i) {
            if (i < probs.size() && probs[i] > 0.5) {
                if (cur_len == 0) cur_start = static_cast<int>(i);
                ++cur_len;
            } else {
                if (cur_len > best_len) {
                    best_len = cur_len;
                    best_start = cur_start;
                }
                cur_len = 0;
            }
        }
        if (best_len == 0)
            fail(ErrorKind::Compute, std::string("heart localization failed: no ") +
                                         kAxisNames[axis] + " slice above threshold");
        const int dim = static_cast<int>(probs.size());
        const int ba = box_axis(axis);
        box.lo[ba] = std::max(0, best_start - 1);
        box.hi[ba] = std::min(dim, best_start + best_len + 1);
    }
    return box;
}

// --- regressor training ------------------------------------------------------

namespace {

struct SliceDataset {
    std::vector<Slice2d> images;
    std::vector<std::array<double, 3>> aux;
    std::vector<double> targets;
};

SliceDataset collect_slices(const std::vector<const CohortEntry*>& entries,
                            const CohortManifest& manifest, int input_size,
                            const ExperimentVariant& variant) {
    SliceDataset set;
    for (const auto* e : entries) {
        CtVolume vol = load_volume(manifest.resolve(*e));
        for (auto& ps : prepare_slices(vol, e->heart_box, input_size, &variant)) {
            set.images.push_back(std::move(ps.image));
            set.aux.push_back(ps.aux);
            set.targets.push_back(ps.target);
        }
    }
    return set;
}

void fill_regression_batch(Tensor& x, Tensor& aux, std::vector<double>& targets,
                           const SliceDataset& set, const std::vector<size_t>& order,
                           size_t begin, size_t count) {
    for (size_t b = 0; b < count; ++b) {
        size_t i = order[begin + b];
        const Slice2d& img = set.images[i];
        double* dst = &x.at(static_cast<int>(b), 0, 0, 0);
        for (size_t p = 0; p < img.v.size(); ++p) dst[p] = img.v[p];
        for (int a = 0; a < 3; ++a) aux.at(static_cast<int>(b), a, 0, 0) = set.aux[i][a];
        targets[b] = set.targets[i];
    }
}

double evaluate_mae(ConvNet& net, const SliceDataset& set, int input_size, int batch_size) {
    double abs_sum = 0.0;
    std::vector<size_t> order(set.images.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t begin = 0; begin < order.size(); begin += batch_size) {
        size_t count = std::min(order.size() - begin, static_cast<size_t>(batch_size));
        Tensor x(static_cast<int>(count), 1, input_size, input_size);
        Tensor aux(static_cast<int>(count), 3, 1, 1);
        std::vector<double> targets(count);
        fill_regression_batch(x, aux, targets, set, order, begin, count);
        Tensor pred = net.forward(x, aux, false);
        for (size_t i = 0; i < count; ++i) abs_sum += std::abs(pred.v[i] - targets[i]);
    }
    return abs_sum / static_cast<double>(set.images.size());
}

int find_param(const ParamStore& store, const std::string& name) {
    for (size_t i = 0; i < store.entries().size(); ++i)
        if (store.entries()[i].name == name) return static_cast<int>(i);
    fail(ErrorKind::Compute, "missing parameter entry: " + name);
}

}  // namespace

TrainOutcome train_regressor(const CohortManifest& manifest, const ExperimentVariant& variant,
                             const TrainConfig& config, const std::string& checkpoint_path,
                             const std::string& log_csv_path) {
    config.validate();

    ConvNetConfig net_cfg = ConvNetConfig::regressor(config.input_size, variant.shared_kernels);
    if (!config.conv_channels.empty()) {
        net_cfg.conv_channels = config.conv_channels;
        net_cfg.validate();
    }

    auto train_entries = sorted_split(manifest, "train", 0);
    auto val_entries = sorted_split(manifest, "validation", 0);
    if (train_entries.empty()) fail(ErrorKind::Validation, "training split is empty");
    if (val_entries.empty()) fail(ErrorKind::Validation, "validation split is empty");

    SliceDataset train_set = collect_slices(train_entries, manifest, config.input_size, variant);
    SliceDataset val_set = collect_slices(val_entries, manifest, config.input_size, variant);
    if (train_set.images.size() < 2)
        fail(ErrorKind::Validation, "not enough training slices");

    ConvNet net(net_cfg, mix_seed(config.seed, 0x7e6));
    // Start the output node at the mean target so the regression range is
    // reachable within the epoch budget.
    double mean_target = 0.0;
    for (double t : train_set.targets) mean_target += t;
    mean_target /= static_cast<double>(train_set.targets.size());
    net.params()[find_param(net.params(), "out.b")].value.v[0] = mean_target;

    AdamState adam_state;
    TrainOutcome outcome;
    outcome.best_val_mae = std::numeric_limits<double>::infinity();
    std::vector<Tensor> best_values;

    std::vector<size_t> order(train_set.images.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<TrainLogRow> log_rows;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        Rng rng(mix_seed(config.seed, 0xe90c + static_cast<uint64_t>(epoch)));
        rng.shuffle(order);

        double loss_sum = 0.0;
        size_t seen = 0;
        for (size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            size_t count = std::min(order.size() - begin,
                                    static_cast<size_t>(config.batch_size));
            if (count < 2) continue;  // batch norm needs at least two samples
            Tensor x(static_cast<int>(count), 1, config.input_size, config.input_size);
            Tensor aux(static_cast<int>(count), 3, 1, 1);
            std::vector<double> targets(count);
            fill_regression_batch(x, aux, targets, train_set, order, begin, count);

            Tensor pred = net.forward(x, aux, true);
            Tensor dpred;
            double loss = l1_loss(pred, targets, &dpred);
            net.params().zero_grads();
            net.backward(dpred);
            adam_update(net.params(), adam_state, config.adam);

            loss_sum += loss * static_cast<double>(count);
            seen += count;
        }
        double train_mae = seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0;
        double val_mae = evaluate_mae(net, val_set, config.input_size, config.batch_size);

        EpochRecord rec{epoch, train_mae, val_mae, elapsed_seconds(t0)};
        outcome.history.push_back(rec);
        log_rows.push_back({epoch, train_mae, val_mae, rec.wall_seconds});

        if (val_mae < outcome.best_val_mae) {
            outcome.best_val_mae = val_mae;
            outcome.best_epoch = epoch;
            best_values.clear();
            for (const auto& e : net.params().entries()) best_values.push_back(e.value);
        }
    }

    for (size_t i = 0; i < best_values.size(); ++i)
        net.params().entries()[i].value = best_values[i];

    json meta = {{"experiment", variant.id()},
                 {"target", variant.target_name()},
                 {"log_targets", variant.log_targets},
                 {"shared_kernels", variant.shared_kernels},
                 {"input_size", config.input_size},
                 {"epoch", outcome.best_epoch},
                 {"val_mae", outcome.best_val_mae},
                 {"seed", config.seed},
                 {"target_mean_init", mean_target}};
    net.save_checkpoint(checkpoint_path, meta);

    if (!log_csv_path.empty()) write_train_log(log_csv_path, log_rows);
    return outcome;
}

// --- prediction ---------------------------------------------------------------

RegressorModel load_regressor(const std::string& checkpoint_path) {
    json meta;
    ConvNet net = ConvNet::load_checkpoint(checkpoint_path, &meta);
    RegressorModel model{std::move(net), {}, 64, meta};
    model.variant.log_targets = meta.at("log_targets").get<bool>();
    model.variant.shared_kernels = meta.at("shared_kernels").get<bool>();
    model.variant.target = meta.at("target").get<std::string>() == "volume"
                               ? ExperimentVariant::Target::volume
                               : ExperimentVariant::Target::agatston;
    model.input_size = meta.at("input_size").get<int>();
    return model;
}

ScoreReport predict_subject(const CtVolume& vol, RegressorModel& model,
                            const std::optional<BoundingBox>& box, Locator* locator,
                            double* wall_seconds) {
    auto t0 = std::chrono::steady_clock::now();
    BoundingBox heart_box;
    if (box) {
        heart_box = *box;
    } else if (locator) {
        heart_box = locate_heart(vol, *locator);
    } else {
        fail(ErrorKind::Usage, "predict needs a bounding box or a locator");
    }

    auto slices = prepare_slices(vol, heart_box, model.input_size, nullptr);
    std::vector<double> per_slice;
    per_slice.reserve(slices.size());
    const int S = model.input_size;
    constexpr size_t kChunk = 64;
    Tensor aux_t, x_t;
    for (size_t begin = 0; begin < slices.size(); begin += kChunk) {
        size_t count = std::min(slices.size() - begin, kChunk);
        x_t = Tensor(static_cast<int>(count), 1, S, S);
        aux_t = Tensor(static_cast<int>(count), 3, 1, 1);
        for (size_t b = 0; b < count; ++b) {
            const auto& ps = slices[begin + b];
            double* dst = &x_t.at(static_cast<int>(b), 0, 0, 0);
            for (size_t p = 0; p < ps.image.v.size(); ++p) dst[p] = ps.image.v[p];
            for (int a = 0; a < 3; ++a) aux_t.at(static_cast<int>(b), a, 0, 0) = ps.aux[a];
        }
        Tensor pred = model.net.forward(x_t, aux_t, false);
        for (size_t i = 0; i < count; ++i) {
            double raw = model.variant.log_targets ? inverse_log_transform(pred.v[i])
                                                   : pred.v[i];
            per_slice.push_back(std::max(0.0, raw));
        }
    }

    double total = 0.0;
    for (double v : per_slice) total += v;

    ScoreReport report;
    report.subject_id = vol.subject_id();
    report.source = "predicted";
    if (model.variant.target == ExperimentVariant::Target::agatston) {
        report.agatston = total;
        report.per_slice_agatston = std::move(per_slice);
        report.category = risk_category(report.agatston);
    } else {
        report.volume_mm3 = total;
        report.per_slice_volume = std::move(per_slice);
        report.category = risk_category(report.agatston);
    }
    if (wall_seconds) *wall_seconds = elapsed_seconds(t0);
    return report;
}

// --- saliency -------------------------------------------------------------------

Slice2d saliency_map(RegressorModel& model, const PreparedSlice& slice) {
    const int S = model.input_size;
    Tensor x(1, 1, S, S);
    for (size_t i = 0; i < slice.image.v.size(); ++i) x.v[i] = slice.image.v[i];
    Tensor aux(1, 3, 1, 1);
    for (int a = 0; a < 3; ++a) aux.at(0, a, 0, 0) = slice.aux[a];

    ConvNet& net = model.net;
    net.forward(x, aux, false);
    Tensor dy = Tensor::vec(1);
    dy.v[0] = 1.0;
    net.params().zero_grads();
    const int stage = std::min(2, net.config().stages() - 1);
    Tensor g = net.backward_to_stage(stage, dy);
    Tensor proj = net.project_to_input(stage, std::move(g));
    net.params().zero_grads();

    Slice2d map(S, S);
    double max_abs = 0.0;
    for (int r = 0; r < S; ++r)
        for (int c = 0; c < S; ++c) {
            double m = 0.0;
            for (int ch = 0; ch < proj.c; ++ch) m += std::abs(proj.at(0, ch, r, c));
            map.at(r, c) = static_cast<float>(m);
            max_abs = std::max(max_abs, m);
        }
    if (max_abs > 0.0)
        for (auto& v : map.v) v = static_cast<float>(v / max_abs);
    else
        for (auto& v : map.v) v = 0.0f;
    return map;
}

void write_saliency_overlay_png(const Slice2d& base_normalized, const Slice2d& saliency,
                                const std::string& path) {
    if (base_normalized.rows != saliency.rows || base_normalized.cols != saliency.cols)
        fail(ErrorKind::Validation, "saliency overlay shape mismatch");
    const int H = base_normalized.rows, W = base_normalized.cols;
    std::vector<uint8_t> rgb(static_cast<size_t>(H) * W * 3);
    for (int r = 0; r < H; ++r) {
        for (int c = 0; c < W; ++c) {
            double gray = std::clamp(static_cast<double>(base_normalized.at(r, c)), 0.0, 1.0);
            double a = std::clamp(static_cast<double>(saliency.at(r, c)), 0.0, 1.0);
            a = std::sqrt(a) * 0.85;  // lift faint responses for visibility
            double red = (1.0 - a) * gray * 255.0 + a * 255.0;
            double green = (1.0 - a) * gray * 255.0;
            size_t o = (static_cast<size_t>(r) * W + c) * 3;
            rgb[o] = static_cast<uint8_t>(std::lround(red));
            rgb[o + 1] = static_cast<uint8_t>(std::lround(green));
            rgb[o + 2] = static_cast<uint8_t>(std::lround(green));
        }
    }
    write_png_rgb(path, W, H, rgb);
}

}  // namespace cacs
