#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cacs/metrics.hpp"
#include "cacs/refscore.hpp"

namespace cacs {

// Shortest round-trip decimal formatting (std::to_chars).
std::string format_double(double v);

// Score report CSV: subject_id, source, agatston, volume_mm3, category.
// Per-slice arrays go to a JSON sidecar on request.
void write_score_csv(const std::string& path, const std::vector<ScoreReport>& reports);
void write_score_json(const std::string& path, const std::vector<ScoreReport>& reports);
void write_per_slice_sidecar(const std::string& path, const std::vector<ScoreReport>& reports);
std::vector<ScoreReport> read_score_csv(const std::string& path);

// Evaluation table CSV: one row per (variant, target) pairing.
struct EvalRow {
    std::string variant;
    std::string target_kind;
    AgreementStats stats;
};
void write_eval_table(const std::string& path, const std::vector<EvalRow>& rows);
std::string eval_row_csv(const EvalRow& row);

// Training log CSV: epoch, train_mae, val_mae, wall_seconds.
struct TrainLogRow {
    int epoch;
    double train_mae;
    double val_mae;
    double wall_seconds;
};
void write_train_log(const std::string& path, const std::vector<TrainLogRow>& rows);

// FNV-1a 64-bit content hashes for run manifests.
uint64_t fnv1a64(const void* data, size_t len);
uint64_t fnv1a64_file(const std::string& path);
std::string hash_hex(uint64_t h);

// Every CLI command emits one of these next to its primary output.
struct RunManifest {
    std::string command;
    nlohmann::json config;
    std::vector<std::pair<std::string, std::string>> input_hashes;
    std::vector<std::pair<std::string, std::string>> output_hashes;
    double wall_seconds = 0.0;

    void add_input(const std::string& path);
    void add_output(const std::string& path);
    void write(const std::string& path) const;
};

// Atomic small-file write (temp + rename).
void write_text_atomic(const std::string& path, const std::string& content);

}  // namespace cacs
