#include "cacs/report_io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cacs/error.hpp"

namespace cacs {

using nlohmann::json;

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

void write_text_atomic(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorKind::Io, "cannot open for writing: " + path);
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) fail(ErrorKind::Io, "write failed: " + path);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        fail(ErrorKind::Io, "rename failed: " + path);
}

void write_score_csv(const std::string& path, const std::vector<ScoreReport>& reports) {
    std::string out = "subject_id,source,agatston,volume_mm3,category\n";
    for (const auto& r : reports) {
        out += r.subject_id + "," + r.source + "," + format_double(r.agatston) + "," +
               format_double(r.volume_mm3) + "," + to_string(r.category) + "\n";
    }
    write_text_atomic(path, out);
}

namespace {

json report_to_json(const ScoreReport& r) {
    return json{{"subject_id", r.subject_id},
                {"source", r.source},
                {"agatston", r.agatston},
                {"volume_mm3", r.volume_mm3},
                {"category", to_string(r.category)},
                {"per_slice_agatston", r.per_slice_agatston},
                {"per_slice_volume", r.per_slice_volume}};
}

}  // namespace

void write_score_json(const std::string& path, const std::vector<ScoreReport>& reports) {
    json arr = json::array();
    for (const auto& r : reports) arr.push_back(report_to_json(r));
    write_text_atomic(path, arr.dump(2) + "\n");
}

void write_per_slice_sidecar(const std::string& path, const std::vector<ScoreReport>& reports) {
    json arr = json::array();
    for (const auto& r : reports)
        arr.push_back(json{{"subject_id", r.subject_id},
                           {"per_slice_agatston", r.per_slice_agatston},
                           {"per_slice_volume", r.per_slice_volume}});
    write_text_atomic(path, arr.dump(2) + "\n");
}

std::vector<ScoreReport> read_score_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open score CSV: " + path);
    std::string line;
    if (!std::getline(in, line)) fail(ErrorKind::Format, "empty score CSV: " + path);
    if (line.rfind("subject_id,source,agatston", 0) != 0)
        fail(ErrorKind::Format, "unexpected score CSV header: " + path);

    std::vector<ScoreReport> reports;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        ScoreReport r;
        std::getline(ss, r.subject_id, ',');
        std::getline(ss, r.source, ',');
        std::getline(ss, field, ',');
        r.agatston = std::stod(field);
        std::getline(ss, field, ',');
        r.volume_mm3 = std::stod(field);
        std::getline(ss, field, ',');
        auto cat = risk_category_from_string(field);
        if (!cat) fail(ErrorKind::Format, "bad category in score CSV: " + field);
        r.category = *cat;
        reports.push_back(std::move(r));
    }
    return reports;
}

std::string eval_row_csv(const EvalRow& row) {
    const auto& s = row.stats;
    return row.variant + "," + row.target_kind + "," + format_double(s.icc) + "," +
           format_double(s.ci_lo) + "," + format_double(s.ci_hi) + "," +
           format_double(s.kappa_linear) + "," + format_double(s.accuracy) + "," +
           format_double(s.mae) + "\n";
}

void write_eval_table(const std::string& path, const std::vector<EvalRow>& rows) {
    std::string out = "variant,target_kind,icc,ci_lo,ci_hi,kappa,accuracy,mae\n";
    for (const auto& row : rows) out += eval_row_csv(row);
    write_text_atomic(path, out);
}

void write_train_log(const std::string& path, const std::vector<TrainLogRow>& rows) {
    std::string out = "epoch,train_mae,val_mae,wall_seconds\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.3f", r.wall_seconds);
        out += std::to_string(r.epoch) + "," + format_double(r.train_mae) + "," +
               format_double(r.val_mae) + "," + buf + "\n";
    }
    write_text_atomic(path, out);
}

uint64_t fnv1a64(const void* data, size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t fnv1a64_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot hash missing file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes.data(), bytes.size());
}

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void RunManifest::add_input(const std::string& path) {
    input_hashes.emplace_back(path, hash_hex(fnv1a64_file(path)));
}

void RunManifest::add_output(const std::string& path) {
    output_hashes.emplace_back(path, hash_hex(fnv1a64_file(path)));
}

void RunManifest::write(const std::string& path) const {
    json in_j = json::object(), out_j = json::object();
    for (const auto& [p, h] : input_hashes) in_j[p] = h;
    for (const auto& [p, h] : output_hashes) out_j[p] = h;
    json j = {{"command", command},
              {"config", config},
              {"input_hashes", in_j},
              {"output_hashes", out_j},
              {"wall_seconds", wall_seconds}};
    write_text_atomic(path, j.dump(2) + "\n");
}

}  // namespace cacs
