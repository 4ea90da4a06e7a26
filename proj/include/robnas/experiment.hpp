#pragma once

// Experiment configuration, run records and report rendering.
//
// Config files are sectioned key-value text:
//
//   # comment
//   [search]
//   epochs = 4
//
// Every key must be known; values are parsed when the config is resolved.
// Environment variables ROBNAS_<SECTION>_<KEY> override file values.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "robnas/attacks.hpp"
#include "robnas/search.hpp"

namespace robnas {

class ConfigDoc {
public:
    /// Throws ConfigError naming "section.key" when the pair is not a known key.
    void set(const std::string& section, const std::string& key, std::string value);
    std::optional<std::string> get(const std::string& section, const std::string& key) const;
    const std::map<std::string, std::map<std::string, std::string>>& values() const { return values_; }

    static const std::map<std::string, std::vector<std::string>>& known_keys();

private:
    std::map<std::string, std::map<std::string, std::string>> values_;
};

ConfigDoc parse_config(std::string_view text, std::string_view origin = "config");
ConfigDoc load_config(const std::filesystem::path& path);
/// `env` holds "NAME=value" entries; only names starting with ROBNAS_ are read,
/// except ROBNAS_SIMD which selects the kernel backend.
void apply_env_overrides(ConfigDoc& doc, const std::vector<std::string>& env);

enum class DataSource { idx, blobs, stripes };

struct DataConfig {
    DataSource source = DataSource::idx;
    std::filesystem::path path;  // directory with images-idx3-ubyte and labels-idx1-ubyte
    std::size_t image_hw = 8;
    std::size_t limit = 0;
    std::size_t n = 600;  // synthetic
    std::size_t classes = 10;
    Real noise = 0.1;
    std::array<Real, 3> fractions{0.4, 0.4, 0.2};

    /// Stable identity used to refuse mixing records from different data.
    std::string identity() const;
};

struct CertifyConfig {
    std::vector<Norm> norms{Norm::linf, Norm::l2};
    std::size_t examples = 100;
    Real tol = 1e-4;
    BoundOptions bounds;
};

struct Experiment {
    std::uint64_t seed = 0;
    DataConfig data;
    SpaceConfig space;
    SearchConfig search;
    TrainConfig retrain;
    std::size_t retrain_channels = 0;  // 0 keeps space.channels
    std::vector<AttackConfig> attacks;
    std::size_t attack_examples = 0;  // 0 = whole test split
    CertifyConfig certify;

    nlohmann::json to_json() const;
};

Experiment resolve(const ConfigDoc& doc);

nlohmann::json space_to_json(const SpaceConfig& s);
SpaceConfig space_from_json(const nlohmann::json& j);

/// Loads (or synthesizes) the dataset and splits it with the "splits" stream.
Splits load_splits(const DataConfig& d, std::uint64_t seed);

/// Git blob id: SHA-1 of "blob <size>\0" followed by the payload, as hex.
std::string git_blob_hash(std::string_view payload);
std::string file_hash(const std::filesystem::path& path);

struct RunRecord {
    std::string run_id;
    std::string command;
    std::string timestamp;
    std::string method;
    std::string dataset;
    std::uint64_t seed = 0;
    nlohmann::json config = nlohmann::json::object();
    std::string content_hash;
    nlohmann::json inputs = nlohmann::json::object();     // role -> {path, hash}
    nlohmann::json metrics = nlohmann::json::object();    // name -> number
    nlohmann::json artifacts = nlohmann::json::object();  // name -> path
    nlohmann::json timing = nlohmann::json::object();

    /// Sets content_hash from command, config and inputs, and run_id from it.
    void seal();
    nlohmann::json to_json() const;
    static RunRecord from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    /// Accepts a record file or a directory containing record.json.
    static RunRecord load(const std::filesystem::path& path);
};

enum class ReportFormat { text, csv, json };
ReportFormat parse_report_format(std::string_view s);

struct ReportRow {
    std::string method;
    std::string metric;  // "<command>/<metric name>"
    Real mean = 0;
    Real std = 0;  // sample standard deviation; 0 for a single run
    std::size_t runs = 0;
};

/// Records sorted by run id; one row per (method, metric) in order of first
/// appearance. Throws ConfigError when records come from different datasets.
std::vector<ReportRow> report_rows(std::vector<RunRecord> records);
std::string render_report(const std::vector<RunRecord>& records, ReportFormat format);
/// Inverse of the csv rendering.
std::vector<ReportRow> parse_report_csv(std::string_view csv);

}  // namespace robnas
