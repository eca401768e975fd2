#pragma once

// On-disk "AKDS" activation datasets and the shuffling training buffer.
//
// Layout, all little-endian:
//   magic "AKDS" | version u32 | d_model u32 | count u64 | score_present u8
//   then count records of: complexity f32 | activation f32[d_model]
// Files ending in .jsonl are read as one {"complexity", "activation"} object
// per line instead.

#include "adaptivek/common.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <vector>

namespace adaptivek {

inline constexpr std::array<char, 4> dataset_magic = {'A', 'K', 'D', 'S'};
inline constexpr std::uint32_t dataset_version = 1;
inline constexpr std::size_t dataset_header_bytes = 4 + 4 + 4 + 8 + 1;
inline constexpr int complexity_bins = 10;

struct DatasetHeader {
    std::uint32_t version = dataset_version;
    std::uint32_t d_model = 0;
    std::uint64_t count = 0;
    bool score_present = true;
};

struct ActivationRecord {
    float complexity = 0.0f;
    std::vector<float> activation;

    bool operator==(const ActivationRecord&) const = default;
};

using ComplexityHistogram = std::array<std::uint64_t, complexity_bins>;

/// Unit-width bin of a complexity score; 10.0 falls into the last bin.
int complexity_bin(double c);

ComplexityHistogram complexity_histogram(std::span<const float> complexities);

/// A fully loaded dataset, activations stored row-major.
class Dataset {
public:
    Dataset() = default;
    Dataset(std::uint32_t d_model, bool score_present);

    static Dataset from_records(std::uint32_t d_model, bool score_present,
                                std::span<const ActivationRecord> records);

    std::uint32_t d_model() const { return d_model_; }
    std::uint64_t size() const { return complexities_.size(); }
    bool score_present() const { return score_present_; }
    DatasetHeader header() const { return {dataset_version, d_model_, size(), score_present_}; }

    void push_back(std::span<const float> activation, float complexity);

    std::span<const float> activation(std::uint64_t i) const {
        return {activations_.data() + i * d_model_, d_model_};
    }
    float complexity(std::uint64_t i) const { return complexities_[i]; }
    ActivationRecord record(std::uint64_t i) const;

    const std::vector<float>& raw_activations() const { return activations_; }
    const std::vector<float>& raw_complexities() const { return complexities_; }

    /// Rows [first, first + n) as a double matrix / vector.
    Matrix activation_matrix(std::uint64_t first = 0, std::uint64_t n = UINT64_MAX) const;
    Vector complexity_vector(std::uint64_t first = 0, std::uint64_t n = UINT64_MAX) const;

    /// Splits off the trailing rows as a separate dataset.
    std::pair<Dataset, Dataset> split(std::uint64_t head_count) const;

private:
    std::uint32_t d_model_ = 0;
    bool score_present_ = true;
    std::vector<float> activations_;
    std::vector<float> complexities_;
};

std::uint64_t write_dataset(const DatasetHeader& header, std::span<const ActivationRecord> records,
                            const std::filesystem::path& path);
std::uint64_t write_dataset(const Dataset& data, const std::filesystem::path& path);

DatasetHeader read_header(const std::filesystem::path& path);

/// Loads an AKDS file, or a .jsonl file by extension.
Dataset read_dataset(const std::filesystem::path& path);

Dataset read_jsonl(const std::filesystem::path& path);
void write_jsonl(const Dataset& data, const std::filesystem::path& path);

/// Path of the provenance sidecar: same basename, ".meta.json".
std::filesystem::path sidecar_path(const std::filesystem::path& dataset_path);
void write_sidecar(const std::filesystem::path& dataset_path, const nlohmann::json& meta);
/// Returns null json when there is no sidecar.
nlohmann::json read_sidecar(const std::filesystem::path& dataset_path);

/// Random-access record provider behind a Buffer.
class RecordSource {
public:
    virtual ~RecordSource() = default;
    virtual std::uint32_t d_model() const = 0;
    virtual std::uint64_t count() const = 0;
    virtual bool score_present() const = 0;
    /// Reads records [first, first + n) into row-major activations and complexities.
    virtual void read(std::uint64_t first, std::uint64_t n, float* activations, float* complexities) = 0;
};

class FileSource final : public RecordSource {
public:
    explicit FileSource(const std::filesystem::path& path);

    std::uint32_t d_model() const override { return header_.d_model; }
    std::uint64_t count() const override { return header_.count; }
    bool score_present() const override { return header_.score_present; }
    void read(std::uint64_t first, std::uint64_t n, float* activations, float* complexities) override;

private:
    std::filesystem::path path_;
    DatasetHeader header_;
    std::ifstream in_;
    std::vector<char> scratch_;
};

class MemorySource final : public RecordSource {
public:
    explicit MemorySource(std::shared_ptr<const Dataset> data) : data_(std::move(data)) {}

    std::uint32_t d_model() const override { return data_->d_model(); }
    std::uint64_t count() const override { return data_->size(); }
    bool score_present() const override { return data_->score_present(); }
    void read(std::uint64_t first, std::uint64_t n, float* activations, float* complexities) override;

private:
    std::shared_ptr<const Dataset> data_;
};

/// Opens a file as a RecordSource; .jsonl files are loaded into memory.
std::shared_ptr<RecordSource> open_source(const std::filesystem::path& path);

struct Batch {
    Matrix x;                          // rows are samples
    Vector c;                          // complexity labels
    std::vector<std::uint64_t> index;  // source record index of each row
    bool has_labels = true;

    Eigen::Index rows() const { return x.rows(); }
};

/// Shuffling training buffer. Holds up to `capacity` records of the source at
/// a time; each refill loads the next window of the source and permutes it
/// with a stream derived from (seed, cycle index). Single consumer.
class Buffer {
public:
    Buffer(std::shared_ptr<RecordSource> source, std::uint64_t capacity, std::uint64_t seed,
           bool repeat = true);

    /// Up to batch_size unprocessed records. Refills first when none remain.
    Batch read_batch(std::size_t batch_size);

    void refill_and_shuffle();

    std::uint64_t capacity() const { return capacity_; }
    std::uint64_t loaded() const { return order_.size(); }
    std::uint64_t remaining() const { return order_.size() - cursor_; }
    /// Number of refills performed so far.
    std::uint64_t cycles() const { return next_cycle_; }
    std::uint64_t seed() const { return seed_; }
    const ComplexityHistogram& histogram() const { return histogram_; }
    const RecordSource& source() const { return *source_; }

    /// Processed flag of each loaded record, in load order.
    const std::vector<bool>& processed_flags() const { return processed_; }
    /// Source indices of the loaded records in yield order.
    std::span<const std::uint64_t> order() const { return order_; }

private:
    std::shared_ptr<RecordSource> source_;
    std::uint64_t capacity_;
    std::uint64_t seed_;
    bool repeat_;
    std::uint64_t next_cycle_ = 0;
    std::uint64_t window_first_ = 0;

    std::vector<float> activations_;
    std::vector<float> complexities_;
    std::vector<std::uint64_t> order_;     // source indices, shuffled
    std::vector<std::uint32_t> slot_;      // position in the loaded window for order_[i]
    std::vector<bool> processed_;
    std::size_t cursor_ = 0;
    ComplexityHistogram histogram_{};
};

/// Permutation of [0, n) used by refill cycle `cycle`.
std::vector<std::uint32_t> cycle_permutation(std::uint64_t n, std::uint64_t seed, std::uint64_t cycle);

} // namespace adaptivek
