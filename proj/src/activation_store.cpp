#include "adaptivek/activation_store.hpp"
#include "adaptivek/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace adaptivek {

namespace fs = std::filesystem;

namespace {

template <typename U>
void put_le(std::vector<char>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const char* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
        v |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

void put_f32(std::vector<char>& out, float f) { put_le(out, std::bit_cast<std::uint32_t>(f)); }
float get_f32(const char* p) { return std::bit_cast<float>(get_le<std::uint32_t>(p)); }

std::size_t record_bytes(std::uint32_t d_model) { return 4 * (static_cast<std::size_t>(d_model) + 1); }

void check_record(const ActivationRecord& r, std::uint32_t d_model, bool score_present, std::uint64_t i) {
    if (r.activation.size() != d_model)
        throw DimensionMismatch("record " + std::to_string(i) + " has " + std::to_string(r.activation.size()) +
                                " entries, expected " + std::to_string(d_model));
    for (float v : r.activation)
        if (!std::isfinite(v)) throw NumericError("record " + std::to_string(i) + " has a non-finite activation");
    if (!std::isfinite(r.complexity)) throw NumericError("record " + std::to_string(i) + " has non-finite complexity");
    if (score_present && (r.complexity < 0.0f || r.complexity > 10.0f))
        throw InvalidArgument("record " + std::to_string(i) + " complexity outside [0, 10]");
}

std::vector<char> encode_header(const DatasetHeader& h) {
    std::vector<char> out(dataset_magic.begin(), dataset_magic.end());
    put_le(out, h.version);
    put_le(out, h.d_model);
    put_le(out, h.count);
    out.push_back(h.score_present ? 1 : 0);
    return out;
}

DatasetHeader decode_header(const char* p, const fs::path& path) {
    if (!std::equal(dataset_magic.begin(), dataset_magic.end(), p))
        throw FormatError(path.string() + ": bad magic, not an AKDS file");
    DatasetHeader h;
    h.version = get_le<std::uint32_t>(p + 4);
    h.d_model = get_le<std::uint32_t>(p + 8);
    h.count = get_le<std::uint64_t>(p + 12);
    const auto flag = static_cast<unsigned char>(p[20]);
    if (h.version != dataset_version)
        throw FormatError(path.string() + ": unsupported version " + std::to_string(h.version));
    if (h.d_model < 1) throw FormatError(path.string() + ": d_model must be >= 1");
    if (flag > 1) throw FormatError(path.string() + ": bad score_present flag");
    h.score_present = flag == 1;
    return h;
}

bool is_jsonl(const fs::path& path) { return path.extension() == ".jsonl"; }

} // namespace

int complexity_bin(double c) {
    if (!(c >= 0.0)) return 0;
    return std::min(complexity_bins - 1, static_cast<int>(std::floor(c)));
}

ComplexityHistogram complexity_histogram(std::span<const float> complexities) {
    ComplexityHistogram h{};
    for (float c : complexities) ++h[static_cast<std::size_t>(complexity_bin(c))];
    return h;
}

// ---------------------------------------------------------------------------
// Dataset

Dataset::Dataset(std::uint32_t d_model, bool score_present) : d_model_(d_model), score_present_(score_present) {
    require(d_model >= 1, "d_model must be >= 1");
}

Dataset Dataset::from_records(std::uint32_t d_model, bool score_present, std::span<const ActivationRecord> records) {
    Dataset d(d_model, score_present);
    d.activations_.reserve(records.size() * d_model);
    d.complexities_.reserve(records.size());
    for (const auto& r : records) {
        require_dims(r.activation.size() == d_model, "record dimension does not match d_model");
        d.push_back(r.activation, r.complexity);
    }
    return d;
}

void Dataset::push_back(std::span<const float> activation, float complexity) {
    require_dims(activation.size() == d_model_, "record dimension does not match d_model");
    activations_.insert(activations_.end(), activation.begin(), activation.end());
    complexities_.push_back(complexity);
}

ActivationRecord Dataset::record(std::uint64_t i) const {
    auto a = activation(i);
    return {complexities_[i], std::vector<float>(a.begin(), a.end())};
}

Matrix Dataset::activation_matrix(std::uint64_t first, std::uint64_t n) const {
    first = std::min(first, size());
    n = std::min(n, size() - first);
    Matrix m(static_cast<Eigen::Index>(n), d_model_);
    for (std::uint64_t i = 0; i < n; ++i) {
        const float* row = activations_.data() + (first + i) * d_model_;
        for (std::uint32_t j = 0; j < d_model_; ++j) m(static_cast<Eigen::Index>(i), j) = row[j];
    }
    return m;
}

Vector Dataset::complexity_vector(std::uint64_t first, std::uint64_t n) const {
    first = std::min(first, size());
    n = std::min(n, size() - first);
    Vector v(static_cast<Eigen::Index>(n));
    for (std::uint64_t i = 0; i < n; ++i) v(static_cast<Eigen::Index>(i)) = complexities_[first + i];
    return v;
}

std::pair<Dataset, Dataset> Dataset::split(std::uint64_t head_count) const {
    head_count = std::min(head_count, size());
    Dataset head(d_model_, score_present_), tail(d_model_, score_present_);
    for (std::uint64_t i = 0; i < size(); ++i) (i < head_count ? head : tail).push_back(activation(i), complexity(i));
    return {std::move(head), std::move(tail)};
}

// ---------------------------------------------------------------------------
// AKDS files

std::uint64_t write_dataset(const DatasetHeader& header, std::span<const ActivationRecord> records,
                            const fs::path& path) {
    require(header.d_model >= 1, "d_model must be >= 1");
    std::vector<char> bytes = encode_header({dataset_version, header.d_model, records.size(), header.score_present});
    bytes.reserve(bytes.size() + records.size() * record_bytes(header.d_model));
    for (std::uint64_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        check_record(r, header.d_model, header.score_present, i);
        put_f32(bytes, header.score_present ? r.complexity : 0.0f);
        for (float v : r.activation) put_f32(bytes, v);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
    return records.size();
}

std::uint64_t write_dataset(const Dataset& data, const fs::path& path) {
    if (is_jsonl(path)) {
        write_jsonl(data, path);
        return data.size();
    }
    std::vector<char> bytes = encode_header(data.header());
    bytes.reserve(bytes.size() + data.size() * record_bytes(data.d_model()));
    for (std::uint64_t i = 0; i < data.size(); ++i) {
        const float c = data.complexity(i);
        if (!std::isfinite(c)) throw NumericError("record " + std::to_string(i) + " has non-finite complexity");
        if (data.score_present() && (c < 0.0f || c > 10.0f))
            throw InvalidArgument("record " + std::to_string(i) + " complexity outside [0, 10]");
        put_f32(bytes, data.score_present() ? c : 0.0f);
        for (float v : data.activation(i)) {
            if (!std::isfinite(v)) throw NumericError("record " + std::to_string(i) + " has a non-finite activation");
            put_f32(bytes, v);
        }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
    return data.size();
}

DatasetHeader read_header(const fs::path& path) {
    if (is_jsonl(path)) return read_jsonl(path).header();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char buf[dataset_header_bytes];
    if (!in.read(buf, sizeof buf)) throw FormatError(path.string() + ": truncated header");
    DatasetHeader h = decode_header(buf, path);
    std::error_code ec;
    const auto size = fs::file_size(path, ec);
    if (ec) throw IoError("cannot stat " + path.string());
    const auto expected = dataset_header_bytes + h.count * record_bytes(h.d_model);
    if (size != expected)
        throw FormatError(path.string() + ": header declares " + std::to_string(h.count) +
                          " records but file size does not match");
    return h;
}

Dataset read_dataset(const fs::path& path) {
    if (is_jsonl(path)) return read_jsonl(path);
    FileSource src(path);
    Dataset d(src.d_model(), src.score_present());
    std::vector<float> acts(static_cast<std::size_t>(src.count()) * src.d_model());
    std::vector<float> cs(src.count());
    if (src.count() > 0) src.read(0, src.count(), acts.data(), cs.data());
    for (std::uint64_t i = 0; i < src.count(); ++i)
        d.push_back(std::span<const float>(acts.data() + i * src.d_model(), src.d_model()), cs[i]);
    return d;
}

Dataset read_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<ActivationRecord> records;
    bool any_score = false, any_missing = false;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        if (!j.is_object() || !j.contains("activation") || !j["activation"].is_array())
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": missing activation array");
        ActivationRecord r;
        for (const auto& v : j["activation"]) {
            if (!v.is_number()) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": non-numeric entry");
            r.activation.push_back(v.get<float>());
        }
        if (j.contains("complexity") && !j["complexity"].is_null()) {
            r.complexity = j["complexity"].get<float>();
            any_score = true;
        } else {
            any_missing = true;
        }
        records.push_back(std::move(r));
    }
    if (records.empty()) throw FormatError(path.string() + ": no records; dimension cannot be inferred");
    if (any_score && any_missing) throw FormatError(path.string() + ": complexity present on some lines only");
    const auto d = static_cast<std::uint32_t>(records.front().activation.size());
    for (std::size_t i = 0; i < records.size(); ++i) check_record(records[i], d, any_score, i);
    return Dataset::from_records(d, any_score, records);
}

void write_jsonl(const Dataset& data, const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    for (std::uint64_t i = 0; i < data.size(); ++i) {
        nlohmann::json j;
        auto a = data.activation(i);
        if (data.score_present()) j["complexity"] = data.complexity(i);
        j["activation"] = std::vector<float>(a.begin(), a.end());
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("write failed for " + path.string());
}

fs::path sidecar_path(const fs::path& dataset_path) {
    fs::path p = dataset_path;
    p.replace_extension(".meta.json");
    return p;
}

void write_sidecar(const fs::path& dataset_path, const nlohmann::json& meta) {
    std::ofstream out(sidecar_path(dataset_path), std::ios::trunc);
    if (!out) throw IoError("cannot write sidecar for " + dataset_path.string());
    out << meta.dump(2) << '\n';
}

nlohmann::json read_sidecar(const fs::path& dataset_path) {
    std::ifstream in(sidecar_path(dataset_path));
    if (!in) return nullptr;
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(sidecar_path(dataset_path).string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Sources

FileSource::FileSource(const fs::path& path)
    : path_(path), header_(read_header(path)), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open " + path.string());
}

void FileSource::read(std::uint64_t first, std::uint64_t n, float* activations, float* complexities) {
    if (first + n > header_.count) throw InvalidArgument("read past end of " + path_.string());
    const std::size_t rb = record_bytes(header_.d_model);
    scratch_.resize(n * rb);
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(dataset_header_bytes + first * rb));
    if (!in_.read(scratch_.data(), static_cast<std::streamsize>(scratch_.size())))
        throw IoError("short read from " + path_.string());
    const char* p = scratch_.data();
    for (std::uint64_t i = 0; i < n; ++i) {
        complexities[i] = get_f32(p);
        p += 4;
        for (std::uint32_t j = 0; j < header_.d_model; ++j, p += 4)
            activations[i * header_.d_model + j] = get_f32(p);
    }
}

void MemorySource::read(std::uint64_t first, std::uint64_t n, float* activations, float* complexities) {
    if (first + n > data_->size()) throw InvalidArgument("read past end of in-memory dataset");
    const auto d = data_->d_model();
    std::copy_n(data_->raw_activations().data() + first * d, n * d, activations);
    std::copy_n(data_->raw_complexities().data() + first, n, complexities);
}

std::shared_ptr<RecordSource> open_source(const fs::path& path) {
    if (is_jsonl(path)) return std::make_shared<MemorySource>(std::make_shared<const Dataset>(read_jsonl(path)));
    return std::make_shared<FileSource>(path);
}

// ---------------------------------------------------------------------------
// Buffer

std::vector<std::uint32_t> cycle_permutation(std::uint64_t n, std::uint64_t seed, std::uint64_t cycle) {
    std::vector<std::uint32_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0u);
    Rng rng(derive_seed(seed, cycle));
    rng.shuffle(std::span<std::uint32_t>(perm));
    return perm;
}

Buffer::Buffer(std::shared_ptr<RecordSource> source, std::uint64_t capacity, std::uint64_t seed, bool repeat)
    : source_(std::move(source)), capacity_(capacity), seed_(seed), repeat_(repeat) {
    require(source_ != nullptr, "buffer needs a record source");
    require(capacity_ >= 1, "buffer capacity must be >= 1");
}

void Buffer::refill_and_shuffle() {
    const std::uint64_t count = source_->count();
    if (count == 0) throw ExhaustedError("dataset is empty");
    const std::uint64_t windows = (count + capacity_ - 1) / capacity_;
    if (!repeat_ && next_cycle_ >= windows) throw ExhaustedError("dataset exhausted in non-repeating mode");

    const std::uint64_t window = next_cycle_ % windows;
    window_first_ = window * capacity_;
    const std::uint64_t n = std::min(capacity_, count - window_first_);
    const std::uint32_t d = source_->d_model();

    activations_.resize(n * d);
    complexities_.resize(n);
    source_->read(window_first_, n, activations_.data(), complexities_.data());

    slot_ = cycle_permutation(n, seed_, next_cycle_);
    order_.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) order_[i] = window_first_ + slot_[i];
    processed_.assign(n, false);
    cursor_ = 0;
    histogram_ = complexity_histogram(complexities_);
    ++next_cycle_;
}

Batch Buffer::read_batch(std::size_t batch_size) {
    require(batch_size >= 1, "batch_size must be >= 1");
    if (remaining() == 0) refill_and_shuffle();

    const std::size_t n = std::min<std::size_t>(batch_size, remaining());
    const std::uint32_t d = source_->d_model();
    Batch b;
    b.x.resize(static_cast<Eigen::Index>(n), d);
    b.c.resize(static_cast<Eigen::Index>(n));
    b.index.resize(n);
    b.has_labels = source_->score_present();
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t s = slot_[cursor_];
        const float* row = activations_.data() + static_cast<std::size_t>(s) * d;
        for (std::uint32_t j = 0; j < d; ++j) b.x(static_cast<Eigen::Index>(i), j) = row[j];
        b.c(static_cast<Eigen::Index>(i)) = complexities_[s];
        b.index[i] = order_[cursor_];
        processed_[s] = true;
        ++cursor_;
    }
    return b;
}

} // namespace adaptivek
