#pragma once

// Config resolution and the end-to-end pipelines behind each CLI subcommand.
// A config is one flat JSON object; resolve_config fills in every default and
// rejects unknown keys, so the resolved document fully describes a run.

#include "adaptivek/common.hpp"
#include "adaptivek/sae_models.hpp"
#include "adaptivek/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>

namespace adaptivek {

/// Subcommands: probe-train, sae-train, evaluate, sweep, synth-gen, inspect.
nlohmann::json default_config(const std::string& subcommand);
nlohmann::json resolve_config(const std::string& subcommand, const nlohmann::json& user);

VariantConfig variant_from_config(const nlohmann::json& cfg);
TrainConfig train_config_from(const nlohmann::json& cfg, const std::optional<VariantConfig>& variant = std::nullopt);

/// Hex SHA-256 of a file's bytes.
std::string file_sha256(const std::filesystem::path& path);

/// `<root>/<YYYYmmdd-HHMMSS>-seed<seed>`, suffixed when it already exists.
std::filesystem::path make_run_dir(const std::filesystem::path& root, std::uint64_t seed);

/// Each run writes config.json and manifest.json into run_dir plus its own
/// outputs, and returns a JSON summary. run_dir is created when missing.
nlohmann::json run_probe_train(const nlohmann::json& cfg, const std::filesystem::path& run_dir);
nlohmann::json run_sae_train(const nlohmann::json& cfg, const std::filesystem::path& run_dir);
nlohmann::json run_evaluate(const nlohmann::json& cfg, const std::filesystem::path& run_dir);
/// The summary carries "failed": number of rows whose run failed.
nlohmann::json run_sweep(const nlohmann::json& cfg, const std::filesystem::path& run_dir);

/// Writes the dataset named by cfg["out"]; no run directory.
nlohmann::json run_synth_gen(const nlohmann::json& cfg);
/// Describes an AKDS/JSONL dataset, AKSA checkpoint or AKPB probe by content.
nlohmann::json inspect_file(const std::filesystem::path& path);

} // namespace adaptivek
