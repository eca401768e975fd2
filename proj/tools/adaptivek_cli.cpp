// adaptivek command-line tool. Talks to the library only through the C API.
//
// Every setting of a subcommand is also a flag: `dict_size` becomes
// `--dict-size`. Precedence is flags > --config file > built-in defaults.

#include "adaptivek/adaptivek.h"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>

using nlohmann::json;

namespace {

const std::set<std::string> path_keys = {"data",     "test_data", "probe", "probe_data", "eval_data",
                                         "sae",      "train_data", "out",   "path",       "preset",
                                         "variant",  "k_mapping"};

const std::map<std::string, std::string> help_text = {
    {"data", "dataset path (AKDS or .jsonl)"},
    {"test_data", "held-out dataset path"},
    {"train_data", "training dataset path"},
    {"eval_data", "dataset evaluated after training"},
    {"probe", "pretrained probe (AKPB)"},
    {"probe_data", "labelled dataset for the probe fit"},
    {"sae", "SAE checkpoint (AKSA)"},
    {"out", "output dataset path"},
    {"path", "file to describe"},
    {"seed", "random seed"},
    {"variant", "relu|relu_new|topk|batch_topk|gated|p_anneal|matryoshka|adaptive_k"},
    {"k", "active latents per sample (TopK family)"},
    {"lambda_s", "sparsity penalty coefficient (penalty variants)"},
    {"dict_size", "dictionary width M"},
    {"total_steps", "optimizer steps (0 = one pass over the data)"},
    {"preset", "sweep grid: paper-k-grid | penalty-grid"},
    {"points", "sweep points as a JSON array of setting objects"},
    {"lambda", "fixed ridge lambda (skips cross-validation)"},
    {"lambda_grid", "comma-separated ridge lambda grid"},
    {"prefixes", "comma-separated matryoshka prefix sizes"},
};

std::string flag_name(const std::string& key) {
    std::string f = key;
    for (char& ch : f)
        if (ch == '_') ch = '-';
    return "--" + f;
}

std::string default_text(const json& v) { return v.is_null() ? "unset" : v.dump(); }

// Converts a flag string to the JSON type of the setting's default.
json convert(const std::string& key, const json& def, const std::string& text) {
    if (def.is_number_integer()) return json(std::stoll(text));
    if (def.is_number()) return json(std::stod(text));
    if (def.is_string() || path_keys.count(key)) return json(text);
    if (def.is_array()) {
        if (!text.empty() && text.front() == '[') return json::parse(text);
        json arr = json::array();
        std::stringstream ss(text);
        std::string item;
        const bool ints = !def.empty() ? def.front().is_number_integer() : key == "prefixes";
        while (std::getline(ss, item, ','))
            arr.push_back(ints ? json(std::stoll(item)) : json(std::stod(item)));
        return arr;
    }
    try {
        return json::parse(text);
    } catch (const json::exception&) {
        return json(text);
    }
}

json defaults_for(const std::string& sub) {
    char* out = nullptr;
    if (ak_config_resolve(sub.c_str(), "{}", &out) != AK_OK) throw std::runtime_error(ak_last_error());
    json j = json::parse(out);
    ak_string_free(out);
    return j;
}

struct Sub {
    CLI::App* app = nullptr;
    json defaults;
    std::map<std::string, std::string> values;
    std::string config_file;
    std::string run_dir;
};

int run(const std::string& name, Sub& s) {
    json cfg = json::object();
    if (!s.config_file.empty()) {
        std::ifstream in(s.config_file);
        if (!in) {
            std::cerr << "error: cannot read config file " << s.config_file << "\n";
            return 2;
        }
        try {
            cfg = json::parse(in);
        } catch (const json::exception& e) {
            std::cerr << "error: config file " << s.config_file << " is not valid JSON: " << e.what() << "\n";
            return 2;
        }
        if (!cfg.is_object()) {
            std::cerr << "error: config file must hold a JSON object\n";
            return 2;
        }
    }
    for (const auto& [key, text] : s.values) {
        try {
            cfg[key] = convert(key, s.defaults.at(key), text);
        } catch (const std::exception&) {
            std::cerr << "error: invalid value '" << text << "' for " << flag_name(key) << "\n";
            return 2;
        }
    }

    char* result = nullptr;
    const std::string text = cfg.dump();
    const ak_status st = ak_run(name.c_str(), text.c_str(), s.run_dir.empty() ? nullptr : s.run_dir.c_str(), &result);
    if (st != AK_OK) {
        std::cerr << "error: " << ak_status_string(st) << ": " << ak_last_error() << "\n";
        return st == AK_ERR_INVALID_ARGUMENT ? 2 : 1;
    }
    const json out = json::parse(result);
    ak_string_free(result);
    std::cout << out.dump(2) << "\n";
    if (out.contains("failed") && out["failed"].get<int>() > 0) {
        std::cerr << "error: " << out["failed"].get<int>() << " sweep run(s) failed\n";
        return 1;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adaptive-k sparse autoencoder toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(ak_version()));

    const std::map<std::string, std::string> descriptions = {
        {"probe-train", "fit the ridge complexity probe with cross-validation"},
        {"sae-train", "train a sparse autoencoder (three phases for adaptive_k)"},
        {"evaluate", "reconstruction metrics of a checkpoint on a dataset"},
        {"sweep", "train and evaluate a grid of sparsity settings"},
        {"synth-gen", "generate a planted synthetic dataset"},
        {"inspect", "describe a dataset, checkpoint or probe file"},
    };

    std::map<std::string, Sub> subs;
    for (const auto& [name, desc] : descriptions) {
        Sub& s = subs[name];
        s.app = app.add_subcommand(name, desc);
        try {
            s.defaults = defaults_for(name);
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 1;
        }
        for (const auto& [key, def] : s.defaults.items()) {
            const auto h = help_text.find(key);
            const std::string help = (h != help_text.end() ? h->second : key) + " [default " + default_text(def) + "]";
            std::string flags = flag_name(key);
            if (name == "inspect" && key == "path") flags = "path," + flags;
            s.app->add_option_function<std::string>(
                flags, [&s, k = key](const std::string& v) { s.values[k] = v; }, help);
        }
        if (name != "synth-gen" && name != "inspect") {
            s.app->add_option("--config", s.config_file, "flat JSON config file")->check(CLI::ExistingFile);
            s.app->add_option("--run-dir", s.run_dir, "output directory [default runs/<timestamp>-seed<seed>]");
        } else if (name == "synth-gen") {
            s.app->add_option("--config", s.config_file, "flat JSON config file")->check(CLI::ExistingFile);
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    for (auto& [name, s] : subs)
        if (s.app->parsed()) return run(name, s);
    return 2;
}
