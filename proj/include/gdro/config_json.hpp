#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gdro/data.hpp"
#include "gdro/model.hpp"
#include "gdro/robust.hpp"
#include "gdro/trainer.hpp"

namespace gdro {

/// Invalid or unparseable configuration; the message names the offending key.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace cfg {

template <class T>
T field(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const std::exception& e) {
        throw ConfigError("config key \"" + std::string(key) + "\": " + e.what());
    }
}

inline std::string enum_error(const char* key, const std::string& got, const char* expected) {
    return "config key \"" + std::string(key) + "\": unknown value \"" + got + "\" (expected " + expected + ")";
}

}  // namespace cfg

inline const char* aggregator_name(AggregatorKind k) { return k == AggregatorKind::mean ? "mean" : "transformer"; }

inline AggregatorKind parse_aggregator(const std::string& s) {
    if (s == "mean") return AggregatorKind::mean;
    if (s == "transformer") return AggregatorKind::transformer;
    throw ConfigError(cfg::enum_error("model.aggregator", s, "mean|transformer"));
}

inline const char* update_mode_name(UpdateMode m) {
    switch (m) {
        case UpdateMode::vanilla_eg: return "vanilla_eg";
        case UpdateMode::kl_mirror: return "kl_mirror";
        case UpdateMode::kl_gradient: return "kl_gradient";
    }
    return "?";
}

inline UpdateMode parse_update_mode(const std::string& s) {
    if (s == "vanilla_eg") return UpdateMode::vanilla_eg;
    if (s == "kl_mirror") return UpdateMode::kl_mirror;
    if (s == "kl_gradient") return UpdateMode::kl_gradient;
    throw ConfigError(cfg::enum_error("dro.update_mode", s, "vanilla_eg|kl_mirror|kl_gradient"));
}

inline Objective parse_objective(const std::string& s) {
    if (s == "gdro") return Objective::gdro;
    if (s == "wce") return Objective::wce;
    if (s == "focal") return Objective::focal;
    throw ConfigError(cfg::enum_error("objective", s, "gdro|wce|focal"));
}

inline const char* regime_name(Regime r) { return r == Regime::task1_sites ? "task1_sites" : "task2_gender_class"; }

inline Regime parse_regime(const std::string& s) {
    if (s == "task1_sites") return Regime::task1_sites;
    if (s == "task2_gender_class") return Regime::task2_gender_class;
    throw ConfigError(cfg::enum_error("data.regime", s, "task1_sites|task2_gender_class"));
}

inline Grouping parse_grouping(const std::string& s) {
    if (s == "site") return Grouping::site;
    if (s == "gender") return Grouping::gender;
    throw ConfigError(cfg::enum_error("eval_grouping", s, "site|gender"));
}

// ---- ModelConfig ------------------------------------------------------------

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"input_dim", c.input_dim},
                       {"embed_dim", c.embed_dim},
                       {"slices", c.slices},
                       {"num_classes", c.num_classes},
                       {"aggregator", aggregator_name(c.aggregator)},
                       {"layers", c.layers},
                       {"heads", c.heads},
                       {"ff_dim", c.ff_dim},
                       {"dropout_p", c.dropout_p},
                       {"encoder_hidden", c.encoder_hidden},
                       {"positional_encoding", c.positional_encoding}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.input_dim = cfg::field(j, "input_dim", c.input_dim);
    c.embed_dim = cfg::field(j, "embed_dim", c.embed_dim);
    c.slices = cfg::field(j, "slices", c.slices);
    c.num_classes = cfg::field(j, "num_classes", c.num_classes);
    c.aggregator = parse_aggregator(cfg::field<std::string>(j, "aggregator", aggregator_name(c.aggregator)));
    c.layers = cfg::field(j, "layers", c.layers);
    c.heads = cfg::field(j, "heads", c.heads);
    c.ff_dim = cfg::field(j, "ff_dim", c.ff_dim);
    c.dropout_p = cfg::field(j, "dropout_p", c.dropout_p);
    c.encoder_hidden = cfg::field(j, "encoder_hidden", c.encoder_hidden);
    c.positional_encoding = cfg::field(j, "positional_encoding", c.positional_encoding);
}

// ---- DroConfig --------------------------------------------------------------

inline void to_json(nlohmann::json& j, const DroConfig& c) {
    j = nlohmann::json{{"eta_dro", c.eta_dro}, {"alpha", c.alpha}, {"update_mode", update_mode_name(c.update_mode)}};
}

inline void from_json(const nlohmann::json& j, DroConfig& c) {
    c.eta_dro = cfg::field(j, "eta_dro", c.eta_dro);
    c.alpha = cfg::field(j, "alpha", c.alpha);
    c.update_mode = parse_update_mode(cfg::field<std::string>(j, "update_mode", update_mode_name(c.update_mode)));
}

// ---- AdamWConfig ------------------------------------------------------------

inline void to_json(nlohmann::json& j, const AdamWConfig& c) {
    j = nlohmann::json{{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay}};
}

inline void from_json(const nlohmann::json& j, AdamWConfig& c) {
    c.beta1 = cfg::field(j, "beta1", c.beta1);
    c.beta2 = cfg::field(j, "beta2", c.beta2);
    c.eps = cfg::field(j, "eps", c.eps);
    c.weight_decay = cfg::field(j, "weight_decay", c.weight_decay);
}

// ---- GenConfig --------------------------------------------------------------

inline void to_json(nlohmann::json& j, const GenConfig& c) {
    j = nlohmann::json{{"regime", regime_name(c.regime)},
                       {"num_groups", c.num_groups},
                       {"classes", c.classes},
                       {"train_counts", c.train_counts},
                       {"val_counts", c.val_counts},
                       {"slices", c.slices},
                       {"input_dim", c.input_dim},
                       {"class_separation", c.class_separation},
                       {"site_shift_scale", c.site_shift_scale},
                       {"noise_sigma", c.noise_sigma},
                       {"scale", c.scale},
                       {"paper_literal_grouping", c.paper_literal_grouping},
                       {"seed", c.seed}};
    if (c.pathological_group >= 0) {
        j["pathological_group"] = c.pathological_group;
    } else {
        j["pathological_group"] = nullptr;
    }
}

inline void from_json(const nlohmann::json& j, GenConfig& c) {
    // A "preset" key seeds the whole config from a built-in grid; any other
    // keys then override it.
    if (j.contains("preset")) {
        const auto name = cfg::field<std::string>(j, "preset", "");
        if (name == "task1_sites") {
            c = task1_sites_config();
        } else if (name == "task2_gender_class") {
            c = task2_gender_class_config();
        } else if (name == "balanced") {
            c = balanced_config();
        } else {
            throw ConfigError(cfg::enum_error("data.preset", name, "task1_sites|task2_gender_class|balanced"));
        }
    }
    c.regime = parse_regime(cfg::field<std::string>(j, "regime", regime_name(c.regime)));
    c.num_groups = cfg::field(j, "num_groups", c.num_groups);
    c.classes = cfg::field(j, "classes", c.classes);
    c.train_counts = cfg::field(j, "train_counts", c.train_counts);
    c.val_counts = cfg::field(j, "val_counts", c.val_counts);
    c.slices = cfg::field(j, "slices", c.slices);
    c.input_dim = cfg::field(j, "input_dim", c.input_dim);
    c.class_separation = cfg::field(j, "class_separation", c.class_separation);
    c.site_shift_scale = cfg::field(j, "site_shift_scale", c.site_shift_scale);
    c.noise_sigma = cfg::field(j, "noise_sigma", c.noise_sigma);
    c.pathological_group = cfg::field(j, "pathological_group", c.pathological_group);
    c.scale = cfg::field(j, "scale", c.scale);
    c.paper_literal_grouping = cfg::field(j, "paper_literal_grouping", c.paper_literal_grouping);
    c.seed = cfg::field(j, "seed", c.seed);
}

// ---- RunConfig --------------------------------------------------------------

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{{"model", c.model},
                       {"dro", c.dro},
                       {"objective", objective_name(c.objective)},
                       {"gamma", c.gamma},
                       {"base_lr", c.base_lr},
                       {"warmup_steps", c.warmup_steps},
                       {"batch_size", c.batch_size},
                       {"max_epochs", c.max_epochs},
                       {"patience", c.patience},
                       {"adamw", c.adamw},
                       {"seed", c.seed},
                       {"seeds", c.seeds},
                       {"data", c.data},
                       {"train_path", c.train_path},
                       {"val_path", c.val_path},
                       {"alphas", c.alphas}};
    if (c.eval_grouping) j["eval_grouping"] = grouping_name(*c.eval_grouping);
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
    if (j.contains("model")) from_json(j.at("model"), c.model);
    if (j.contains("dro")) from_json(j.at("dro"), c.dro);
    c.objective = parse_objective(cfg::field<std::string>(j, "objective", objective_name(c.objective)));
    c.gamma = cfg::field(j, "gamma", c.gamma);
    c.base_lr = cfg::field(j, "base_lr", c.base_lr);
    c.warmup_steps = cfg::field(j, "warmup_steps", c.warmup_steps);
    c.batch_size = cfg::field(j, "batch_size", c.batch_size);
    c.max_epochs = cfg::field(j, "max_epochs", c.max_epochs);
    c.patience = cfg::field(j, "patience", c.patience);
    if (j.contains("adamw")) from_json(j.at("adamw"), c.adamw);
    c.seed = cfg::field(j, "seed", c.seed);
    c.seeds = cfg::field(j, "seeds", c.seeds);
    if (j.contains("data")) from_json(j.at("data"), c.data);
    c.train_path = cfg::field(j, "train_path", c.train_path);
    c.val_path = cfg::field(j, "val_path", c.val_path);
    c.alphas = cfg::field(j, "alphas", c.alphas);
    if (j.contains("eval_grouping") && !j.at("eval_grouping").is_null()) {
        c.eval_grouping = parse_grouping(cfg::field<std::string>(j, "eval_grouping", "site"));
    }
}

/// Applies "a.b.c=value" overrides onto a config JSON document. The path must
/// already exist; values parse as JSON first, falling back to a string.
inline void apply_override(nlohmann::json& doc, const std::string& spec) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override \"" + spec + "\" must look like key.path=value");
    }
    const std::string path = spec.substr(0, eq);
    const std::string raw = spec.substr(eq + 1);

    std::vector<std::string> tokens;
    std::size_t start = 0;
    for (;;) {
        const auto dot = path.find('.', start);
        tokens.push_back(path.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
        if (dot == std::string::npos) break;
        start = dot + 1;
    }

    nlohmann::json* node = &doc;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
        if (!node->is_object() || !node->contains(tokens[i])) {
            throw ConfigError("override key \"" + path + "\": no such config key \"" + tokens[i] + "\"");
        }
        node = &node->at(tokens[i]);
    }
    if (!node->is_object() || !node->contains(tokens.back())) {
        throw ConfigError("override key \"" + path + "\": no such config key \"" + tokens.back() + "\"");
    }

    nlohmann::json value = nlohmann::json::parse(raw, nullptr, /*allow_exceptions=*/false);
    if (value.is_discarded()) value = raw;  // plain string
    (*node)[tokens.back()] = std::move(value);
}

}  // namespace gdro
