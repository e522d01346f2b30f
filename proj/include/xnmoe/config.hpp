#pragma once

// Flat configuration: one `key = value` per line, `#` starts a comment, blank
// lines are ignored. Keys are namespaced (model., moe., data., training., eval.)
// and must appear in the schema; values are checked against the key's type.

#include "xnmoe/data.hpp"
#include "xnmoe/model.hpp"
#include "xnmoe/training.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace xnmoe {

enum class ValueType { string, integer, real, boolean };

struct KeySpec {
    ValueType type;
    std::string default_value;
    std::string help;
    /// Allowed values for enumerated string keys (empty: any).
    std::vector<std::string> choices = {};
};

inline const std::map<std::string, KeySpec>& config_schema()
{
    using V = ValueType;
    static const std::map<std::string, KeySpec> schema{
        {"seed", {V::integer, "0", "model initialisation and training seed"}},
        {"model.profile", {V::string, "desk", "architecture profile", {"paper", "desk", "grad-check"}}},
        {"model.num_classes", {V::integer, "0", "class count; 0 takes it from the class list (7 without data)"}},
        {"model.label_smoothing", {V::real, "0.1", "label smoothing epsilon"}},
        {"model.bn_momentum", {V::real, "0.01", "batch-norm running-statistics momentum"}},
        {"moe.num_experts", {V::integer, "4", "experts per MoE site"}},
        {"moe.top_k", {V::integer, "2", "experts selected per sample"}},
        {"moe.expert_dim", {V::integer, "0", "expert output width; 0 keeps the input width"}},
        {"moe.renormalize", {V::boolean, "false", "divide the combination by the selected gate mass"}},
        {"data.root", {V::string, ".", "directory image paths are relative to"}},
        {"data.labels", {V::string, "", "manifest CSV"}},
        {"data.classes", {V::string, "", "comma-separated class names; empty uses sorted labels"}},
        {"data.batch_size", {V::integer, "32", "batch size"}},
        {"data.test_fraction", {V::real, "0.2", "stratified test share when the manifest has no split column; 0 keeps all in train"}},
        {"data.val_fraction", {V::real, "0.1", "stratified validation share carved from train"}},
        {"data.seed", {V::integer, "0", "split and shuffle seed"}},
        {"data.on_error", {V::string, "abort", "unreadable images", {"skip", "abort"}}},
        {"data.prefetch", {V::integer, "0", "batches decoded ahead on a worker thread"}},
        {"training.epochs", {V::integer, "15", "maximum epochs"}},
        {"training.lr", {V::real, "1e-4", "Adam learning rate"}},
        {"training.beta1", {V::real, "0.9", "Adam beta1"}},
        {"training.beta2", {V::real, "0.999", "Adam beta2"}},
        {"training.adam_epsilon", {V::real, "1e-8", "Adam epsilon"}},
        {"training.lr_reduce_factor", {V::real, "0.5", "learning-rate multiplier on plateau"}},
        {"training.lr_reduce_patience", {V::integer, "2", "epochs without improvement per reduction"}},
        {"training.lr_floor", {V::real, "1e-7", "minimum learning rate"}},
        {"training.early_stop_patience", {V::integer, "3", "epochs without improvement before stopping"}},
        {"training.validation", {V::string, "carve", "validation source", {"carve", "test", "train"}}},
        {"training.stop_at_val_acc", {V::real, "0", "stop once validation accuracy reaches this; 0 disables"}},
        {"training.stop_at_train_acc", {V::real, "0", "stop once training accuracy reaches this; 0 disables"}},
        {"training.checked", {V::boolean, "true", "abort on NaN/Inf activations or gradients"}},
        {"training.resume", {V::boolean, "false", "continue from <out>/last.ckpt"}},
        {"eval.split", {V::string, "test", "samples to evaluate", {"train", "test", "all"}}},
        {"eval.checkpoint", {V::string, "", "checkpoint path; empty uses <out>/best.ckpt"}},
    };
    return schema;
}

namespace detail {

inline std::string trim(std::string s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& v, bool& out)
{
    if (v == "true" || v == "1" || v == "yes") return out = true, true;
    if (v == "false" || v == "0" || v == "no") return out = false, true;
    return false;
}

inline bool parse_integer(const std::string& v, std::uint64_t& out)
{
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    return r.ec == std::errc() && r.ptr == v.data() + v.size();
}

inline bool parse_real(const std::string& v, double& out)
{
    try {
        std::size_t used = 0;
        out = std::stod(v, &used);
        return used == v.size() && std::isfinite(out);
    } catch (const std::exception&) {
        return false;
    }
}

} // namespace detail

/// Resolved key/value view; every schema key is present after construction.
class RunConfig {
public:
    RunConfig()
    {
        for (const auto& [k, spec] : config_schema()) values_[k] = spec.default_value;
    }

    /// Sets one key after validating its name and value.
    void set(const std::string& key, const std::string& raw)
    {
        const auto& schema = config_schema();
        auto it = schema.find(key);
        if (it == schema.end()) throw ConfigError("unknown config key '" + key + "'");
        const std::string value = detail::trim(raw);
        const auto& spec = it->second;
        bool ok = true;
        switch (spec.type) {
        case ValueType::integer: {
            std::uint64_t v;
            ok = detail::parse_integer(value, v);
            break;
        }
        case ValueType::real: {
            double v;
            ok = detail::parse_real(value, v);
            break;
        }
        case ValueType::boolean: {
            bool v;
            ok = detail::parse_bool(value, v);
            break;
        }
        case ValueType::string:
            ok = spec.choices.empty() || std::find(spec.choices.begin(), spec.choices.end(), value) != spec.choices.end();
            break;
        }
        if (!ok) throw ConfigError("invalid value '" + value + "' for config key '" + key + "'");
        values_[key] = value;
    }

    /// `key=value` as given on the command line.
    void apply_override(const std::string& assignment)
    {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos) throw ConfigError("override must have the form key=value: '" + assignment + "'");
        set(detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
    }

    void load_text(const std::string& text, const std::string& origin = "config")
    {
        std::istringstream in(text);
        std::string line;
        std::size_t n = 0;
        while (std::getline(in, line)) {
            ++n;
            if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
            line = detail::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(n) + ": expected 'key = value'");
            try {
                set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
            } catch (const ConfigError& e) {
                throw ConfigError(origin + ":" + std::to_string(n) + ": " + e.what());
            }
        }
    }

    void load_file(const std::filesystem::path& path)
    {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config file " + path.string());
        std::stringstream ss;
        ss << in.rdbuf();
        load_text(ss.str(), path.string());
    }

    const std::string& str(const std::string& key) const
    {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
        return it->second;
    }
    std::uint64_t integer(const std::string& key) const
    {
        std::uint64_t v = 0;
        detail::parse_integer(str(key), v);
        return v;
    }
    double real(const std::string& key) const
    {
        double v = 0;
        detail::parse_real(str(key), v);
        return v;
    }
    bool boolean(const std::string& key) const
    {
        bool v = false;
        detail::parse_bool(str(key), v);
        return v;
    }

    /// Every key in sorted order, one `key = value` per line.
    std::string resolved() const
    {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

    std::vector<std::string> class_names() const
    {
        std::vector<std::string> out;
        std::string list = str("data.classes");
        std::size_t pos = 0;
        while (!list.empty() && pos <= list.size()) {
            const auto comma = list.find(',', pos);
            const auto item = detail::trim(list.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
            if (item.empty()) throw ConfigError("data.classes contains an empty name");
            out.push_back(item);
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        return out;
    }

    /// Model description for `num_classes` classes (model.num_classes wins when set).
    ModelConfig model_config(std::size_t classes_from_data = 0) const
    {
        std::size_t k = static_cast<std::size_t>(integer("model.num_classes"));
        if (k == 0) k = classes_from_data ? classes_from_data : 7;
        if (classes_from_data > k)
            throw ConfigError("model.num_classes = " + std::to_string(k) + " is smaller than the "
                              + std::to_string(classes_from_data) + " classes in the data");
        ModelConfig m = ModelConfig::from_profile(str("model.profile"), k);
        m.label_smoothing = real("model.label_smoothing");
        m.bn_momentum = real("model.bn_momentum");
        for (MoEConfig* moe : {&m.moe_a, &m.moe_b}) {
            moe->num_experts = static_cast<std::size_t>(integer("moe.num_experts"));
            moe->top_k = static_cast<std::size_t>(integer("moe.top_k"));
            moe->expert_dim = static_cast<std::size_t>(integer("moe.expert_dim"));
            moe->renormalize = boolean("moe.renormalize");
        }
        m.validate();
        m.moe_a.validate();
        m.moe_b.validate();
        return m;
    }

    TrainConfig train_config() const
    {
        TrainConfig t;
        t.epochs = static_cast<std::size_t>(integer("training.epochs"));
        t.batch_size = static_cast<std::size_t>(integer("data.batch_size"));
        t.adam.lr = real("training.lr");
        t.adam.beta1 = real("training.beta1");
        t.adam.beta2 = real("training.beta2");
        t.adam.epsilon = real("training.adam_epsilon");
        t.lr_reduce_factor = real("training.lr_reduce_factor");
        t.lr_reduce_patience = static_cast<std::size_t>(integer("training.lr_reduce_patience"));
        t.lr_floor = real("training.lr_floor");
        t.early_stop_patience = static_cast<std::size_t>(integer("training.early_stop_patience"));
        t.seed = integer("seed");
        if (const double s = real("training.stop_at_val_acc"); s > 0.0) t.stop_at_val_acc = s;
        if (const double s = real("training.stop_at_train_acc"); s > 0.0) t.stop_at_train_acc = s;
        t.checked = boolean("training.checked");
        t.validate();
        return t;
    }

    GeneratorOptions generator_options(std::size_t image_size, bool shuffle) const
    {
        GeneratorOptions g;
        g.batch_size = static_cast<std::size_t>(integer("data.batch_size"));
        if (g.batch_size == 0) throw ConfigError("data.batch_size must be positive");
        g.shuffle = shuffle;
        g.seed = integer("data.seed");
        g.on_error = str("data.on_error") == "skip" ? OnError::skip : OnError::abort;
        g.prefetch = static_cast<std::size_t>(integer("data.prefetch"));
        g.image_size = image_size;
        return g;
    }

private:
    std::map<std::string, std::string> values_;
};

} // namespace xnmoe
