#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "facl/data.hpp"
#include "facl/error.hpp"
#include "facl/protocol.hpp"

namespace facl {

// Everything one CLI invocation needs. Empty `store` means a synthetic stream
// generated from `data`, `separation` and `protocol.seed`.
struct RunConfig {
    DatasetSpec data{};
    std::string store;
    double separation = 3.0;
    ProtocolConfig protocol{};
    std::string out_dir = "out";
    std::vector<double> sweep_deltas{0.0, 0.25, 0.5, 0.75, 1.0};
    std::vector<std::uint64_t> sweep_seeds;  // empty: just `protocol.seed`
    std::vector<AblationVariant> ablate_variants = ablation_grid();

    void validate() const;
};

// ---------------------------------------------------------------------------
// Scalar text codecs. Doubles print in shortest round-trip form.

inline std::string format_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

namespace detail {

inline std::string trim(std::string_view s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string_view::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return std::string(s.substr(a, b - a + 1));
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    if (trim(s).empty()) return out;
    std::size_t start = 0;
    while (true) {
        const auto comma = s.find(',', start);
        out.push_back(trim(s.substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    const char* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (text.empty() || ec != std::errc{} || ptr != end) {
        throw ConfigError("key '" + key + "' has invalid value '" + text + "'", key);
    }
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("key '" + key + "' expects true or false, got '" + text + "'", key);
}

template <class T, class F>
std::string join(const std::vector<T>& items, F&& fmt) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + fmt(items[i]);
    return out;
}

struct ConfigKey {
    std::string name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

// Wraps an engine parser so its ValueError surfaces as a ConfigError on `key`.
template <class F>
auto as_config(const std::string& key, const std::string& text, F&& f) {
    try {
        return f(text);
    } catch (const ValueError& e) {
        throw ConfigError("key '" + key + "': " + e.what(), key);
    }
}

inline const std::vector<ConfigKey>& config_keys() {
    using U = std::size_t;
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> k;
        auto count = [&k](const char* name, auto field) {
            k.push_back({name, [field](const RunConfig& c) { return std::to_string(field(c)); },
                         [field, name](RunConfig& c, const std::string& v) { field(c) = parse_number<U>(name, v); }});
        };
        auto real = [&k](const char* name, auto field) {
            k.push_back({name, [field](const RunConfig& c) { return format_double(field(c)); },
                         [field, name](RunConfig& c, const std::string& v) { field(c) = parse_number<double>(name, v); }});
        };
        count("base_classes", [](auto& c) -> auto& { return c.data.base_classes; });
        count("inc_classes", [](auto& c) -> auto& { return c.data.inc_classes; });
        count("sessions", [](auto& c) -> auto& { return c.data.sessions; });
        count("ways", [](auto& c) -> auto& { return c.data.ways; });
        count("shots", [](auto& c) -> auto& { return c.data.shots; });
        count("input_dim", [](auto& c) -> auto& { return c.data.input_dim; });
        count("train_per_class", [](auto& c) -> auto& { return c.data.train_per_class; });
        count("test_per_class", [](auto& c) -> auto& { return c.data.test_per_class; });
        real("noise_sd", [](auto& c) -> auto& { return c.data.noise_sd; });
        real("separation", [](auto& c) -> auto& { return c.separation; });
        k.push_back({"store", [](const RunConfig& c) { return c.store; },
                     [](RunConfig& c, const std::string& v) { c.store = v; }});

        k.push_back({"hidden_dims",
                     [](const RunConfig& c) {
                         return join(c.protocol.hidden_dims, [](U v) { return std::to_string(v); });
                     },
                     [](RunConfig& c, const std::string& v) {
                         c.protocol.hidden_dims.clear();
                         for (const auto& s : split_list(v)) c.protocol.hidden_dims.push_back(parse_number<U>("hidden_dims", s));
                     }});
        count("feature_dim", [](auto& c) -> auto& { return c.protocol.feature_dim; });
        count("projection_dim", [](auto& c) -> auto& { return c.protocol.projection_dim; });
        count("epochs_base", [](auto& c) -> auto& { return c.protocol.epochs_base; });
        count("epochs_incremental", [](auto& c) -> auto& { return c.protocol.epochs_incremental; });
        k.push_back({"finetune_incremental",
                     [](const RunConfig& c) { return std::string(c.protocol.finetune_incremental ? "true" : "false"); },
                     [](RunConfig& c, const std::string& v) {
                         c.protocol.finetune_incremental = parse_bool("finetune_incremental", v);
                     }});
        count("batch", [](auto& c) -> auto& { return c.protocol.batch; });
        real("lr", [](auto& c) -> auto& { return c.protocol.lr; });
        real("momentum", [](auto& c) -> auto& { return c.protocol.sgd_momentum; });
        count("transforms", [](auto& c) -> auto& { return c.protocol.transforms; });
        real("delta", [](auto& c) -> auto& { return c.protocol.delta; });
        real("tau", [](auto& c) -> auto& { return c.protocol.tau; });
        count("queue", [](auto& c) -> auto& { return c.protocol.queue; });
        real("ema", [](auto& c) -> auto& { return c.protocol.ema; });
        real("noise_scale", [](auto& c) -> auto& { return c.protocol.noise_scale; });
        real("view_jitter", [](auto& c) -> auto& { return c.protocol.view_jitter; });
        real("view_strength", [](auto& c) -> auto& { return c.protocol.view_strength; });
        count("image_channels", [](auto& c) -> auto& { return c.protocol.image_channels; });
        count("image_height", [](auto& c) -> auto& { return c.protocol.image_height; });
        count("image_width", [](auto& c) -> auto& { return c.protocol.image_width; });
        k.push_back({"aggregation", [](const RunConfig& c) { return to_string(c.protocol.aggregation); },
                     [](RunConfig& c, const std::string& v) {
                         c.protocol.aggregation = as_config("aggregation", v, parse_aggregation);
                     }});
        k.push_back({"variant", [](const RunConfig& c) { return to_string(c.protocol.variant); },
                     [](RunConfig& c, const std::string& v) {
                         c.protocol.variant = as_config("variant", v, parse_variant);
                     }});
        k.push_back({"seed", [](const RunConfig& c) { return std::to_string(c.protocol.seed); },
                     [](RunConfig& c, const std::string& v) { c.protocol.seed = parse_number<std::uint64_t>("seed", v); }});

        k.push_back({"out_dir", [](const RunConfig& c) { return c.out_dir; },
                     [](RunConfig& c, const std::string& v) { c.out_dir = v; }});
        k.push_back({"sweep_deltas", [](const RunConfig& c) { return join(c.sweep_deltas, format_double); },
                     [](RunConfig& c, const std::string& v) {
                         c.sweep_deltas.clear();
                         for (const auto& s : split_list(v)) c.sweep_deltas.push_back(parse_number<double>("sweep_deltas", s));
                     }});
        k.push_back({"sweep_seeds",
                     [](const RunConfig& c) {
                         return join(c.sweep_seeds, [](std::uint64_t v) { return std::to_string(v); });
                     },
                     [](RunConfig& c, const std::string& v) {
                         c.sweep_seeds.clear();
                         for (const auto& s : split_list(v))
                             c.sweep_seeds.push_back(parse_number<std::uint64_t>("sweep_seeds", s));
                     }});
        k.push_back({"ablate_variants",
                     [](const RunConfig& c) {
                         return join(c.ablate_variants, [](const AblationVariant& v) { return to_string(v); });
                     },
                     [](RunConfig& c, const std::string& v) {
                         c.ablate_variants.clear();
                         for (const auto& s : split_list(v))
                             c.ablate_variants.push_back(as_config("ablate_variants", s, parse_variant));
                     }});
        return k;
    }();
    return keys;
}

}  // namespace detail

inline void RunConfig::validate() const {
    auto wrap = [](const char* what, auto&& f) {
        try {
            f();
        } catch (const ValueError& e) {
            throw ConfigError(std::string(what) + ": " + e.what());
        }
    };
    wrap("dataset", [&] { data.validate(); });
    wrap("protocol", [&] { protocol.validate(); });
    if (!(separation >= 0.0)) throw ConfigError("key 'separation' must be non-negative", "separation");
    if (sweep_deltas.empty()) throw ConfigError("key 'sweep_deltas' needs at least one value", "sweep_deltas");
    for (double d : sweep_deltas)
        if (!(d >= 0.0 && d <= 1.0)) throw ConfigError("key 'sweep_deltas' has a value outside [0, 1]", "sweep_deltas");
    if (ablate_variants.empty()) throw ConfigError("key 'ablate_variants' needs at least one variant", "ablate_variants");
}

/// Parses flat `key = value` lines. '#' starts a comment line; blank lines are
/// skipped. Unknown or repeated keys are errors naming the key.
inline RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = detail::trim(line);
        if (t.empty() || t.front() == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + " is not key=value");
        }
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string value = detail::trim(t.substr(eq + 1));
        const auto& keys = detail::config_keys();
        const auto it = std::find_if(keys.begin(), keys.end(), [&](const detail::ConfigKey& k) { return k.name == key; });
        if (it == keys.end()) throw ConfigError("unknown key '" + key + "'", key);
        if (!seen.insert(key).second) throw ConfigError("key '" + key + "' given twice", key);
        it->set(cfg, value);
    }
    cfg.validate();
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

/// Every key with its resolved value, in a fixed order; parse_config of the
/// result reproduces the config exactly.
inline std::string config_to_text(const RunConfig& cfg) {
    std::string out;
    for (const auto& k : detail::config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
    return out;
}

inline bool operator==(const RunConfig& a, const RunConfig& b) { return config_to_text(a) == config_to_text(b); }

}  // namespace facl
