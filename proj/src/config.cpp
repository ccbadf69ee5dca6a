#include "mde/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mde/errors.hpp"
#include "mde/hash.hpp"

namespace mde {

using json = nlohmann::ordered_json;

namespace {

[[noreturn]] void bad_key(const std::string& path) {
    throw UsageError("unknown config key: " + path);
}

void expect_object(const json& j, const std::string& path) {
    if (!j.is_object())
        throw UsageError("config section '" + path + "' must be an object");
}

void check_keys(const json& obj, const std::string& section,
                std::initializer_list<const char*> keys) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool known = false;
        for (const char* k : keys)
            if (it.key() == k) {
                known = true;
                break;
            }
        if (!known)
            bad_key(section.empty() ? it.key() : section + "." + it.key());
    }
}

std::string key_path(const std::string& section, const char* key) {
    return section.empty() ? key : section + "." + key;
}

double get_double(const json& o, const std::string& sec, const char* key, double def) {
    if (!o.contains(key))
        return def;
    const json& v = o.at(key);
    if (!v.is_number())
        throw UsageError("config key " + key_path(sec, key) + " must be a number");
    return v.get<double>();
}

std::size_t get_size(const json& o, const std::string& sec, const char* key,
                     std::size_t def) {
    if (!o.contains(key))
        return def;
    const json& v = o.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && v.get<std::int64_t>() < 0))
        throw UsageError("config key " + key_path(sec, key) +
                         " must be a non-negative integer");
    return static_cast<std::size_t>(v.get<std::int64_t>());
}

int get_int(const json& o, const std::string& sec, const char* key, int def) {
    if (!o.contains(key))
        return def;
    const json& v = o.at(key);
    if (!v.is_number_integer())
        throw UsageError("config key " + key_path(sec, key) + " must be an integer");
    return v.get<int>();
}

bool get_bool(const json& o, const std::string& sec, const char* key, bool def) {
    if (!o.contains(key))
        return def;
    const json& v = o.at(key);
    if (!v.is_boolean())
        throw UsageError("config key " + key_path(sec, key) + " must be a boolean");
    return v.get<bool>();
}

std::string get_string(const json& o, const std::string& sec, const char* key,
                       const std::string& def) {
    if (!o.contains(key))
        return def;
    const json& v = o.at(key);
    if (!v.is_string())
        throw UsageError("config key " + key_path(sec, key) + " must be a string");
    return v.get<std::string>();
}

AblationSpec parse_ablation(const json& o, const std::string& sec) {
    expect_object(o, sec);
    check_keys(o, sec,
               {"name", "disable_mda", "disable_msa", "disable_nlt", "fixed_pref_weight",
                "independent_weights"});
    AblationSpec a;
    a.name = get_string(o, sec, "name", "");
    a.disable_mda = get_bool(o, sec, "disable_mda", false);
    a.disable_msa = get_bool(o, sec, "disable_msa", false);
    a.disable_nlt = get_bool(o, sec, "disable_nlt", false);
    if (o.contains("fixed_pref_weight") && !o.at("fixed_pref_weight").is_null())
        a.fixed_pref_weight = get_double(o, sec, "fixed_pref_weight", 0.0);
    a.independent_weights = get_bool(o, sec, "independent_weights", false);
    return a;
}

json ablation_to_json(const AblationSpec& a) {
    json o = json::object();
    o["name"] = a.name;
    o["disable_mda"] = a.disable_mda;
    o["disable_msa"] = a.disable_msa;
    o["disable_nlt"] = a.disable_nlt;
    if (a.fixed_pref_weight)
        o["fixed_pref_weight"] = *a.fixed_pref_weight;
    o["independent_weights"] = a.independent_weights;
    return o;
}

} // namespace

RunConfig parse_config_json(const std::string& text, const std::string& source_name) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw UsageError("config " + source_name + " is not valid JSON: " + e.what());
    }
    expect_object(j, source_name);
    check_keys(j, "",
               {"seed", "paths", "model", "losses", "optim", "eval", "split", "synth",
                "ablation", "ablate", "gradcheck"});

    RunConfig c;
    if (j.contains("seed")) {
        const json& s = j.at("seed");
        if (!s.is_number_integer() || s.get<std::int64_t>() < 0)
            throw UsageError("config key seed must be a non-negative integer");
        c.seed = s.get<std::uint64_t>();
    }
    if (j.contains("paths")) {
        const json& o = j.at("paths");
        expect_object(o, "paths");
        check_keys(o, "paths",
                   {"interactions", "features_visual", "features_textual", "output_dir"});
        c.paths.interactions = get_string(o, "paths", "interactions", "");
        c.paths.features_visual = get_string(o, "paths", "features_visual", "");
        c.paths.features_textual = get_string(o, "paths", "features_textual", "");
        c.paths.output_dir = get_string(o, "paths", "output_dir", "out");
    }
    if (j.contains("model")) {
        const json& o = j.at("model");
        expect_object(o, "model");
        check_keys(o, "model", {"embed_dim", "layers", "knn_item", "knn_user"});
        c.model.embed_dim = get_size(o, "model", "embed_dim", 64);
        c.model.layers = get_int(o, "model", "layers", 2);
        c.model.knn_item = get_size(o, "model", "knn_item", 10);
        c.model.knn_user = get_size(o, "model", "knn_user", 40);
    }
    if (j.contains("losses")) {
        const json& o = j.at("losses");
        expect_object(o, "losses");
        check_keys(o, "losses",
                   {"sigma_diff", "sigma_cl", "sigma_reg", "tau", "cl_scope",
                    "mda_squared", "anchor_sample"});
        c.losses.sigma_diff = get_double(o, "losses", "sigma_diff", 0.1);
        c.losses.sigma_cl = get_double(o, "losses", "sigma_cl", 0.01);
        c.losses.sigma_reg = get_double(o, "losses", "sigma_reg", 1e-4);
        c.losses.tau = get_double(o, "losses", "tau", 0.2);
        c.losses.cl_scope =
            cl_scope_from_string(get_string(o, "losses", "cl_scope", "full"));
        c.losses.mda_squared = get_bool(o, "losses", "mda_squared", false);
        c.losses.anchor_sample = get_size(o, "losses", "anchor_sample", 0);
    }
    if (j.contains("optim")) {
        const json& o = j.at("optim");
        expect_object(o, "optim");
        check_keys(o, "optim",
                   {"lr", "batch_size", "max_epochs", "patience", "early_stopping"});
        c.optim.lr = get_double(o, "optim", "lr", 1e-3);
        c.optim.batch_size = get_size(o, "optim", "batch_size", 2048);
        c.optim.max_epochs = get_size(o, "optim", "max_epochs", 1000);
        c.optim.patience = get_size(o, "optim", "patience", 20);
        c.optim.early_stopping = get_bool(o, "optim", "early_stopping", true);
    }
    if (j.contains("eval")) {
        const json& o = j.at("eval");
        expect_object(o, "eval");
        check_keys(o, "eval", {"k", "early_stop_k"});
        c.eval.k = get_size(o, "eval", "k", 5);
        c.eval.early_stop_k = get_size(o, "eval", "early_stop_k", 5);
    }
    if (j.contains("split")) {
        const json& o = j.at("split");
        expect_object(o, "split");
        check_keys(o, "split", {"ratios"});
        if (o.contains("ratios")) {
            const json& r = o.at("ratios");
            if (!r.is_array() || r.size() != 3)
                throw UsageError("config key split.ratios must be an array of 3 numbers");
            for (std::size_t i = 0; i < 3; ++i) {
                if (!r[i].is_number())
                    throw UsageError("config key split.ratios must be an array of 3 numbers");
                c.split_ratios[i] = r[i].get<double>();
            }
        }
    }
    if (j.contains("synth")) {
        const json& o = j.at("synth");
        expect_object(o, "synth");
        check_keys(o, "synth",
                   {"num_users", "num_items", "dim_visual", "dim_textual", "clusters",
                    "p_in", "p_out"});
        c.synth.num_users = get_size(o, "synth", "num_users", 50);
        c.synth.num_items = get_size(o, "synth", "num_items", 100);
        c.synth.dim_visual = get_size(o, "synth", "dim_visual", 32);
        c.synth.dim_textual = get_size(o, "synth", "dim_textual", 16);
        c.synth.clusters = get_size(o, "synth", "clusters", 5);
        c.synth.p_in = get_double(o, "synth", "p_in", 0.3);
        c.synth.p_out = get_double(o, "synth", "p_out", 0.01);
    }
    if (j.contains("ablation"))
        c.ablation = parse_ablation(j.at("ablation"), "ablation");
    if (j.contains("ablate")) {
        const json& o = j.at("ablate");
        expect_object(o, "ablate");
        check_keys(o, "ablate", {"seeds", "variants"});
        if (o.contains("seeds")) {
            const json& s = o.at("seeds");
            if (!s.is_array())
                throw UsageError("config key ablate.seeds must be an array");
            for (const json& v : s) {
                if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
                    throw UsageError("config key ablate.seeds must hold non-negative integers");
                c.ablate.seeds.push_back(v.get<std::uint64_t>());
            }
        }
        if (o.contains("variants")) {
            const json& vs = o.at("variants");
            if (!vs.is_array())
                throw UsageError("config key ablate.variants must be an array");
            for (std::size_t i = 0; i < vs.size(); ++i)
                c.ablate.variants.push_back(
                    parse_ablation(vs[i], "ablate.variants[" + std::to_string(i) + "]"));
        }
    }
    if (j.contains("gradcheck")) {
        const json& o = j.at("gradcheck");
        expect_object(o, "gradcheck");
        check_keys(o, "gradcheck", {"samples"});
        c.gradcheck_samples = get_size(o, "gradcheck", "samples", 200);
    }
    c.validate();
    return c;
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw UsageError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_json(ss.str(), path);
}

std::string config_to_json(const RunConfig& c) {
    json j = json::object();
    j["seed"] = c.seed;
    j["paths"] = {{"interactions", c.paths.interactions},
                  {"features_visual", c.paths.features_visual},
                  {"features_textual", c.paths.features_textual},
                  {"output_dir", c.paths.output_dir}};
    j["model"] = {{"embed_dim", c.model.embed_dim},
                  {"layers", c.model.layers},
                  {"knn_item", c.model.knn_item},
                  {"knn_user", c.model.knn_user}};
    j["losses"] = {{"sigma_diff", c.losses.sigma_diff},
                   {"sigma_cl", c.losses.sigma_cl},
                   {"sigma_reg", c.losses.sigma_reg},
                   {"tau", c.losses.tau},
                   {"cl_scope", cl_scope_to_string(c.losses.cl_scope)},
                   {"mda_squared", c.losses.mda_squared},
                   {"anchor_sample", c.losses.anchor_sample}};
    j["optim"] = {{"lr", c.optim.lr},
                  {"batch_size", c.optim.batch_size},
                  {"max_epochs", c.optim.max_epochs},
                  {"patience", c.optim.patience},
                  {"early_stopping", c.optim.early_stopping}};
    j["eval"] = {{"k", c.eval.k}, {"early_stop_k", c.eval.early_stop_k}};
    j["split"] = {{"ratios", c.split_ratios}};
    j["synth"] = {{"num_users", c.synth.num_users},
                  {"num_items", c.synth.num_items},
                  {"dim_visual", c.synth.dim_visual},
                  {"dim_textual", c.synth.dim_textual},
                  {"clusters", c.synth.clusters},
                  {"p_in", c.synth.p_in},
                  {"p_out", c.synth.p_out}};
    j["ablation"] = ablation_to_json(c.ablation);
    json variants = json::array();
    for (const AblationSpec& v : c.ablate.variants)
        variants.push_back(ablation_to_json(v));
    j["ablate"] = {{"seeds", c.ablate.seeds}, {"variants", variants}};
    j["gradcheck"] = {{"samples", c.gradcheck_samples}};
    return j.dump(2) + "\n";
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key.empty())
        throw UsageError("empty override key");
    json j;
    try {
        j = json::parse(config_to_json(cfg));
    } catch (const json::exception& e) {
        throw UsageError(std::string("internal config serialization error: ") + e.what());
    }
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value; // bare strings stay strings
    }
    std::string pointer = "/" + key;
    for (char& ch : pointer)
        if (ch == '.')
            ch = '/';
    try {
        j[json::json_pointer(pointer)] = parsed;
    } catch (const json::exception& e) {
        throw UsageError("bad override --set " + key + ": " + e.what());
    }
    RunConfig next = parse_config_json(j.dump(), "--set " + key);
    next.eval_checkpoint = cfg.eval_checkpoint;
    next.eval_split = cfg.eval_split;
    cfg = next;
}

void RunConfig::validate() const {
    if (model.embed_dim == 0)
        throw UsageError("model.embed_dim must be positive");
    if (model.layers < 0)
        throw UsageError("model.layers must be non-negative");
    if (model.knn_item == 0 || model.knn_user == 0)
        throw UsageError("knn sizes must be positive");
    losses.validate();
    if (optim.lr <= 0.0)
        throw UsageError("optim.lr must be positive");
    if (optim.batch_size == 0)
        throw UsageError("optim.batch_size must be positive");
    if (optim.max_epochs == 0)
        throw UsageError("optim.max_epochs must be positive");
    if (eval.k == 0 || eval.early_stop_k == 0)
        throw UsageError("eval cutoffs must be positive");
    double ratio_sum = 0.0;
    for (double r : split_ratios) {
        if (r < 0.0)
            throw UsageError("split.ratios must be non-negative");
        ratio_sum += r;
    }
    if (std::abs(ratio_sum - 1.0) > 1e-9)
        throw UsageError("split.ratios must sum to 1");
    if (gradcheck_samples == 0)
        throw UsageError("gradcheck.samples must be positive");
    ablation.validate();
    for (const AblationSpec& v : ablate.variants)
        v.validate();
}

std::uint64_t RunConfig::config_hash() const {
    Hasher h;
    h.add(std::string_view("mde-config-v1"));
    h.add(seed);
    h.add(static_cast<std::uint64_t>(model.embed_dim));
    h.add(static_cast<std::uint64_t>(model.layers));
    h.add(static_cast<std::uint64_t>(model.knn_item));
    h.add(static_cast<std::uint64_t>(model.knn_user));
    h.add(losses.sigma_diff);
    h.add(losses.sigma_cl);
    h.add(losses.sigma_reg);
    h.add(losses.tau);
    h.add(static_cast<std::uint64_t>(losses.cl_scope));
    h.add(static_cast<std::uint64_t>(losses.mda_squared ? 1 : 0));
    h.add(static_cast<std::uint64_t>(losses.anchor_sample));
    h.add(optim.lr);
    h.add(static_cast<std::uint64_t>(optim.batch_size));
    h.add(static_cast<std::uint64_t>(optim.max_epochs));
    h.add(static_cast<std::uint64_t>(optim.patience));
    h.add(static_cast<std::uint64_t>(optim.early_stopping ? 1 : 0));
    h.add(static_cast<std::uint64_t>(eval.k));
    h.add(static_cast<std::uint64_t>(eval.early_stop_k));
    for (double r : split_ratios)
        h.add(r);
    h.add(std::string_view(ablation.name));
    h.add(static_cast<std::uint64_t>(ablation.disable_mda ? 1 : 0));
    h.add(static_cast<std::uint64_t>(ablation.disable_msa ? 1 : 0));
    h.add(static_cast<std::uint64_t>(ablation.disable_nlt ? 1 : 0));
    h.add(static_cast<std::uint64_t>(ablation.fixed_pref_weight ? 1 : 0));
    h.add(ablation.fixed_pref_weight ? *ablation.fixed_pref_weight : 0.0);
    h.add(static_cast<std::uint64_t>(ablation.independent_weights ? 1 : 0));
    return h.digest();
}

std::uint64_t RunConfig::prep_hash(std::uint64_t data_hash) const {
    Hasher h;
    h.add(std::string_view("mde-prep-v1"));
    h.add(data_hash);
    h.add(static_cast<std::uint64_t>(model.knn_item));
    h.add(static_cast<std::uint64_t>(model.knn_user));
    return h.digest();
}

} // namespace mde
