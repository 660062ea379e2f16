#include "signadapt/config.hpp"

#include <malloc.h>

#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "signadapt/errors.hpp"

namespace signadapt {

using nlohmann::json;

void PipelineConfig::propagate_seed() {
    data.seed = seed;
    vpe.seed = seed;
    retrain.seed = seed;
    augmentation.seed = seed;
    nst.noise_seed = seed;
}

void PipelineConfig::validate() const {
    data.validate();
    vpe.architecture.validate();
    if (vpe.architecture.canvas != data.canvas) throw ConfigError("vpe.canvas must equal data.canvas");
    if (vpe.epochs < 1 || vpe.batch_size < 1) throw ConfigError("vpe.epochs and vpe.batch_size must be >= 1");
    if (!(vpe.learning_rate > 0.0)) throw ConfigError("vpe.learning_rate must be > 0");
    monitor.thresholds.validate();
    if (monitor.buffer_capacity < 1) throw ConfigError("monitor.buffer_capacity must be >= 1");
    if (monitor.trigger_min < 1 || monitor.trigger_min > monitor.buffer_capacity) {
        throw ConfigError("monitor.trigger_min must lie in [1, buffer_capacity]");
    }
    nst.validate();
    if (augmentation.seeds_per_entry < 1 || augmentation.draws_per_seed < 0) {
        throw ConfigError("nst.seeds_per_entry must be >= 1 and nst.draws_per_seed >= 0");
    }
    retrain.validate();
    if (!(mix_p >= 0.0 && mix_p <= 1.0)) throw ValidationError("retrain.mix_p must lie in [0,1]");
    if (!(aug_severity >= 0.0 && aug_severity <= 1.0)) throw ValidationError("harness.aug_severity must lie in [0,1]");
}

namespace {

json to_json_tree(const PipelineConfig& c) {
    const auto& a = c.vpe.architecture;
    const auto& j = c.data.jitter;
    return {
        {"seed", c.seed},
        {"data",
         {{"classes", c.data.classes},
          {"train_per_class", c.data.train_per_class},
          {"test_per_class", c.data.test_per_class},
          {"validation_per_class", c.data.validation_per_class},
          {"canvas", c.data.canvas},
          {"jitter",
           {{"max_rotation_deg", j.max_rotation_deg},
            {"min_scale", j.min_scale},
            {"max_scale", j.max_scale},
            {"brightness", j.brightness},
            {"contrast", j.contrast},
            {"noise_sigma", j.noise_sigma}}}}},
        {"vpe",
         {{"canvas", a.canvas},
          {"latent_dim", a.latent_dim},
          {"channels", a.channels},
          {"epochs", c.vpe.epochs},
          {"batch_size", c.vpe.batch_size},
          {"learning_rate", c.vpe.learning_rate},
          {"momentum", c.vpe.momentum},
          {"kl_weight", c.vpe.kl_weight},
          {"kl_warmup_fraction", c.vpe.kl_warmup_fraction},
          {"head_weight", c.vpe.head_weight}}},
        {"monitor",
         {{"tau_d", c.monitor.thresholds.tau_d},
          {"tau_y", c.monitor.thresholds.tau_y},
          {"buffer_capacity", c.monitor.buffer_capacity},
          {"trigger_min", c.monitor.trigger_min},
          {"calibration_unknowns", c.monitor.calibration_unknowns}}},
        {"nst",
         {{"content_weight", c.nst.content_weight},
          {"style_weight", c.nst.style_weight},
          {"iterations", c.nst.iterations},
          {"step_size", c.nst.step_size},
          {"feature_extractor_seed", c.nst.feature_extractor_seed},
          {"sign_mask", c.nst.sign_mask},
          {"seeds_per_entry", c.augmentation.seeds_per_entry},
          {"draws_per_seed", c.augmentation.draws_per_seed}}},
        {"retrain",
         {{"lambda_consist", c.retrain.lambda_consist},
          {"epochs", c.retrain.epochs},
          {"learning_rate", c.retrain.learning_rate},
          {"batch_size", c.retrain.batch_size},
          {"momentum", c.retrain.momentum},
          {"kl_weight", c.retrain.kl_weight},
          {"mix_p", c.mix_p},
          {"mixed_size", c.mixed_size}}},
        {"harness",
         {{"aug_source", std::string(to_string(c.aug_source))},
          {"aug_kind", std::string(to_string(c.aug_kind))},
          {"aug_severity", c.aug_severity},
          {"runs_dir", c.runs_dir.string()}}},
    };
}

void reject_unknown_keys(const json& given, const json& known, const std::string& prefix) {
    if (!given.is_object()) throw ConfigError("'" + prefix + "' must be an object");
    for (const auto& [key, value] : given.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!known.contains(key)) throw ConfigError("unknown config key '" + path + "'");
        if (known.at(key).is_object()) reject_unknown_keys(value, known.at(key), path);
    }
}

PipelineConfig from_json_tree(const json& t) {
    PipelineConfig c;
    c.seed = t.at("seed").get<std::uint64_t>();
    const auto& d = t.at("data");
    c.data.classes = d.at("classes");
    c.data.train_per_class = d.at("train_per_class");
    c.data.test_per_class = d.at("test_per_class");
    c.data.validation_per_class = d.at("validation_per_class");
    c.data.canvas = d.at("canvas");
    const auto& j = d.at("jitter");
    c.data.jitter = {j.at("max_rotation_deg"), j.at("min_scale"), j.at("max_scale"),
                     j.at("brightness"),       j.at("contrast"),  j.at("noise_sigma")};
    const auto& v = t.at("vpe");
    c.vpe.architecture.canvas = v.at("canvas");
    c.vpe.architecture.latent_dim = v.at("latent_dim");
    c.vpe.architecture.channels = v.at("channels").get<std::array<int, 3>>();
    c.vpe.epochs = v.at("epochs");
    c.vpe.batch_size = v.at("batch_size");
    c.vpe.learning_rate = v.at("learning_rate");
    c.vpe.momentum = v.at("momentum");
    c.vpe.kl_weight = v.at("kl_weight");
    c.vpe.kl_warmup_fraction = v.at("kl_warmup_fraction");
    c.vpe.head_weight = v.at("head_weight");
    const auto& m = t.at("monitor");
    c.monitor.thresholds = {m.at("tau_d"), m.at("tau_y")};
    c.monitor.buffer_capacity = m.at("buffer_capacity");
    c.monitor.trigger_min = m.at("trigger_min");
    c.monitor.calibration_unknowns = m.at("calibration_unknowns");
    const auto& n = t.at("nst");
    c.nst.content_weight = n.at("content_weight");
    c.nst.style_weight = n.at("style_weight");
    c.nst.iterations = n.at("iterations");
    c.nst.step_size = n.at("step_size");
    c.nst.feature_extractor_seed = n.at("feature_extractor_seed");
    c.nst.sign_mask = n.at("sign_mask");
    c.augmentation.seeds_per_entry = n.at("seeds_per_entry");
    c.augmentation.draws_per_seed = n.at("draws_per_seed");
    const auto& r = t.at("retrain");
    c.retrain.lambda_consist = r.at("lambda_consist");
    c.retrain.epochs = r.at("epochs");
    c.retrain.learning_rate = r.at("learning_rate");
    c.retrain.batch_size = r.at("batch_size");
    c.retrain.momentum = r.at("momentum");
    c.retrain.kl_weight = r.at("kl_weight");
    c.mix_p = r.at("mix_p");
    c.mixed_size = r.at("mixed_size");
    const auto& h = t.at("harness");
    c.aug_source = parse_aug_source(h.at("aug_source").get<std::string>());
    c.aug_kind = parse_degradation_kind(h.at("aug_kind").get<std::string>());
    c.aug_severity = h.at("aug_severity");
    c.runs_dir = h.at("runs_dir").get<std::string>();
    c.propagate_seed();
    return c;
}

}  // namespace

PipelineConfig parse_config(std::string_view json_text) {
    json given;
    try {
        given = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    json tree = to_json_tree(PipelineConfig{});
    reject_unknown_keys(given, tree, "");
    tree.merge_patch(given);
    PipelineConfig c;
    try {
        c = from_json_tree(tree);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config has a field of the wrong type: ") + e.what());
    }
    c.validate();
    return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config(text.str());
}

std::string config_to_json(const PipelineConfig& config) {
    return to_json_tree(config).dump(2) + "\n";
}

void apply_env_overrides(PipelineConfig& config) {
    const char* raw = std::getenv("SIGNADAPT_SEED");
    if (raw == nullptr || *raw == '\0') return;
    char* end = nullptr;
    errno = 0;
    const unsigned long long value = std::strtoull(raw, &end, 10);
    if (errno != 0 || *end != '\0' || raw[0] == '-') {
        throw ConfigError(std::string("SIGNADAPT_SEED is not an unsigned integer: ") + raw);
    }
    config.seed = value;
    config.propagate_seed();
}

HarnessConfig harness_config(const PipelineConfig& config) {
    HarnessConfig h;
    h.data = config.data;
    h.training = config.vpe;
    h.finetune = config.retrain;
    h.mix_p = config.mix_p;
    h.aug_source = config.aug_source;
    h.aug_kind = config.aug_kind;
    h.aug_severity = config.aug_severity;
    h.style = config.nst;
    return h;
}

AdaptationConfig adaptation_config(const PipelineConfig& config) {
    AdaptationConfig a;
    a.trigger_min = config.monitor.trigger_min;
    a.mix_p = config.mix_p;
    a.mixed_size = config.mixed_size;
    a.augmentation = config.augmentation;
    a.style = config.nst;
    a.retrain = config.retrain;
    return a;
}

void configure_runtime() {
    // Keep freed im2col buffers in the heap instead of returning them to the OS on every batch.
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
}

}  // namespace signadapt
