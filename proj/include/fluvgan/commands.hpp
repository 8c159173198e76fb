#pragma once

#include <iostream>
#include <map>
#include <set>

#include "pngio.hpp"
#include "trainer.hpp"

namespace fluvgan {

// ---- run configuration -----------------------------------------------------------

struct DataConfig {
    std::string kind = "synth";  // synth | flvd
    std::string path;            // directory of .flvd files
    i64 synth_count = 512;
    SynthParams synth;
    bool synth_dims_set = false;
    Vec3 sample_size{32, 32, 8};
    bool crop_vertical = false;
    double crop_z_min = 4.0;
    double crop_z_max = 14.0;
    std::string crop_mode = "random";  // random | fixed
    bool must_contain_channel = false;
    double channel_threshold = 0.5;
    i64 channels = 2;  // 1 or 2
    bool facies = false;
    double d_coarse_mm = 0.5;
    double d_fine_mm = 0.004;
    i64 n_val = 64;
    i64 n_test = 0;
    std::string split = "random";  // random | fixed-tail
};

struct RunConfig {
    std::string preset = "arch4";
    ArchitectureConfig arch = resolve_preset("arch4");
    LatentSpec latent{100, {4, 4, 4}};
    TrainConfig train;
    DataConfig data;
    std::string out_dir = "run";
    int threads = 1;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
    if (!j.is_object()) throw ConfigError("config: '" + where + "' must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
}

inline Vec3 vec3_from_json(const nlohmann::json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 3) throw ConfigError("config: '" + where + "' must be a 3-vector");
    return {j.at(0).get<i64>(), j.at(1).get<i64>(), j.at(2).get<i64>()};
}

}  // namespace detail

inline nlohmann::json swd_to_json(const SwdSettings& s) {
    return nlohmann::json{{"patch_shape", {s.patch_shape[0], s.patch_shape[1], s.patch_shape[2]}},
                          {"patches_per_set", s.patches_per_set},
                          {"projections", s.projections},
                          {"max_levels", s.max_levels}};
}

inline SwdSettings swd_from_json(const nlohmann::json& j, SwdSettings s = {}) {
    detail::check_keys(j, {"patch_shape", "patches_per_set", "projections", "max_levels"},
                       "swd settings");
    if (j.contains("patch_shape")) s.patch_shape = detail::vec3_from_json(j.at("patch_shape"), "patch_shape");
    if (j.contains("patches_per_set")) s.patches_per_set = j.at("patches_per_set").get<i64>();
    if (j.contains("projections")) s.projections = j.at("projections").get<i64>();
    if (j.contains("max_levels")) s.max_levels = j.at("max_levels").get<int>();
    return s;
}

inline nlohmann::json synth_to_json(const SynthParams& p) {
    return nlohmann::json{{"dims", {p.dims[0], p.dims[1], p.dims[2]}},
                          {"cell_size", {p.cell_size[0], p.cell_size[1], p.cell_size[2]}},
                          {"n_layers", p.n_layers},
                          {"channel_width_cells", p.channel_width_cells},
                          {"meander_amplitude", p.meander_amplitude},
                          {"drift_rate", p.drift_rate},
                          {"coarse_in_channel", p.coarse_in_channel},
                          {"coarse_falloff", p.coarse_falloff},
                          {"overbank_coarse", p.overbank_coarse},
                          {"carve_topography", p.carve_topography}};
}

inline SynthParams synth_from_json(const nlohmann::json& j, SynthParams p, bool* dims_set = nullptr) {
    detail::check_keys(j,
                       {"dims", "cell_size", "n_layers", "channel_width_cells", "meander_amplitude",
                        "drift_rate", "coarse_in_channel", "coarse_falloff", "overbank_coarse",
                        "carve_topography"},
                       "synth params");
    if (j.contains("dims")) {
        p.dims = detail::vec3_from_json(j.at("dims"), "synth.dims");
        if (dims_set) *dims_set = true;
    }
    if (j.contains("cell_size")) {
        auto c = j.at("cell_size");
        for (int i = 0; i < 3; ++i) p.cell_size[size_t(i)] = c.at(size_t(i)).get<float>();
    }
    if (j.contains("n_layers")) p.n_layers = j.at("n_layers").get<i64>();
    if (j.contains("channel_width_cells")) p.channel_width_cells = j.at("channel_width_cells").get<double>();
    if (j.contains("meander_amplitude")) p.meander_amplitude = j.at("meander_amplitude").get<double>();
    if (j.contains("drift_rate")) p.drift_rate = j.at("drift_rate").get<double>();
    if (j.contains("coarse_in_channel")) p.coarse_in_channel = j.at("coarse_in_channel").get<double>();
    if (j.contains("coarse_falloff")) p.coarse_falloff = j.at("coarse_falloff").get<double>();
    if (j.contains("overbank_coarse")) p.overbank_coarse = j.at("overbank_coarse").get<double>();
    if (j.contains("carve_topography")) p.carve_topography = j.at("carve_topography").get<bool>();
    return p;
}

inline nlohmann::json data_to_json(const DataConfig& d) {
    return nlohmann::json{{"kind", d.kind},
                          {"path", d.path},
                          {"synth_count", d.synth_count},
                          {"synth", synth_to_json(d.synth)},
                          {"sample_size", {d.sample_size[0], d.sample_size[1], d.sample_size[2]}},
                          {"crop_vertical", d.crop_vertical},
                          {"crop_z_min", d.crop_z_min},
                          {"crop_z_max", d.crop_z_max},
                          {"crop_mode", d.crop_mode},
                          {"must_contain_channel", d.must_contain_channel},
                          {"channel_threshold", d.channel_threshold},
                          {"channels", d.channels},
                          {"facies", d.facies},
                          {"d_coarse_mm", d.d_coarse_mm},
                          {"d_fine_mm", d.d_fine_mm},
                          {"n_val", d.n_val},
                          {"n_test", d.n_test},
                          {"split", d.split}};
}

inline DataConfig data_from_json(const nlohmann::json& j, DataConfig d = {}) {
    detail::check_keys(j,
                       {"kind", "path", "synth_count", "synth", "sample_size", "crop_vertical",
                        "crop_z_min", "crop_z_max", "crop_mode", "must_contain_channel",
                        "channel_threshold", "channels", "facies", "d_coarse_mm", "d_fine_mm",
                        "n_val", "n_test", "split"},
                       "data config");
    if (j.contains("kind")) d.kind = j.at("kind").get<std::string>();
    if (j.contains("path")) d.path = j.at("path").get<std::string>();
    if (j.contains("synth_count")) d.synth_count = j.at("synth_count").get<i64>();
    if (j.contains("synth")) d.synth = synth_from_json(j.at("synth"), d.synth, &d.synth_dims_set);
    if (j.contains("sample_size")) d.sample_size = detail::vec3_from_json(j.at("sample_size"), "sample_size");
    if (j.contains("crop_vertical")) d.crop_vertical = j.at("crop_vertical").get<bool>();
    if (j.contains("crop_z_min")) d.crop_z_min = j.at("crop_z_min").get<double>();
    if (j.contains("crop_z_max")) d.crop_z_max = j.at("crop_z_max").get<double>();
    if (j.contains("crop_mode")) d.crop_mode = j.at("crop_mode").get<std::string>();
    if (j.contains("must_contain_channel")) d.must_contain_channel = j.at("must_contain_channel").get<bool>();
    if (j.contains("channel_threshold")) d.channel_threshold = j.at("channel_threshold").get<double>();
    if (j.contains("channels")) d.channels = j.at("channels").get<i64>();
    if (j.contains("facies")) d.facies = j.at("facies").get<bool>();
    if (j.contains("d_coarse_mm")) d.d_coarse_mm = j.at("d_coarse_mm").get<double>();
    if (j.contains("d_fine_mm")) d.d_fine_mm = j.at("d_fine_mm").get<double>();
    if (j.contains("n_val")) d.n_val = j.at("n_val").get<i64>();
    if (j.contains("n_test")) d.n_test = j.at("n_test").get<i64>();
    if (j.contains("split")) d.split = j.at("split").get<std::string>();
    require(d.kind == "synth" || d.kind == "flvd", "config: data.kind must be synth or flvd");
    require(d.crop_mode == "random" || d.crop_mode == "fixed",
            "config: data.crop_mode must be random or fixed");
    require(d.split == "random" || d.split == "fixed-tail",
            "config: data.split must be random or fixed-tail");
    require(d.channels == 1 || d.channels == 2, "config: data.channels must be 1 or 2");
    return d;
}

inline nlohmann::json train_to_json(const TrainConfig& t) {
    return nlohmann::json{{"batch_size", t.batch_size},
                          {"g_iterations", t.total_g_iterations},
                          {"r1_weight", t.r1_weight},
                          {"r1_interval", t.r1_interval},
                          {"loss_mode", t.loss_mode == LossMode::WganGp ? "wgan_gp" : "nonsaturating_bce"},
                          {"gp_weight", t.gp_weight},
                          {"validation_interval", t.validation_interval},
                          {"checkpoint_interval", t.checkpoint_interval},
                          {"val_batch", t.val_batch},
                          {"seed", t.seed},
                          {"swd", swd_to_json(t.swd)}};
}

inline TrainConfig train_from_json(const nlohmann::json& j, TrainConfig t = {}) {
    detail::check_keys(j,
                       {"batch_size", "g_iterations", "r1_weight", "r1_interval", "loss_mode",
                        "gp_weight", "validation_interval", "checkpoint_interval", "val_batch",
                        "seed", "swd"},
                       "train config");
    if (j.contains("batch_size")) t.batch_size = j.at("batch_size").get<i64>();
    if (j.contains("g_iterations")) t.total_g_iterations = j.at("g_iterations").get<i64>();
    if (j.contains("r1_weight")) t.r1_weight = j.at("r1_weight").get<real>();
    if (j.contains("r1_interval")) t.r1_interval = j.at("r1_interval").get<i64>();
    if (j.contains("loss_mode")) {
        std::string m = j.at("loss_mode").get<std::string>();
        if (m == "wgan_gp")
            t.loss_mode = LossMode::WganGp;
        else if (m == "nonsaturating_bce")
            t.loss_mode = LossMode::NonsaturatingBce;
        else
            throw ConfigError("config: unknown loss_mode '" + m + "'");
    }
    if (j.contains("gp_weight")) t.gp_weight = j.at("gp_weight").get<real>();
    if (j.contains("validation_interval")) t.validation_interval = j.at("validation_interval").get<i64>();
    if (j.contains("checkpoint_interval")) t.checkpoint_interval = j.at("checkpoint_interval").get<i64>();
    if (j.contains("val_batch")) t.val_batch = j.at("val_batch").get<i64>();
    if (j.contains("seed")) t.seed = j.at("seed").get<uint64_t>();
    if (j.contains("swd")) t.swd = swd_from_json(j.at("swd"), t.swd);
    return t;
}

// Copies the architecture-owned knobs into the train config so the loop has a
// single source of truth.
inline void sync_train_with_arch(RunConfig& cfg) {
    cfg.train.d_steps_per_g = cfg.arch.d_steps_per_g;
    cfg.train.lr_g = cfg.arch.lr_g;
    cfg.train.lr_d = cfg.arch.lr_d;
    cfg.train.beta1 = cfg.arch.beta1();
    cfg.train.beta2 = cfg.arch.beta2();
    cfg.train.use_r1 = cfg.arch.r1;
    cfg.train.logits_loss = cfg.arch.logits_loss;
    cfg.arch.channels_out = cfg.data.channels;
    if (cfg.data.facies) cfg.arch.channels_out = 1;
    cfg.arch.target_shape = cfg.data.sample_size;
    if (cfg.data.kind == "synth" && !cfg.data.synth_dims_set) cfg.data.synth.dims = cfg.data.sample_size;
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
    return nlohmann::json{{"preset", cfg.preset},
                          {"arch", arch_to_json(cfg.arch)},
                          {"latent",
                           {{"dim", cfg.latent.dim},
                            {"spatial", {cfg.latent.spatial[0], cfg.latent.spatial[1], cfg.latent.spatial[2]}}}},
                          {"train", train_to_json(cfg.train)},
                          {"data", data_to_json(cfg.data)},
                          {"out", cfg.out_dir},
                          {"threads", cfg.threads}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig cfg = {}) {
    detail::check_keys(j, {"preset", "arch", "latent", "train", "data", "out", "threads"},
                       "run config");
    if (j.contains("preset")) {
        cfg.preset = j.at("preset").get<std::string>();
        cfg.arch = resolve_preset(cfg.preset);
    }
    if (j.contains("arch")) {
        detail::check_keys(j.at("arch"),
                           {"leaky_g", "logits_loss", "tuned_betas", "spectral_norm",
                            "residual_blocks", "bottleneck_blocks", "no_batch_in_d", "r1",
                            "double_blocks", "orthogonal_init", "latent_skip", "lr_g", "lr_d",
                            "d_steps_per_g", "base_channels", "growth_policy", "target_shape",
                            "channels_out", "kernel_base", "leaky_slope"},
                           "arch config");
        cfg.arch = arch_from_json(j.at("arch"), cfg.arch);
    }
    if (j.contains("latent")) {
        detail::check_keys(j.at("latent"), {"dim", "spatial"}, "latent spec");
        if (j.at("latent").contains("dim")) cfg.latent.dim = j.at("latent").at("dim").get<i64>();
        if (j.at("latent").contains("spatial"))
            cfg.latent.spatial = detail::vec3_from_json(j.at("latent").at("spatial"), "latent.spatial");
    }
    if (j.contains("train")) cfg.train = train_from_json(j.at("train"), cfg.train);
    if (j.contains("data")) cfg.data = data_from_json(j.at("data"), cfg.data);
    if (j.contains("out")) cfg.out_dir = j.at("out").get<std::string>();
    if (j.contains("threads")) cfg.threads = j.at("threads").get<int>();
    sync_train_with_arch(cfg);
    return cfg;
}

// ---- dataset assembly ---------------------------------------------------------------

namespace detail {

inline void add_facies_channel(VoxelVolume& v, double d_coarse_mm, double d_fine_mm) {
    const auto& coarse = v.channel(kCoarseChannel);
    rvec as_real(coarse.begin(), coarse.end());
    Tensor t = Tensor::from({v.nx, v.ny, v.nz}, std::move(as_real));
    FaciesVolume f = folk_facies(t, d_coarse_mm, d_fine_mm);
    std::vector<float> ch(f.classes.size());
    for (size_t i = 0; i < ch.size(); ++i) ch[i] = float(f.classes[i]) / 2.f;
    v.add_channel("facies", std::move(ch));
}

inline bool volume_has_empty(const VoxelVolume& v) {
    for (const auto& ch : v.channels)
        for (float f : ch)
            if (std::isnan(f)) return true;
    return false;
}

}  // namespace detail

struct BuiltData {
    std::unique_ptr<VolumeDataset> training;
    std::vector<Sample> validation;
    std::vector<std::string> channel_names;
};

inline std::vector<std::string> list_flvd_files(const std::string& dir) {
    namespace fs = std::filesystem;
    std::vector<std::string> files;
    if (!fs::is_directory(dir)) throw DataError("'" + dir + "' is not a directory");
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".flvd") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("no .flvd files in '" + dir + "'");
    return files;
}

inline std::vector<VoxelVolume> load_source_volumes(const DataConfig& d, uint64_t seed) {
    std::vector<VoxelVolume> volumes;
    if (d.kind == "synth") {
        for (i64 i = 1; i <= d.synth_count; ++i)
            volumes.push_back(synth_generate(hash_combine(seed, uint64_t(i)), d.synth));
    } else {
        for (const auto& f : list_flvd_files(d.path)) volumes.push_back(load_volume(f));
    }
    for (auto& v : volumes) {
        if (d.crop_vertical) v = crop_vertical(v, d.crop_z_min, d.crop_z_max);
        if (detail::volume_has_empty(v)) v = fill_above_topography(v);
        if (d.facies) detail::add_facies_channel(v, d.d_coarse_mm, d.d_fine_mm);
    }
    return volumes;
}

inline std::vector<std::string> channel_list(const DataConfig& d) {
    if (d.facies) return {"facies"};
    if (d.channels == 2) return {kCoarseChannel, kTimeChannel};
    return {kCoarseChannel};
}

inline CropSpec crop_spec_of(const DataConfig& d) {
    CropSpec c;
    c.size = d.sample_size;
    c.mode = d.crop_mode == "fixed" ? CropMode::Fixed : CropMode::Random;
    c.constraint = d.must_contain_channel ? CropConstraint::MustContainChannel : CropConstraint::None;
    c.channel_threshold = d.channel_threshold;
    return c;
}

inline BuiltData build_data(const DataConfig& d, uint64_t seed) {
    std::vector<VoxelVolume> volumes = load_source_volumes(d, seed);
    i64 total = i64(volumes.size());
    i64 n_val = std::min(d.n_val, total > 1 ? total / 4 : 0);
    i64 n_test = std::min(d.n_test, total - n_val - 1);
    if (n_test < 0) n_test = 0;
    i64 n_train = total - n_val - n_test;
    SplitPlan plan = make_split(total, n_train, n_val, n_test,
                                d.split == "fixed-tail" ? SplitMode::FixedTail : SplitMode::Random,
                                hash_combine(seed, 0x5b117));
    BuiltData out;
    out.channel_names = channel_list(d);
    std::vector<VoxelVolume> train_vols;
    for (i64 id : plan.training) train_vols.push_back(std::move(volumes[size_t(id - 1)]));
    CropSpec crop = crop_spec_of(d);
    Rng val_rng(hash_combine(seed, 0x7a1bULL));
    for (i64 id : plan.validation) {
        const VoxelVolume& v = volumes[size_t(id - 1)];
        Vec3 off{0, 0, 0};
        VoxelVolume c = crop_sample(v, crop, val_rng, &off);
        Sample s = scale_sample(select_channels(c, out.channel_names));
        s.realization_id = id;
        s.offsets = off;
        out.validation.push_back(std::move(s));
    }
    out.training = std::make_unique<VolumeDataset>(std::move(train_vols), crop, out.channel_names);
    return out;
}

// ---- commands -----------------------------------------------------------------------

inline TrainResult cmd_train(RunConfig cfg, const std::string& resume_checkpoint = "") {
    sync_train_with_arch(cfg);
    set_threads(cfg.threads);
    BuiltData data = build_data(cfg.data, cfg.train.seed);
    GanModel model = build_gan(cfg.arch, cfg.latent, data.channel_names,
                               hash_combine(cfg.train.seed, 0x141ULL));
    std::string echo = run_config_to_json(cfg).dump(2);
    return train(model, *data.training, data.validation, cfg.train, cfg.out_dir, echo,
                 resume_checkpoint);
}

inline Sample sample_from_tensor(const Tensor& t, const std::vector<std::string>& names) {
    Sample s;
    s.data = t;
    s.channel_names = names;
    s.t_min = 0.0;  // generated time channels unscale to relative age in [0,1]
    s.t_max = 1.0;
    return s;
}

inline void write_sample_pngs(const Tensor& t, const std::vector<std::string>& names,
                              const std::string& prefix) {
    const Shape& s = t.shape();
    for (i64 c = 0; c < s[0]; ++c) {
        png_write(render_slice_z(t, c, s[3] / 2), prefix + "_" + names[size_t(c)] + "_z.png");
        png_write(render_slice_y(t, c, s[2] / 2), prefix + "_" + names[size_t(c)] + "_y.png");
    }
}

// Draws `count` samples from the checkpoint in seed order, no filtering, and
// writes them as unscaled FLVD volumes.
inline std::vector<std::string> cmd_generate(const std::string& checkpoint, i64 count,
                                             uint64_t seed, const std::string& out_dir,
                                             bool png = false) {
    LoadedCheckpoint lc = load_checkpoint(checkpoint);
    std::filesystem::create_directories(out_dir);
    Rng rng(Rng::mix64(seed));
    std::vector<Tensor> samples = generate_samples(lc.model, count, rng, 8);
    std::vector<std::string> paths;
    for (i64 i = 0; i < count; ++i) {
        char name[64];
        std::snprintf(name, sizeof name, "sample_%04lld.flvd", (long long)i);
        std::string path = out_dir + "/" + name;
        VoxelVolume v = unscale_sample(sample_from_tensor(samples[size_t(i)], lc.model.channel_names));
        save_volume(v, path);
        if (png)
            write_sample_pngs(samples[size_t(i)], lc.model.channel_names,
                              out_dir + "/sample_" + std::to_string(i));
        paths.push_back(path);
    }
    return paths;
}

// ---- validation report -----------------------------------------------------------------

struct ValidateArgs {
    std::string checkpoint;
    DataConfig data;
    i64 gen_count = 64;
    i64 mds_items = 24;  // per set
    i64 nearest_count = 0;
    std::string ref_mode = "sample";  // sample | extremity
    uint64_t seed = 0;
    std::string out_dir = "validate";
};

struct ValidateReport {
    SwdResult d_w;
    std::vector<double> f_s_values;
    double f_s_min = 0, f_s_median = 0, f_s_mean = 0, f_s_max = 0;
    double f_s_above_09 = 0, f_s_above_099 = 0;
    std::string report_text;
};

inline std::vector<Sample> reference_samples(const DataConfig& d, const std::string& ref_mode,
                                             uint64_t seed,
                                             const std::vector<std::string>& channels) {
    std::vector<VoxelVolume> volumes = load_source_volumes(d, seed);
    CropSpec crop = crop_spec_of(d);
    std::vector<Sample> out;
    Rng rng(hash_combine(seed, 0x4ef5ULL));
    for (size_t i = 0; i < volumes.size(); ++i) {
        const VoxelVolume& v = volumes[i];
        if (ref_mode == "extremity") {
            // one sample at each y extremity of the realization
            for (i64 yoff : {i64(0), v.ny - crop.size[1]}) {
                CropSpec c = crop;
                c.mode = CropMode::Fixed;
                c.offsets = {0, yoff, 0};
                Sample s = scale_sample(select_channels(crop_sample(v, c, rng), channels));
                s.realization_id = i64(i) + 1;
                s.offsets = c.offsets;
                out.push_back(std::move(s));
            }
        } else {
            Vec3 off{0, 0, 0};
            Sample s = scale_sample(select_channels(crop_sample(v, crop, rng, &off), channels));
            s.realization_id = i64(i) + 1;
            s.offsets = off;
            out.push_back(std::move(s));
        }
    }
    return out;
}

inline ValidateReport cmd_validate(const ValidateArgs& args) {
    namespace fs = std::filesystem;
    LoadedCheckpoint lc = load_checkpoint(args.checkpoint);
    fs::create_directories(args.out_dir);
    std::vector<Sample> refs = reference_samples(args.data, args.ref_mode, args.seed,
                                                 lc.model.channel_names);
    require(!refs.empty(), "cmd_validate: empty reference set");
    std::vector<Tensor> ref_tensors;
    for (const Sample& s : refs) ref_tensors.push_back(s.data);

    Rng rng(Rng::mix64(args.seed));
    std::vector<Tensor> gen = generate_samples(lc.model, args.gen_count, rng, 8);

    SwdSettings swd;
    swd.seed = hash_combine(args.seed, 0xd1);
    ValidateReport rep;
    rep.d_w = swd_score(gen, ref_tensors, swd);

    int time_idx = -1;
    for (size_t i = 0; i < lc.model.channel_names.size(); ++i)
        if (lc.model.channel_names[i] == kTimeChannel) time_idx = int(i);
    if (time_idx >= 0) {
        for (const Tensor& t : gen)
            rep.f_s_values.push_back(superposition_fraction(channel_volume(t, time_idx)));
        std::vector<double> sorted = rep.f_s_values;
        std::sort(sorted.begin(), sorted.end());
        rep.f_s_min = sorted.front();
        rep.f_s_max = sorted.back();
        rep.f_s_median = sorted[sorted.size() / 2];
        double acc = 0, a9 = 0, a99 = 0;
        for (double v : sorted) {
            acc += v;
            if (v > 0.9) a9 += 1;
            if (v > 0.99) a99 += 1;
        }
        rep.f_s_mean = acc / double(sorted.size());
        rep.f_s_above_09 = a9 / double(sorted.size());
        rep.f_s_above_099 = a99 / double(sorted.size());
    }

    // MDS over the pooled pairwise distances of generated + reference items
    i64 n_mds = std::min<i64>(args.mds_items, std::min<i64>(i64(gen.size()), i64(refs.size())));
    std::string mds_csv = "index,set,mds_x,mds_y\n";
    if (n_mds >= 3) {
        std::vector<Tensor> items;
        for (i64 i = 0; i < n_mds; ++i) items.push_back(gen[size_t(i)]);
        for (i64 i = 0; i < n_mds; ++i) items.push_back(ref_tensors[size_t(i)]);
        SwdSettings pair_swd = swd;
        pair_swd.patches_per_set = 256;
        pair_swd.projections = 64;
        DistanceMatrix dm = pairwise_swd_matrix(items, pair_swd);
        rvec coords = classical_mds(dm, 2);
        char line[160];
        for (i64 i = 0; i < 2 * n_mds; ++i) {
            std::snprintf(line, sizeof line, "%lld,%s,%.17g,%.17g\n", (long long)i,
                          i < n_mds ? "generated" : "reference", double(coords[size_t(2 * i)]),
                          double(coords[size_t(2 * i + 1)]));
            mds_csv += line;
        }
    }
    {
        std::ofstream os(args.out_dir + "/mds.csv", std::ios::trunc);
        os << mds_csv;
    }

    // memorization table: top-1 nearest training sample per generated sample
    if (args.nearest_count > 0) {
        SwdSettings near_swd = swd;
        near_swd.patches_per_set = 256;
        near_swd.projections = 64;
        std::ofstream os(args.out_dir + "/nearest.csv", std::ios::trunc);
        os << "query,nearest,distance\n";
        i64 k = std::min<i64>(args.nearest_count, i64(gen.size()));
        for (i64 i = 0; i < k; ++i) {
            auto [j, dist] = nearest_training_sample(gen[size_t(i)], ref_tensors, near_swd);
            char line[128];
            std::snprintf(line, sizeof line, "%lld,%lld,%.17g\n", (long long)i, (long long)j, dist);
            os << line;
        }
    }

    std::ostringstream rp;
    rp << "validation report\n";
    rp << "  generated samples: " << gen.size() << "\n";
    rp << "  reference samples: " << refs.size() << " (" << args.ref_mode << " mode)\n";
    rp << "  d_W mean: " << rep.d_w.mean << "\n";
    for (size_t k = 0; k < rep.d_w.per_level.size(); ++k)
        rp << "    level " << k << (k + 1 == rep.d_w.per_level.size() ? " (residual)" : "")
           << ": " << rep.d_w.per_level[k] << "\n";
    if (time_idx >= 0) {
        rp << "  f_s min/median/mean/max: " << rep.f_s_min << " / " << rep.f_s_median << " / "
           << rep.f_s_mean << " / " << rep.f_s_max << "\n";
        rp << "  f_s > 0.9: " << rep.f_s_above_09 << "   f_s > 0.99: " << rep.f_s_above_099 << "\n";
    } else {
        rp << "  f_s: not available (no deposition-time channel)\n";
    }
    rep.report_text = rp.str();
    {
        std::ofstream os(args.out_dir + "/report.txt", std::ios::trunc);
        os << rep.report_text;
    }
    return rep;
}

// ---- latent-space studies ------------------------------------------------------------------

inline Tensor latent_for_seed(const LatentSpec& spec, uint64_t seed) {
    Rng rng(Rng::mix64(seed));
    return sample_latents(spec, 1, rng);
}

inline Tensor lerp_tensor(const Tensor& a, const Tensor& b, real t) {
    return add(mul_const(a, real(1) - t), mul_const(b, t));
}

inline Tensor slerp_tensor(const Tensor& a, const Tensor& b, real t) {
    const auto &av = a.data(), &bv = b.data();
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < av.size(); ++i) {
        dot += double(av[i]) * double(bv[i]);
        na += double(av[i]) * double(av[i]);
        nb += double(bv[i]) * double(bv[i]);
    }
    double denom = std::sqrt(na) * std::sqrt(nb);
    double omega = std::acos(std::clamp(denom > 0 ? dot / denom : 1.0, -1.0, 1.0));
    if (omega < 1e-9) return lerp_tensor(a, b, t);
    double s = std::sin(omega);
    return add(mul_const(a, real(std::sin((1.0 - double(t)) * omega) / s)),
               mul_const(b, real(std::sin(double(t) * omega) / s)));
}

struct InterpolateArgs {
    std::string checkpoint;
    std::array<uint64_t, 4> corner_seeds{1, 2, 3, 4};
    i64 grid = 4;
    bool spherical = false;
    std::string out_dir = "interpolate";
    bool png = false;
};

// g x g grid of samples from bilinear interpolation between four corner
// latents; corners reproduce direct generation bit for bit.
inline std::vector<Tensor> cmd_interpolate(const InterpolateArgs& args) {
    require(args.grid >= 2, "cmd_interpolate: grid must be at least 2");
    LoadedCheckpoint lc = load_checkpoint(args.checkpoint);
    std::filesystem::create_directories(args.out_dir);
    Tensor z00 = latent_for_seed(lc.model.latent, args.corner_seeds[0]);
    Tensor z10 = latent_for_seed(lc.model.latent, args.corner_seeds[1]);
    Tensor z01 = latent_for_seed(lc.model.latent, args.corner_seeds[2]);
    Tensor z11 = latent_for_seed(lc.model.latent, args.corner_seeds[3]);
    std::vector<Tensor> out;
    NoGradGuard ng;
    for (i64 i = 0; i < args.grid; ++i) {
        real u = real(i) / real(args.grid - 1);
        for (i64 j = 0; j < args.grid; ++j) {
            real v = real(j) / real(args.grid - 1);
            Tensor z;
            if (args.spherical) {
                z = slerp_tensor(slerp_tensor(z00, z10, u), slerp_tensor(z01, z11, u), v);
            } else {
                z = add(add(mul_const(z00, (real(1) - u) * (real(1) - v)),
                            mul_const(z10, u * (real(1) - v))),
                        add(mul_const(z01, (real(1) - u) * v), mul_const(z11, u * v)));
            }
            Tensor fake = run_generator(lc.model.g, z, /*train=*/false);
            const Shape& s = fake.shape();
            Tensor one = reshape(fake, {s[1], s[2], s[3], s[4]});
            out.push_back(one);
            char name[64];
            std::snprintf(name, sizeof name, "grid_%02lld_%02lld", (long long)i, (long long)j);
            save_volume(unscale_sample(sample_from_tensor(one, lc.model.channel_names)),
                        args.out_dir + "/" + std::string(name) + ".flvd");
            if (args.png) write_sample_pngs(one, lc.model.channel_names, args.out_dir + "/" + name);
        }
    }
    return out;
}

struct ExtrapolateArgs {
    std::string checkpoint;
    Vec3 extra{0, 0, 0};
    uint64_t seed = 0;
    std::string out_dir = "extrapolate";
    bool png = false;
};

struct ExtrapolateResult {
    Tensor sample;  // [C,X,Y,Z]
    double f_s = -1;
};

// Enlarges the latent grid by `extra` cells per axis (core block identical to
// plain generation, fresh normal draws beyond it) and decodes the larger
// sample through the fully convolutional generator.
inline ExtrapolateResult cmd_extrapolate(const ExtrapolateArgs& args) {
    LoadedCheckpoint lc = load_checkpoint(args.checkpoint);
    std::filesystem::create_directories(args.out_dir);
    const LatentSpec& spec = lc.model.latent;
    for (i64 e : args.extra) require(e >= 0, "cmd_extrapolate: extra cells must be >= 0");
    Rng rng(Rng::mix64(args.seed));
    Tensor core = sample_latents(spec, 1, rng);  // same draw order as cmd_generate
    Vec3 big{spec.spatial[0] + args.extra[0], spec.spatial[1] + args.extra[1],
             spec.spatial[2] + args.extra[2]};
    Shape zshape{1, spec.dim, big[0], big[1], big[2]};
    rvec zd((size_t)(numel(zshape)));
    const auto& cd = core.data();
    // core block at the low corner, fresh draws elsewhere in index order
    for (i64 c = 0; c < spec.dim; ++c)
        for (i64 x = 0; x < big[0]; ++x)
            for (i64 y = 0; y < big[1]; ++y)
                for (i64 z = 0; z < big[2]; ++z) {
                    size_t di = size_t(((c * big[0] + x) * big[1] + y) * big[2] + z);
                    if (x < spec.spatial[0] && y < spec.spatial[1] && z < spec.spatial[2])
                        zd[di] = cd[size_t(((c * spec.spatial[0] + x) * spec.spatial[1] + y) *
                                               spec.spatial[2] +
                                           z)];
                    else
                        zd[di] = real(rng.normal());
                }
    Tensor z = Tensor::from(zshape, std::move(zd));
    NoGradGuard ng;
    Tensor fake = run_generator(lc.model.g, z, /*train=*/false);
    const Shape& s = fake.shape();
    ExtrapolateResult res;
    res.sample = reshape(fake, {s[1], s[2], s[3], s[4]});
    int time_idx = -1;
    for (size_t i = 0; i < lc.model.channel_names.size(); ++i)
        if (lc.model.channel_names[i] == kTimeChannel) time_idx = int(i);
    if (time_idx >= 0) res.f_s = superposition_fraction(channel_volume(res.sample, time_idx));
    save_volume(unscale_sample(sample_from_tensor(res.sample, lc.model.channel_names)),
                args.out_dir + "/sample_0000.flvd");
    if (args.png) write_sample_pngs(res.sample, lc.model.channel_names, args.out_dir + "/sample_0");
    std::ofstream os(args.out_dir + "/report.txt", std::ios::trunc);
    os << "output shape: " << shape_str(res.sample.shape()) << "\n";
    if (time_idx >= 0) os << "f_s: " << res.f_s << "\n";
    return res;
}

// ---- ablation sweep --------------------------------------------------------------------------

struct AblateArgs {
    std::vector<std::string> presets;
    RunConfig base;
    int repeats = 1;
};

struct AblateRow {
    std::string preset;
    uint64_t seed = 0;
    std::string status;  // completed | collapsed
    double final_d_w = 0, mean_d_w = 0;
    double final_f_s = -1, mean_f_s = -1;
};

inline std::vector<AblateRow> cmd_ablate(const AblateArgs& args) {
    require(!args.presets.empty(), "cmd_ablate: at least one preset required");
    require(args.repeats >= 1, "cmd_ablate: repeats must be >= 1");
    std::vector<AblateRow> rows;
    std::filesystem::create_directories(args.base.out_dir);
    for (const std::string& preset : args.presets) {
        for (int r = 0; r < args.repeats; ++r) {
            RunConfig cfg = args.base;
            cfg.preset = preset;
            cfg.arch = resolve_preset(preset);
            cfg.train.seed = hash_combine(args.base.train.seed, hash_combine(
                                              std::hash<std::string>{}(preset), uint64_t(r)));
            cfg.out_dir = args.base.out_dir + "/" + preset + "_seed" + std::to_string(r);
            sync_train_with_arch(cfg);
            TrainResult res = cmd_train(cfg);
            AblateRow row;
            row.preset = preset;
            row.seed = cfg.train.seed;
            row.status = res.collapsed ? "collapsed" : "completed";
            double acc_d = 0, acc_f = 0;
            i64 cnt = 0, cnt_f = 0;
            for (const MetricsRecord& m : res.metrics) {
                acc_d += m.d_w;
                ++cnt;
                if (m.f_s >= 0) {
                    acc_f += m.f_s;
                    ++cnt_f;
                }
            }
            if (cnt > 0) {
                row.final_d_w = res.metrics.back().d_w;
                row.mean_d_w = acc_d / double(cnt);
            }
            if (cnt_f > 0) {
                row.final_f_s = res.metrics.back().f_s;
                row.mean_f_s = acc_f / double(cnt_f);
            }
            rows.push_back(row);
        }
    }
    std::ofstream os(args.base.out_dir + "/ablate_table.csv", std::ios::trunc);
    os << "preset,seed,status,final_d_w,mean_d_w,final_f_s,mean_f_s\n";
    for (const AblateRow& r : rows) {
        char line[256];
        std::snprintf(line, sizeof line, "%s,%llu,%s,%.17g,%.17g,%.17g,%.17g\n", r.preset.c_str(),
                      (unsigned long long)r.seed, r.status.c_str(), r.final_d_w, r.mean_d_w,
                      r.final_f_s, r.mean_f_s);
        os << line;
    }
    return rows;
}

// ---- synthetic dataset emission ------------------------------------------------------------

inline std::vector<std::string> cmd_synth(const SynthParams& params, i64 count, uint64_t seed,
                                          const std::string& out_dir) {
    require(count >= 0, "cmd_synth: negative count");
    std::filesystem::create_directories(out_dir);
    std::vector<std::string> paths;
    for (i64 i = 1; i <= count; ++i) {
        VoxelVolume v = synth_generate(hash_combine(seed, uint64_t(i)), params);
        char name[64];
        std::snprintf(name, sizeof name, "vol_%05lld.flvd", (long long)i);
        std::string path = out_dir + "/" + name;
        save_volume(v, path);
        paths.push_back(path);
    }
    return paths;
}

// ---- run reporting --------------------------------------------------------------------------

struct ReportArgs {
    std::string run_dir;
    i64 samples = 2;
};

inline std::string cmd_report(const ReportArgs& args) {
    namespace fs = std::filesystem;
    std::string metrics_path = args.run_dir + "/metrics.csv";
    if (!fs::exists(metrics_path)) throw DataError("cmd_report: missing metrics file " + metrics_path);

    std::vector<double> iters, dws, fss;
    {
        std::ifstream is(metrics_path);
        std::string line;
        std::getline(is, line);  // header
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            std::vector<std::string> cells;
            size_t start = 0;
            while (true) {
                size_t comma = line.find(',', start);
                cells.push_back(line.substr(start, comma == std::string::npos ? comma : comma - start));
                if (comma == std::string::npos) break;
                start = comma + 1;
            }
            if (cells.size() != 6) continue;
            iters.push_back(std::stod(cells[0]));
            dws.push_back(std::stod(cells[3]));
            fss.push_back(cells[4].empty() ? -1.0 : std::stod(cells[4]));
        }
    }

    std::ostringstream summary;
    summary << "run report: " << args.run_dir << "\n";
    {
        std::ifstream is(args.run_dir + "/config.json");
        if (is) {
            summary << "config:\n";
            std::string line;
            while (std::getline(is, line)) summary << "  " << line << "\n";
        }
    }
    if (!iters.empty()) {
        summary << "metric rows: " << iters.size() << "\n";
        summary << "final d_W: " << dws.back() << "\n";
        if (fss.back() >= 0) summary << "final f_s: " << fss.back() << "\n";
        if (iters.size() >= 2) {
            png_write(render_line_plot(iters, dws), args.run_dir + "/d_w.png");
            bool have_fs = true;
            for (double f : fss) have_fs = have_fs && f >= 0;
            if (have_fs) png_write(render_line_plot(iters, fss), args.run_dir + "/f_s.png");
        }
    } else {
        summary << "metric rows: 0\n";
    }

    // latest checkpoint: slices and the network description
    i64 best_iter = -1;
    std::string best;
    std::string ckpt_dir = args.run_dir + "/checkpoints";
    if (fs::is_directory(ckpt_dir)) {
        for (const auto& e : fs::directory_iterator(ckpt_dir)) {
            std::string stem = e.path().stem().string();
            if (stem.rfind("iter_", 0) != 0) continue;
            i64 it = std::stoll(stem.substr(5));
            if (it > best_iter) {
                best_iter = it;
                best = e.path().string();
            }
        }
    }
    if (best_iter > 0 && args.samples > 0) {
        LoadedCheckpoint lc = load_checkpoint(best);
        summary << "checkpoint: iter_" << best_iter << "\n";
        Shape zshape{1, lc.model.latent.dim, lc.model.latent.spatial[0], lc.model.latent.spatial[1],
                     lc.model.latent.spatial[2]};
        summary << lc.model.g.describe(zshape);
        Shape xshape{1, lc.model.arch.channels_out, lc.model.arch.target_shape[0],
                     lc.model.arch.target_shape[1], lc.model.arch.target_shape[2]};
        summary << lc.model.d.describe(xshape);
        Rng rng(Rng::mix64(best_iter >= 0 ? uint64_t(best_iter) : 0));
        std::vector<Tensor> samples = generate_samples(lc.model, args.samples, rng, 4);
        for (i64 i = 0; i < i64(samples.size()); ++i)
            write_sample_pngs(samples[size_t(i)], lc.model.channel_names,
                              args.run_dir + "/report_sample_" + std::to_string(i));
    }
    std::string text = summary.str();
    std::ofstream os(args.run_dir + "/summary.txt", std::ios::trunc);
    os << text;
    return text;
}

}  // namespace fluvgan
