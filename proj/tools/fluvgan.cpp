// fluvgan: train, sample, and validate 3D GANs on fluvial stratigraphy volumes.

#include <CLI11.hpp>

#include "fluvgan/commands.hpp"

using namespace fluvgan;

namespace {

Vec3 to_vec3(const std::vector<long long>& v, const std::string& what) {
    if (v.size() != 3) throw ConfigError(what + " needs exactly three values");
    return {v[0], v[1], v[2]};
}

RunConfig load_base_config(const std::string& config_path) {
    RunConfig cfg;
    if (config_path.empty()) {
        sync_train_with_arch(cfg);
        return cfg;
    }
    std::ifstream is(config_path);
    if (!is) throw DataError("cannot open config file '" + config_path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"anisotropic 3D GAN toolkit for fluvial deposit volumes"};
    app.require_subcommand(1);

    std::string config_path;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string out_dir;
    int threads = 1;
    app.add_option("--config", config_path, "JSON run configuration");
    auto* seed_opt = app.add_option("--seed", seed, "global RNG seed");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--threads", threads, "worker threads (--threads 1 guarantees determinism)");

    // train
    auto* train_cmd = app.add_subcommand("train", "train a GAN on synthetic or FLVD data");
    std::string preset, data_arg, resume, loss_mode;
    long long g_iters = -1, batch = -1, base_channels = -1, latent_dim = -1, channels = -1;
    long long val_interval = -1, ckpt_interval = -1, val_batch = -1, synth_count = -1;
    std::vector<long long> latent_spatial, sample_size;
    bool facies = false;
    train_cmd->add_option("--preset", preset, "architecture preset arch0..arch8");
    train_cmd->add_option("--data", data_arg, "'synth' or a directory of .flvd files");
    train_cmd->add_option("--g-iters", g_iters, "generator iterations");
    train_cmd->add_option("--batch", batch, "batch size");
    train_cmd->add_option("--base-channels", base_channels, "width of the last generator stage");
    train_cmd->add_option("--latent-dim", latent_dim, "latent channel count");
    train_cmd->add_option("--latent-spatial", latent_spatial, "latent spatial extents")->expected(3);
    train_cmd->add_option("--sample-size", sample_size, "training sample extents")->expected(3);
    train_cmd->add_option("--channels", channels, "1 (coarse) or 2 (coarse + time)");
    train_cmd->add_option("--val-interval", val_interval, "iterations between metric rows");
    train_cmd->add_option("--ckpt-interval", ckpt_interval, "iterations between checkpoints");
    train_cmd->add_option("--val-batch", val_batch, "samples per metrics point");
    train_cmd->add_option("--synth-count", synth_count, "synthetic dataset size");
    train_cmd->add_flag("--facies", facies, "train on Folk facies classes of the coarse fraction");
    train_cmd->add_option("--loss-mode", loss_mode, "nonsaturating_bce | wgan_gp");
    train_cmd->add_option("--resume", resume, "checkpoint to resume from");

    // generate
    auto* gen_cmd = app.add_subcommand("generate", "decode samples from a checkpoint");
    std::string checkpoint;
    long long count = 8;
    bool png = false;
    gen_cmd->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    gen_cmd->add_option("--count", count, "number of samples");
    gen_cmd->add_flag("--png", png, "write grayscale slice renders");

    // validate
    auto* val_cmd = app.add_subcommand("validate", "d_W, f_s, MDS and memorization report");
    std::string v_checkpoint, v_data, v_ref_mode = "sample";
    long long v_gen = 64, v_mds = 24, v_nearest = 0, v_synth_count = 64, v_channels = -1;
    std::vector<long long> v_sample_size;
    bool v_facies = false;
    val_cmd->add_option("--checkpoint", v_checkpoint, "checkpoint path")->required();
    val_cmd->add_option("--data", v_data, "'synth' or a directory of .flvd files");
    val_cmd->add_option("--gen-count", v_gen, "generated samples");
    val_cmd->add_option("--mds-items", v_mds, "items per set in the MDS embedding");
    val_cmd->add_option("--nearest", v_nearest, "rows in the nearest-training table");
    val_cmd->add_option("--ref-mode", v_ref_mode, "sample | extremity");
    val_cmd->add_option("--synth-count", v_synth_count, "synthetic reference volumes");
    val_cmd->add_option("--sample-size", v_sample_size, "reference sample extents")->expected(3);
    val_cmd->add_option("--channels", v_channels, "reference channels (1 or 2)");
    val_cmd->add_flag("--facies", v_facies, "reference volumes carry Folk facies classes");

    // interpolate
    auto* interp_cmd = app.add_subcommand("interpolate", "bilinear latent grid between 4 seeds");
    std::string i_checkpoint;
    std::vector<unsigned long long> corners{1, 2, 3, 4};
    long long grid = 4;
    bool spherical = false, i_png = false;
    interp_cmd->add_option("--checkpoint", i_checkpoint, "checkpoint path")->required();
    interp_cmd->add_option("--corners", corners, "four corner seeds")->expected(4);
    interp_cmd->add_option("--grid", grid, "grid resolution g (g x g samples)");
    interp_cmd->add_flag("--spherical", spherical, "slerp instead of lerp");
    interp_cmd->add_flag("--png", i_png, "write grayscale slice renders");

    // extrapolate
    auto* extra_cmd = app.add_subcommand("extrapolate", "enlarge the latent grid spatially");
    std::string e_checkpoint;
    std::vector<long long> extra{0, 0, 0};
    bool e_png = false;
    extra_cmd->add_option("--checkpoint", e_checkpoint, "checkpoint path")->required();
    extra_cmd->add_option("--extra", extra, "added latent cells per axis")->expected(3);
    extra_cmd->add_flag("--png", e_png, "write grayscale slice renders");

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "train several presets with repeats");
    std::vector<std::string> presets;
    long long repeats = 1, a_g_iters = -1, a_batch = -1, a_base_channels = -1, a_synth_count = -1;
    std::vector<long long> a_sample_size, a_latent_spatial;
    long long a_latent_dim = -1;
    ablate_cmd->add_option("--presets", presets, "preset names")->required();
    ablate_cmd->add_option("--repeats", repeats, "models per preset");
    ablate_cmd->add_option("--g-iters", a_g_iters, "generator iterations");
    ablate_cmd->add_option("--batch", a_batch, "batch size");
    ablate_cmd->add_option("--base-channels", a_base_channels, "generator base width");
    ablate_cmd->add_option("--synth-count", a_synth_count, "synthetic dataset size");
    ablate_cmd->add_option("--sample-size", a_sample_size, "sample extents")->expected(3);
    ablate_cmd->add_option("--latent-spatial", a_latent_spatial, "latent spatial extents")->expected(3);
    ablate_cmd->add_option("--latent-dim", a_latent_dim, "latent channels");

    // synth
    auto* synth_cmd = app.add_subcommand("synth", "emit synthetic FLVD volumes");
    long long s_count = 16;
    std::vector<long long> s_dims;
    long long s_layers = -1;
    bool s_carve = false;
    synth_cmd->add_option("--count", s_count, "volumes to generate");
    synth_cmd->add_option("--dims", s_dims, "grid extents")->expected(3);
    synth_cmd->add_option("--n-layers", s_layers, "depositional layers");
    synth_cmd->add_flag("--carve", s_carve, "leave empty cells above the topography");

    // report
    auto* report_cmd = app.add_subcommand("report", "plots, slices and summary of a run directory");
    std::string run_dir;
    long long r_samples = 2;
    report_cmd->add_option("--run", run_dir, "run directory")->required();
    report_cmd->add_option("--samples", r_samples, "samples to render");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }
    seed_set = seed_opt->count() > 0;

    try {
        set_threads(threads);
        if (train_cmd->parsed() || ablate_cmd->parsed()) {
            RunConfig cfg = load_base_config(config_path);
            cfg.threads = threads;
            if (seed_set) cfg.train.seed = seed;
            if (!out_dir.empty()) cfg.out_dir = out_dir;
            auto apply_common = [&](const std::string& d_arg, long long gi, long long b,
                                    long long bc, long long sc,
                                    const std::vector<long long>& ss,
                                    const std::vector<long long>& ls, long long ld) {
                if (!d_arg.empty()) {
                    if (d_arg == "synth") {
                        cfg.data.kind = "synth";
                    } else {
                        cfg.data.kind = "flvd";
                        cfg.data.path = d_arg;
                    }
                }
                if (gi >= 0) cfg.train.total_g_iterations = gi;
                if (b >= 0) cfg.train.batch_size = b;
                if (bc >= 0) cfg.arch.base_channels = bc;
                if (sc >= 0) cfg.data.synth_count = sc;
                if (!ss.empty()) cfg.data.sample_size = to_vec3(ss, "--sample-size");
                if (!ls.empty()) cfg.latent.spatial = to_vec3(ls, "--latent-spatial");
                if (ld >= 0) cfg.latent.dim = ld;
            };
            if (train_cmd->parsed()) {
                if (!preset.empty()) {
                    cfg.preset = preset;
                    cfg.arch = resolve_preset(preset);
                }
                apply_common(data_arg, g_iters, batch, base_channels, synth_count, sample_size,
                             latent_spatial, latent_dim);
                if (channels >= 0) cfg.data.channels = channels;
                if (facies) cfg.data.facies = true;
                if (val_interval >= 0) cfg.train.validation_interval = val_interval;
                if (ckpt_interval >= 0) cfg.train.checkpoint_interval = ckpt_interval;
                if (val_batch >= 0) cfg.train.val_batch = val_batch;
                if (!loss_mode.empty()) {
                    if (loss_mode == "wgan_gp")
                        cfg.train.loss_mode = LossMode::WganGp;
                    else if (loss_mode == "nonsaturating_bce")
                        cfg.train.loss_mode = LossMode::NonsaturatingBce;
                    else
                        throw ConfigError("unknown --loss-mode '" + loss_mode + "'");
                }
                sync_train_with_arch(cfg);
                TrainResult res = cmd_train(cfg, resume);
                if (res.collapsed) {
                    std::cerr << "training collapsed: " << res.diagnostic << "\n";
                    return 3;
                }
                std::cout << "completed " << res.completed_iterations << " generator iterations -> "
                          << cfg.out_dir << "\n";
            } else {
                apply_common("", a_g_iters, a_batch, a_base_channels, a_synth_count, a_sample_size,
                             a_latent_spatial, a_latent_dim);
                AblateArgs args;
                args.presets = presets;
                args.repeats = int(repeats);
                args.base = cfg;
                sync_train_with_arch(args.base);
                auto rows = cmd_ablate(args);
                for (const auto& r : rows)
                    std::cout << r.preset << " seed=" << r.seed << " " << r.status
                              << " final_d_w=" << r.final_d_w << " final_f_s=" << r.final_f_s << "\n";
            }
        } else if (gen_cmd->parsed()) {
            auto paths = cmd_generate(checkpoint, count, seed, out_dir.empty() ? "generated" : out_dir,
                                      png);
            std::cout << "wrote " << paths.size() << " samples\n";
        } else if (val_cmd->parsed()) {
            ValidateArgs args;
            args.checkpoint = v_checkpoint;
            RunConfig base = load_base_config(config_path);
            args.data = base.data;
            if (!v_data.empty()) {
                if (v_data == "synth") {
                    args.data.kind = "synth";
                } else {
                    args.data.kind = "flvd";
                    args.data.path = v_data;
                }
            }
            if (v_synth_count >= 0) args.data.synth_count = v_synth_count;
            if (!v_sample_size.empty()) args.data.sample_size = to_vec3(v_sample_size, "--sample-size");
            if (v_channels >= 0) args.data.channels = v_channels;
            if (v_facies) args.data.facies = true;
            if (args.data.kind == "synth" && !args.data.synth_dims_set)
                args.data.synth.dims = args.data.sample_size;
            args.gen_count = v_gen;
            args.mds_items = v_mds;
            args.nearest_count = v_nearest;
            args.ref_mode = v_ref_mode;
            args.seed = seed;
            args.out_dir = out_dir.empty() ? "validate" : out_dir;
            ValidateReport rep = cmd_validate(args);
            std::cout << rep.report_text;
        } else if (interp_cmd->parsed()) {
            InterpolateArgs args;
            args.checkpoint = i_checkpoint;
            for (int i = 0; i < 4; ++i) args.corner_seeds[size_t(i)] = corners[size_t(i)];
            args.grid = grid;
            args.spherical = spherical;
            args.png = i_png;
            args.out_dir = out_dir.empty() ? "interpolate" : out_dir;
            auto samples = cmd_interpolate(args);
            std::cout << "wrote " << samples.size() << " grid samples\n";
        } else if (extra_cmd->parsed()) {
            ExtrapolateArgs args;
            args.checkpoint = e_checkpoint;
            args.extra = to_vec3(extra, "--extra");
            args.seed = seed;
            args.png = e_png;
            args.out_dir = out_dir.empty() ? "extrapolate" : out_dir;
            ExtrapolateResult res = cmd_extrapolate(args);
            std::cout << "output shape " << shape_str(res.sample.shape());
            if (res.f_s >= 0) std::cout << "  f_s " << res.f_s;
            std::cout << "\n";
        } else if (synth_cmd->parsed()) {
            SynthParams params;
            if (!s_dims.empty()) params.dims = to_vec3(s_dims, "--dims");
            if (s_layers >= 0) params.n_layers = s_layers;
            params.carve_topography = s_carve;
            auto paths = cmd_synth(params, s_count, seed, out_dir.empty() ? "synth" : out_dir);
            std::cout << "wrote " << paths.size() << " volumes\n";
        } else if (report_cmd->parsed()) {
            ReportArgs args;
            args.run_dir = run_dir;
            args.samples = r_samples;
            std::cout << cmd_report(args);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
