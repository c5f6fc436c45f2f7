#pragma once

// Stage orchestration: dataset generation, recognizer / base / controller
// training, conditional generation, evaluation, ablation, and recognizer
// augmentation. Each stage owns a run directory via a lock file, checks its
// upstream artifacts, and writes a manifest with content hashes.

#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "checkpoint.hpp"
#include "conditions.hpp"
#include "config.hpp"
#include "controller.hpp"
#include "denoiser.hpp"
#include "diffusion.hpp"
#include "evalkit.hpp"
#include "recognizer.hpp"
#include "toyworld.hpp"

namespace placediff {

// ---- configuration projections ----

inline WorldConfig world_of(const RunConfig& c) {
    WorldConfig wc;
    wc.places = c.places;
    wc.views = c.views;
    wc.image = c.image;
    return wc;
}

inline DenoiserConfig denoiser_cfg_of(const RunConfig& c) {
    DenoiserConfig d;
    d.image = c.image;
    d.d_model = c.d_model;
    d.c1 = c.d_model / 2;
    d.blocks = c.blocks;
    d.ffn_hidden = 2 * c.d_model;
    d.cond.d_model = c.d_model;
    d.cond.image = c.image;
    d.cond.place_tokens = c.place_tokens;
    d.cond.view_stride = world_of(c).stride();
    return d;
}

inline ControllerConfig controller_cfg_of(const RunConfig& c, AblationArm arm) {
    ControllerConfig cc;
    cc.d_place = c.d_place;
    cc.d_model = c.d_model;
    cc.n_tokens = c.place_tokens;
    cc.proj_hidden = c.proj_hidden;
    cc.perceiver_layers = c.perceiver_layers;
    cc.perceiver_inner = c.perceiver_inner;
    cc.mode = projector_mode_from(c.projector);
    cc.xattn_sites = c.blocks;
    if (arm == AblationArm::no_perceiver) cc.perceiver_enabled = false;
    if (arm == AblationArm::cascaded_mlps) cc.mode = ProjectorMode::cascaded_mlp;
    return cc;
}

inline AttributeEncoderConfig attr_cfg_of(const RunConfig& c) {
    return {c.image, c.d_model};
}

// ---- run directory layout ----

inline fs::path data_dir(const fs::path& dir) { return dir / "data"; }
inline fs::path recog_ckpt_path(const fs::path& dir) { return dir / "recognizer.ckpt"; }
inline fs::path base_ckpt_path(const fs::path& dir) { return dir / "base.ckpt"; }
inline fs::path ctrl_ckpt_path(const fs::path& dir, AblationArm arm) {
    return dir / ("ctrl_" + std::string(ablation_arm_name(arm)) + ".ckpt");
}
inline fs::path gen_dir(const fs::path& dir, const std::string& tag) { return dir / ("gen_" + tag); }
inline fs::path eval_json_path(const fs::path& dir, const std::string& tag) {
    return dir / ("eval_" + tag + ".json");
}

inline int worker_threads() {
    const char* s = std::getenv("PLACEDIFF_THREADS");
    const int n = s ? std::atoi(s) : 1;
    return std::max(1, n);
}

// one command owns a run directory at a time
class RunLock {
public:
    explicit RunLock(const fs::path& dir) : path_(dir / "lock") {
        fs::create_directories(dir);
        if (fs::exists(path_)) {
            throw std::runtime_error("run directory is locked by another command: " + path_.string());
        }
        write_file(path_, "locked\n");
    }
    ~RunLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    fs::path path_;
};

inline std::string hash_path(const fs::path& p) {
    if (fs::is_directory(p)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(p)) {
            if (e.is_regular_file()) files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& f : files) {
            const std::string rel = fs::relative(f, p).generic_string();
            h = fnv1a64(rel.data(), rel.size(), h);
            const std::string body = read_file(f);
            h = fnv1a64(body.data(), body.size(), h);
        }
        return hex64(h);
    }
    return file_hash_hex(p);
}

inline void write_manifest(const fs::path& dir, const std::string& stage, const RunConfig& cfg,
                           const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs,
                           nlohmann::json extra = nlohmann::json::object()) {
    nlohmann::json m;
    m["stage"] = stage;
    m["config"] = config_to_json(cfg);
    for (const auto& p : inputs) m["inputs"][fs::relative(p, dir).generic_string()] = hash_path(p);
    for (const auto& p : outputs) m["outputs"][fs::relative(p, dir).generic_string()] = hash_path(p);
    m["extra"] = std::move(extra);
    write_file(dir / (stage + ".manifest.json"), m.dump(2) + "\n");
}

inline void require_stage(const fs::path& artifact, const std::string& producing_stage) {
    if (!fs::exists(artifact)) {
        throw std::runtime_error("missing artifact " + artifact.string() + "; run stage '" +
                                 producing_stage + "' first");
    }
}

// ---- pixel <-> diffusion domain ----

inline Tensor center_image(const Tensor& img) {
    Tensor x = img;
    for (double& v : x.data) v = 2.0 * v - 1.0;
    return x;
}

// back to [0,1] on the 8-bit grid so disk round-trips are exact
inline Tensor decenter_image(const Tensor& x) {
    Tensor img = x;
    for (double& v : img.data) {
        const double u = std::clamp((v + 1.0) * 0.5, 0.0, 1.0);
        v = std::round(u * 255.0) / 255.0;
    }
    return img;
}

// ---- stages ----

inline void stage_gen_data(const RunConfig& cfg, const fs::path& dir) {
    RunLock lock(dir);
    const WorldConfig wc = world_of(cfg);
    Dataset ds = build_dataset(wc, cfg.n_scenes, cfg.world_seed);
    save_dataset(ds, data_dir(dir));
    write_manifest(dir, "gen-data", cfg, {}, {data_dir(dir)});
}

inline RecognizerConfig recog_cfg_of(const RunConfig& cfg) {
    RecognizerConfig rc;
    rc.image = cfg.image;
    rc.embed_dim = cfg.d_place;
    rc.classes = cfg.places;
    rc.steps = cfg.recog_steps;
    rc.batch = cfg.recog_batch;
    rc.lr = cfg.recog_lr;
    return rc;
}

inline void save_params_checkpoint(const fs::path& path, const RunConfig& cfg, ParamStore params,
                                   std::uint64_t step, Rng* rng = nullptr) {
    Checkpoint ck;
    ck.config = config_to_json(cfg);
    ck.sched_T = cfg.T;
    ck.beta_start = cfg.beta_start;
    ck.beta_end = cfg.beta_end;
    ck.step = step;
    if (rng) rng->state(ck.rng_state.data());
    ck.params = std::move(params);
    save_checkpoint(path, ck);
}

inline void stage_train_recognizer(const RunConfig& cfg, const fs::path& dir) {
    RunLock lock(dir);
    require_stage(data_dir(dir), "gen-data");
    const WorldConfig wc = world_of(cfg);
    Dataset ds = load_dataset(data_dir(dir), wc);
    Recognizer rec = train_recognizer(ds.train, recog_cfg_of(cfg), mix_seed(cfg.seed, 0xA111, 0, 0));
    save_params_checkpoint(recog_ckpt_path(dir), cfg, rec.ps, cfg.recog_steps);
    nlohmann::json extra;
    extra["train_accuracy"] = train_accuracy(rec, ds.train);
    write_manifest(dir, "train-recognizer", cfg, {data_dir(dir)}, {recog_ckpt_path(dir)}, extra);
}

inline Recognizer load_recognizer(const RunConfig& cfg, const fs::path& dir) {
    require_stage(recog_ckpt_path(dir), "train-recognizer");
    Checkpoint ck = load_checkpoint(recog_ckpt_path(dir));
    Recognizer rec;
    rec.cfg = recog_cfg_of(cfg);
    rec.ps = std::move(ck.params);
    rec.frozen = true;
    return rec;
}

inline void stage_train_base(const RunConfig& cfg, const fs::path& dir) {
    RunLock lock(dir);
    require_stage(data_dir(dir), "gen-data");
    const WorldConfig wc = world_of(cfg);
    Dataset ds = load_dataset(data_dir(dir), wc);

    Denoiser dn{denoiser_cfg_of(cfg)};
    ParamStore ps;
    Rng rng(mix_seed(cfg.seed, 0xBA5E, 0, 0));
    dn.init_base(ps, rng);
    AttributeEncoder ae{attr_cfg_of(cfg)};
    ae.init(ps, rng);   // frozen feature extractor rides in the same store

    const NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
    const int warmup = static_cast<int>(cfg.warmup_frac * cfg.base_steps);
    CsvWriter losses(dir / "losses_base.csv");
    losses.row({"step", "L_base"});

    for (int step = 1; step <= cfg.base_steps; ++step) {
        Tape tp;
        Binding bind(tp, ps);
        Ref loss = -1;
        for (int b = 0; b < cfg.base_batch; ++b) {
            const RenderedScene& sc = ds.train[rng.below(ds.train.size())];
            std::vector<Tensor> x0;
            for (const auto& v : sc.views) x0.push_back(center_image(v));
            CondTokens ct =
                encode_conditions(tp, bind, condition_of(sc, wc.views), dn.cfg.cond);
            Ref l = hybrid_loss_graph(
                tp, x0, sched, rng,
                [&](Tape& t2, const std::vector<Ref>& xt, int tt) {
                    return dn.predict(t2, bind, xt, tt, ct);
                },
                cfg.base_loss_cap);
            loss = (loss < 0) ? l : tp.add(loss, l);
        }
        loss = tp.scale(loss, 1.0 / cfg.base_batch);
        tp.backward(loss);
        bind.harvest();
        adamw_step(ps, warmup_lr(cfg.base_lr, step - 1, warmup), cfg.weight_decay, {}, step);
        ps.zero_grad();
        losses.row({std::to_string(step), fmt_double(tp.val(loss).data[0])});
    }
    save_params_checkpoint(base_ckpt_path(dir), cfg, std::move(ps), cfg.base_steps, &rng);
    write_manifest(dir, "train-base", cfg, {data_dir(dir)},
                   {base_ckpt_path(dir), dir / "losses_base.csv"});
}

// per-view box rectangles for reference masking
inline std::vector<ViewRect> rects_in_view(const SceneSpec& spec, int view) {
    std::vector<ViewRect> out;
    for (const auto& b : spec.boxes) {
        if (view < static_cast<int>(b.rects.size())) out.push_back(b.rects[view]);
    }
    return out;
}

inline void stage_train_controller(const RunConfig& cfg, const fs::path& dir, AblationArm arm) {
    RunLock lock(dir);
    require_stage(data_dir(dir), "gen-data");
    require_stage(base_ckpt_path(dir), "train-base");
    const WorldConfig wc = world_of(cfg);
    Dataset ds = load_dataset(data_dir(dir), wc);
    Recognizer rec = load_recognizer(cfg, dir);

    Checkpoint base = load_checkpoint(base_ckpt_path(dir));
    ParamStore ps = std::move(base.params);
    ps.freeze_prefix("base.");
    ps.freeze_prefix("attr.");

    // freeze contract: hard error before step 1 if any base parameter thawed
    std::map<std::string, std::vector<double>> base_before;
    for (const auto& e : ps.entries()) {
        if (e.name.rfind("base.", 0) == 0 || e.name.rfind("attr.", 0) == 0) {
            if (!e.frozen) {
                throw std::runtime_error("controller training: base parameter not frozen: " + e.name);
            }
            base_before[e.name] = e.value.data;
        }
    }

    const ControllerConfig ccfg = controller_cfg_of(cfg, arm);
    PlaceController pc{ccfg};
    Rng rng(mix_seed(cfg.seed, 0xC781, static_cast<std::uint64_t>(arm), 0));
    pc.init(ps, rng);

    Denoiser dn{denoiser_cfg_of(cfg)};
    AttributeEncoder ae{attr_cfg_of(cfg)};
    const NoiseSchedule sched = make_schedule(base.sched_T, base.beta_start, base.beta_end);
    const double lambda = (arm == AblationArm::no_softclip) ? 0.0 : cfg.lambda;
    const int warmup = static_cast<int>(cfg.warmup_frac * cfg.ctrl_steps);

    // train scenes grouped by place for other-frame reference lookup
    std::map<int, std::vector<int>> by_place;
    for (int i = 0; i < static_cast<int>(ds.train.size()); ++i) {
        by_place[ds.train[i].spec.place_id].push_back(i);
    }

    const std::string arm_name = ablation_arm_name(arm);
    CsvWriter losses(dir / ("losses_ctrl_" + arm_name + ".csv"));
    losses.row({"step", "L_base", "L_SoftCLIP", "L_total"});

    for (int step = 1; step <= cfg.ctrl_steps; ++step) {
        Tape tp;
        Binding bind(tp, ps);

        // distinct scenes per batch so the SoftCLIP teacher has spread
        std::vector<int> batch;
        while (static_cast<int>(batch.size()) < cfg.ctrl_batch) {
            const int i = static_cast<int>(rng.below(ds.train.size()));
            if (std::find(batch.begin(), batch.end(), i) == batch.end()) batch.push_back(i);
        }

        Ref l_base = -1;
        std::vector<Ref> students;
        Tensor teacher = Tensor::matrix(cfg.ctrl_batch, cfg.d_model);
        for (int bi = 0; bi < cfg.ctrl_batch; ++bi) {
            const RenderedScene& sc = ds.train[batch[bi]];
            const int rv = static_cast<int>(rng.below(wc.views));
            const RenderedScene* ref = &sc;
            if (cfg.reference == "other_frame") {
                const auto& peers = by_place[sc.spec.place_id];
                std::vector<int> others;
                for (int idx : peers) {
                    if (ds.train[idx].spec.scene_id != sc.spec.scene_id) others.push_back(idx);
                }
                if (!others.empty()) ref = &ds.train[others[rng.below(others.size())]];
            }
            const Tensor& ref_img = ref->views[rv];
            const Tensor e = rec.embed(ref_img);
            const Tensor masked = mask_reference(ref_img, rects_in_view(ref->spec, rv), wc.sky_rows);
            Ref c_tok = ae.tokens_graph(tp, bind, tp.leaf(masked));
            Ref z = pc.tokens(tp, bind, tp.leaf(e), c_tok);
            if (lambda > 0.0) {
                students.push_back(pc.softclip_embed(tp, bind, z));
                const Tensor t_row = ae.pooled(ps, masked);
                for (int j = 0; j < cfg.d_model; ++j) teacher.at(bi, j) = t_row.data[j];
            }
            CondTokens ct =
                encode_conditions(tp, bind, condition_of(sc, wc.views), dn.cfg.cond, z);
            std::vector<Tensor> x0;
            for (const auto& v : sc.views) x0.push_back(center_image(v));
            // clean-image-space loss: the graft's contribution is slowly
            // varying content whose gradient the noise loss crushes at high t
            // the graft only matters where the noisy image no longer betrays
            // the place, so draw timesteps from the upper part of the schedule
            const int t_min = std::min(sched.T, 1 + static_cast<int>(sched.T * cfg.ctrl_t_lo));
            Ref l = x0_loss_graph(tp, x0, sched, rng,
                                  [&](Tape& t2, const std::vector<Ref>& xt, int tt) {
                                      return dn.predict(t2, bind, xt, tt, ct);
                                  },
                                  t_min);
            l_base = (l_base < 0) ? l : tp.add(l_base, l);
        }
        l_base = tp.scale(l_base, 1.0 / cfg.ctrl_batch);
        Ref total = l_base;
        double sc_val = 0.0;
        if (lambda > 0.0) {
            Ref l_sc = softclip_loss(tp, tp.concat_rows(students), teacher, cfg.tau);
            sc_val = tp.val(l_sc).data[0];
            total = total_loss(tp, l_base, l_sc, lambda);
        }
        tp.backward(total);
        bind.harvest();
        adamw_step(ps, warmup_cosine_lr(cfg.ctrl_lr, step - 1, warmup, cfg.ctrl_steps),
                   cfg.weight_decay, {}, step);
        ps.zero_grad();
        losses.row({std::to_string(step), fmt_double(tp.val(l_base).data[0]), fmt_double(sc_val),
                    fmt_double(tp.val(total).data[0])});
    }

    for (const auto& [name, before] : base_before) {
        if (ps.value(name).data != before) {
            throw std::runtime_error("freeze contract violated: " + name + " changed");
        }
    }
    save_params_checkpoint(ctrl_ckpt_path(dir, arm), cfg, std::move(ps), cfg.ctrl_steps, &rng);
    write_manifest(dir, "train-controller-" + arm_name, cfg,
                   {data_dir(dir), base_ckpt_path(dir), recog_ckpt_path(dir)},
                   {ctrl_ckpt_path(dir, arm), dir / ("losses_ctrl_" + arm_name + ".csv")});
}

// ---- generation ----

struct GenOptions {
    std::string tag;
    bool conditioned = true;
    AblationArm arm = AblationArm::full;
    std::uint64_t seed = 1;
};

// place tokens for a known place, averaged over every train reference of that
// place (all scenes, all views): single references carry frame-specific noise
// that averaging cancels, leaving a cleaner place prototype
inline Tensor place_tokens_for(const RunConfig& cfg, const WorldConfig& wc, ParamStore& ps,
                               const PlaceController& pc, const AttributeEncoder& ae,
                               const Recognizer& rec, const std::vector<RenderedScene>& train,
                               int place_id) {
    Tensor acc;
    int count = 0;
    for (const auto& sc : train) {
        if (sc.spec.place_id != place_id) continue;
        for (int v = 0; v < static_cast<int>(sc.views.size()); ++v) {
            const Tensor& img = sc.views[v];
            const Tensor e = rec.embed(img);
            const Tensor masked = mask_reference(img, rects_in_view(sc.spec, v), wc.sky_rows);
            Tape tp;
            Binding bind(tp, ps);
            Ref c_tok = ae.tokens_graph(tp, bind, tp.leaf(masked));
            const Tensor z = tp.val(pc.tokens(tp, bind, tp.leaf(e), c_tok));
            if (count == 0) {
                acc = z;
            } else {
                for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += z.data[i];
            }
            ++count;
        }
    }
    if (count == 0) throw std::runtime_error("no train scene for place " + std::to_string(place_id));
    for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] /= count;
    return acc;
}

// samples one scene's views; throws on non-finite pixels
inline std::vector<Tensor> generate_views(const RunConfig& cfg, ParamStore& ps, const Denoiser& dn,
                                          const NoiseSchedule& sched, const RenderedScene& condition,
                                          const Tensor* place_tokens, std::uint64_t seed) {
    const WorldConfig wc = world_of(cfg);
    const SceneCondition cond = condition_of(condition, wc.views);
    DenoiseFn fn = [&](const std::vector<Tensor>& xt, int t) {
        Tape tp;
        Binding bind(tp, ps);
        Ref place = place_tokens ? tp.leaf(*place_tokens) : -1;
        CondTokens ct = encode_conditions(tp, bind, cond, dn.cfg.cond, place);
        std::vector<Ref> xr;
        for (const auto& x : xt) xr.push_back(tp.leaf(x));
        auto preds = dn.predict(tp, bind, xr, t, ct);
        std::vector<Tensor> out;
        for (Ref r : preds) out.push_back(tp.val(r));
        return out;
    };
    std::vector<std::vector<int>> shapes(wc.views, {cfg.image * cfg.image, 3});
    auto xs = ancestral_sample(fn, shapes, sched, seed);
    std::vector<Tensor> views;
    for (auto& x : xs) views.push_back(decenter_image(x));
    return views;
}

inline void stage_generate(const RunConfig& cfg, const fs::path& dir, const GenOptions& opt) {
    RunLock lock(dir);
    require_stage(data_dir(dir), "gen-data");
    const fs::path ckpt = opt.conditioned ? ctrl_ckpt_path(dir, opt.arm) : base_ckpt_path(dir);
    require_stage(ckpt, opt.conditioned ? "train-controller" : "train-base");

    const WorldConfig wc = world_of(cfg);
    Dataset ds = load_dataset(data_dir(dir), wc);
    Checkpoint ck = load_checkpoint(ckpt);
    ParamStore ps = std::move(ck.params);
    Denoiser dn{denoiser_cfg_of(cfg)};
    AttributeEncoder ae{attr_cfg_of(cfg)};
    const NoiseSchedule sched = make_schedule(ck.sched_T, ck.beta_start, ck.beta_end);

    std::optional<Recognizer> rec;
    std::optional<PlaceController> pc;
    if (opt.conditioned) {
        rec = load_recognizer(cfg, dir);
        pc = PlaceController{controller_cfg_of(cfg, opt.arm)};
    }

    std::vector<const RenderedScene*> conds;
    for (const auto& sc : ds.val) conds.push_back(&sc);
    if (cfg.gen_count > 0 && cfg.gen_count < static_cast<int>(conds.size())) {
        conds.resize(cfg.gen_count);
    }

    // place tokens depend only on the place, not on the sampling trajectory
    std::map<int, Tensor> tokens_by_place;
    if (opt.conditioned) {
        for (const auto* sc : conds) {
            const int p = sc->spec.place_id;
            if (!tokens_by_place.count(p)) {
                tokens_by_place[p] =
                    place_tokens_for(cfg, wc, ps, *pc, ae, *rec, ds.train, p);
            }
        }
    }

    std::vector<std::optional<std::vector<Tensor>>> results(conds.size());
    const int threads = std::min<int>(worker_threads(), static_cast<int>(conds.size()));
    auto work = [&](int first, int step) {
        for (std::size_t i = first; i < conds.size(); i += step) {
            const auto& sc = *conds[i];
            const Tensor* pt =
                opt.conditioned ? &tokens_by_place.at(sc.spec.place_id) : nullptr;
            try {
                results[i] = generate_views(cfg, ps, dn, sched, sc, pt,
                                            mix_seed(opt.seed, sc.spec.scene_id,
                                                     static_cast<std::uint64_t>(opt.arm),
                                                     opt.conditioned ? 1 : 0));
            } catch (const std::exception&) {
                results[i].reset();   // counted as a failure below
            }
        }
    };
    if (threads <= 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
        for (auto& t : pool) t.join();
    }

    const fs::path out = gen_dir(dir, opt.tag);
    fs::create_directories(out);
    nlohmann::json index = nlohmann::json::array();
    int failures = 0;
    for (std::size_t i = 0; i < conds.size(); ++i) {
        const auto& sc = *conds[i];
        if (!results[i]) {
            ++failures;
            continue;
        }
        const std::string stem = scene_stem(sc.spec.scene_id);
        write_file(out / (stem + ".json"), spec_to_json(sc.spec).dump(2) + "\n");
        for (int v = 0; v < static_cast<int>(results[i]->size()); ++v) {
            write_ppm(out / (stem + "_v" + std::to_string(v) + ".ppm"), (*results[i])[v],
                      cfg.image, cfg.image);
        }
        index.push_back(stem);
    }
    write_file(out / "scenes.json", index.dump(2) + "\n");

    nlohmann::json extra;
    extra["tag"] = opt.tag;
    extra["conditioned"] = opt.conditioned;
    extra["arm"] = ablation_arm_name(opt.arm);
    extra["seed"] = opt.seed;
    extra["failures"] = failures;
    write_manifest(dir, "generate-" + opt.tag, cfg, {data_dir(dir), ckpt}, {out}, extra);
}

// ---- evaluation ----

inline std::vector<RenderedScene> load_generated(const fs::path& gdir, const WorldConfig& wc) {
    auto index = nlohmann::json::parse(read_file(gdir / "scenes.json"));
    std::vector<RenderedScene> out;
    for (const auto& stem_j : index) {
        const std::string stem = stem_j.get<std::string>();
        RenderedScene sc;
        sc.spec = spec_from_json(nlohmann::json::parse(read_file(gdir / (stem + ".json"))));
        for (int v = 0; v < wc.views; ++v) {
            int w = 0, h = 0;
            sc.views.push_back(read_ppm(gdir / (stem + "_v" + std::to_string(v) + ".ppm"), w, h));
        }
        sc.map_grid = map_grid_of(sc.spec, wc);
        out.push_back(std::move(sc));
    }
    return out;
}

inline FeatureSet attr_features(const AttributeEncoder& ae, const ParamStore& ps,
                                const std::vector<RenderedScene>& scenes, const std::string& source) {
    FeatureSet fsR;
    fsR.source = source;
    std::vector<Tensor> rows;
    for (const auto& sc : scenes) {
        for (int v = 0; v < static_cast<int>(sc.views.size()); ++v) {
            rows.push_back(ae.pooled(ps, sc.views[v]));
            fsR.ids.push_back(scene_stem(sc.spec.scene_id) + "_v" + std::to_string(v));
        }
    }
    fsR.rows = Tensor::matrix(static_cast<int>(rows.size()), ae.cfg.d_attr);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (int j = 0; j < ae.cfg.d_attr; ++j) fsR.rows.at(static_cast<int>(i), j) = rows[i].data[j];
    }
    return fsR;
}

inline EvalReport stage_eval(const RunConfig& cfg, const fs::path& dir, const std::string& tag) {
    RunLock lock(dir);
    require_stage(data_dir(dir), "gen-data");
    require_stage(gen_dir(dir, tag), "generate");
    require_stage(base_ckpt_path(dir), "train-base");

    const WorldConfig wc = world_of(cfg);
    Dataset ds = load_dataset(data_dir(dir), wc);
    Recognizer rec = load_recognizer(cfg, dir);
    std::vector<RenderedScene> gen = load_generated(gen_dir(dir, tag), wc);

    int failures = 0;
    const fs::path gen_manifest = dir / ("generate-" + tag + ".manifest.json");
    if (fs::exists(gen_manifest)) {
        failures = nlohmann::json::parse(read_file(gen_manifest)).at("extra").at("failures").get<int>();
    }

    const auto database = embed_scenes(rec, ds.train);
    const auto queries = embed_scenes(rec, gen);
    const int total = static_cast<int>(queries.size()) + failures * wc.views;
    const double scale = total ? static_cast<double>(queries.size()) / total : 0.0;

    EvalReport rep;
    rep.ar1 = queries.empty() ? 0.0 : recall_at_k(queries, database, 1) * scale;
    rep.ar5 = queries.empty() ? 0.0 : recall_at_k(queries, database, 5) * scale;

    Checkpoint base = load_checkpoint(base_ckpt_path(dir));
    AttributeEncoder ae{attr_cfg_of(cfg)};
    std::vector<RenderedScene> val_subset(ds.val.begin(),
                                          ds.val.begin() + std::min(ds.val.size(), gen.size() + failures));
    FeatureSet real = attr_features(ae, base.params, val_subset, "real");
    FeatureSet genf = attr_features(ae, base.params, gen, "generated");
    rep.frechet = frechet_distance(real, genf);
    const bool paired = failures == 0 && real.ids == genf.ids;
    rep.dist = distance_matrix(real, genf, paired);

    rep.metadata["tag"] = tag;
    rep.metadata["retrieval"] = "per-view, mean over views";
    rep.metadata["shrinkage"] =
        real.rows.rows() <= real.rows.cols() ? "applied (N <= F)" : "not needed";
    rep.metadata["failures"] = std::to_string(failures);
    rep.metadata["checkpoint"] = file_hash_hex(base_ckpt_path(dir));
    rep.validate();

    write_file(eval_json_path(dir, tag), rep.to_json().dump(2) + "\n");
    write_distance_csv(rep.dist, (dir / ("dist_" + tag + ".csv")).string());
    write_manifest(dir, "eval-" + tag, cfg, {data_dir(dir), gen_dir(dir, tag)},
                   {eval_json_path(dir, tag), dir / ("dist_" + tag + ".csv")});
    return rep;
}

// ---- ablation ----

inline std::vector<AblationRow> stage_ablate(const RunConfig& cfg, const fs::path& dir) {
    const std::vector<AblationArm> arms = {AblationArm::no_perceiver, AblationArm::no_softclip,
                                           AblationArm::cascaded_mlps, AblationArm::full};
    ArmRunner runner = [&](AblationArm arm) {
        const std::string name = ablation_arm_name(arm);
        if (!fs::exists(ctrl_ckpt_path(dir, arm))) stage_train_controller(cfg, dir, arm);
        GenOptions opt;
        opt.tag = "ablate_" + name;
        opt.arm = arm;
        opt.seed = cfg.seed;
        stage_generate(cfg, dir, opt);
        EvalReport rep = stage_eval(cfg, dir, opt.tag);
        AblationRow row;
        row.arm = name;
        row.ar1 = rep.ar1;
        row.ar5 = rep.ar5;
        return row;
    };
    auto rows = run_ablation(arms, runner);
    write_ablation_csv(rows, (dir / "ablation.csv").string());
    return rows;
}

// ---- augmentation loop ----

struct AugmentRow {
    std::string arm;   // baseline | aug_place | aug_uncond
    double ar1 = 0.0;
    double ar5 = 0.0;
};

inline std::vector<AugmentRow> stage_augment(const RunConfig& cfg, const fs::path& dir) {
    RunLock lock(dir);
    require_stage(data_dir(dir), "gen-data");
    require_stage(ctrl_ckpt_path(dir, AblationArm::full), "train-controller");
    const WorldConfig wc = world_of(cfg);
    Dataset ds = load_dataset(data_dir(dir), wc);
    Recognizer base_rec = load_recognizer(cfg, dir);

    Checkpoint ck = load_checkpoint(ctrl_ckpt_path(dir, AblationArm::full));
    ParamStore ps = std::move(ck.params);
    Denoiser dn{denoiser_cfg_of(cfg)};
    AttributeEncoder ae{attr_cfg_of(cfg)};
    PlaceController pc{controller_cfg_of(cfg, AblationArm::full)};
    const NoiseSchedule sched = make_schedule(ck.sched_T, ck.beta_start, ck.beta_end);

    // 1:1 synthetic companion per train scene, weather resampled uniformly
    Rng spec_rng(mix_seed(cfg.seed, 0xA060, 0, 0));
    std::vector<SceneSpec> synth_specs;
    for (const auto& sc : ds.train) {
        SceneSpec s = sample_spec(spec_rng, wc, sc.spec.place_id, wc.eval_weather_mix);
        s.scene_id = 100000 + sc.spec.scene_id;
        synth_specs.push_back(s);
    }
    std::map<int, Tensor> tokens_by_place;
    auto synth_scenes = [&](bool conditioned) {
        std::vector<RenderedScene> out;
        for (const auto& spec : synth_specs) {
            RenderedScene shell;
            shell.spec = spec;
            shell.map_grid = map_grid_of(spec, wc);
            const Tensor* pt = nullptr;
            if (conditioned) {
                if (!tokens_by_place.count(spec.place_id)) {
                    tokens_by_place[spec.place_id] = place_tokens_for(cfg, wc, ps, pc, ae, base_rec,
                                                                      ds.train, spec.place_id);
                }
                pt = &tokens_by_place.at(spec.place_id);
            }
            try {
                shell.views = generate_views(cfg, ps, dn, sched, shell, pt,
                                             mix_seed(cfg.seed, spec.scene_id, 0xF00D,
                                                      conditioned ? 1 : 0));
                out.push_back(std::move(shell));
            } catch (const std::exception&) {
                // failed generations are dropped from the augmentation pool
            }
        }
        return out;
    };

    auto eval_arm = [&](const std::vector<RenderedScene>& extra) {
        std::vector<RenderedScene> train = ds.train;
        train.insert(train.end(), extra.begin(), extra.end());
        Recognizer r = train_recognizer(train, recog_cfg_of(cfg), mix_seed(cfg.seed, 0xAE60, 1, 0));
        const auto db = embed_scenes(r, ds.train);
        const auto q = embed_scenes(r, ds.test);
        AugmentRow row;
        row.ar1 = recall_at_k(q, db, 1);
        row.ar5 = recall_at_k(q, db, 5);
        return row;
    };

    std::vector<AugmentRow> rows;
    rows.push_back(eval_arm({}));
    rows.back().arm = "baseline";
    rows.push_back(eval_arm(synth_scenes(true)));
    rows.back().arm = "aug_place";
    rows.push_back(eval_arm(synth_scenes(false)));
    rows.back().arm = "aug_uncond";

    CsvWriter csv(dir / "augment.csv");
    csv.row({"arm", "ar1", "ar5"});
    for (const auto& r : rows) csv.row({r.arm, fmt_double(r.ar1), fmt_double(r.ar5)});
    write_manifest(dir, "augment", cfg,
                   {data_dir(dir), ctrl_ckpt_path(dir, AblationArm::full), recog_ckpt_path(dir)},
                   {dir / "augment.csv"});
    return rows;
}

}  // namespace placediff
