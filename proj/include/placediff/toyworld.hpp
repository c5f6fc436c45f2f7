#pragma once

// Procedural multi-view street-scene world: each place is a seeded
// low-frequency background pattern plus a building silhouette sampled along
// a cyclic panorama; views are overlapping windows on that panorama.

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "io.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace placediff {

enum class Weather { clear = 0, rain = 1, night = 2 };
enum class BoxClass { car = 0, truck = 1, pedestrian = 2 };

inline const char* weather_name(Weather w) {
    switch (w) {
        case Weather::clear: return "clear";
        case Weather::rain: return "rain";
        case Weather::night: return "night";
    }
    throw std::invalid_argument("unknown weather code");
}

inline Weather weather_from(const std::string& s) {
    if (s == "clear") return Weather::clear;
    if (s == "rain") return Weather::rain;
    if (s == "night") return Weather::night;
    throw std::invalid_argument("unknown weather code: " + s);
}

struct WorldConfig {
    int places = 32;
    int views = 3;
    int image = 32;       // square views
    int overlap = 8;      // exact shared strip between adjacent views
    int period = 128;     // panorama circumference in pixels
    int sky_rows = 8;     // top band that mask_reference removes
    int box_max = 4;
    std::uint64_t pattern_seed = 90210;
    std::vector<double> train_weather_mix = {0.8, 0.1, 0.1};
    std::vector<double> eval_weather_mix = {1.0 / 3, 1.0 / 3, 1.0 / 3};

    int stride() const { return image - overlap; }
};

// axis-aligned rectangle in view pixels; w == 0 means not visible
struct ViewRect {
    int x0 = 0, y0 = 0, w = 0, h = 0;
};

struct SceneBox {
    BoxClass cls = BoxClass::car;
    int u0 = 0, v0 = 0, w = 0, h = 0;      // panorama coords
    std::vector<ViewRect> rects;           // one per view
};

struct SceneSpec {
    int scene_id = 0;
    int place_id = 0;
    Weather weather = Weather::clear;
    std::vector<SceneBox> boxes;
    double pano_offset = 0.0;

    // content key: identifies the (place, weather, boxes) triple
    std::uint64_t triple_key() const {
        std::uint64_t h = mix_seed(0x70c3, static_cast<std::uint64_t>(place_id),
                                   static_cast<std::uint64_t>(weather));
        for (const auto& b : boxes) {
            h = mix_seed(h, static_cast<std::uint64_t>(b.cls), static_cast<std::uint64_t>(b.u0),
                         static_cast<std::uint64_t>(b.v0));
            h = mix_seed(h, static_cast<std::uint64_t>(b.w), static_cast<std::uint64_t>(b.h));
        }
        return h;
    }

    std::uint64_t render_seed() const {
        return mix_seed(triple_key(), static_cast<std::uint64_t>(place_id),
                        static_cast<std::uint64_t>(pano_offset * 1024.0));
    }
};

struct RenderedScene {
    std::vector<Tensor> views;  // V tensors [image*image x 3], values in [0,1]
    Tensor map_grid;            // [8*8 x 1] binary occupancy
    SceneSpec spec;
};

// ---- per-place pattern ----

struct PlacePattern {
    double ca[3], cb[3];
    double f1, ph1, ph2;
    int skyline[16];  // silhouette height per 8-pixel block, in [4, sky_rows]
};

inline PlacePattern place_pattern(std::uint64_t pattern_seed, int place_id, int sky_rows) {
    Rng rng(mix_seed(pattern_seed, static_cast<std::uint64_t>(place_id), 0xbead));
    PlacePattern p;
    for (int c = 0; c < 3; ++c) p.ca[c] = rng.uniform(0.30, 0.85);
    for (int c = 0; c < 3; ++c) p.cb[c] = rng.uniform(0.30, 0.85);
    p.f1 = 1.0 + static_cast<double>(rng.below(3));  // 1..3 cycles per panorama
    p.ph1 = rng.uniform(0.0, 6.283185307179586);
    p.ph2 = rng.uniform(0.0, 6.283185307179586);
    for (int b = 0; b < 16; ++b) p.skyline[b] = 4 + static_cast<int>(rng.below(sky_rows - 3));
    return p;
}

// background color at panorama column u, row v; pure function of place
inline void background_pixel(const PlacePattern& p, const WorldConfig& wc, int u, int v, double out[3]) {
    u = ((u % wc.period) + wc.period) % wc.period;
    const int h = p.skyline[(u / 8) % 16];
    if (v < h) {
        const double a = static_cast<double>(v) / wc.sky_rows;
        out[0] = 0.55 + 0.23 * a;
        out[1] = 0.62 + 0.22 * a;
        out[2] = 0.78 + 0.14 * a;
        return;
    }
    const double tau = 6.283185307179586;
    const double w = 0.5 + 0.5 * std::sin(tau * p.f1 * u / wc.period + p.ph1 +
                                          0.6 * std::sin(tau * v / 32.0 + p.ph2));
    for (int c = 0; c < 3; ++c) out[c] = p.ca[c] + (p.cb[c] - p.ca[c]) * w;
}

inline void box_color(BoxClass c, double out[3]) {
    switch (c) {
        case BoxClass::car: out[0] = 0.80; out[1] = 0.12; out[2] = 0.12; return;
        case BoxClass::truck: out[0] = 0.12; out[1] = 0.25; out[2] = 0.80; return;
        case BoxClass::pedestrian: out[0] = 0.88; out[1] = 0.78; out[2] = 0.10; return;
    }
    throw std::invalid_argument("unknown box class");
}

// truncated standard normal from a stateless hash, used for rain noise
inline double hash_noise(std::uint64_t seed, int u, int v, int c) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(u), static_cast<std::uint64_t>(v),
                     static_cast<std::uint64_t>(c)));
    double g = rng.normal();
    return std::clamp(g, -3.0, 3.0);
}

inline int view_start(const WorldConfig& wc, double pano_offset, int view) {
    return static_cast<int>(std::lround(pano_offset)) + view * wc.stride();
}

inline std::vector<ViewRect> project_box(const WorldConfig& wc, const SceneSpec& spec, int u0, int v0,
                                         int w, int h) {
    std::vector<ViewRect> rects(wc.views);
    for (int k = 0; k < wc.views; ++k) {
        const int su = view_start(wc, spec.pano_offset, k);
        int first = -1, last = -1;
        for (int x = 0; x < wc.image; ++x) {
            const int u = (((su + x) % wc.period) + wc.period) % wc.period;
            const int du = ((u - u0) % wc.period + wc.period) % wc.period;
            if (du < w) {
                if (first < 0) first = x;
                last = x;
            }
        }
        if (first >= 0) rects[k] = ViewRect{first, v0, last - first + 1, h};
    }
    return rects;
}

// toy BEV occupancy: one cell per (panorama block, vertical block)
inline Tensor map_grid_of(const SceneSpec& spec, const WorldConfig& wc) {
    Tensor grid = Tensor::matrix(64, 1, 0.0);
    for (const auto& b : spec.boxes) {
        const int cu = ((b.u0 + b.w / 2) % wc.period) * 8 / wc.period;
        const int cv = std::clamp((b.v0 + b.h / 2) * 8 / wc.image, 0, 7);
        grid.data[cv * 8 + cu] = 1.0;
    }
    return grid;
}

inline RenderedScene render(const SceneSpec& spec, const WorldConfig& wc) {
    for (const auto& b : spec.boxes) {
        if (b.w <= 0 || b.h <= 0 || b.v0 < 0 || b.v0 + b.h > wc.image || b.u0 < 0 || b.u0 >= wc.period) {
            throw std::invalid_argument("render: invalid box rect");
        }
    }
    // coverage cap per view
    for (int k = 0; k < wc.views; ++k) {
        long covered = 0;
        for (const auto& b : spec.boxes) {
            if (k < static_cast<int>(b.rects.size()) && b.rects[k].w > 0) {
                covered += static_cast<long>(b.rects[k].w) * b.rects[k].h;
            }
        }
        if (covered * 10 > static_cast<long>(wc.image) * wc.image * 6) {
            throw std::invalid_argument("render: boxes cover more than 60% of a view");
        }
    }

    const PlacePattern pat = place_pattern(wc.pattern_seed, spec.place_id, wc.sky_rows);
    const std::uint64_t rseed = spec.render_seed();
    RenderedScene out;
    out.spec = spec;
    out.views.reserve(wc.views);
    for (int k = 0; k < wc.views; ++k) {
        Tensor img = Tensor::matrix(wc.image * wc.image, 3);
        const int su = view_start(wc, spec.pano_offset, k);
        for (int y = 0; y < wc.image; ++y) {
            for (int x = 0; x < wc.image; ++x) {
                const int u = su + x;
                double px[3];
                background_pixel(pat, wc, u, y, px);
                switch (spec.weather) {
                    case Weather::clear:
                        break;
                    case Weather::night:
                        for (double& c : px) c *= 0.35;
                        break;
                    case Weather::rain: {
                        const int uu = ((u % wc.period) + wc.period) % wc.period;
                        for (int c = 0; c < 3; ++c) {
                            px[c] = 0.72 * px[c] + 0.28 * 0.55 + 0.04 * hash_noise(rseed, uu, y, c);
                        }
                        break;
                    }
                }
                for (int c = 0; c < 3; ++c) img.at(y * wc.image + x, c) = px[c];
            }
        }
        // boxes drawn last so their pixels are weather-independent
        for (const auto& b : spec.boxes) {
            if (k >= static_cast<int>(b.rects.size()) || b.rects[k].w == 0) continue;
            const ViewRect& r = b.rects[k];
            double col[3];
            box_color(b.cls, col);
            for (int y = r.y0; y < r.y0 + r.h; ++y) {
                for (int x = r.x0; x < r.x0 + r.w; ++x) {
                    for (int c = 0; c < 3; ++c) img.at(y * wc.image + x, c) = col[c];
                }
            }
        }
        // quantize to the 8-bit grid so disk round trips are exact
        for (auto& v : img.data) {
            v = std::clamp(v, 0.0, 1.0);
            v = std::round(v * 255.0) / 255.0;
        }
        out.views.push_back(std::move(img));
    }

    out.map_grid = map_grid_of(spec, wc);
    return out;
}

// ---- dataset assembly ----

struct Dataset {
    WorldConfig world;
    std::vector<RenderedScene> train, val, test;

    const std::vector<RenderedScene>& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "val") return val;
        if (name == "test") return test;
        throw std::invalid_argument("unknown split: " + name);
    }
};

inline Weather sample_weather(Rng& rng, const std::vector<double>& mix) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (int i = 0; i < 3; ++i) {
        acc += mix[i];
        if (u < acc) return static_cast<Weather>(i);
    }
    return Weather::night;
}

inline SceneSpec sample_spec(Rng& rng, const WorldConfig& wc, int place_id,
                             const std::vector<double>& weather_mix) {
    SceneSpec s;
    s.place_id = place_id;
    s.weather = sample_weather(rng, weather_mix);
    s.pano_offset = static_cast<double>(rng.below(wc.period));
    const int nboxes = 1 + static_cast<int>(rng.below(wc.box_max));
    for (int i = 0; i < nboxes; ++i) {
        SceneBox b;
        b.cls = static_cast<BoxClass>(rng.below(3));
        b.w = 4 + static_cast<int>(rng.below(5));
        b.h = 4 + static_cast<int>(rng.below(5));
        b.u0 = static_cast<int>(rng.below(wc.period));
        b.v0 = 16 + static_cast<int>(rng.below(static_cast<std::uint64_t>(wc.image - 2 - 16 - b.h)));
        b.rects = project_box(wc, s, b.u0, b.v0, b.w, b.h);
        s.boxes.push_back(std::move(b));
    }
    return s;
}

// Train/val/test with globally disjoint (place, weather, boxes) triples;
// every place appears in train, eval splits reuse train places with fresh
// weather/box combinations.
inline Dataset build_dataset(const WorldConfig& wc, int n_scenes, std::uint64_t seed) {
    if (n_scenes < wc.places) throw std::invalid_argument("build_dataset: n_scenes < places");
    Dataset ds;
    ds.world = wc;
    const int n_train = static_cast<int>(n_scenes * 0.7);
    const int n_val = (n_scenes - n_train) / 2;
    const int n_test = n_scenes - n_train - n_val;

    Rng rng(seed);
    std::set<std::uint64_t> used;
    int scene_id = 0;
    auto emit = [&](std::vector<RenderedScene>& split, int count, const std::vector<double>& mix) {
        for (int i = 0; i < count; ++i) {
            for (int attempt = 0;; ++attempt) {
                if (attempt > 1000) throw std::runtime_error("build_dataset: cannot find unique scene triple");
                SceneSpec s = sample_spec(rng, wc, scene_id % wc.places, mix);
                if (!used.insert(s.triple_key()).second) continue;
                s.scene_id = scene_id;
                split.push_back(render(s, wc));
                break;
            }
            ++scene_id;
        }
    };
    emit(ds.train, n_train, wc.train_weather_mix);
    emit(ds.val, n_val, wc.eval_weather_mix);
    emit(ds.test, n_test, wc.eval_weather_mix);
    return ds;
}

// ---- JSON sidecars & on-disk layout ----

inline nlohmann::json spec_to_json(const SceneSpec& s) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : s.boxes) {
        nlohmann::json rects = nlohmann::json::array();
        for (const auto& r : b.rects) rects.push_back({{"x0", r.x0}, {"y0", r.y0}, {"w", r.w}, {"h", r.h}});
        boxes.push_back({{"class", static_cast<int>(b.cls)},
                         {"u0", b.u0},
                         {"v0", b.v0},
                         {"w", b.w},
                         {"h", b.h},
                         {"rects", rects}});
    }
    return {{"scene_id", s.scene_id},
            {"place_id", s.place_id},
            {"weather", weather_name(s.weather)},
            {"pano_offset", s.pano_offset},
            {"boxes", boxes}};
}

inline SceneSpec spec_from_json(const nlohmann::json& j) {
    SceneSpec s;
    s.scene_id = j.at("scene_id").get<int>();
    s.place_id = j.at("place_id").get<int>();
    s.weather = weather_from(j.at("weather").get<std::string>());
    s.pano_offset = j.at("pano_offset").get<double>();
    for (const auto& bj : j.at("boxes")) {
        SceneBox b;
        b.cls = static_cast<BoxClass>(bj.at("class").get<int>());
        b.u0 = bj.at("u0").get<int>();
        b.v0 = bj.at("v0").get<int>();
        b.w = bj.at("w").get<int>();
        b.h = bj.at("h").get<int>();
        for (const auto& rj : bj.at("rects")) {
            b.rects.push_back(ViewRect{rj.at("x0").get<int>(), rj.at("y0").get<int>(),
                                       rj.at("w").get<int>(), rj.at("h").get<int>()});
        }
        s.boxes.push_back(std::move(b));
    }
    return s;
}

inline std::string scene_stem(int scene_id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%05d", scene_id);
    return buf;
}

inline void save_split(const fs::path& dir, const std::vector<RenderedScene>& scenes, const WorldConfig& wc) {
    fs::create_directories(dir);
    nlohmann::json index = nlohmann::json::array();
    for (const auto& sc : scenes) {
        const std::string stem = scene_stem(sc.spec.scene_id);
        write_file(dir / (stem + ".json"), spec_to_json(sc.spec).dump(2));
        for (int v = 0; v < static_cast<int>(sc.views.size()); ++v) {
            write_ppm(dir / (stem + "_v" + std::to_string(v) + ".ppm"), sc.views[v], wc.image, wc.image);
        }
        index.push_back(sc.spec.scene_id);
    }
    write_file(dir / "scenes.json", index.dump());
}

inline std::vector<RenderedScene> load_split(const fs::path& dir, const WorldConfig& wc) {
    auto index = nlohmann::json::parse(read_file(dir / "scenes.json"));
    std::vector<RenderedScene> scenes;
    for (const auto& idj : index) {
        const std::string stem = scene_stem(idj.get<int>());
        SceneSpec spec = spec_from_json(nlohmann::json::parse(read_file(dir / (stem + ".json"))));
        RenderedScene sc;
        sc.spec = spec;
        for (int v = 0; v < wc.views; ++v) {
            int w = 0, h = 0;
            sc.views.push_back(read_ppm(dir / (stem + "_v" + std::to_string(v) + ".ppm"), w, h));
        }
        sc.map_grid = map_grid_of(spec, wc);
        scenes.push_back(std::move(sc));
    }
    return scenes;
}

inline void save_dataset(const Dataset& ds, const fs::path& dir) {
    save_split(dir / "train", ds.train, ds.world);
    save_split(dir / "val", ds.val, ds.world);
    save_split(dir / "test", ds.test, ds.world);
}

inline Dataset load_dataset(const fs::path& dir, const WorldConfig& wc) {
    Dataset ds;
    ds.world = wc;
    ds.train = load_split(dir / "train", wc);
    ds.val = load_split(dir / "val", wc);
    ds.test = load_split(dir / "test", wc);
    return ds;
}

}  // namespace placediff
