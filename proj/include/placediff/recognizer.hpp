#pragma once

// Frozen toy place recognizer: a small strided-conv classifier over single
// views whose L2-normalized penultimate features act as place-ID embeddings.

#include <string>
#include <vector>

#include "nn.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "tape.hpp"
#include "tensor.hpp"
#include "toyworld.hpp"

namespace placediff {

struct RecognizerConfig {
    int image = 32;
    int embed_dim = 64;
    int classes = 32;
    int steps = 500;
    int batch = 16;
    double lr = 3e-3;
    double weight_decay = 0.0;
};

class Recognizer {
public:
    RecognizerConfig cfg;
    ParamStore ps;
    bool frozen = false;

    void init(Rng& rng) {
        if (cfg.classes < 2) throw std::invalid_argument("recognizer: fewer than 2 places");
        add_linear(ps, rng, "recog.c1", 12, 24);
        add_linear(ps, rng, "recog.c2", 96, 48);
        add_linear(ps, rng, "recog.c3", 192, cfg.embed_dim);
        add_linear(ps, rng, "recog.head", cfg.embed_dim, cfg.classes);
    }

    // img [image*image x 3] -> penultimate feature ref [1 x embed_dim]
    Ref features_graph(Tape& tp, Binding& bind, Ref img) const {
        const int n = cfg.image;
        Ref h = space_to_depth(tp, img, n, n, 3, 2);
        h = tp.tanh_(linear(tp, bind, h, "recog.c1.w", "recog.c1.b"));
        h = space_to_depth(tp, h, n / 2, n / 2, 24, 2);
        h = tp.tanh_(linear(tp, bind, h, "recog.c2.w", "recog.c2.b"));
        h = space_to_depth(tp, h, n / 4, n / 4, 48, 2);
        h = tp.tanh_(linear(tp, bind, h, "recog.c3.w", "recog.c3.b"));
        const int tokens = (n / 8) * (n / 8);
        Ref pool = tp.leaf(Tensor::matrix(1, tokens, 1.0 / tokens));
        return tp.matmul(pool, h);
    }

    Ref logits_graph(Tape& tp, Binding& bind, Ref img) const {
        return linear(tp, bind, features_graph(tp, bind, img), "recog.head.w", "recog.head.b");
    }

    // L2-normalized place-ID embedding; pure once the recognizer is frozen
    Tensor embed(const Tensor& img) const {
        Tape tp;
        ParamStore& s = const_cast<ParamStore&>(ps);
        Binding bind(tp, s);
        Ref f = features_graph(tp, bind, tp.leaf(img));
        return tp.val(normalize_rows(tp, f));
    }

    int classify(const Tensor& img) const {
        Tape tp;
        ParamStore& s = const_cast<ParamStore&>(ps);
        Binding bind(tp, s);
        const Tensor& lg = tp.val(logits_graph(tp, bind, tp.leaf(img)));
        int best = 0;
        for (int i = 1; i < cfg.classes; ++i) {
            if (lg.data[i] > lg.data[best]) best = i;
        }
        return best;
    }

    void freeze() {
        ps.freeze_prefix("recog.");
        frozen = true;
    }
};

// negative log softmax probability of the label
inline Ref cross_entropy_graph(Tape& tp, Ref logits, int label, int classes) {
    Ref lsm = tp.log_(tp.softmax_rows(logits, 1.0));
    Tensor onehot = Tensor::matrix(1, classes, 0.0);
    onehot.data[label] = 1.0;
    return tp.scale(tp.sum_all(tp.mul(lsm, tp.leaf(onehot))), -1.0);
}

// (image, label) pairs; centered to [-1,1] is not needed here, the
// classifier consumes raw [0,1] pixels
struct LabeledImage {
    const Tensor* img;
    int label;
};

inline std::vector<LabeledImage> flatten_views(const std::vector<RenderedScene>& scenes) {
    std::vector<LabeledImage> out;
    for (const auto& sc : scenes) {
        for (const auto& v : sc.views) out.push_back({&v, sc.spec.place_id});
    }
    return out;
}

// cross-entropy training over single views; freezes the model afterwards
inline Recognizer train_recognizer(const std::vector<RenderedScene>& train_scenes,
                                   const RecognizerConfig& cfg, std::uint64_t seed) {
    Recognizer rec;
    rec.cfg = cfg;
    Rng rng(seed);
    rec.init(rng);
    auto pool = flatten_views(train_scenes);
    if (pool.empty()) throw std::invalid_argument("train_recognizer: empty dataset");
    for (int step = 1; step <= cfg.steps; ++step) {
        Tape tp;
        Binding bind(tp, rec.ps);
        Ref loss = -1;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& ex = pool[rng.below(pool.size())];
            Ref l = cross_entropy_graph(tp, rec.logits_graph(tp, bind, tp.leaf(*ex.img)), ex.label,
                                        cfg.classes);
            loss = (loss < 0) ? l : tp.add(loss, l);
        }
        loss = tp.scale(loss, 1.0 / cfg.batch);
        tp.backward(loss);
        bind.harvest();
        adamw_step(rec.ps, warmup_lr(cfg.lr, step - 1, cfg.steps / 10), cfg.weight_decay, {}, step);
        rec.ps.zero_grad();
    }
    rec.freeze();
    return rec;
}

inline double train_accuracy(const Recognizer& rec, const std::vector<RenderedScene>& scenes) {
    auto pool = flatten_views(scenes);
    int hit = 0;
    for (const auto& ex : pool) {
        if (rec.classify(*ex.img) == ex.label) ++hit;
    }
    return static_cast<double>(hit) / pool.size();
}

// ---- retrieval ----

struct EmbeddingRow {
    std::string id;
    int place_id = 0;
    std::vector<double> e;
};

inline double l2_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

// fraction of queries whose k nearest database rows contain a same-place entry
inline double recall_at_k(const std::vector<EmbeddingRow>& queries,
                          const std::vector<EmbeddingRow>& database, int k) {
    if (database.empty()) throw std::invalid_argument("recall_at_k: empty database");
    if (k > static_cast<int>(database.size())) throw std::invalid_argument("recall_at_k: k > database size");
    int hits = 0;
    std::vector<std::pair<double, int>> dist(database.size());
    for (const auto& q : queries) {
        for (std::size_t i = 0; i < database.size(); ++i) {
            dist[i] = {l2_dist(q.e, database[i].e), database[i].place_id};
        }
        std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
        for (int i = 0; i < k; ++i) {
            if (dist[i].second == q.place_id) {
                ++hits;
                break;
            }
        }
    }
    return queries.empty() ? 0.0 : static_cast<double>(hits) / queries.size();
}

inline std::vector<EmbeddingRow> embed_scenes(const Recognizer& rec,
                                              const std::vector<RenderedScene>& scenes) {
    std::vector<EmbeddingRow> rows;
    for (const auto& sc : scenes) {
        for (int v = 0; v < static_cast<int>(sc.views.size()); ++v) {
            EmbeddingRow r;
            r.id = scene_stem(sc.spec.scene_id) + "_v" + std::to_string(v);
            r.place_id = sc.spec.place_id;
            const Tensor e = rec.embed(sc.views[v]);
            r.e.assign(e.data.begin(), e.data.end());
            rows.push_back(std::move(r));
        }
    }
    return rows;
}

}  // namespace placediff
