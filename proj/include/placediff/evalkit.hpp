#pragma once

// Fidelity and controllability metrics: Fréchet distance between feature
// sets, retrieval recall of generated imagery, embedding distance matrices,
// and the ablation table driver.

#include <json.hpp>

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "io.hpp"
#include "recognizer.hpp"
#include "tensor.hpp"
#include "toyworld.hpp"

namespace placediff {

struct FeatureSet {
    std::string source;            // real | generated | model id
    std::vector<std::string> ids;  // one per row; used for paired alignment
    Tensor rows;                   // [N x F]
};

// ---- symmetric eigensolver (cyclic Jacobi) ----

// A symmetric [n x n]; returns eigenvalues and column eigenvectors
inline void jacobi_eigen(const Tensor& a_in, std::vector<double>& evals, Tensor& evecs) {
    const int n = a_in.rows();
    if (a_in.cols() != n) throw std::invalid_argument("jacobi_eigen: matrix not square");
    Tensor a = a_in;
    evecs = Tensor::matrix(n, n);
    for (int i = 0; i < n; ++i) evecs.at(i, i) = 1.0;

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        }
        if (off < 1e-30) break;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::fabs(apq) < 1e-300) continue;
                const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int i = 0; i < n; ++i) {
                    const double aip = a.at(i, p), aiq = a.at(i, q);
                    a.at(i, p) = c * aip - s * aiq;
                    a.at(i, q) = s * aip + c * aiq;
                }
                for (int i = 0; i < n; ++i) {
                    const double api = a.at(p, i), aqi = a.at(q, i);
                    a.at(p, i) = c * api - s * aqi;
                    a.at(q, i) = s * api + c * aqi;
                }
                for (int i = 0; i < n; ++i) {
                    const double vip = evecs.at(i, p), viq = evecs.at(i, q);
                    evecs.at(i, p) = c * vip - s * viq;
                    evecs.at(i, q) = s * vip + c * viq;
                }
            }
        }
    }
    evals.assign(n, 0.0);
    for (int i = 0; i < n; ++i) evals[i] = a.at(i, i);
}

// PSD square root via eigendecomposition; eigenvalues below -tol are an error
inline Tensor psd_sqrt(const Tensor& m, const char* who) {
    const int n = m.rows();
    std::vector<double> ev;
    Tensor v;
    jacobi_eigen(m, ev, v);
    double mx = 0.0;
    for (double e : ev) mx = std::max(mx, std::fabs(e));
    const double tol = 1e-8 * std::max(1.0, mx);
    Tensor out = Tensor::matrix(n, n);
    for (int k = 0; k < n; ++k) {
        if (ev[k] < -tol) {
            throw std::runtime_error(std::string(who) + ": matrix not PSD (eigenvalue " +
                                     std::to_string(ev[k]) + ")");
        }
        const double s = std::sqrt(std::max(ev[k], 0.0));
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) out.at(i, j) += s * v.at(i, k) * v.at(j, k);
        }
    }
    return out;
}

inline Tensor feature_mean(const Tensor& rows) {
    Tensor mu = Tensor::matrix(1, rows.cols());
    for (int i = 0; i < rows.rows(); ++i) {
        for (int j = 0; j < rows.cols(); ++j) mu.data[j] += rows.at(i, j) / rows.rows();
    }
    return mu;
}

// sample covariance with shrinkage when N <= F (rank-deficient regime)
inline Tensor feature_cov(const Tensor& rows) {
    const int n = rows.rows(), f = rows.cols();
    const Tensor mu = feature_mean(rows);
    Tensor cov = Tensor::matrix(f, f);
    const double denom = n > 1 ? n - 1.0 : 1.0;
    for (int r = 0; r < n; ++r) {
        for (int i = 0; i < f; ++i) {
            const double di = rows.at(r, i) - mu.data[i];
            for (int j = 0; j < f; ++j) cov.at(i, j) += di * (rows.at(r, j) - mu.data[j]) / denom;
        }
    }
    if (n <= f) {
        for (int i = 0; i < f; ++i) cov.at(i, i) += 1e-6;
    }
    return cov;
}

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the cross term
// computed through the symmetric product sqrt(S_a) S_b sqrt(S_a)
inline double frechet_gaussian(const Tensor& mu_a, const Tensor& cov_a, const Tensor& mu_b,
                               const Tensor& cov_b) {
    const int f = mu_a.cols();
    if (mu_b.cols() != f || cov_a.rows() != f || cov_b.rows() != f) {
        throw std::invalid_argument("frechet: feature dimension mismatch");
    }
    double d2 = 0.0;
    for (int j = 0; j < f; ++j) {
        const double d = mu_a.data[j] - mu_b.data[j];
        d2 += d * d;
    }
    const Tensor ra = psd_sqrt(cov_a, "frechet(cov_a)");
    Tensor inner = Tensor::matrix(f, f);
    {
        Tensor tmp = Tensor::matrix(f, f);
        mm_acc(ra, cov_b, tmp);
        mm_acc(tmp, ra, inner);
    }
    // enforce exact symmetry before the eigensolve
    for (int i = 0; i < f; ++i) {
        for (int j = i + 1; j < f; ++j) {
            const double s = 0.5 * (inner.at(i, j) + inner.at(j, i));
            inner.at(i, j) = inner.at(j, i) = s;
        }
    }
    const Tensor cross = psd_sqrt(inner, "frechet(product)");
    double tr = 0.0;
    for (int i = 0; i < f; ++i) tr += cov_a.at(i, i) + cov_b.at(i, i) - 2.0 * cross.at(i, i);
    return std::max(d2 + tr, 0.0);
}

inline double frechet_distance(const FeatureSet& a, const FeatureSet& b) {
    if (a.rows.cols() != b.rows.cols()) {
        throw std::invalid_argument("frechet_distance: feature dimension mismatch");
    }
    return frechet_gaussian(feature_mean(a.rows), feature_cov(a.rows), feature_mean(b.rows),
                            feature_cov(b.rows));
}

// ---- retrieval over generated scenes ----

// produce the generated views for one held-out condition; nullopt on failure
using SceneGenerator = std::function<std::optional<std::vector<Tensor>>(const SceneSpec&)>;

struct RecallResult {
    double ar1 = 0.0;
    double ar5 = 0.0;
    int failures = 0;   // skipped scenes counted as retrieval misses
    int queries = 0;
};

inline RecallResult eval_generated_recall(const SceneGenerator& gen,
                                          const std::vector<RenderedScene>& conditions,
                                          const Recognizer& rec,
                                          const std::vector<EmbeddingRow>& database) {
    RecallResult res;
    std::vector<EmbeddingRow> queries;
    int missed_views = 0;
    for (const auto& sc : conditions) {
        std::optional<std::vector<Tensor>> views;
        try {
            views = gen(sc.spec);
            if (views) {
                for (const auto& v : *views) v.check_finite("generated view");
            }
        } catch (const std::exception&) {
            views.reset();
        }
        if (!views) {
            ++res.failures;
            missed_views += static_cast<int>(sc.views.size());
            continue;
        }
        for (int v = 0; v < static_cast<int>(views->size()); ++v) {
            EmbeddingRow row;
            row.id = scene_stem(sc.spec.scene_id) + "_v" + std::to_string(v);
            row.place_id = sc.spec.place_id;
            const Tensor e = rec.embed((*views)[v]);
            row.e.assign(e.data.begin(), e.data.end());
            queries.push_back(std::move(row));
        }
    }
    res.queries = static_cast<int>(queries.size()) + missed_views;
    if (res.queries == 0) throw std::invalid_argument("eval_generated_recall: no conditions");
    const double scale = queries.empty() ? 0.0
                                         : static_cast<double>(queries.size()) / res.queries;
    res.ar1 = queries.empty() ? 0.0 : recall_at_k(queries, database, 1) * scale;
    res.ar5 = queries.empty() ? 0.0 : recall_at_k(queries, database, 5) * scale;
    return res;
}

// ---- distance matrices ----

struct DistanceSummary {
    Tensor matrix;          // [Nr x Ng]
    bool paired = false;
    double paired_mean = 0.0;
};

inline DistanceSummary distance_matrix(const FeatureSet& real, const FeatureSet& gen, bool paired) {
    if (real.rows.cols() != gen.rows.cols()) {
        throw std::invalid_argument("distance_matrix: feature dimension mismatch");
    }
    const int nr = real.rows.rows(), ng = gen.rows.rows();
    if (paired) {
        if (nr != ng) throw std::invalid_argument("distance_matrix: paired mode needs equal N");
        for (int i = 0; i < nr; ++i) {
            if (real.ids.at(i) != gen.ids.at(i)) {
                throw std::invalid_argument("distance_matrix: paired ids misaligned at row " +
                                            std::to_string(i));
            }
        }
    }
    DistanceSummary out;
    out.paired = paired;
    out.matrix = Tensor::matrix(nr, ng);
    for (int i = 0; i < nr; ++i) {
        for (int j = 0; j < ng; ++j) {
            double s = 0.0;
            for (int c = 0; c < real.rows.cols(); ++c) {
                const double d = real.rows.at(i, c) - gen.rows.at(j, c);
                s += d * d;
            }
            out.matrix.at(i, j) = std::sqrt(s);
        }
    }
    if (paired) {
        for (int i = 0; i < nr; ++i) out.paired_mean += out.matrix.at(i, i) / nr;
    }
    return out;
}

inline void write_distance_csv(const DistanceSummary& d, const std::string& path) {
    CsvWriter csv(path);
    for (int i = 0; i < d.matrix.rows(); ++i) {
        std::vector<std::string> row;
        for (int j = 0; j < d.matrix.cols(); ++j) row.push_back(fmt_double(d.matrix.at(i, j)));
        csv.row(row);
    }
}

// ---- ablation driver ----

enum class AblationArm { no_perceiver, no_softclip, cascaded_mlps, full };

inline const char* ablation_arm_name(AblationArm a) {
    switch (a) {
        case AblationArm::no_perceiver: return "no_perceiver";
        case AblationArm::no_softclip: return "no_softclip";
        case AblationArm::cascaded_mlps: return "cascaded_mlps";
        case AblationArm::full: return "full";
    }
    throw std::invalid_argument("unknown ablation arm");
}

struct AblationRow {
    std::string arm;
    bool failed = false;
    std::string error;
    double ar1 = 0.0;
    double ar5 = 0.0;
};

using ArmRunner = std::function<AblationRow(AblationArm)>;

// runs every arm; a throwing or NaN arm is marked failed and the suite continues
inline std::vector<AblationRow> run_ablation(const std::vector<AblationArm>& arms,
                                             const ArmRunner& runner) {
    std::vector<AblationRow> rows;
    for (AblationArm a : arms) {
        AblationRow row;
        row.arm = ablation_arm_name(a);
        try {
            row = runner(a);
            row.arm = ablation_arm_name(a);
            if (!std::isfinite(row.ar1) || !std::isfinite(row.ar5)) {
                row.failed = true;
                row.error = "non-finite metric";
            }
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

// ranked table: successful arms first, by descending AR@1
inline void write_ablation_csv(std::vector<AblationRow> rows, const std::string& path) {
    std::stable_sort(rows.begin(), rows.end(), [](const AblationRow& a, const AblationRow& b) {
        if (a.failed != b.failed) return !a.failed;
        return a.ar1 > b.ar1;
    });
    CsvWriter csv(path);
    csv.row({"arm", "status", "ar1", "ar5"});
    for (const auto& r : rows) {
        csv.row({r.arm, r.failed ? "failed: " + r.error : "ok", fmt_double(r.ar1),
                 fmt_double(r.ar5)});
    }
}

// ---- report ----

struct EvalReport {
    double frechet = 0.0;
    double ar1 = 0.0;
    double ar5 = 0.0;
    DistanceSummary dist;
    std::map<std::string, std::string> metadata;

    void validate() const {
        if (frechet < 0.0) throw std::runtime_error("eval report: negative frechet");
        if (ar1 > ar5 + 1e-12) throw std::runtime_error("eval report: ar1 > ar5");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["frechet"] = frechet;
        j["ar1"] = ar1;
        j["ar5"] = ar5;
        if (dist.paired) j["paired_mean_distance"] = dist.paired_mean;
        j["metadata"] = metadata;
        return j;
    }
};

}  // namespace placediff
