#include "arsim/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "arsim/errors.hpp"
#include "arsim/ops.hpp"

namespace arsim {

namespace {

constexpr int kChannels[] = {16, 32, 32};

using MapF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// 3x3 convolution, stride 2, zero padding 1, on a row-major [H*W, C] map.
MapF conv_s2(const MapF& x, int H, int W, const Eigen::MatrixXf& w, const Eigen::VectorXf& b, int& Ho, int& Wo) {
    const int C = static_cast<int>(x.cols());
    Ho = (H - 1) / 2 + 1;
    Wo = (W - 1) / 2 + 1;
    MapF cols = MapF::Zero(static_cast<Eigen::Index>(Ho) * Wo, 9 * C);
    for (int i = 0; i < Ho; ++i) {
        for (int j = 0; j < Wo; ++j) {
            const int r = i * Wo + j;
            for (int di = 0; di < 3; ++di) {
                const int y = 2 * i + di - 1;
                if (y < 0 || y >= H) continue;
                for (int dj = 0; dj < 3; ++dj) {
                    const int xx = 2 * j + dj - 1;
                    if (xx < 0 || xx >= W) continue;
                    cols.block(r, (di * 3 + dj) * C, 1, C) = x.row(static_cast<Eigen::Index>(y) * W + xx);
                }
            }
        }
    }
    MapF out = cols * w.transpose();
    out.rowwise() += b.transpose();
    return out.cwiseMax(0.0f);
}

void check_finite_rows(const Eigen::MatrixXd& m, const char* what) {
    if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite features");
}

}  // namespace

FeatureExtractor::FeatureExtractor(uint64_t seed, int dim, int in_channels)
    : seed_(seed), dim_(dim), in_channels_(in_channels) {
    if (dim < 1 || in_channels < 1) throw ContractViolation("FeatureExtractor: dim and in_channels must be positive");
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 0xfea7);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    int in = in_channels;
    for (int out : kChannels) {
        Conv c;
        c.in = in;
        c.out = out;
        c.w.resize(out, 9 * in);
        const float std = std::sqrt(2.0f / static_cast<float>(9 * in));
        for (Eigen::Index k = 0; k < c.w.size(); ++k) c.w.data()[k] = std * normal(rng);
        c.b.resize(out);
        for (int k = 0; k < out; ++k) c.b[k] = 0.1f * normal(rng);
        convs_.push_back(std::move(c));
        in = out;
    }
    proj_.resize(dim, 4 * in);
    const float pstd = 1.0f / std::sqrt(static_cast<float>(4 * in));
    for (Eigen::Index k = 0; k < proj_.size(); ++k) proj_.data()[k] = pstd * normal(rng);
}

FeatureExtractor FeatureExtractor::video(uint64_t seed, int dim, int window) {
    if (window < 1) throw ContractViolation("FeatureExtractor::video: window must be positive");
    return FeatureExtractor(seed, dim, 3 * window);
}

Eigen::VectorXd FeatureExtractor::extract(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(2) != in_channels_) {
        throw ContractViolation("FeatureExtractor: expected [H, W, " + std::to_string(in_channels_) + "], got " +
                                shape_str(image.shape()));
    }
    int H = image.dim(0), W = image.dim(1);
    MapF x = Eigen::Map<const MapF>(image.ptr(), static_cast<Eigen::Index>(H) * W, in_channels_);
    x = (x.array() * 2.0f - 1.0f).matrix();
    for (const Conv& c : convs_) {
        int Ho = 0, Wo = 0;
        x = conv_s2(x, H, W, c.w, c.b, Ho, Wo);
        H = Ho;
        W = Wo;
    }
    // 2x2 average pooling; a 1-pixel map repeats into every cell.
    const int C = static_cast<int>(x.cols());
    Eigen::VectorXf pooled = Eigen::VectorXf::Zero(4 * C);
    for (int q = 0; q < 4; ++q) {
        const int qi = q / 2, qj = q % 2;
        const int i0 = H == 1 ? 0 : qi * H / 2, i1 = H == 1 ? 1 : (qi + 1) * H / 2;
        const int j0 = W == 1 ? 0 : qj * W / 2, j1 = W == 1 ? 1 : (qj + 1) * W / 2;
        int n = 0;
        for (int i = i0; i < i1; ++i) {
            for (int j = j0; j < j1; ++j) {
                pooled.segment(q * C, C) += x.row(static_cast<Eigen::Index>(i) * W + j).transpose();
                ++n;
            }
        }
        pooled.segment(q * C, C) /= static_cast<float>(n);
    }
    return (proj_ * pooled).cast<double>();
}

Eigen::MatrixXd FeatureExtractor::extract_all(const Tensor& images) const {
    if (images.rank() < 3) throw ContractViolation("FeatureExtractor: expected [..., H, W, C]");
    const int r = images.rank();
    const int H = images.dim(r - 3), W = images.dim(r - 2), C = images.dim(r - 1);
    const int64_t n = images.numel() / (static_cast<int64_t>(H) * W * C);
    const Tensor flat = reshape(images, {static_cast<int>(n), H, W, C});
    Eigen::MatrixXd out(n, dim_);
    for (int64_t i = 0; i < n; ++i) {
        out.row(i) = extract(reshape(slice(flat, 0, static_cast<int>(i), static_cast<int>(i) + 1), {H, W, C})).transpose();
    }
    check_finite_rows(out, "extract_all");
    return out;
}

Tensor stack_windows(const Tensor& frames, int window, int stride) {
    if (frames.rank() != 4) throw ContractViolation("stack_windows: expected [T, H, W, C]");
    if (window < 1 || stride < 1) throw ContractViolation("stack_windows: window and stride must be positive");
    const int T = frames.dim(0), H = frames.dim(1), W = frames.dim(2), C = frames.dim(3);
    if (T < window) throw ContractViolation("stack_windows: fewer frames than the window");
    const int n = (T - window) / stride + 1;
    FloatBuffer out(static_cast<size_t>(n) * H * W * C * window);
    const float* src = frames.ptr();
    const size_t hw = static_cast<size_t>(H) * W;
    for (int k = 0; k < n; ++k) {
        for (size_t p = 0; p < hw; ++p) {
            float* dst = out.data() + (static_cast<size_t>(k) * hw + p) * C * window;
            for (int f = 0; f < window; ++f) {
                const float* s = src + ((static_cast<size_t>(k * stride + f)) * hw + p) * C;
                std::copy(s, s + C, dst + static_cast<size_t>(f) * C);
            }
        }
    }
    return Tensor::adopt({n, H, W, C * window}, std::move(out));
}

// ---------------------------------------------------------------------------

void GaussianSummary::validate() const {
    const Eigen::Index d = mean.size();
    if (cov.rows() != d || cov.cols() != d) throw ContractViolation("GaussianSummary: covariance shape does not match mean");
    if (!mean.allFinite() || !cov.allFinite()) throw ContractViolation("GaussianSummary: non-finite entries");
    if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-6) throw ContractViolation("GaussianSummary: covariance not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-6) throw ContractViolation("GaussianSummary: covariance not positive semidefinite");
}

GaussianSummary summarize(const Eigen::MatrixXd& features) {
    if (features.rows() < 2) throw ContractViolation("summarize: need at least two samples");
    GaussianSummary g;
    g.mean = features.colwise().mean().transpose();
    const Eigen::MatrixXd centered = features.rowwise() - g.mean.transpose();
    g.cov = centered.transpose() * centered / static_cast<double>(features.rows() - 1);
    g.cov = 0.5 * (g.cov + g.cov.transpose());
    return g;
}

double frechet_distance(const GaussianSummary& a, const GaussianSummary& b) {
    a.validate();
    b.validate();
    if (a.mean.size() != b.mean.size()) throw ContractViolation("frechet_distance: dimension mismatch");

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(a.cov);
    const Eigen::VectorXd sa = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Eigen::MatrixXd root_a = ea.eigenvectors() * sa.asDiagonal() * ea.eigenvectors().transpose();
    Eigen::MatrixXd m = root_a * b.cov * root_a;
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m, Eigen::EigenvaluesOnly);
    double tr_sqrt = 0.0;
    for (Eigen::Index i = 0; i < em.eigenvalues().size(); ++i) tr_sqrt += std::sqrt(std::max(0.0, em.eigenvalues()[i]));

    const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, d);
}

// ---------------------------------------------------------------------------

std::vector<uint8_t> road_mask(const Tensor& image) {
    if (image.rank() != 3 || image.dim(2) != 3) throw ContractViolation("road_mask: expected [H, W, 3]");
    const size_t n = static_cast<size_t>(image.dim(0)) * image.dim(1);
    std::vector<uint8_t> mask(n);
    const float* p = image.ptr();
    for (size_t i = 0; i < n; ++i) {
        bool road = true;
        for (int c = 0; c < 3; ++c) road = road && std::abs(p[i * 3 + c] - kRoadColor[static_cast<size_t>(c)]) <= kRoadColorTolerance;
        mask[i] = road ? 1 : 0;
    }
    return mask;
}

double mask_iou(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
    if (a.size() != b.size()) throw ContractViolation("mask_iou: size mismatch");
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        inter += (a[i] && b[i]) ? 1 : 0;
        uni += (a[i] || b[i]) ? 1 : 0;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double layout_adherence(const Tensor& images, const Tensor& canvases) {
    const int r = images.rank();
    if (r < 3 || images.dim(r - 1) != 3) throw ContractViolation("layout_adherence: images must be [..., H, W, 3]");
    if (canvases.rank() != r || canvases.dim(r - 1) != kCanvasChannels) {
        throw ContractViolation("layout_adherence: canvases must be [..., H, W, 2] matching the images");
    }
    for (int a = 0; a < r - 1; ++a) {
        if (images.dim(a) != canvases.dim(a)) throw ContractViolation("layout_adherence: image and canvas shapes differ");
    }
    const int H = images.dim(r - 3), W = images.dim(r - 2);
    const int64_t n = images.numel() / (static_cast<int64_t>(H) * W * 3);
    if (n == 0) throw ContractViolation("layout_adherence: no frames");
    const size_t hw = static_cast<size_t>(H) * W;
    const float* cv = canvases.ptr();
    double total = 0.0;
    for (int64_t k = 0; k < n; ++k) {
        const Tensor img = Tensor::adopt({H, W, 3}, FloatBuffer(images.ptr() + k * hw * 3, images.ptr() + (k + 1) * hw * 3));
        const std::vector<uint8_t> gen = road_mask(img);
        std::vector<uint8_t> ref(hw);
        for (size_t p = 0; p < hw; ++p) ref[p] = cv[(static_cast<size_t>(k) * hw + p) * kCanvasChannels] > 0.5f ? 1 : 0;
        total += mask_iou(gen, ref);
    }
    return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------

double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw ContractViolation("fit_slope: need two or more paired points");
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    if (sxx == 0.0) throw ContractViolation("fit_slope: x values are all equal");
    return sxy / sxx;
}

namespace {

std::vector<FrameControls> scene_controls(const SceneRecord& scene, int n) {
    std::vector<FrameControls> out;
    out.reserve(static_cast<size_t>(n));
    for (int t = 0; t < n; ++t) out.push_back(frame_controls(scene, t));
    return out;
}

Tensor latent_frame(const Tensor& latents, int t) {
    return reshape(slice(latents, 0, t, t + 1), {latents.dim(1), latents.dim(2), latents.dim(3)});
}

// Generated images [n + 1, V, H, W, 3]: the ground-truth first frame followed by
// n generated frames.
Tensor rollout_images(const Model& model, const PatchCodec& codec, const SceneRecord& scene, const SamplerConfig& sampler,
                      int n) {
    if (scene.n_frames() < n + 1) {
        throw ContractViolation("rollout length " + std::to_string(n) + " needs " + std::to_string(n + 1) +
                                " frames of controls, scene has " + std::to_string(scene.n_frames()));
    }
    const Tensor gt = scene_latents(codec, scene);
    const RolloutResult res = rollout(model, sampler, scene_controls(scene, n + 1), n, latent_frame(gt, 0), &codec);
    std::vector<Tensor> frames{reshape(slice(scene.frames, 0, 0, 1), {1, scene.n_views(), scene.frames.dim(2), scene.frames.dim(3), 3})};
    for (const Tensor& img : res.images) {
        Shape s = img.shape();
        s.insert(s.begin(), 1);
        frames.push_back(reshape(img, s));
    }
    return concat(frames, 0);
}

// [T, V, H, W, C] -> [V, T, H, W, C]
Tensor views_first(const Tensor& x) {
    const int T = x.dim(0), V = x.dim(1);
    std::vector<Tensor> per_view;
    for (int v = 0; v < V; ++v) {
        const Tensor s = slice(x, 1, v, v + 1);
        per_view.push_back(reshape(s, {1, T, x.dim(2), x.dim(3), x.dim(4)}));
    }
    return concat(per_view, 0);
}

void check_options(const DegradationOptions& options) {
    if (options.lengths.empty()) throw ContractViolation("degradation: no lengths");
    if (options.window < 1) throw ContractViolation("degradation: window must be positive");
    for (int L : options.lengths) {
        if (L < options.window) throw ContractViolation("degradation: length shorter than the window");
        if (options.video && L < 2 * options.window - 1) {
            throw ContractViolation("degradation: video statistics need length >= 2 * window - 1");
        }
    }
}

void append_rows(Eigen::MatrixXd& acc, const Eigen::MatrixXd& rows) {
    Eigen::MatrixXd next(acc.rows() + rows.rows(), rows.cols());
    if (acc.rows() > 0) next.topRows(acc.rows()) = acc;
    next.bottomRows(rows.rows()) = rows;
    acc = std::move(next);
}

}  // namespace

std::vector<DegradationRow> degradation_from_frames(const std::vector<Tensor>& generated,
                                                    const std::vector<const SceneRecord*>& scenes,
                                                    const DegradationOptions& options) {
    if (scenes.empty()) throw ContractViolation("degradation: no scenes");
    if (generated.size() != scenes.size()) throw ContractViolation("degradation: one generated sequence per scene");
    check_options(options);
    const int max_len = *std::max_element(options.lengths.begin(), options.lengths.end());
    for (size_t i = 0; i < scenes.size(); ++i) {
        const int have = std::min(generated[i].dim(0), scenes[i]->n_frames()) - 1;
        if (have < max_len) {
            throw ContractViolation("degradation: length " + std::to_string(max_len) + " exceeds the " + std::to_string(have) +
                                    " frames available");
        }
        if (generated[i].rank() != 5 || generated[i].dim(1) != scenes[i]->n_views()) {
            throw ContractViolation("degradation: generated frames must be [T, V, H, W, 3] matching the scene");
        }
    }

    const FeatureExtractor frame_fx(options.feature_seed, options.feature_dim);
    const FeatureExtractor video_fx = FeatureExtractor::video(options.feature_seed, options.feature_dim, options.window);
    const size_t nl = options.lengths.size();
    std::vector<Eigen::MatrixXd> gen_f(nl), real_f(nl), gen_v(nl), real_v(nl);
    std::vector<double> iou(nl, 0.0);

    for (size_t si = 0; si < scenes.size(); ++si) {
        const SceneRecord& scene = *scenes[si];
        const Tensor gen = slice(generated[si], 0, 0, max_len + 1);
        const Tensor real = slice(scene.frames, 0, 0, max_len + 1);
        const Tensor gen_vt = options.video ? views_first(gen) : Tensor();
        const Tensor real_vt = options.video ? views_first(real) : Tensor();
        for (size_t li = 0; li < nl; ++li) {
            const int L = options.lengths[li];
            const int b = L - options.window + 1;
            append_rows(gen_f[li], frame_fx.extract_all(slice(gen, 0, b, L + 1)));
            append_rows(real_f[li], frame_fx.extract_all(slice(real, 0, b, L + 1)));
            iou[li] += layout_adherence(slice(gen, 0, b, L + 1), slice(scene.canvases, 0, b, L + 1));
            if (options.video) {
                const int vb = L - 2 * options.window + 2;
                for (int v = 0; v < scene.n_views(); ++v) {
                    auto windows = [&](const Tensor& vt) {
                        const Tensor seq = slice(vt, 0, v, v + 1);
                        const Tensor frames = reshape(slice(seq, 1, vb, L + 1), {L + 1 - vb, vt.dim(2), vt.dim(3), vt.dim(4)});
                        return stack_windows(frames, options.window, 1);
                    };
                    append_rows(gen_v[li], video_fx.extract_all(windows(gen_vt)));
                    append_rows(real_v[li], video_fx.extract_all(windows(real_vt)));
                }
            }
        }
    }

    std::vector<DegradationRow> rows;
    for (size_t li = 0; li < nl; ++li) {
        DegradationRow r;
        r.length = options.lengths[li];
        r.frechet = frechet_distance(summarize(gen_f[li]), summarize(real_f[li]));
        if (options.video) r.frechet_video = frechet_distance(summarize(gen_v[li]), summarize(real_v[li]));
        r.layout_iou = iou[li] / static_cast<double>(scenes.size());
        rows.push_back(r);
    }
    return rows;
}

std::vector<DegradationRow> degradation_curve(const Model& model, const PatchCodec& codec,
                                              const std::vector<SceneRecord>& scenes, const SamplerConfig& sampler,
                                              const DegradationOptions& options) {
    if (scenes.empty()) throw ContractViolation("degradation_curve: no scenes");
    check_options(options);
    const int max_len = *std::max_element(options.lengths.begin(), options.lengths.end());
    for (const SceneRecord& s : scenes) {
        if (s.n_frames() < max_len + 1) {
            throw ContractViolation("degradation_curve: length " + std::to_string(max_len) + " exceeds the " +
                                    std::to_string(s.n_frames() - 1) + " frames a scene can supply");
        }
    }
    std::vector<Tensor> generated;
    std::vector<const SceneRecord*> refs;
    for (size_t si = 0; si < scenes.size(); ++si) {
        SamplerConfig sc = sampler;
        sc.seed = sampler.seed + si;
        generated.push_back(rollout_images(model, codec, scenes[si], sc, max_len));
        refs.push_back(&scenes[si]);
    }
    return degradation_from_frames(generated, refs, options);
}

double rollout_frechet(const Model& model, const PatchCodec& codec, const std::vector<SceneRecord>& scenes,
                       const SamplerConfig& sampler, int n_frames, const FeatureExtractor& features) {
    if (scenes.empty()) throw ContractViolation("rollout_frechet: no scenes");
    if (n_frames < 1) throw ContractViolation("rollout_frechet: n_frames must be >= 1");
    Eigen::MatrixXd gen_f, real_f;
    for (size_t si = 0; si < scenes.size(); ++si) {
        SamplerConfig sc = sampler;
        sc.seed = sampler.seed + si;
        const Tensor gen = rollout_images(model, codec, scenes[si], sc, n_frames);
        append_rows(gen_f, features.extract_all(slice(gen, 0, 1, n_frames + 1)));
        append_rows(real_f, features.extract_all(slice(scenes[si].frames, 0, 1, n_frames + 1)));
    }
    return frechet_distance(summarize(gen_f), summarize(real_f));
}

double next_frame_error(const Model& model, const PatchCodec& codec, const std::vector<SceneRecord>& scenes,
                        const SamplerConfig& sampler, int n_refs, int target) {
    if (scenes.empty()) throw ContractViolation("next_frame_error: no scenes");
    if (n_refs < 0 || n_refs > target) throw ContractViolation("next_frame_error: need 0 <= n_refs <= target");
    double total = 0.0;
    for (size_t si = 0; si < scenes.size(); ++si) {
        const SceneRecord& scene = scenes[si];
        if (scene.n_frames() <= target) throw ContractViolation("next_frame_error: scene too short for the target frame");
        const Tensor gt = scene_latents(codec, scene);
        SamplerConfig sc = sampler;
        sc.seed = sampler.seed + si;
        Session s(model, sc, target - n_refs);
        for (int t = target - n_refs; t < target; ++t) s.push_reference(latent_frame(gt, t), frame_controls(scene, t));
        const Tensor pred = s.sample_frame(frame_controls(scene, target));
        const Tensor truth = latent_frame(gt, target);
        double se = 0.0;
        for (int64_t i = 0; i < pred.numel(); ++i) {
            const double d = static_cast<double>(pred.ptr()[i]) - truth.ptr()[i];
            se += d * d;
        }
        total += se / static_cast<double>(pred.numel());
    }
    return total / static_cast<double>(scenes.size());
}

// ---------------------------------------------------------------------------

std::vector<MetricRow> degradation_rows(const std::vector<DegradationRow>& curve, uint64_t seed,
                                        const std::string& checkpoint) {
    std::vector<MetricRow> rows;
    bool video = false;
    for (const auto& r : curve) video = video || r.frechet_video != 0.0;
    for (const auto& r : curve) {
        rows.push_back({"frechet_frame", r.length, r.frechet, seed, checkpoint});
        if (video) rows.push_back({"frechet_video", r.length, r.frechet_video, seed, checkpoint});
        rows.push_back({"layout_iou", r.length, r.layout_iou, seed, checkpoint});
    }
    if (curve.size() >= 2) {
        std::vector<double> x, y;
        for (const auto& r : curve) {
            x.push_back(r.length);
            y.push_back(r.frechet);
        }
        rows.push_back({"frechet_frame_slope", 0, fit_slope(x, y), seed, checkpoint});
    }
    return rows;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
    std::ofstream f(path);
    if (!f) throw FileError(FileError::Kind::Io, path, "cannot open for writing");
    f.precision(10);
    f << "metric,length,value,seed,checkpoint\n";
    for (const auto& r : rows) f << r.metric << ',' << r.length << ',' << r.value << ',' << r.seed << ',' << r.checkpoint << '\n';
    if (!f) throw FileError(FileError::Kind::Io, path, "write failed");
}

}  // namespace arsim
