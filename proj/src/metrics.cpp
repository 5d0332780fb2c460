#include "jointseg/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <thread>

namespace jointseg {

namespace {

// Sums a pixel population in ascending value order. A horizontal flip (or any
// spatial permutation) permutes pixels but not the multiset of summands, so
// the result is bit-exactly permutation-invariant.
double ordered_sum(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

void validate_pair(const Image& pred, const Image& gt) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw ShapeError("metric pair shape mismatch: pred " + std::to_string(pred.height) + "x" +
                         std::to_string(pred.width) + " vs gt " + std::to_string(gt.height) + "x" +
                         std::to_string(gt.width));
    if (pred.height <= 0 || pred.width <= 0) throw ShapeError("metric pair is empty");
    for (double v : pred.pix)
        if (!(v >= 0.0 && v <= 1.0)) throw ContractError("prediction value outside [0,1]");
    for (double v : gt.pix)
        if (v != 0.0 && v != 1.0) throw ContractError("ground truth is not strictly binary");
}

int64_t fg_count(const Image& gt) {
    int64_t m = 0;
    for (double v : gt.pix) m += v == 1.0;
    return m;
}

constexpr int kThresholds = 256;

}  // namespace

std::string to_string(TaskKind k) {
    return k == TaskKind::salient ? "salient" : "camouflaged";
}

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "salient") return TaskKind::salient;
    if (s == "camouflaged") return TaskKind::camouflaged;
    throw ConfigError("unknown task kind '" + s + "' (want salient|camouflaged)");
}

double mae_metric(const Image& pred, const Image& gt) {
    validate_pair(pred, gt);
    std::vector<double> diff(pred.pix.size());
    for (size_t i = 0; i < diff.size(); ++i) diff[i] = std::abs(pred.pix[i] - gt.pix[i]);
    return ordered_sum(std::move(diff)) / static_cast<double>(pred.pix.size());
}

double f_measure_max(const Image& pred, const Image& gt, double beta2, bool* degenerate) {
    validate_pair(pred, gt);
    int64_t m = fg_count(gt);
    if (m == 0) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    // Integer TP/FP counts per threshold; exact, hence flip-invariant.
    double best = 0.0;
    for (int ti = 0; ti < kThresholds; ++ti) {
        double t = ti / 255.0;
        int64_t tp = 0, positives = 0;
        for (size_t i = 0; i < pred.pix.size(); ++i) {
            if (pred.pix[i] > t) {
                ++positives;
                tp += gt.pix[i] == 1.0;
            }
        }
        if (positives == 0) continue;  // precision 0/0 -> threshold scores 0
        double p = static_cast<double>(tp) / static_cast<double>(positives);
        double r = static_cast<double>(tp) / static_cast<double>(m);
        double denom = beta2 * p + r;
        if (denom == 0.0) continue;
        best = std::max(best, (1.0 + beta2) * p * r / denom);
    }
    return best;
}

double f_measure_weighted(const Image& pred, const Image& gt, double beta2, bool* degenerate) {
    validate_pair(pred, gt);
    const int h = pred.height, w = pred.width;
    const size_t n = pred.pix.size();
    if (fg_count(gt) == 0) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }

    std::vector<double> E(n);
    for (size_t i = 0; i < n; ++i) E[i] = std::abs(pred.pix[i] - gt.pix[i]);

    // Nearest-foreground assignment for every background pixel (brute force
    // is fine at these image sizes). Exact squared distances; ties take the
    // smallest error value among the equidistant foreground pixels — a
    // value-based rule, so a horizontal flip cannot change the assignment's
    // outcome.
    std::vector<int> fy, fx;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (gt.at(y, x) == 1.0) {
                fy.push_back(y);
                fx.push_back(x);
            }
    std::vector<double> Et = E;
    std::vector<double> dist(n, 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (gt.at(y, x) == 1.0) continue;
            int64_t best_d2 = -1;
            double best_err = 0.0;
            for (size_t j = 0; j < fy.size(); ++j) {
                int64_t dy = fy[j] - y, dx = fx[j] - x;
                int64_t d2 = dy * dy + dx * dx;
                double err = E[static_cast<size_t>(fy[j]) * w + fx[j]];
                if (best_d2 < 0 || d2 < best_d2 || (d2 == best_d2 && err < best_err)) {
                    best_d2 = d2;
                    best_err = err;
                }
            }
            size_t i = static_cast<size_t>(y) * w + x;
            Et[i] = best_err;
            dist[i] = std::sqrt(static_cast<double>(best_d2));
        }
    }

    // 7x7 Gaussian window (sigma 5), renormalized per window over the
    // in-bounds taps. The renormalization keeps the filter a true weighted
    // mean at the borders, so a constant error field passes through exactly
    // (x/x == 1), which the all-background-prediction identity relies on.
    // Numerator and denominator are each accumulated in sorted order: the
    // kernel is symmetric, so a flip mirrors window contents but keeps both
    // multisets — sorted summation then gives bit-identical results.
    double K[49];
    for (int dy = -3; dy <= 3; ++dy)
        for (int dx = -3; dx <= 3; ++dx)
            K[(dy + 3) * 7 + dx + 3] = std::exp(-(dy * dy + dx * dx) / 50.0);
    std::vector<double> EA(n);
    std::vector<double> num, den;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            num.clear();
            den.clear();
            for (int dy = -3; dy <= 3; ++dy)
                for (int dx = -3; dx <= 3; ++dx) {
                    int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                    double k = K[(dy + 3) * 7 + dx + 3];
                    num.push_back(k * Et[static_cast<size_t>(yy) * w + xx]);
                    den.push_back(k);
                }
            std::sort(num.begin(), num.end());
            std::sort(den.begin(), den.end());
            double ns = 0.0, ds = 0.0;
            for (double v : num) ns += v;
            for (double v : den) ds += v;
            EA[static_cast<size_t>(y) * w + x] = ns / ds;
        }

    // E_A = min(E, filtered) everywhere; importance B; weighted errors.
    const double alpha = std::log(0.5) / 5.0;
    std::vector<double> tp_terms, fp_terms, fn_terms;
    for (size_t i = 0; i < n; ++i) {
        double ea = std::min(E[i], EA[i]);
        if (gt.pix[i] == 1.0) {
            double ew = ea;  // B = 1 on foreground
            tp_terms.push_back(1.0 - ew);
            fn_terms.push_back(ew);
        } else {
            double b = 2.0 - std::exp(alpha * dist[i]);
            fp_terms.push_back(ea * b);
        }
    }
    double tpw = ordered_sum(std::move(tp_terms));
    double fpw = ordered_sum(std::move(fp_terms));
    double fnw = ordered_sum(std::move(fn_terms));
    if (tpw + fpw == 0.0 || tpw + fnw == 0.0) return 0.0;
    double pw = tpw / (tpw + fpw);
    double rw = tpw / (tpw + fnw);
    double denom = beta2 * pw + rw;
    if (denom == 0.0) return 0.0;
    return (1.0 + beta2) * pw * rw / denom;
}

namespace {

// 2*mean/(mean^2 + 1 + 2*sample_std + 1e-12); std is 0 for N<=1.
double dissimilarity_score(const std::vector<double>& region) {
    if (region.empty()) return 0.0;
    double m = ordered_sum(region) / static_cast<double>(region.size());
    double sd = 0.0;
    if (region.size() > 1) {
        std::vector<double> sq(region.size());
        for (size_t i = 0; i < region.size(); ++i) sq[i] = (region[i] - m) * (region[i] - m);
        sd = std::sqrt(ordered_sum(std::move(sq)) / static_cast<double>(region.size() - 1));
    }
    return 2.0 * m / (m * m + 1.0 + 2.0 * sd + 1e-12);
}

// SSIM-style block similarity with the standard small constants for unit
// dynamic range; sample-normalized moments, 0 for blocks of fewer than 2 px.
double ssim_score(const std::vector<double>& x, const std::vector<double>& y) {
    const double c1 = 1e-4, c2 = 9e-4;
    size_t n = x.size();
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double vx = 0.0, vy = 0.0, cov = 0.0;
    if (n > 1) {
        for (size_t i = 0; i < n; ++i) {
            vx += (x[i] - mx) * (x[i] - mx);
            vy += (y[i] - my) * (y[i] - my);
            cov += (x[i] - mx) * (y[i] - my);
        }
        vx /= static_cast<double>(n - 1);
        vy /= static_cast<double>(n - 1);
        cov /= static_cast<double>(n - 1);
    }
    return (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
}

}  // namespace

double s_measure(const Image& pred, const Image& gt, double alpha) {
    validate_pair(pred, gt);
    const int64_t n = static_cast<int64_t>(pred.pix.size());
    const int64_t m = fg_count(gt);
    if (m == 0) return 1.0 - ordered_sum(pred.pix) / static_cast<double>(n);
    if (m == n) return ordered_sum(pred.pix) / static_cast<double>(n);

    std::vector<double> on_fg, inv_on_bg;
    for (size_t i = 0; i < pred.pix.size(); ++i) {
        if (gt.pix[i] == 1.0)
            on_fg.push_back(pred.pix[i]);
        else
            inv_on_bg.push_back(1.0 - pred.pix[i]);
    }
    double mu = static_cast<double>(m) / static_cast<double>(n);
    double s_obj = mu * dissimilarity_score(on_fg) + (1.0 - mu) * dissimilarity_score(inv_on_bg);

    // Foreground-centroid block split, done in integer arithmetic so a
    // horizontal flip mirrors the decomposition exactly: the split count per
    // axis is floor(mean)+1 ("columns whose center lies at or left of the
    // centroid"), and when the centroid falls exactly on a pixel center the
    // two possible owners of that column are averaged — a symmetric tie rule,
    // so mirrored inputs score identically up to float accumulation noise.
    int64_t sy = 0, sx = 0;
    for (int y = 0; y < gt.height; ++y)
        for (int x = 0; x < gt.width; ++x)
            if (gt.at(y, x) == 1.0) {
                sy += y;
                sx += x;
            }
    auto split_candidates = [m](int64_t coord_sum) {
        std::vector<int> c;
        int64_t q = coord_sum / m;
        if (coord_sum % m == 0) c.push_back(static_cast<int>(q));
        c.push_back(static_cast<int>(q) + 1);
        return c;
    };
    std::vector<int> cys = split_candidates(sy), cxs = split_candidates(sx);

    double s_reg = 0.0;
    for (int cy : cys)
        for (int cx : cxs) {
            const int ybounds[3] = {0, cy, gt.height};
            const int xbounds[3] = {0, cx, gt.width};
            for (int by = 0; by < 2; ++by)
                for (int bx = 0; bx < 2; ++bx) {
                    int y0 = ybounds[by], y1 = ybounds[by + 1];
                    int x0 = xbounds[bx], x1 = xbounds[bx + 1];
                    if (y0 >= y1 || x0 >= x1) continue;
                    std::vector<double> bp, bg;
                    bp.reserve(static_cast<size_t>(y1 - y0) * (x1 - x0));
                    bg.reserve(bp.capacity());
                    for (int y = y0; y < y1; ++y)
                        for (int x = x0; x < x1; ++x) {
                            bp.push_back(pred.at(y, x));
                            bg.push_back(gt.at(y, x));
                        }
                    s_reg += (static_cast<double>(bp.size()) / static_cast<double>(n)) *
                             ssim_score(bp, bg);
                }
        }
    s_reg /= static_cast<double>(cys.size() * cxs.size());

    return std::min(1.0, std::max(0.0, alpha * s_obj + (1.0 - alpha) * s_reg));
}

double e_measure_mean(const Image& pred, const Image& gt) {
    validate_pair(pred, gt);
    const int64_t n = static_cast<int64_t>(pred.pix.size());
    const int64_t m = fg_count(gt);
    // mean(gt) and mean(B) are exact: integer counts over binary maps.
    const double mean_gt = static_cast<double>(m) / static_cast<double>(n);
    double total = 0.0;
    // Threshold sweep i/256: all 256 thresholds sit strictly below 1, so a
    // perfect binary prediction binarizes to the ground truth at every one.
    for (int ti = 0; ti < kThresholds; ++ti) {
        double t = ti / 256.0;
        int64_t bcount = 0;
        for (double v : pred.pix) bcount += v > t;
        double e;
        if (m == 0) {
            e = 1.0 - static_cast<double>(bcount) / static_cast<double>(n);
        } else if (m == n) {
            e = static_cast<double>(bcount) / static_cast<double>(n);
        } else {
            double mean_b = static_cast<double>(bcount) / static_cast<double>(n);
            std::vector<double> enhanced(pred.pix.size());
            for (size_t i = 0; i < pred.pix.size(); ++i) {
                double pg = gt.pix[i] - mean_gt;
                double pb = (pred.pix[i] > t ? 1.0 : 0.0) - mean_b;
                double xi = 2.0 * pg * pb / (pg * pg + pb * pb + 1e-12);
                enhanced[i] = (xi + 1.0) * (xi + 1.0) / 4.0;
            }
            e = ordered_sum(std::move(enhanced)) / static_cast<double>(n);
        }
        total += e;
    }
    return total / static_cast<double>(kThresholds);
}

double composite_score(const Image& pred, const Image& gt, TaskKind kind, bool* degenerate) {
    double f = kind == TaskKind::salient ? f_measure_max(pred, gt, 0.3, degenerate)
                                         : f_measure_weighted(pred, gt, 0.3, degenerate);
    return s_measure(pred, gt) + e_measure_mean(pred, gt) + f + (1.0 - mae_metric(pred, gt));
}

MetricValues evaluate_pair(const Image& pred, const Image& gt, TaskKind kind) {
    MetricValues v;
    v.mae = mae_metric(pred, gt);
    v.s_alpha = s_measure(pred, gt);
    v.e_phi = e_measure_mean(pred, gt);
    v.f_beta_max = f_measure_max(pred, gt, 0.3, &v.degenerate);
    v.f_beta_weighted = f_measure_weighted(pred, gt, 0.3, &v.degenerate);
    double f = kind == TaskKind::salient ? v.f_beta_max : v.f_beta_weighted;
    v.composite = v.s_alpha + v.e_phi + f + (1.0 - v.mae);
    return v;
}

MetricReport evaluate_pairs(std::vector<MaskPair> pairs, TaskKind kind, int threads) {
    std::sort(pairs.begin(), pairs.end(),
              [](const MaskPair& a, const MaskPair& b) { return a.id < b.id; });
    MetricReport report;
    report.kind = kind;
    report.count = static_cast<int64_t>(pairs.size());
    report.pairs.resize(pairs.size());

    int want = threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency());
    want = std::max(1, std::min<int>(want, static_cast<int>(pairs.size())));
    std::atomic<size_t> next{0};
    std::vector<std::string> failures(pairs.size());
    auto worker = [&] {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= pairs.size()) return;
            try {
                report.pairs[i] = {pairs[i].id, evaluate_pair(pairs[i].pred, pairs[i].gt, kind)};
            } catch (const std::exception& e) {
                failures[i] = pairs[i].id + std::string(": ") + e.what();
            }
        }
    };
    if (want == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < want; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (const auto& f : failures)
        if (!f.empty()) throw ContractError("metric evaluation failed for " + f);

    // Aggregate in ascending id order (pairs are sorted above).
    auto& agg = report.aggregate;
    for (const auto& row : report.pairs) {
        agg.mae += row.values.mae;
        agg.s_alpha += row.values.s_alpha;
        agg.e_phi += row.values.e_phi;
        agg.f_beta_max += row.values.f_beta_max;
        agg.f_beta_weighted += row.values.f_beta_weighted;
        agg.composite += row.values.composite;
        agg.degenerate = agg.degenerate || row.values.degenerate;
    }
    if (!report.pairs.empty()) {
        double n = static_cast<double>(report.pairs.size());
        agg.mae /= n;
        agg.s_alpha /= n;
        agg.e_phi /= n;
        agg.f_beta_max /= n;
        agg.f_beta_weighted /= n;
        agg.composite /= n;
    }
    return report;
}

namespace {

nlohmann::json values_to_json(const MetricValues& v) {
    return {{"mae", v.mae},
            {"s_alpha", v.s_alpha},
            {"e_phi", v.e_phi},
            {"f_beta_max", v.f_beta_max},
            {"f_beta_weighted", v.f_beta_weighted},
            {"composite", v.composite},
            {"degenerate", v.degenerate}};
}

}  // namespace

std::string report_to_json(const MetricReport& report) {
    nlohmann::json j;
    j["task_kind"] = to_string(report.kind);
    j["count"] = report.count;
    j["aggregate"] = values_to_json(report.aggregate);
    auto rows = nlohmann::json::array();
    for (const auto& row : report.pairs) {
        auto r = values_to_json(row.values);
        r["id"] = row.id;
        rows.push_back(std::move(r));
    }
    j["pairs"] = std::move(rows);
    return j.dump(2) + "\n";
}

std::string report_to_table(const MetricReport& report) {
    std::ostringstream os;
    auto line = [&os](const std::string& id, const MetricValues& v, bool flag) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-24s %8.5f %8.5f %8.5f %8.5f %8.5f %9.5f %s\n",
                      id.c_str(), v.mae, v.s_alpha, v.e_phi, v.f_beta_max, v.f_beta_weighted,
                      v.composite, flag ? "degenerate" : "");
        os << buf;
    };
    char hdr[160];
    std::snprintf(hdr, sizeof(hdr), "%-24s %8s %8s %8s %8s %8s %9s\n", "id", "mae", "s_alpha",
                  "e_phi", "f_max", "f_wgt", "composite");
    os << hdr;
    for (const auto& row : report.pairs) line(row.id, row.values, row.values.degenerate);
    os << std::string(84, '-') << "\n";
    line("mean(" + std::to_string(report.count) + " pairs)", report.aggregate,
         report.aggregate.degenerate);
    return os.str();
}

}  // namespace jointseg
