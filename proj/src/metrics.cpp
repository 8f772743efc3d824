#include "asfda/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace asfda {

namespace {

struct Vox {
    int z, y, x;
};

void require_mask(const Tensor& m, const char* who) {
    if (m.dtype() != Dtype::u8 || (m.rank() != 2 && m.rank() != 3))
        throw std::invalid_argument(std::string(who) + " expects a 2D or 3D uint8 mask");
}

// (D,H,W) with D=1 for rank-2 masks, so one code path serves both.
std::array<int, 3> extents(const Tensor& m) {
    if (m.rank() == 2)
        return {1, static_cast<int>(m.dims()[0]), static_cast<int>(m.dims()[1])};
    return {static_cast<int>(m.dims()[0]), static_cast<int>(m.dims()[1]),
            static_cast<int>(m.dims()[2])};
}

std::vector<Vox> boundary(const Tensor& m, bool three_d) {
    const auto [D, H, W] = extents(m);
    const auto v = m.bytes();
    auto fg = [&](int z, int y, int x) {
        if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W) return false;
        return v[(static_cast<std::size_t>(z) * H + y) * W + x] != 0;
    };
    std::vector<Vox> out;
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (!fg(z, y, x)) continue;
                bool edge = !fg(z, y - 1, x) || !fg(z, y + 1, x) || !fg(z, y, x - 1) ||
                            !fg(z, y, x + 1);
                if (three_d) edge = edge || !fg(z - 1, y, x) || !fg(z + 1, y, x);
                if (edge) out.push_back({z, y, x});
            }
    return out;
}

double nearest(const Vox& a, const std::vector<Vox>& bs) {
    double best = std::numeric_limits<double>::infinity();
    for (const Vox& b : bs) {
        const double dz = a.z - b.z, dy = a.y - b.y, dx = a.x - b.x;
        best = std::min(best, dz * dz + dy * dy + dx * dx);
    }
    return std::sqrt(best);
}

double percentile95(std::vector<double>& pool) {
    std::sort(pool.begin(), pool.end());
    const std::size_t n = pool.size();
    if (n == 1) return pool[0];
    const double rank = 0.95 * static_cast<double>(n - 1);
    const std::size_t lo = static_cast<std::size_t>(rank);
    const double frac = rank - static_cast<double>(lo);
    if (lo + 1 >= n) return pool[n - 1];
    return pool[lo] + frac * (pool[lo + 1] - pool[lo]);
}

} // namespace

double dsc(const Tensor& pred, const Tensor& gt) {
    require_mask(pred, "dsc");
    require_mask(gt, "dsc");
    if (!pred.same_dims(gt)) throw std::invalid_argument("dsc: mask dims differ");

    std::size_t p = 0, g = 0, both = 0;
    const auto pv = pred.bytes(), gv = gt.bytes();
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const bool a = pv[i] != 0, b = gv[i] != 0;
        p += a;
        g += b;
        both += a && b;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

Hd95Result hd95(const Tensor& pred, const Tensor& gt) {
    require_mask(pred, "hd95");
    require_mask(gt, "hd95");
    if (!pred.same_dims(gt)) throw std::invalid_argument("hd95: mask dims differ");

    const bool three_d = pred.rank() == 3;
    const std::vector<Vox> bp = boundary(pred, three_d);
    const std::vector<Vox> bg = boundary(gt, three_d);

    if (bp.empty() || bg.empty()) {
        double diag = 0.0;
        for (auto d : pred.dims()) diag += static_cast<double>(d) * d;
        return {std::sqrt(diag), true};
    }

    std::vector<double> pool;
    pool.reserve(bp.size() + bg.size());
    for (const Vox& v : bp) pool.push_back(nearest(v, bg));
    for (const Vox& v : bg) pool.push_back(nearest(v, bp));
    return {percentile95(pool), false};
}

Tensor largest_component(const Tensor& mask) {
    require_mask(mask, "largest_component");
    const auto [D, H, W] = extents(mask);
    const bool three_d = mask.rank() == 3;
    const auto v = mask.bytes();
    auto idx = [&](int z, int y, int x) { return (static_cast<std::size_t>(z) * H + y) * W + x; };

    std::vector<std::uint8_t> seen(v.size(), 0);
    std::vector<std::size_t> best_component;
    // Row-major scan: the first voxel found for a component is its
    // lexicographically smallest, so "keep the first of equal size" is the
    // tie rule.
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const std::size_t start = idx(z, y, x);
                if (v[start] == 0 || seen[start]) continue;
                std::vector<std::size_t> comp;
                std::deque<Vox> queue{{z, y, x}};
                seen[start] = 1;
                while (!queue.empty()) {
                    const Vox c = queue.front();
                    queue.pop_front();
                    comp.push_back(idx(c.z, c.y, c.x));
                    const int dz[] = {0, 0, 0, 0, -1, 1};
                    const int dy[] = {-1, 1, 0, 0, 0, 0};
                    const int dx[] = {0, 0, -1, 1, 0, 0};
                    const int nn = three_d ? 6 : 4;
                    for (int k = 0; k < nn; ++k) {
                        const int nz = c.z + dz[k], ny = c.y + dy[k], nx = c.x + dx[k];
                        if (nz < 0 || nz >= D || ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                        const std::size_t ni = idx(nz, ny, nx);
                        if (v[ni] == 0 || seen[ni]) continue;
                        seen[ni] = 1;
                        queue.push_back({nz, ny, nx});
                    }
                }
                if (comp.size() > best_component.size()) best_component = std::move(comp);
            }

    Tensor out = Tensor::zeros_u8(mask.dims());
    for (std::size_t i : best_component) out.bytes()[i] = 1;
    return out;
}

EvalResult evaluate_case_volume(const std::string& case_id, const Tensor& pred_vol,
                                const Tensor& gt_vol) {
    const Tensor cleaned = largest_component(pred_vol);
    EvalResult r;
    r.case_id = case_id;
    r.dsc = dsc(cleaned, gt_vol);
    const Hd95Result h = hd95(cleaned, gt_vol);
    r.hd95 = h.value;
    r.hd95_is_sentinel = h.is_sentinel;
    r.num_slices = pred_vol.rank() == 3 ? static_cast<int>(pred_vol.dims()[0]) : 1;
    return r;
}

std::vector<EvalResult> evaluate_cases(const Segmenter& model, const DatasetManifest& manifest,
                                       const EvalConfig& cfg) {
    cfg.validate();
    if (manifest.slices.empty()) throw std::invalid_argument("evaluate_cases: empty manifest");

    std::vector<EvalResult> out;
    std::size_t i = 0;
    while (i < manifest.slices.size()) {
        const std::string case_id = manifest.slices[i].case_id;
        std::vector<Tensor> preds, gts;
        for (; i < manifest.slices.size() && manifest.slices[i].case_id == case_id; ++i) {
            const SliceRef& ref = manifest.slices[i];
            if (!ref.labeled())
                throw ManifestError("evaluation manifest has unlabeled slice '" + ref.id + "'");
            const TargetSlice slice = load_slice(ref);
            const Tensor prob = cfg.use_tta
                                    ? ensemble_predict(model, slice.image,
                                                       plan_for_slice(cfg.aug, slice.id))
                                    : model.forward(slice.image).prob;
            preds.push_back(argmax_classes(prob));
            gts.push_back(*slice.label);
        }

        const std::uint32_t H = preds[0].dims()[0], W = preds[0].dims()[1];
        const std::uint32_t D = static_cast<std::uint32_t>(preds.size());
        Tensor pred_vol = Tensor::zeros_u8({D, H, W});
        Tensor gt_vol = Tensor::zeros_u8({D, H, W});
        for (std::uint32_t d = 0; d < D; ++d) {
            if (preds[d].dims() != preds[0].dims())
                throw ManifestError("case '" + case_id + "' mixes slice sizes");
            const std::size_t plane = static_cast<std::size_t>(H) * W;
            for (std::size_t p = 0; p < plane; ++p) {
                pred_vol.bytes()[d * plane + p] = preds[d].bytes()[p] != 0;
                gt_vol.bytes()[d * plane + p] = gts[d].bytes()[p] != 0;
            }
        }
        out.push_back(evaluate_case_volume(case_id, pred_vol, gt_vol));
    }
    return out;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EvalResult>& results) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw TensorIoError(TensorIoError::Kind::io, "cannot open " + path.string());
    f << "case_id,dsc,hd95,hd95_is_sentinel,num_slices\n";
    for (const auto& r : results)
        f << r.case_id << ',' << format_double(r.dsc) << ',' << format_double(r.hd95) << ','
          << (r.hd95_is_sentinel ? 1 : 0) << ',' << r.num_slices << '\n';
    if (!f.flush()) throw TensorIoError(TensorIoError::Kind::io, "write failed: " + path.string());
}

} // namespace asfda
