#include "asfda/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace fs = std::filesystem;

namespace asfda {

namespace {

constexpr char kModelMagic[4] = {'U', 'G', 'T', 'M'};
constexpr std::uint8_t kModelVersion = 1;
constexpr double kDiceSmooth = 1e-5;

void check_image(const Tensor& image) {
    if (image.rank() != 2 || image.dtype() != Dtype::f32)
        throw std::invalid_argument("segmenter expects an H×W float32 image");
    if (image.dims()[0] < 3 || image.dims()[1] < 3)
        throw std::invalid_argument("segmenter requires H,W >= 3");
}

// Dense double-precision activations for one forward pass. The public
// forward() casts these to float32; training and gradients stay in double.
struct Activations {
    int H = 0, W = 0, C = 0;
    std::vector<double> z1, a1;      // 8×H×W
    std::vector<double> z2, a2;      // 16×H×W
    std::vector<double> logits, prob;  // C×H×W
};

// out[o] = bias[o] + sum_i w[o][i] (*) in[i], zero-padded 3x3 correlation.
void conv3x3(const double* in, int in_ch, int H, int W, const float* w, const float* b,
             int out_ch, double* out) {
    for (int o = 0; o < out_ch; ++o) {
        double* dst = out + static_cast<std::size_t>(o) * H * W;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) dst[y * W + x] = b[o];
        for (int i = 0; i < in_ch; ++i) {
            const double* src = in + static_cast<std::size_t>(i) * H * W;
            const float* k = w + (static_cast<std::size_t>(o) * in_ch + i) * 9;
            for (int y = 0; y < H; ++y) {
                for (int x = 0; x < W; ++x) {
                    double acc = 0.0;
                    for (int u = -1; u <= 1; ++u) {
                        const int yy = y + u;
                        if (yy < 0 || yy >= H) continue;
                        for (int v = -1; v <= 1; ++v) {
                            const int xx = x + v;
                            if (xx < 0 || xx >= W) continue;
                            acc += k[(u + 1) * 3 + (v + 1)] * src[yy * W + xx];
                        }
                    }
                    dst[y * W + x] += acc;
                }
            }
        }
    }
}

Activations run_forward(const Segmenter& m, const Tensor& image) {
    check_image(image);
    for (float v : m.weights())
        if (!std::isfinite(v)) throw std::invalid_argument("segmenter weights are not finite");

    const ParamLayout& L = m.layout();
    const float* w = m.weights().data();
    Activations act;
    act.H = static_cast<int>(image.dims()[0]);
    act.W = static_cast<int>(image.dims()[1]);
    act.C = L.num_classes;
    const int H = act.H, W = act.W, C = act.C;
    const std::size_t plane = static_cast<std::size_t>(H) * W;

    std::vector<double> input(plane);
    for (std::size_t i = 0; i < plane; ++i) input[i] = image.floats()[i];

    act.z1.resize(ParamLayout::kC1 * plane);
    conv3x3(input.data(), 1, H, W, w + L.w1, w + L.b1, ParamLayout::kC1, act.z1.data());
    act.a1.resize(act.z1.size());
    for (std::size_t i = 0; i < act.z1.size(); ++i) act.a1[i] = act.z1[i] > 0.0 ? act.z1[i] : 0.0;

    act.z2.resize(ParamLayout::kC2 * plane);
    conv3x3(act.a1.data(), ParamLayout::kC1, H, W, w + L.w2, w + L.b2, ParamLayout::kC2,
            act.z2.data());
    act.a2.resize(act.z2.size());
    for (std::size_t i = 0; i < act.z2.size(); ++i) act.a2[i] = act.z2[i] > 0.0 ? act.z2[i] : 0.0;

    act.logits.assign(static_cast<std::size_t>(C) * plane, 0.0);
    for (int c = 0; c < C; ++c) {
        double* dst = act.logits.data() + static_cast<std::size_t>(c) * plane;
        const double bias = w[L.b3 + c];
        for (std::size_t p = 0; p < plane; ++p) dst[p] = bias;
        for (int ch = 0; ch < ParamLayout::kC2; ++ch) {
            const double wk = w[L.w3 + static_cast<std::size_t>(c) * ParamLayout::kC2 + ch];
            const double* src = act.a2.data() + static_cast<std::size_t>(ch) * plane;
            for (std::size_t p = 0; p < plane; ++p) dst[p] += wk * src[p];
        }
    }

    act.prob.resize(act.logits.size());
    for (std::size_t p = 0; p < plane; ++p) {
        double mx = act.logits[p];
        for (int c = 1; c < C; ++c) mx = std::max(mx, act.logits[c * plane + p]);
        double sum = 0.0;
        for (int c = 0; c < C; ++c) {
            const double e = std::exp(act.logits[c * plane + p] - mx);
            act.prob[c * plane + p] = e;
            sum += e;
        }
        for (int c = 0; c < C; ++c) act.prob[c * plane + p] /= sum;
    }
    return act;
}

double loss_on_prob(std::span<const double> prob, const Tensor& target, double weight, int C,
                    std::size_t plane) {
    const auto t = target.bytes();
    double ce = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
        if (t[p] >= C) throw std::invalid_argument("target class id exceeds num_classes");
        ce += -std::log(prob[static_cast<std::size_t>(t[p]) * plane + p]);
    }
    ce /= static_cast<double>(plane);

    double dice_sum = 0.0;
    for (int c = 1; c < C; ++c) {
        double inter = 0.0, psum = 0.0, gsum = 0.0;
        const double* pc = prob.data() + static_cast<std::size_t>(c) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            const double y = (t[p] == c) ? 1.0 : 0.0;
            inter += pc[p] * y;
            psum += pc[p];
            gsum += y;
        }
        dice_sum += (2.0 * inter + kDiceSmooth) / (psum + gsum + kDiceSmooth);
    }
    const double dice_loss = 1.0 - dice_sum / static_cast<double>(C - 1);
    return weight * 0.5 * (ce + dice_loss);
}

} // namespace

// ---------------------------------------------------------------------------
// Layout / construction
// ---------------------------------------------------------------------------

ParamLayout::ParamLayout(int C) : num_classes(C) {
    if (C < 2) throw std::invalid_argument("num_classes must be >= 2");
    w1 = 0;
    b1 = w1 + static_cast<std::size_t>(kC1) * 1 * kK * kK;
    w2 = b1 + kC1;
    b2 = w2 + static_cast<std::size_t>(kC2) * kC1 * kK * kK;
    w3 = b2 + kC2;
    b3 = w3 + static_cast<std::size_t>(C) * kC2;
    total = b3 + C;
}

Segmenter::Segmenter(int num_classes) : layout_(num_classes), weights_(layout_.total, 0.0f) {}

Segmenter Segmenter::random_init(int num_classes, std::uint64_t seed) {
    Segmenter m(num_classes);
    Rng rng(seed);
    auto fill = [&](std::size_t off, std::size_t count, int fan_in) {
        const double bound = std::sqrt(6.0 / fan_in);
        for (std::size_t i = 0; i < count; ++i)
            m.weights_[off + i] = static_cast<float>(rng.uniform_range(-bound, bound));
    };
    const ParamLayout& L = m.layout_;
    fill(L.w1, L.b1 - L.w1, 1 * 9);
    fill(L.w2, L.b2 - L.w2, ParamLayout::kC1 * 9);
    fill(L.w3, L.b3 - L.w3, ParamLayout::kC2);
    return m;  // biases stay zero
}

Segmenter Segmenter::from_weights(int num_classes, std::vector<float> weights) {
    Segmenter m(num_classes);
    if (weights.size() != m.layout_.total)
        throw std::invalid_argument("weight vector length does not match architecture");
    m.weights_ = std::move(weights);
    return m;
}

// ---------------------------------------------------------------------------
// Forward / loss / backward
// ---------------------------------------------------------------------------

Segmenter::Forward Segmenter::forward(const Tensor& image) const {
    Activations act = run_forward(*this, image);
    const std::size_t plane = static_cast<std::size_t>(act.H) * act.W;
    const auto H = static_cast<std::uint32_t>(act.H);
    const auto W = static_cast<std::uint32_t>(act.W);

    Forward out;
    out.prob = Tensor::zeros_f32({static_cast<std::uint32_t>(act.C), H, W});
    for (std::size_t i = 0; i < act.prob.size(); ++i)
        out.prob.floats()[i] = static_cast<float>(act.prob[i]);
    out.encoder = Tensor::zeros_f32({ParamLayout::kC2, H, W});
    for (std::size_t i = 0; i < ParamLayout::kC2 * plane; ++i)
        out.encoder.floats()[i] = static_cast<float>(act.a2[i]);
    return out;
}

double loss(const Tensor& prob, const Tensor& target, double weight) {
    if (prob.rank() != 3 || target.rank() != 2 || prob.dims()[1] != target.dims()[0] ||
        prob.dims()[2] != target.dims()[1])
        throw std::invalid_argument("loss: prob must be C×H×W matching the H×W target");
    const int C = static_cast<int>(prob.dims()[0]);
    const std::size_t plane = static_cast<std::size_t>(prob.dims()[1]) * prob.dims()[2];
    std::vector<double> p(prob.floats().begin(), prob.floats().end());
    return loss_on_prob(p, target, weight, C, plane);
}

double loss_from_params(const Segmenter& m, const Tensor& image, const Tensor& target,
                        double weight) {
    Activations act = run_forward(m, image);
    return loss_on_prob(act.prob, target, weight, act.C,
                        static_cast<std::size_t>(act.H) * act.W);
}

std::vector<double> backward(const Segmenter& m, const Tensor& image, const Tensor& target,
                             double weight, double* loss_out) {
    Activations act = run_forward(m, image);
    const ParamLayout& L = m.layout();
    const float* w = m.weights().data();
    const int H = act.H, W = act.W, C = act.C;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const auto t = target.bytes();
    for (std::size_t p = 0; p < plane; ++p)
        if (t[p] >= C) throw std::invalid_argument("target class id exceeds num_classes");

    if (loss_out) *loss_out = loss_on_prob(act.prob, target, weight, C, plane);

    std::vector<double> grad(L.total, 0.0);
    std::vector<double> dlogits(static_cast<std::size_t>(C) * plane, 0.0);

    // Dice term: dL/dp for foreground channels, then through the softmax
    // Jacobian. CE term uses the fused softmax gradient directly.
    std::vector<double> dprob(static_cast<std::size_t>(C) * plane, 0.0);
    const double half_w = weight * 0.5;
    for (int c = 1; c < C; ++c) {
        double inter = 0.0, psum = 0.0, gsum = 0.0;
        const double* pc = act.prob.data() + static_cast<std::size_t>(c) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            const double y = (t[p] == c) ? 1.0 : 0.0;
            inter += pc[p] * y;
            psum += pc[p];
            gsum += y;
        }
        const double denom = psum + gsum + kDiceSmooth;
        const double numer = 2.0 * inter + kDiceSmooth;
        double* dpc = dprob.data() + static_cast<std::size_t>(c) * plane;
        const double scale = -half_w / static_cast<double>(C - 1);
        for (std::size_t p = 0; p < plane; ++p) {
            const double y = (t[p] == c) ? 1.0 : 0.0;
            dpc[p] = scale * (2.0 * y * denom - numer) / (denom * denom);
        }
    }
    const double ce_scale = half_w / static_cast<double>(plane);
    for (std::size_t p = 0; p < plane; ++p) {
        double dot = 0.0;
        for (int c = 0; c < C; ++c)
            dot += dprob[c * plane + p] * act.prob[c * plane + p];
        for (int c = 0; c < C; ++c) {
            const double pk = act.prob[c * plane + p];
            double g = pk * (dprob[c * plane + p] - dot);           // dice via softmax
            g += ce_scale * (pk - ((t[p] == c) ? 1.0 : 0.0));        // fused CE
            dlogits[c * plane + p] = g;
        }
    }

    // Head (1x1 conv).
    std::vector<double> da2(act.a2.size(), 0.0);
    for (int c = 0; c < C; ++c) {
        const double* dz = dlogits.data() + static_cast<std::size_t>(c) * plane;
        double bsum = 0.0;
        for (std::size_t p = 0; p < plane; ++p) bsum += dz[p];
        grad[L.b3 + c] = bsum;
        for (int ch = 0; ch < ParamLayout::kC2; ++ch) {
            const double* a = act.a2.data() + static_cast<std::size_t>(ch) * plane;
            double wsum = 0.0;
            for (std::size_t p = 0; p < plane; ++p) wsum += dz[p] * a[p];
            grad[L.w3 + static_cast<std::size_t>(c) * ParamLayout::kC2 + ch] = wsum;
            const double wk = w[L.w3 + static_cast<std::size_t>(c) * ParamLayout::kC2 + ch];
            double* d = da2.data() + static_cast<std::size_t>(ch) * plane;
            for (std::size_t p = 0; p < plane; ++p) d[p] += wk * dz[p];
        }
    }

    // ReLU after conv2.
    std::vector<double> dz2(act.z2.size());
    for (std::size_t i = 0; i < dz2.size(); ++i) dz2[i] = act.z2[i] > 0.0 ? da2[i] : 0.0;

    // conv2: weight/bias grads plus input gradient.
    std::vector<double> da1(act.a1.size(), 0.0);
    for (int o = 0; o < ParamLayout::kC2; ++o) {
        const double* dz = dz2.data() + static_cast<std::size_t>(o) * plane;
        double bsum = 0.0;
        for (std::size_t p = 0; p < plane; ++p) bsum += dz[p];
        grad[L.b2 + o] = bsum;
        for (int i = 0; i < ParamLayout::kC1; ++i) {
            const double* a = act.a1.data() + static_cast<std::size_t>(i) * plane;
            double* dai = da1.data() + static_cast<std::size_t>(i) * plane;
            const std::size_t kbase = L.w2 + (static_cast<std::size_t>(o) * ParamLayout::kC1 + i) * 9;
            for (int u = -1; u <= 1; ++u) {
                for (int v = -1; v <= 1; ++v) {
                    const std::size_t kidx = kbase + (u + 1) * 3 + (v + 1);
                    const double wk = w[kidx];
                    double acc = 0.0;
                    for (int y = 0; y < H; ++y) {
                        const int yy = y + u;
                        if (yy < 0 || yy >= H) continue;
                        for (int x = 0; x < W; ++x) {
                            const int xx = x + v;
                            if (xx < 0 || xx >= W) continue;
                            const double d = dz[y * W + x];
                            acc += d * a[yy * W + xx];
                            dai[yy * W + xx] += wk * d;
                        }
                    }
                    grad[kidx] += acc;
                }
            }
        }
    }

    // ReLU after conv1, then conv1 weight/bias grads against the input image.
    std::vector<double> dz1(act.z1.size());
    for (std::size_t i = 0; i < dz1.size(); ++i) dz1[i] = act.z1[i] > 0.0 ? da1[i] : 0.0;

    const auto img = image.floats();
    for (int o = 0; o < ParamLayout::kC1; ++o) {
        const double* dz = dz1.data() + static_cast<std::size_t>(o) * plane;
        double bsum = 0.0;
        for (std::size_t p = 0; p < plane; ++p) bsum += dz[p];
        grad[L.b1 + o] = bsum;
        const std::size_t kbase = L.w1 + static_cast<std::size_t>(o) * 9;
        for (int u = -1; u <= 1; ++u) {
            for (int v = -1; v <= 1; ++v) {
                double acc = 0.0;
                for (int y = 0; y < H; ++y) {
                    const int yy = y + u;
                    if (yy < 0 || yy >= H) continue;
                    for (int x = 0; x < W; ++x) {
                        const int xx = x + v;
                        if (xx < 0 || xx >= W) continue;
                        acc += dz[y * W + x] * img[yy * W + xx];
                    }
                }
                grad[kbase + (u + 1) * 3 + (v + 1)] = acc;
            }
        }
    }

    return grad;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

double lr_schedule(double lr0, long step, long total_steps) {
    if (total_steps <= 0) throw std::invalid_argument("lr_schedule: total_steps must be > 0");
    if (step < 0 || step > total_steps)
        throw std::invalid_argument("lr_schedule: step out of [0, total_steps]");
    return lr0 * std::pow(1.0 - static_cast<double>(step) / total_steps, 0.9);
}

void TrainConfig::validate() const {
    if (lr0 <= 0.0) throw ConfigError("lr0 must be > 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

Segmenter train(const Segmenter& init, const std::vector<TrainSample>& data,
                const TrainConfig& cfg, std::vector<TraceRow>* trace) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("train: dataset is empty");

    Segmenter model = init;
    const std::size_t n = data.size();
    const long steps_per_epoch = static_cast<long>((n + cfg.batch_size - 1) / cfg.batch_size);
    const long total_steps = static_cast<long>(cfg.epochs) * steps_per_epoch;

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> velocity(model.layout().total, 0.0);
    std::vector<double> batch_grad(model.layout().total);

    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = n - 1; i > 0; --i)
            std::swap(order[i], order[rng.uniform_index(i + 1)]);

        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t end = std::min(n, start + cfg.batch_size);
            const double inv = 1.0 / static_cast<double>(end - start);
            std::fill(batch_grad.begin(), batch_grad.end(), 0.0);
            double batch_loss = 0.0;
            for (std::size_t i = start; i < end; ++i) {
                const TrainSample& s = data[order[i]];
                double sample_loss = 0.0;
                const auto g = backward(model, s.image, s.target, s.weight, &sample_loss);
                for (std::size_t j = 0; j < g.size(); ++j) batch_grad[j] += g[j] * inv;
                batch_loss += sample_loss * inv;
            }
            if (!std::isfinite(batch_loss))
                throw TrainError(step, "training diverged (non-finite loss) at step " +
                                           std::to_string(step));

            const double lr = lr_schedule(cfg.lr0, step, total_steps);
            auto& wts = model.mutable_weights();
            for (std::size_t j = 0; j < wts.size(); ++j) {
                velocity[j] = cfg.momentum * velocity[j] + batch_grad[j];
                wts[j] = static_cast<float>(static_cast<double>(wts[j]) - lr * velocity[j]);
            }
            if (trace) trace->push_back({step, epoch, lr, batch_loss});
            ++step;
        }
    }
    return model;
}

void write_trace_csv(const fs::path& path, const std::vector<TraceRow>& trace) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write trace: " + path.string());
    f << "step,epoch,lr,loss\n";
    for (const auto& r : trace)
        f << r.step << "," << r.epoch << "," << format_double(r.lr) << ","
          << format_double(r.loss) << "\n";
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

void save_model(const fs::path& path, const Segmenter& m) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw TensorIoError(TensorIoError::Kind::io, "cannot write model: " + path.string());
    f.write(kModelMagic, 4);
    f.put(static_cast<char>(kModelVersion));
    auto put32 = [&](std::uint32_t v) {
        char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
        f.write(b, 4);
    };
    put32(static_cast<std::uint32_t>(m.num_classes()));
    put32(static_cast<std::uint32_t>(m.weights().size()));
    for (float v : m.weights()) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put32(bits);
    }
    if (!f) throw TensorIoError(TensorIoError::Kind::io, "model write failed: " + path.string());
}

Segmenter load_model(const fs::path& path, std::optional<int> expected_classes) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw TensorIoError(TensorIoError::Kind::io, "cannot open model: " + path.string());
    std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
    auto fail = [&](TensorIoError::Kind k, const std::string& what) {
        throw TensorIoError(k, what + ": " + path.string());
    };
    if (b.size() < 13) fail(TensorIoError::Kind::truncated, "model file shorter than header");
    if (std::memcmp(b.data(), kModelMagic, 4) != 0)
        fail(TensorIoError::Kind::bad_magic, "bad model magic");
    if (b[4] != kModelVersion) fail(TensorIoError::Kind::bad_version, "unsupported model version");
    auto get32 = [&](std::size_t off) {
        return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
               (static_cast<std::uint32_t>(b[off + 2]) << 16) |
               (static_cast<std::uint32_t>(b[off + 3]) << 24);
    };
    const int C = static_cast<int>(get32(5));
    const std::size_t count = get32(9);
    if (C < 2) fail(TensorIoError::Kind::bad_shape, "model num_classes out of range");
    if (expected_classes && C != *expected_classes)
        fail(TensorIoError::Kind::bad_shape,
             "model has " + std::to_string(C) + " classes, expected " +
                 std::to_string(*expected_classes));
    ParamLayout layout(C);
    if (count != layout.total) fail(TensorIoError::Kind::bad_shape, "parameter count mismatch");
    if (b.size() != 13 + 4 * count)
        fail(TensorIoError::Kind::truncated, "model payload length mismatch");

    std::vector<float> weights(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint32_t bits = get32(13 + 4 * i);
        float v;
        std::memcpy(&v, &bits, 4);
        if (!std::isfinite(v)) fail(TensorIoError::Kind::non_finite, "model weight not finite");
        weights[i] = v;
    }
    return Segmenter::from_weights(C, std::move(weights));
}

FeatureVector global_average(const Tensor& channel_map) {
    if (channel_map.rank() != 3 || channel_map.dtype() != Dtype::f32)
        throw std::invalid_argument("global_average expects a C×H×W float32 map");
    const std::size_t C = channel_map.dims()[0];
    const std::size_t plane =
        static_cast<std::size_t>(channel_map.dims()[1]) * channel_map.dims()[2];
    FeatureVector out;
    out.values.resize(C);
    for (std::size_t c = 0; c < C; ++c) {
        double sum = 0.0;
        for (std::size_t p = 0; p < plane; ++p) sum += channel_map.floats()[c * plane + p];
        out.values[c] = static_cast<float>(sum / static_cast<double>(plane));
    }
    return out;
}

Tensor argmax_classes(const Tensor& prob) {
    if (prob.rank() != 3 || prob.dtype() != Dtype::f32)
        throw std::invalid_argument("argmax_classes expects a C×H×W float32 map");
    const std::size_t C = prob.dims()[0];
    const std::size_t plane = static_cast<std::size_t>(prob.dims()[1]) * prob.dims()[2];
    Tensor out = Tensor::zeros_u8({prob.dims()[1], prob.dims()[2]});
    const auto v = prob.floats();
    for (std::size_t i = 0; i < plane; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (v[c * plane + i] > v[best * plane + i]) best = c;
        out.bytes()[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

} // namespace asfda
