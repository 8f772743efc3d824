#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "asfda/tensorio.hpp"

namespace asfda {

// ---------------------------------------------------------------------------
// A small fixed-architecture segmenter:
//   encoder: conv3x3(1->8, zero pad 1) -> ReLU -> conv3x3(8->16, pad 1) -> ReLU
//   head:    conv1x1(16->C) -> per-pixel softmax
// Weights live in one flat float32 vector with a fixed layout; gradients are
// derived by hand so training needs no autodiff framework.
// ---------------------------------------------------------------------------

struct ParamLayout {
    static constexpr int kC1 = 8;   // first-conv output channels
    static constexpr int kC2 = 16;  // encoder output channels (feature width)
    static constexpr int kK = 3;

    explicit ParamLayout(int num_classes);

    int num_classes;
    std::size_t w1, b1, w2, b2, w3, b3;  // offsets into the flat vector
    std::size_t total;
};

/// Per-slice feature representation: channel-wise global average of the
/// encoder activation map (width 16 when produced by this model).
struct FeatureVector {
    std::vector<float> values;
};

class Segmenter {
public:
    explicit Segmenter(int num_classes);  // all-zero weights

    static Segmenter random_init(int num_classes, std::uint64_t seed);
    static Segmenter from_weights(int num_classes, std::vector<float> weights);

    int num_classes() const { return layout_.num_classes; }
    const ParamLayout& layout() const { return layout_; }
    std::span<const float> weights() const { return weights_; }
    std::vector<float>& mutable_weights() { return weights_; }

    struct Forward {
        Tensor prob;     // C×H×W f32, per-pixel softmax
        Tensor encoder;  // 16×H×W f32, post-ReLU second-conv activation
    };
    /// image: H×W f32, H,W >= 3. Throws on non-finite weights.
    Forward forward(const Tensor& image) const;

private:
    ParamLayout layout_;
    std::vector<float> weights_;
};

/// Mean of 0.5*(Dice loss + cross-entropy), scaled by `weight`. Dice is
/// computed over foreground classes only with smoothing 1e-5.
double loss(const Tensor& prob, const Tensor& target, double weight);

/// Double-precision loss evaluated straight from the weights (no float32
/// rounding of activations); the reference the analytic gradient differentiates.
double loss_from_params(const Segmenter& m, const Tensor& image, const Tensor& target,
                        double weight);

/// Analytic gradient of loss_from_params w.r.t. every parameter. Also reports
/// the loss so training need not run the forward pass twice.
std::vector<double> backward(const Segmenter& m, const Tensor& image, const Tensor& target,
                             double weight, double* loss_out = nullptr);

/// Polynomial decay: lr0 * (1 - step/total_steps)^0.9.
double lr_schedule(double lr0, long step, long total_steps);

struct TrainConfig {
    double lr0 = 0.01;
    int epochs = 1;
    int batch_size = 1;
    double momentum = 0.9;
    std::uint64_t seed = 0;

    void validate() const;
};

struct TrainSample {
    Tensor image;   // H×W f32
    Tensor target;  // H×W u8
    double weight = 1.0;
};

struct TraceRow {
    long step;
    int epoch;
    double lr;
    double loss;
};

/// SGD with momentum over seeded shuffled mini-batches. Single-threaded;
/// identical (seed, data, cfg) gives bit-identical weights.
Segmenter train(const Segmenter& init, const std::vector<TrainSample>& data,
                const TrainConfig& cfg, std::vector<TraceRow>* trace = nullptr);

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace);

// Model container: magic "UGTM", version byte 1, u32 num_classes, u32 param
// count, float32 little-endian weights. Round-trips bit-exactly.
void save_model(const std::filesystem::path& path, const Segmenter& m);
Segmenter load_model(const std::filesystem::path& path,
                     std::optional<int> expected_classes = std::nullopt);

FeatureVector global_average(const Tensor& channel_map);  // C×H×W -> width-C vector

/// Per-pixel argmax over the class axis, ties to the lowest class. C×H×W -> H×W u8.
Tensor argmax_classes(const Tensor& prob);

} // namespace asfda
