#pragma once

#include <map>
#include <string>
#include <vector>

#include "mscc/layers.hpp"
#include "mscc/mfa.hpp"
#include "mscc/mscc_module.hpp"
#include "mscc/tensor.hpp"

namespace mscc {

/// Three conv stages emitting features at strides 2/4/8 of the input.
struct ToyBackbone {
    Conv2dLayer s1a, s1b, s2a, s2b, s3a, s3b;  // each stage: strided conv + conv

    static ToyBackbone init(i64 w1, i64 w2, i64 w3, Rng& rng);

    struct Levels {
        Tensor f1, f2, f3;
    };
    Levels forward(const Tensor& image) const;

    void collect(const std::string& prefix, ParamRegistry& out) const;
};

struct NetworkConfig {
    i64 backbone_w1 = 16, backbone_w2 = 32, backbone_w3 = 64;
    i64 channels = 64;  // C after aggregation
    i64 classes = 2;
    MsccConfig mscc;  // channels/groups kept in sync by validate()
    bool use_mfa = true;
    bool use_mscc = true;
    bool use_mscc_loss = true;

    void validate() const;
};

struct ForwardOutput {
    Tensor pixel_logits;  // P1 [k,H,W]
    Tensor image_logits;  // P2 [k]
    Tensor aux_logits;    // P'_S [k,h,w]; undefined unless the aux loss is on
    Tensor aggregated;    // F_A [C,h,w]
    Tensor spectra;       // F~_S [M,C/M,h,w]; undefined without the MSCC module
};

struct Network {
    NetworkConfig cfg;
    ToyBackbone backbone;
    MfaModule mfa;            // use_mfa
    Conv2dLayer deep_align;   // baseline path: 3x3 conv F3 -> C
    MsccModule mscc;          // use_mscc
    Conv2dLayer aux_head;     // 1x1, M*k -> k; use_mscc_loss
    Conv2dLayer pixel_head;   // 1x1, C -> k
    LinearLayer image_head;   // w3 -> k

    static Network init(const NetworkConfig& cfg, Rng& rng);

    ForwardOutput forward(const Tensor& image) const;
    ParamRegistry params() const;
};

struct LossOutput {
    Tensor total;
    double cls = 0.0, seg = 0.0, mscc_aux = 0.0;
};

/// Eq.-style three-term objective. mask is a {0,1} map matching P1's grid;
/// the aux term compares against the nearest-neighbor-downsampled mask.
LossOutput network_loss(const ForwardOutput& out, const Tensor& mask, i64 label,
                        bool use_mscc_loss);

/// Top-left nearest-neighbor downsample of a {0,1} mask into flat targets.
std::vector<i64> downsample_mask_nn(const Tensor& mask, i64 factor);

struct TrainConfig {
    double base_lr = 0.009;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double poly_power = 0.9;
    i64 total_iters = 2000;
    i64 batch_size = 8;
    i64 input_size = 64;
    std::uint64_t seed = 1;

    void validate() const;
};

double poly_lr(const TrainConfig& cfg, i64 iter);

/// SGD with momentum; weight decay enters as an L2 gradient term.
struct SgdOptimizer {
    TrainConfig cfg;
    std::vector<std::vector<double>> velocity;

    SgdOptimizer(const ParamRegistry& params, TrainConfig cfg);
    void step(ParamRegistry& params, i64 iter);
    static void zero_grad(ParamRegistry& params);
};

struct TrainItem {
    Tensor image;  // [3,H,W], already scaled to [0,1]
    Tensor mask;   // [H,W] in {0,1}
    i64 label = 0;
};

struct StepMetrics {
    double total = 0.0, cls = 0.0, seg = 0.0, mscc_aux = 0.0, lr = 0.0;
};

StepMetrics train_step(Network& net, SgdOptimizer& opt, ParamRegistry& params,
                       const std::vector<TrainItem>& batch, i64 iter);

struct Prediction {
    Tensor mask;  // [H,W] of {0,1}
    i64 label = 0;
    double fake_score = 0.0;  // softmax(P2)[fake]
};

Prediction predict(const Network& net, const Tensor& image);

// Versioned little-endian checkpoint: "MSCC1", the resolved config text, then
// named float64 tensors.
void save_checkpoint(const std::string& path, const ParamRegistry& params,
                     const std::string& config_text);

struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    std::string config_text;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mscc
