#include "mscc/network.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace mscc {

static_assert(std::endian::native == std::endian::little,
              "checkpoint layout assumes a little-endian host");

ToyBackbone ToyBackbone::init(i64 w1, i64 w2, i64 w3, Rng& rng) {
    ToyBackbone b;
    b.s1a = Conv2dLayer::init(3, w1, 3, 2, rng);
    b.s1b = Conv2dLayer::init(w1, w1, 3, 1, rng);
    b.s2a = Conv2dLayer::init(w1, w2, 3, 2, rng);
    b.s2b = Conv2dLayer::init(w2, w2, 3, 1, rng);
    b.s3a = Conv2dLayer::init(w2, w3, 3, 2, rng);
    b.s3b = Conv2dLayer::init(w3, w3, 3, 1, rng);
    return b;
}

ToyBackbone::Levels ToyBackbone::forward(const Tensor& image) const {
    Tensor f1 = relu(s1b.forward(relu(s1a.forward(image))));
    Tensor f2 = relu(s2b.forward(relu(s2a.forward(f1))));
    Tensor f3 = relu(s3b.forward(relu(s3a.forward(f2))));
    return {f1, f2, f3};
}

void ToyBackbone::collect(const std::string& prefix, ParamRegistry& out) const {
    s1a.collect(prefix + ".s1a", out);
    s1b.collect(prefix + ".s1b", out);
    s2a.collect(prefix + ".s2a", out);
    s2b.collect(prefix + ".s2b", out);
    s3a.collect(prefix + ".s3a", out);
    s3b.collect(prefix + ".s3b", out);
}

void NetworkConfig::validate() const {
    require_config(backbone_w1 >= 1 && backbone_w2 >= 1 && backbone_w3 >= 1 && channels >= 1,
                   "network: widths must be positive");
    require_config(classes == 2, "network: k is fixed to 2 classes");
    require_config(!use_mscc_loss || use_mscc, "network: the aux loss needs the MSCC module");
    if (use_mscc) {
        require_config(mscc.channels == channels, "network: MSCC channel width must equal C");
        MsccConfig checked = mscc;
        checked.validate();
    }
}

Network Network::init(const NetworkConfig& cfg, Rng& rng) {
    cfg.validate();
    Network net;
    net.cfg = cfg;
    net.backbone = ToyBackbone::init(cfg.backbone_w1, cfg.backbone_w2, cfg.backbone_w3, rng);
    if (cfg.use_mfa)
        net.mfa = MfaModule::init(cfg.backbone_w1, cfg.backbone_w2, cfg.backbone_w3, cfg.channels,
                                  rng);
    else
        net.deep_align = Conv2dLayer::init(cfg.backbone_w3, cfg.channels, 3, 1, rng);
    if (cfg.use_mscc) net.mscc = MsccModule::init(cfg.mscc, rng);
    if (cfg.use_mscc_loss)
        net.aux_head = Conv2dLayer::init(cfg.mscc.groups * cfg.classes, cfg.classes, 1, 1, rng);
    net.pixel_head = Conv2dLayer::init(cfg.channels, cfg.classes, 1, 1, rng);
    net.image_head = LinearLayer::init(cfg.backbone_w3, cfg.classes, rng);
    return net;
}

ForwardOutput Network::forward(const Tensor& image) const {
    require(image.rank() == 3 && image.dim(0) == 3,
            "forward: image must be [3,H,W], got " + shape_str(image.shape()));
    require_config(image.dim(1) % 8 == 0 && image.dim(2) % 8 == 0,
                   "forward: input size must be divisible by 8, got " + shape_str(image.shape()));
    ForwardOutput out;
    const auto levels = backbone.forward(image);
    out.image_logits = image_head.forward(global_avg_pool(levels.f3));
    out.aggregated = cfg.use_mfa ? mfa.forward(levels.f1, levels.f2, levels.f3)
                                 : deep_align.forward(levels.f3);
    Tensor refined = out.aggregated;
    if (cfg.use_mscc) {
        MsccOut m = mscc_forward(out.aggregated, mscc);
        refined = m.refined;
        out.spectra = m.spectra;
        if (cfg.use_mscc_loss) out.aux_logits = fuse_coarse(m.coarse, aux_head);
    }
    out.pixel_logits = upsample_bilinear(pixel_head.forward(refined), 8);
    return out;
}

ParamRegistry Network::params() const {
    ParamRegistry out;
    backbone.collect("backbone", out);
    if (cfg.use_mfa)
        mfa.collect("mfa", out);
    else
        deep_align.collect("deep_align", out);
    if (cfg.use_mscc) mscc.collect("mscc", out);
    if (cfg.use_mscc_loss) aux_head.collect("aux_head", out);
    pixel_head.collect("pixel_head", out);
    image_head.collect("image_head", out);
    return out;
}

std::vector<i64> downsample_mask_nn(const Tensor& mask, i64 factor) {
    require(mask.rank() == 2, "downsample_mask_nn: mask must be [H,W]");
    const i64 h = mask.dim(0), w = mask.dim(1);
    require(h % factor == 0 && w % factor == 0, "downsample_mask_nn: size not divisible");
    std::vector<i64> out;
    out.reserve(static_cast<std::size_t>((h / factor) * (w / factor)));
    for (i64 i = 0; i < h; i += factor)
        for (i64 j = 0; j < w; j += factor) {
            const double v = mask.at({i, j});
            require(v == 0.0 || v == 1.0, "mask values must be 0 or 1");
            out.push_back(static_cast<i64>(v));
        }
    return out;
}

LossOutput network_loss(const ForwardOutput& out, const Tensor& mask, i64 label,
                        bool use_mscc_loss) {
    require(label == 0 || label == 1, "loss: label out of range");
    require(mask.rank() == 2 && mask.dim(0) == out.pixel_logits.dim(1) &&
                mask.dim(1) == out.pixel_logits.dim(2),
            "loss: mask grid does not match P1");
    std::vector<i64> pixel_targets;
    pixel_targets.reserve(static_cast<std::size_t>(mask.numel()));
    for (double v : mask.data()) {
        require(v == 0.0 || v == 1.0, "loss: mask values must be 0 or 1");
        pixel_targets.push_back(static_cast<i64>(v));
    }
    Tensor seg = softmax_cross_entropy(out.pixel_logits, pixel_targets, 0);
    Tensor cls = softmax_cross_entropy(out.image_logits, {label}, 0);
    LossOutput loss;
    loss.seg = seg.item();
    loss.cls = cls.item();
    Tensor total = add(cls, seg);
    if (use_mscc_loss) {
        require(out.aux_logits.defined(), "loss: aux logits missing");
        const i64 factor = mask.dim(0) / out.aux_logits.dim(1);
        Tensor aux = softmax_cross_entropy(out.aux_logits, downsample_mask_nn(mask, factor), 0);
        loss.mscc_aux = aux.item();
        total = add(total, aux);
    }
    loss.total = total;
    return loss;
}

void TrainConfig::validate() const {
    require_config(base_lr > 0 && momentum >= 0 && weight_decay >= 0 && poly_power > 0,
                   "train: hyperparameters must be positive");
    require_config(total_iters >= 0 && batch_size >= 1, "train: bad iteration/batch setup");
    require_config(input_size >= 8 && input_size % 8 == 0,
                   "train: input size must be a positive multiple of 8");
}

double poly_lr(const TrainConfig& cfg, i64 iter) {
    const double frac = static_cast<double>(iter) / static_cast<double>(cfg.total_iters);
    return cfg.base_lr * std::pow(1.0 - frac, cfg.poly_power);
}

SgdOptimizer::SgdOptimizer(const ParamRegistry& params, TrainConfig config) : cfg(config) {
    cfg.validate();
    velocity.reserve(params.size());
    for (const auto& [name, t] : params)
        velocity.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
}

void SgdOptimizer::step(ParamRegistry& params, i64 iter) {
    require(iter < cfg.total_iters, "train_step: iteration past the schedule end");
    const double lr = poly_lr(cfg, iter);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& t = params[pi].second;
        if (!t.has_grad()) continue;
        auto data = t.data_mut();
        auto g = t.grad();
        auto& v = velocity[pi];
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double grad = g[i] + cfg.weight_decay * data[i];
            v[i] = cfg.momentum * v[i] + grad;
            data[i] -= lr * v[i];
        }
    }
}

void SgdOptimizer::zero_grad(ParamRegistry& params) {
    for (auto& [name, t] : params) t.zero_grad();
}

StepMetrics train_step(Network& net, SgdOptimizer& opt, ParamRegistry& params,
                       const std::vector<TrainItem>& batch, i64 iter) {
    require(!batch.empty(), "train_step: empty batch");
    SgdOptimizer::zero_grad(params);
    StepMetrics metrics;
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (const TrainItem& item : batch) {
        ForwardOutput out = net.forward(item.image);
        LossOutput loss = network_loss(out, item.mask, item.label, net.cfg.use_mscc_loss);
        const struct {
            const char* name;
            double value;
        } components[] = {{"cls", loss.cls}, {"seg", loss.seg}, {"mscc", loss.mscc_aux}};
        for (const auto& c : components)
            if (!std::isfinite(c.value))
                throw ContractViolation(std::string("train_step: loss component '") + c.name +
                                        "' is not finite at iteration " + std::to_string(iter));
        metrics.cls += loss.cls * scale;
        metrics.seg += loss.seg * scale;
        metrics.mscc_aux += loss.mscc_aux * scale;
        mul(loss.total, scale).backward();
    }
    metrics.total = metrics.cls + metrics.seg + metrics.mscc_aux;
    metrics.lr = poly_lr(opt.cfg, iter);
    opt.step(params, iter);
    return metrics;
}

Prediction predict(const Network& net, const Tensor& image) {
    ForwardOutput out = net.forward(image);
    Prediction pred;
    const i64 h = out.pixel_logits.dim(1), w = out.pixel_logits.dim(2);
    std::vector<double> mask(static_cast<std::size_t>(h * w));
    const auto logits = out.pixel_logits.data();
    for (i64 p = 0; p < h * w; ++p)
        mask[static_cast<std::size_t>(p)] = logits[h * w + p] > logits[p] ? 1.0 : 0.0;
    pred.mask = Tensor::from_data({h, w}, std::move(mask));
    const double real_logit = out.image_logits.data()[0];
    const double fake_logit = out.image_logits.data()[1];
    pred.label = fake_logit > real_logit ? 1 : 0;
    const double mx = std::max(real_logit, fake_logit);
    const double er = std::exp(real_logit - mx), ef = std::exp(fake_logit - mx);
    pred.fake_score = ef / (er + ef);
    return pred;
}

namespace {

constexpr char kMagic[5] = {'M', 'S', 'C', 'C', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw IoError("checkpoint truncated: " + path);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamRegistry& params,
                     const std::string& config_text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, kVersion);
    write_pod(out, static_cast<std::uint64_t>(config_text.size()));
    out.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
    write_pod(out, static_cast<std::uint64_t>(params.size()));
    for (const auto& [name, t] : params) {
        write_pod(out, static_cast<std::uint64_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod(out, static_cast<std::uint32_t>(t.rank()));
        for (i64 d : t.shape()) write_pod(out, static_cast<std::uint64_t>(d));
        out.write(reinterpret_cast<const char*>(t.data().data()),
                  static_cast<std::streamsize>(sizeof(double) * t.data().size()));
    }
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[5] = {};
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoError("checkpoint magic mismatch: " + path + " is not an MSCC1 checkpoint");
    const auto version = read_pod<std::uint32_t>(in, path);
    if (version != kVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
    Checkpoint ckpt;
    const auto cfg_len = read_pod<std::uint64_t>(in, path);
    ckpt.config_text.resize(cfg_len);
    in.read(ckpt.config_text.data(), static_cast<std::streamsize>(cfg_len));
    const auto count = read_pod<std::uint64_t>(in, path);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = read_pod<std::uint64_t>(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), static_cast<std::streamsize>(name_len));
        const auto rank = read_pod<std::uint32_t>(in, path);
        if (rank == 0 || rank > 5) throw IoError("checkpoint tensor '" + name + "' has bad rank");
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d)
            shape.push_back(static_cast<i64>(read_pod<std::uint64_t>(in, path)));
        std::vector<double> data(static_cast<std::size_t>(numel_of(shape)));
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(sizeof(double) * data.size()));
        if (!in) throw IoError("checkpoint truncated: " + path);
        ckpt.tensors.emplace(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
    }
    return ckpt;
}

}  // namespace mscc
