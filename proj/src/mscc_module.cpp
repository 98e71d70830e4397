#include "mscc/mscc_module.hpp"

#include <cmath>
#include <string>

namespace mscc {

void MsccConfig::validate() const {
    require_config(classes == 2, "mscc: k is fixed to 2 classes");
    require_config(channels >= 1 && groups >= 1, "mscc: C and M must be positive");
    require_config(channels % groups == 0, "mscc: M must divide C");
    spectral.validate(channels);
    require_config(spectral.groups == groups, "mscc: spectral group count mismatch");
}

Tensor normalize_adjacency(const Tensor& adjacency) {
    require(adjacency.rank() == 2 && adjacency.dim(0) == adjacency.dim(1),
            "normalize_adjacency: adjacency must be square");
    const i64 n = adjacency.dim(0);
    std::vector<double> a(adjacency.data().begin(), adjacency.data().end());
    for (i64 i = 0; i < n; ++i) a[static_cast<std::size_t>(i * n + i)] += 1.0;  // self loops
    std::vector<double> dinv(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) {
        double deg = 0.0;
        for (i64 j = 0; j < n; ++j) deg += a[static_cast<std::size_t>(i * n + j)];
        require(deg > 0.0, "normalize_adjacency: isolated node");
        dinv[static_cast<std::size_t>(i)] = 1.0 / std::sqrt(deg);
    }
    for (i64 i = 0; i < n; ++i)
        for (i64 j = 0; j < n; ++j)
            a[static_cast<std::size_t>(i * n + j)] *= dinv[static_cast<std::size_t>(i)] *
                                                      dinv[static_cast<std::size_t>(j)];
    return Tensor::from_data({n, n}, std::move(a));
}

Tensor complete_adjacency(i64 nodes) {
    // Every node pair connected, self included. With a zero diagonal the
    // normalized operator would be the rank-one J/n, collapsing all centers
    // to their mean; the extra self weight keeps nodes distinguishable.
    return Tensor::ones({nodes, nodes});
}

Tensor empty_adjacency(i64 nodes) { return Tensor::zeros({nodes, nodes}); }

MsccModule MsccModule::init(const MsccConfig& cfg, Rng& rng) {
    cfg.validate();
    MsccModule m;
    m.cfg = cfg;
    m.basis = build_basis(cfg.spectral.u_extent, cfg.spectral.v_extent);
    const i64 cm = cfg.channels / cfg.groups;
    for (i64 g = 0; g < cfg.groups; ++g)
        m.coarse_heads.push_back(Conv2dLayer::init(cm, cfg.classes, 1, 1, rng));
    if (cfg.use_gcn) {
        const double scale = std::sqrt(2.0 / static_cast<double>(cm));
        std::vector<double> w(static_cast<std::size_t>(cm * cm));
        for (double& v : w) v = rng.normal() * scale;
        m.gcn_weight = Tensor::from_data({cm, cm}, std::move(w)).set_requires_grad();
        m.adj_norm = normalize_adjacency(complete_adjacency(cfg.groups * cfg.classes));
    }
    const i64 fuse_in = cfg.fusion == FusionKind::concat ? 2 * cfg.channels : cfg.channels;
    m.fuse = Conv2dLayer::init(fuse_in, cfg.channels, 1, 1, rng);
    return m;
}

void MsccModule::collect(const std::string& prefix, ParamRegistry& out) const {
    for (std::size_t g = 0; g < coarse_heads.size(); ++g)
        coarse_heads[g].collect(prefix + ".coarse" + std::to_string(g), out);
    if (cfg.use_gcn) out.emplace_back(prefix + ".gcn.w", gcn_weight);
    fuse.collect(prefix + ".fuse", out);
}

Tensor coarse_predict(const Tensor& spectra, const std::vector<Conv2dLayer>& heads) {
    require(spectra.rank() == 4, "coarse_predict: expected [M,C/M,h,w]");
    const i64 m = spectra.dim(0), cm = spectra.dim(1), h = spectra.dim(2), w = spectra.dim(3);
    require(static_cast<i64>(heads.size()) == m, "coarse_predict: one head per spectrum");
    std::vector<Tensor> parts;
    parts.reserve(static_cast<std::size_t>(m));
    for (i64 g = 0; g < m; ++g) {
        Tensor block = reshape(slice(spectra, 0, g, 1), {cm, h, w});
        Tensor probs = softmax(heads[static_cast<std::size_t>(g)].forward(block), 0);
        parts.push_back(reshape(probs, {1, probs.dim(0), h, w}));
    }
    return concat(parts, 0);
}

Tensor class_centers(const Tensor& coarse, const Tensor& spectra, CenterNorm norm) {
    require(coarse.rank() == 4 && spectra.rank() == 4, "class_centers: expected rank-4 inputs");
    const i64 m = coarse.dim(0), k = coarse.dim(1), h = coarse.dim(2), w = coarse.dim(3);
    require(spectra.dim(0) == m && spectra.dim(2) == h && spectra.dim(3) == w,
            "class_centers: grids differ: " + shape_str(coarse.shape()) + " vs " +
                shape_str(spectra.shape()));
    const i64 cm = spectra.dim(1);
    Tensor weights = reshape(coarse, {m, k, h * w});
    if (norm == CenterNorm::spatial_softmax) weights = softmax(weights, 2);
    Tensor feats = permute(reshape(spectra, {m, cm, h * w}), {0, 2, 1});  // [M, hw, C/M]
    return matmul(weights, feats);                                       // [M, k, C/M]
}

Tensor graph_interact(const Tensor& centers, const Tensor& adj_norm, const Tensor& weight) {
    require(centers.rank() == 3, "graph_interact: expected [M,k,C/M]");
    const i64 m = centers.dim(0), k = centers.dim(1), cm = centers.dim(2);
    const i64 nodes = m * k;
    require(adj_norm.rank() == 2 && adj_norm.dim(0) == nodes && adj_norm.dim(1) == nodes,
            "graph_interact: adjacency is not (M*k)^2");
    require(weight.rank() == 2 && weight.dim(0) == cm && weight.dim(1) == cm,
            "graph_interact: weight is not (C/M)^2");
    Tensor x = reshape(centers, {nodes, cm});
    Tensor mixed = matmul(matmul(adj_norm, x), weight);
    return reshape(relu(mixed), {m, k, cm});
}

RefineOut refine(const Tensor& features, const Tensor& centers, const Conv2dLayer& fuse,
                 FusionKind fusion) {
    require(features.rank() == 3, "refine: features must be [C,h,w]");
    require(centers.rank() == 3, "refine: centers must be [M,k,C/M]");
    const i64 c = features.dim(0), h = features.dim(1), w = features.dim(2);
    const i64 m = centers.dim(0), cm = centers.dim(2);
    require(m * cm == c, "refine: center width " + std::to_string(cm) + " x " + std::to_string(m) +
                             " spectra does not cover C=" + std::to_string(c));
    // [M, hw, C/M] pixel features per spectrum
    Tensor blocks = permute(reshape(features, {m, cm, h * w}), {0, 2, 1});
    Tensor sim = matmul(blocks, permute(centers, {0, 2, 1}));  // [M, hw, k]
    Tensor attention = softmax(sim, 2);
    Tensor weighted = matmul(attention, centers);  // [M, hw, C/M]
    Tensor weighted_chw = reshape(permute(weighted, {0, 2, 1}), {c, h, w});
    Tensor fused = fusion == FusionKind::concat
                       ? fuse.forward(concat({features, weighted_chw}, 0))
                       : fuse.forward(add(features, weighted_chw));
    return {fused, attention, weighted_chw};
}

Tensor fuse_coarse(const Tensor& coarse, const Conv2dLayer& head) {
    require(coarse.rank() == 4, "fuse_coarse: expected [M,k,h,w]");
    const i64 m = coarse.dim(0), k = coarse.dim(1), h = coarse.dim(2), w = coarse.dim(3);
    return head.forward(reshape(coarse, {m * k, h, w}));
}

MsccOut mscc_forward(const Tensor& features, const MsccModule& module) {
    const MsccConfig& cfg = module.cfg;
    require(features.rank() == 3 && features.dim(0) == cfg.channels,
            "mscc_forward: features must be [C,h,w] with C=" + std::to_string(cfg.channels));
    Tensor bands = cfg.use_dct
                       ? spectral_transform(features, module.basis, cfg.spectral.mode)
                       : features;
    Tensor spectra = group_spectra(bands, cfg.groups);
    Tensor coarse = coarse_predict(spectra, module.coarse_heads);
    Tensor centers = class_centers(coarse, spectra, cfg.center_norm);
    if (cfg.use_gcn) centers = graph_interact(centers, module.adj_norm, module.gcn_weight);
    RefineOut r = refine(features, centers, module.fuse, cfg.fusion);
    return {r.refined, coarse, spectra, r.attention, centers, r.weighted};
}

}  // namespace mscc
