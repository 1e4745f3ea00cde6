#pragma once

#include <atomic>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "vkcc/common.hpp"
#include "vkcc/ops.hpp"

namespace vkcc {

enum class Scale { toy, full };
enum class HeadKind { lightweight, fc4_baseline };

/// Architecture preset. `toy` is a miniature of the full-scale layout with
/// the same structure (stem, fire blocks, attention before every max-pool
/// except the first) so structural properties can be tested cheaply.
struct BackboneConfig {
    Scale scale = Scale::toy;
    int isam_reduction = 4;  // channel-branch bottleneck ratio r

    Eigen::Index head_channels() const { return scale == Scale::toy ? 32 : 512; }
    std::vector<Eigen::Index> isam_site_channels() const {
        return scale == Scale::toy ? std::vector<Eigen::Index>{32}
                                   : std::vector<Eigen::Index>{128, 256};
    }

    static BackboneConfig toy() { return {Scale::toy, 4}; }
    static BackboneConfig full() { return {Scale::full, 4}; }
};

namespace detail {

template <typename S>
TensorT<S> he_normal(typename TensorT<S>::Shape shape, Eigen::Index fan_in, Rng& rng,
                     std::string name) {
    TensorT<S> t = TensorT<S>::zeros(std::move(shape), true, std::move(name));
    const double stddev = std::sqrt(2.0 / double(fan_in));
    auto& v = t.value();
    for (Eigen::Index i = 0; i < v.size(); ++i)
        v(i) = static_cast<S>(normal_double(rng) * stddev);
    return t;
}

}  // namespace detail

/// Named parameter list; declaration order is the checkpoint order.
template <typename S>
using ParamList = std::vector<std::pair<std::string, TensorT<S>>>;

template <typename S>
struct Conv2dLayerT {
    TensorT<S> w, b;
    int stride = 1, padding = 0;

    static Conv2dLayerT make(Eigen::Index in, Eigen::Index out, int kh, int kw, int stride,
                             int padding, Rng& rng, const std::string& name) {
        Conv2dLayerT layer;
        layer.w = detail::he_normal<S>({out, in, kh, kw}, in * kh * kw, rng, name + ".w");
        layer.b = TensorT<S>::zeros({out}, true, name + ".b");
        layer.stride = stride;
        layer.padding = padding;
        return layer;
    }
    TensorT<S> forward(const TensorT<S>& x, ConvImpl impl) const {
        return conv2d(x, w, b, stride, padding, impl);
    }
    void params(ParamList<S>& out) const {
        out.emplace_back(w.name(), w);
        out.emplace_back(b.name(), b);
    }
};

template <typename S>
struct LinearLayerT {
    TensorT<S> w, b;

    static LinearLayerT make(Eigen::Index in, Eigen::Index out, Rng& rng,
                             const std::string& name) {
        LinearLayerT layer;
        layer.w = detail::he_normal<S>({in, out}, in, rng, name + ".w");
        layer.b = TensorT<S>::zeros({out}, true, name + ".b");
        return layer;
    }
    TensorT<S> forward(const TensorT<S>& x) const { return linear(x, w, b); }
    void params(ParamList<S>& out) const {
        out.emplace_back(w.name(), w);
        out.emplace_back(b.name(), b);
    }
};

/// Squeeze-and-expand block: 1x1 squeeze, then parallel 1x1 and 3x3 expands
/// concatenated along channels. Output channels = e1 + e3.
template <typename S>
struct FireBlockT {
    Conv2dLayerT<S> squeeze, expand1, expand3;

    static FireBlockT make(Eigen::Index in, Eigen::Index s, Eigen::Index e1, Eigen::Index e3,
                           Rng& rng, const std::string& name) {
        FireBlockT f;
        f.squeeze = Conv2dLayerT<S>::make(in, s, 1, 1, 1, 0, rng, name + ".squeeze");
        f.expand1 = Conv2dLayerT<S>::make(s, e1, 1, 1, 1, 0, rng, name + ".expand1");
        f.expand3 = Conv2dLayerT<S>::make(s, e3, 3, 3, 1, 1, rng, name + ".expand3");
        return f;
    }
    TensorT<S> forward(const TensorT<S>& x, ConvImpl impl) const {
        TensorT<S> s = relu(squeeze.forward(x, impl));
        return concat_channels(relu(expand1.forward(s, impl)), relu(expand3.forward(s, impl)));
    }
    void params(ParamList<S>& out) const {
        squeeze.params(out);
        expand1.params(out);
        expand3.params(out);
    }
};

/// Stage-specific attention: a channel gate from shared FC layers fed by
/// global max and average descriptors, then a spatial gate from a 7x7 conv
/// over the channel-wise max/mean maps of the re-calibrated features.
template <typename S>
struct IsamParamsT {
    LinearLayerT<S> fc1, fc2;     // C -> C/r -> C, shared by both descriptors
    Conv2dLayerT<S> spatial;      // 2 -> 1, 7x7, pad 3
    Eigen::Index channels = 0;

    static IsamParamsT make(Eigen::Index channels, int reduction, Rng& rng,
                            const std::string& name) {
        if (channels % reduction != 0)
            throw InvalidInput("isam: channels not divisible by reduction");
        IsamParamsT p;
        p.fc1 = LinearLayerT<S>::make(channels, channels / reduction, rng, name + ".fc1");
        p.fc2 = LinearLayerT<S>::make(channels / reduction, channels, rng, name + ".fc2");
        p.spatial = Conv2dLayerT<S>::make(2, 1, 7, 7, 1, 3, rng, name + ".spatial");
        p.channels = channels;
        return p;
    }
    void params(ParamList<S>& out) const {
        fc1.params(out);
        fc2.params(out);
        spatial.params(out);
    }
};

template <typename S>
TensorT<S> isam_forward(const TensorT<S>& x, const IsamParamsT<S>& p,
                        ConvImpl impl = ConvImpl::im2col) {
    if (x.rank() != 4 || x.extent(1) != p.channels)
        throw InvalidInput("isam_forward: channel mismatch");
    const Eigen::Index n = x.extent(0);

    auto descriptor = [&](const TensorT<S>& pooled) {
        return p.fc2.forward(relu(p.fc1.forward(reshape(pooled, {n, p.channels}))));
    };
    TensorT<S> gate =
        sigmoid(add(descriptor(global_maxpool(x)), descriptor(global_avgpool(x))));
    TensorT<S> xc = mul_channel(x, gate);

    TensorT<S> maps = concat_channels(channel_max(xc), channel_mean(xc));
    TensorT<S> smap = sigmoid(p.spatial.forward(maps, impl));
    return mul_spatial(xc, smap);
}

/// Embedded-Gaussian non-local block with residual connection; operates at
/// `channels`, attends at `channels/2`.
template <typename S>
struct NonLocalBlockT {
    Conv2dLayerT<S> theta, phi, g, out;
    Eigen::Index channels = 0, inner = 0;

    static NonLocalBlockT make(Eigen::Index channels, Rng& rng, const std::string& name) {
        if (channels % 2 != 0) throw InvalidInput("non-local: odd channel count");
        NonLocalBlockT nl;
        nl.channels = channels;
        nl.inner = channels / 2;
        nl.theta = Conv2dLayerT<S>::make(channels, nl.inner, 1, 1, 1, 0, rng, name + ".theta");
        nl.phi = Conv2dLayerT<S>::make(channels, nl.inner, 1, 1, 1, 0, rng, name + ".phi");
        nl.g = Conv2dLayerT<S>::make(channels, nl.inner, 1, 1, 1, 0, rng, name + ".g");
        nl.out = Conv2dLayerT<S>::make(nl.inner, channels, 1, 1, 1, 0, rng, name + ".out");
        return nl;
    }
    TensorT<S> forward(const TensorT<S>& x, ConvImpl impl) const {
        const Eigen::Index n = x.extent(0), h = x.extent(2), w = x.extent(3);
        const Eigen::Index hw = h * w;
        TensorT<S> t = reshape(theta.forward(x, impl), {n, inner, hw});
        TensorT<S> f = reshape(phi.forward(x, impl), {n, inner, hw});
        TensorT<S> v = reshape(g.forward(x, impl), {n, inner, hw});
        TensorT<S> attn = softmax(bmm(t, f, true, false));      // [n, hw, hw], rows sum to 1
        TensorT<S> y = bmm(v, attn, false, true);               // [n, inner, hw]
        return add(x, out.forward(reshape(y, {n, inner, h, w}), impl));
    }
    void params(ParamList<S>& out_list) const {
        theta.params(out_list);
        phi.params(out_list);
        g.params(out_list);
        out.params(out_list);
    }
};

/// Dual-branch estimation head. Local branch: 2x2 max-pool, 1x1 squeeze to
/// Ch/4, non-local attention, 1x1 conv to 3, global average, softplus (keeps
/// the estimate strictly positive). Global branch: global average, two linear
/// layers Ch -> Ch/8 -> 3, sigmoid. Output = l2_normalize(local * global).
template <typename S>
struct LightweightHeadT {
    Conv2dLayerT<S> squeeze;   // Ch -> Ch/4
    NonLocalBlockT<S> attention;  // at Ch/4, inner Ch/8
    Conv2dLayerT<S> project;   // Ch/4 -> 3
    LinearLayerT<S> global1, global2;
    Eigen::Index channels = 0;

    static LightweightHeadT make(Eigen::Index channels, Rng& rng, const std::string& name) {
        if (channels % 8 != 0) throw InvalidInput("lightweight head: channels must divide by 8");
        LightweightHeadT head;
        head.channels = channels;
        head.squeeze = Conv2dLayerT<S>::make(channels, channels / 4, 1, 1, 1, 0, rng,
                                             name + ".squeeze");
        head.attention = NonLocalBlockT<S>::make(channels / 4, rng, name + ".attention");
        head.project = Conv2dLayerT<S>::make(channels / 4, 3, 1, 1, 1, 0, rng, name + ".project");
        head.global1 = LinearLayerT<S>::make(channels, channels / 8, rng, name + ".global1");
        head.global2 = LinearLayerT<S>::make(channels / 8, 3, rng, name + ".global2");
        // damped output layers + positive local bias start the head near the
        // neutral estimate, keeping softplus/sigmoid off their tails where the
        // cascade's near-zero estimate guard would fire
        head.project.w.value() *= S(0.1);
        head.project.b.value().setConstant(S(1));
        head.global2.w.value() *= S(0.1);
        return head;
    }
    TensorT<S> forward(const TensorT<S>& features, ConvImpl impl) const {
        if (features.rank() != 4 || features.extent(1) != channels)
            throw InvalidInput("lightweight head: feature channel mismatch");
        if (features.extent(2) < 2 || features.extent(3) < 2)
            throw InvalidInput("lightweight head: spatial extent under 2");
        const Eigen::Index n = features.extent(0);

        TensorT<S> local = maxpool2d(features, 2, 2);
        local = relu(squeeze.forward(local, impl));
        local = attention.forward(local, impl);
        local = project.forward(local, impl);
        local = softplus(reshape(global_avgpool(local), {n, 3}));

        TensorT<S> glob = reshape(global_avgpool(features), {n, channels});
        glob = sigmoid(global2.forward(relu(global1.forward(glob))));

        return l2_normalize(mul(local, glob));
    }
    void params(ParamList<S>& out) const {
        squeeze.params(out);
        attention.params(out);
        project.params(out);
        global1.params(out);
        global2.params(out);
    }
};

/// Confidence-weighted baseline head: 6x6 conv to 64, 1x1 conv to 4 maps
/// (three illuminant channels and one confidence channel, each relu'd), then
/// confidence-weighted pooling and normalization.
template <typename S>
struct Fc4HeadT {
    Conv2dLayerT<S> conv6, conv7;
    Eigen::Index channels = 0;
    std::shared_ptr<std::atomic<long>> confidence_fallbacks =
        std::make_shared<std::atomic<long>>(0);

    static Fc4HeadT make(Eigen::Index channels, Rng& rng, const std::string& name) {
        Fc4HeadT head;
        head.channels = channels;
        head.conv6 = Conv2dLayerT<S>::make(channels, 64, 6, 6, 1, 0, rng, name + ".conv6");
        head.conv7 = Conv2dLayerT<S>::make(64, 4, 1, 1, 1, 0, rng, name + ".conv7");
        return head;
    }
    TensorT<S> forward(const TensorT<S>& features, ConvImpl impl) const {
        if (features.rank() != 4 || features.extent(1) != channels)
            throw InvalidInput("fc4 head: feature channel mismatch");
        TensorT<S> h = relu(conv6.forward(features, impl));
        TensorT<S> o = conv7.forward(h, impl);
        TensorT<S> ill = relu(slice_channels(o, 0, 3));
        TensorT<S> conf = relu(slice_channels(o, 3, 4));
        return l2_normalize(confidence_pool(ill, conf, S(1e-9), confidence_fallbacks.get()));
    }
    void params(ParamList<S>& out) const {
        conv6.params(out);
        conv7.params(out);
    }
};

/// Shared feature extractor. The stage's ISAMs are passed into forward so the
/// same weights serve every cascade stage while the attention differs.
template <typename S>
struct BackboneT {
    BackboneConfig config;
    Conv2dLayerT<S> stem;
    std::vector<FireBlockT<S>> fires;

    static BackboneT make(const BackboneConfig& config, Rng& rng) {
        BackboneT bb;
        bb.config = config;
        if (config.scale == Scale::toy) {
            bb.stem = Conv2dLayerT<S>::make(3, 16, 3, 3, 2, 1, rng, "backbone.stem");
            bb.fires.push_back(FireBlockT<S>::make(16, 8, 16, 16, rng, "backbone.fire1"));
            bb.fires.push_back(FireBlockT<S>::make(32, 8, 16, 16, rng, "backbone.fire2"));
        } else {
            bb.stem = Conv2dLayerT<S>::make(3, 64, 3, 3, 2, 1, rng, "backbone.stem");
            bb.fires.push_back(FireBlockT<S>::make(64, 16, 64, 64, rng, "backbone.fire2"));
            bb.fires.push_back(FireBlockT<S>::make(128, 16, 64, 64, rng, "backbone.fire3"));
            bb.fires.push_back(FireBlockT<S>::make(128, 32, 128, 128, rng, "backbone.fire4"));
            bb.fires.push_back(FireBlockT<S>::make(256, 32, 128, 128, rng, "backbone.fire5"));
            bb.fires.push_back(FireBlockT<S>::make(256, 48, 192, 192, rng, "backbone.fire6"));
            bb.fires.push_back(FireBlockT<S>::make(384, 48, 192, 192, rng, "backbone.fire7"));
            bb.fires.push_back(FireBlockT<S>::make(384, 64, 256, 256, rng, "backbone.fire8"));
        }
        return bb;
    }

    /// stage_isams must hold one IsamParams per insertion site (attention is
    /// applied right before every max-pool except the first).
    TensorT<S> forward(const TensorT<S>& x, const std::vector<IsamParamsT<S>>& stage_isams,
                       ConvImpl impl) const {
        if (x.rank() != 4 || x.extent(1) != 3) throw InvalidInput("backbone: expected [N,3,H,W]");
        const auto sites = config.isam_site_channels();
        if (stage_isams.size() != sites.size())
            throw InvalidInput("backbone: wrong number of attention modules");

        TensorT<S> h = relu(stem.forward(x, impl));
        if (config.scale == Scale::toy) {
            h = fires[0].forward(h, impl);
            h = maxpool2d(h, 2, 2);  // first pool: no attention
            h = fires[1].forward(h, impl);
            h = isam_forward(h, stage_isams[0], impl);
            h = maxpool2d(h, 2, 2);
        } else {
            h = maxpool2d(h, 2, 2);  // first pool: no attention
            h = fires[0].forward(h, impl);
            h = fires[1].forward(h, impl);
            h = isam_forward(h, stage_isams[0], impl);
            h = maxpool2d(h, 2, 2);
            h = fires[2].forward(h, impl);
            h = fires[3].forward(h, impl);
            h = isam_forward(h, stage_isams[1], impl);
            h = maxpool2d(h, 2, 2);
            h = fires[4].forward(h, impl);
            h = fires[5].forward(h, impl);
            h = fires[6].forward(h, impl);
        }
        return h;
    }
    void params(ParamList<S>& out) const {
        stem.params(out);
        for (const auto& f : fires) f.params(out);
    }
};

/// The cascaded model: one backbone and one head shared across stages, plus
/// an independent set of attention modules per stage.
template <typename S>
struct CascadeModelT {
    BackboneT<S> backbone;
    HeadKind head_kind = HeadKind::lightweight;
    LightweightHeadT<S> light_head;
    Fc4HeadT<S> fc4_head;
    std::vector<std::vector<IsamParamsT<S>>> isams;  // [stage][site]

    int stages() const { return static_cast<int>(isams.size()); }

    static CascadeModelT make(const BackboneConfig& config, HeadKind head_kind, int stages,
                              std::uint64_t seed) {
        if (stages < 1) throw InvalidInput("cascade: stages must be >= 1");
        Rng rng(mix_seed(seed ^ 0x6e657477ULL));
        CascadeModelT m;
        m.backbone = BackboneT<S>::make(config, rng);
        m.head_kind = head_kind;
        if (head_kind == HeadKind::lightweight)
            m.light_head = LightweightHeadT<S>::make(config.head_channels(), rng, "head");
        else
            m.fc4_head = Fc4HeadT<S>::make(config.head_channels(), rng, "head");
        const auto sites = config.isam_site_channels();
        for (int i = 1; i <= stages; ++i) {
            std::vector<IsamParamsT<S>> stage;
            for (std::size_t s = 0; s < sites.size(); ++s)
                stage.push_back(IsamParamsT<S>::make(
                    sites[s], config.isam_reduction, rng,
                    "isam." + std::to_string(i) + "." + std::to_string(s)));
            m.isams.push_back(std::move(stage));
        }
        return m;
    }

    TensorT<S> head_forward(const TensorT<S>& features, ConvImpl impl) const {
        return head_kind == HeadKind::lightweight ? light_head.forward(features, impl)
                                                  : fc4_head.forward(features, impl);
    }

    ParamList<S> named_params() const {
        ParamList<S> out;
        backbone.params(out);
        if (head_kind == HeadKind::lightweight)
            light_head.params(out);
        else
            fc4_head.params(out);
        for (const auto& stage : isams)
            for (const auto& site : stage) site.params(out);
        return out;
    }

    Eigen::Index count_params() const {
        Eigen::Index n = 0;
        for (const auto& [name, t] : named_params()) n += t.size();
        return n;
    }

    Eigen::Index count_isam_params_per_stage() const {
        ParamList<S> out;
        for (const auto& site : isams.front()) site.params(out);
        Eigen::Index n = 0;
        for (const auto& [name, t] : out) n += t.size();
        return n;
    }
};

using CascadeModel = CascadeModelT<double>;

/// Runs the cascade: stage i corrects the input by the cumulative estimate of
/// stage i-1, extracts features with the shared backbone + stage-i attention,
/// estimates a residual illuminant with the shared head, and accumulates
/// l'_i = normalize(l'_{i-1} * e_i). Returns all M cumulative estimates
/// [N,3]; the caller feeds gamma-encoded images.
template <typename S>
std::vector<TensorT<S>> cascade_forward(const CascadeModelT<S>& model, const TensorT<S>& image,
                                        ConvImpl impl = ConvImpl::im2col) {
    if (image.rank() != 4 || image.extent(1) != 3)
        throw InvalidInput("cascade_forward: expected [N,3,H,W]");
    std::vector<TensorT<S>> cumulative;
    cumulative.reserve(static_cast<std::size_t>(model.stages()));
    TensorT<S> prev;  // undefined until stage 1 completes; stage-0 gains are all ones
    for (int i = 0; i < model.stages(); ++i) {
        TensorT<S> input = (i == 0) ? image : div_channel(image, prev);
        TensorT<S> features =
            model.backbone.forward(input, model.isams[static_cast<std::size_t>(i)], impl);
        TensorT<S> estimate = model.head_forward(features, impl);
        if ((estimate.value() < S(1e-6)).any())
            throw NumericFault("cascade_forward: stage estimate component under 1e-6");
        prev = (i == 0) ? estimate : l2_normalize(mul(prev, estimate));
        cumulative.push_back(prev);
    }
    return cumulative;
}

}  // namespace vkcc
