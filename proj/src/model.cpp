#include "dml/model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>

#include "dml/serialization.hpp"

namespace dml {

std::string to_string(HeadMode mode) {
    return mode == HeadMode::l2_normalized ? "l2_normalized" : "logits";
}

HeadMode head_mode_from_string(const std::string& s) {
    if (s == "l2_normalized") return HeadMode::l2_normalized;
    if (s == "logits") return HeadMode::logits;
    throw std::invalid_argument("unknown head mode '" + s + "'");
}

void EncoderConfig::validate() const {
    if (input_shape.voxels() == 0) throw std::invalid_argument("encoder: input shape has a zero dimension");
    if (embed_dim < 2) throw std::invalid_argument("encoder: embed_dim must be >= 2");
    if (hidden_dim < embed_dim) throw std::invalid_argument("encoder: hidden_dim must be >= embed_dim");
    Shape3 s = input_shape;
    for (std::size_t b = 0; b < conv_blocks.size(); ++b) {
        const auto& blk = conv_blocks[b];
        const std::string where = "encoder: conv block " + std::to_string(b);
        if (blk.out_channels == 0) throw std::invalid_argument(where + " has zero channels");
        if (blk.kernel == 0 || blk.kernel % 2 == 0) throw std::invalid_argument(where + " kernel must be odd");
        if (blk.pool == 0) throw std::invalid_argument(where + " pool must be >= 1");
        s = {s.h / blk.pool, s.w / blk.pool, s.d / blk.pool};
        if (s.voxels() == 0) {
            throw std::invalid_argument(where + " pools the volume down to " + s.str());
        }
    }
}

ParamLayout ParamLayout::build(const EncoderConfig& cfg) {
    cfg.validate();
    ParamLayout lay;
    std::size_t off = 0;
    auto take = [&off](std::size_t count) {
        ParamSlice s{off, count};
        off += count;
        return s;
    };
    Shape3 s = cfg.input_shape;
    std::size_t channels = 1;
    for (const auto& blk : cfg.conv_blocks) {
        lay.block_input_shape.push_back(s);
        lay.block_input_channels.push_back(channels);
        const std::size_t k3 = blk.kernel * blk.kernel * blk.kernel;
        lay.conv_weight.push_back(take(blk.out_channels * channels * k3));
        lay.conv_bias.push_back(take(blk.out_channels));
        channels = blk.out_channels;
        s = {s.h / blk.pool, s.w / blk.pool, s.d / blk.pool};
    }
    lay.final_shape = s;
    lay.flat_dim = channels * s.voxels();
    lay.hidden_weight = take(cfg.hidden_dim * lay.flat_dim);
    lay.hidden_bias = take(cfg.hidden_dim);
    lay.embed_weight = take(cfg.embed_dim * cfg.hidden_dim);
    lay.embed_bias = take(cfg.embed_dim);
    lay.total = off;
    return lay;
}

std::size_t EncoderConfig::parameter_count() const { return ParamLayout::build(*this).total; }

std::uint64_t EncoderConfig::digest() const { return fnv1a64(to_json(*this).dump()); }

// ---------------------------------------------------------------------------

namespace {
std::atomic<std::uint64_t> g_revision{1};
}

EncoderParams::EncoderParams(EncoderConfig cfg)
    : cfg_(std::move(cfg)), layout_(ParamLayout::build(cfg_)), values_(layout_.total, 0.0) {
    touch();
}

void EncoderParams::touch() { revision_ = g_revision++; }

void EncoderParams::set(std::size_t i, double v) {
    values_.at(i) = v;
    touch();
}

std::span<double> EncoderParams::mutable_flat() {
    touch();
    return values_;
}

EncoderParams init_params(const EncoderConfig& cfg, RngStream rng) {
    EncoderParams params(cfg);
    const auto& lay = params.layout();
    auto values = params.mutable_flat();
    auto fill = [&](ParamSlice s, double stddev, std::uint64_t stream) {
        RngStream r = rng.derive(stream);
        for (std::size_t i = 0; i < s.count; ++i) values[s.offset + i] = stddev * r.normal();
    };
    for (std::size_t b = 0; b < cfg.conv_blocks.size(); ++b) {
        const std::size_t k = cfg.conv_blocks[b].kernel;
        const double fan_in = static_cast<double>(lay.block_input_channels[b] * k * k * k);
        fill(lay.conv_weight[b], std::sqrt(2.0 / fan_in), b);
    }
    fill(lay.hidden_weight, std::sqrt(2.0 / static_cast<double>(lay.flat_dim)), 1000);
    fill(lay.embed_weight, std::sqrt(1.0 / static_cast<double>(cfg.hidden_dim)), 1001);
    return params;
}

// ---------------------------------------------------------------------------
// Kernels. Activations are channel-major: [c][z][y][x].

namespace {

void conv3d_forward(std::span<const double> in, std::size_t cin, const Shape3& s,
                    std::span<const double> weight, std::span<const double> bias, std::size_t cout,
                    std::size_t k, std::vector<double>& out) {
    const std::size_t vox = s.voxels();
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    const auto H = static_cast<std::ptrdiff_t>(s.h);
    const auto W = static_cast<std::ptrdiff_t>(s.w);
    const auto D = static_cast<std::ptrdiff_t>(s.d);
    out.assign(cout * vox, 0.0);
    for (std::size_t o = 0; o < cout; ++o) {
        double* dst = out.data() + o * vox;
        std::fill(dst, dst + vox, bias[o]);
        for (std::size_t i = 0; i < cin; ++i) {
            const double* src = in.data() + i * vox;
            const double* w = weight.data() + (o * cin + i) * k * k * k;
            for (std::ptrdiff_t kz = 0; kz < static_cast<std::ptrdiff_t>(k); ++kz) {
                const std::ptrdiff_t dz = kz - pad;
                const std::ptrdiff_t z0 = std::max<std::ptrdiff_t>(0, -dz);
                const std::ptrdiff_t z1 = std::min(D, D - dz);
                for (std::ptrdiff_t ky = 0; ky < static_cast<std::ptrdiff_t>(k); ++ky) {
                    const std::ptrdiff_t dy = ky - pad;
                    const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy);
                    const std::ptrdiff_t y1 = std::min(H, H - dy);
                    for (std::ptrdiff_t kx = 0; kx < static_cast<std::ptrdiff_t>(k); ++kx) {
                        const std::ptrdiff_t dx = kx - pad;
                        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
                        const std::ptrdiff_t x1 = std::min(W, W - dx);
                        const double wv = w[(kz * static_cast<std::ptrdiff_t>(k) + ky) *
                                                static_cast<std::ptrdiff_t>(k) +
                                            kx];
                        for (std::ptrdiff_t z = z0; z < z1; ++z) {
                            for (std::ptrdiff_t y = y0; y < y1; ++y) {
                                double* drow = dst + (z * H + y) * W + x0;
                                const double* srow = src + ((z + dz) * H + (y + dy)) * W + x0 + dx;
                                for (std::ptrdiff_t x = 0; x < x1 - x0; ++x) drow[x] += wv * srow[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

// grad_pre is dL/d(pre-activation conv output). Accumulates weight and bias
// gradients; writes grad_in when non-null.
void conv3d_backward(std::span<const double> in, std::size_t cin, const Shape3& s,
                     std::span<const double> weight, std::size_t cout, std::size_t k,
                     const std::vector<double>& grad_pre, double* grad_w, double* grad_b,
                     std::vector<double>* grad_in) {
    const std::size_t vox = s.voxels();
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    const auto H = static_cast<std::ptrdiff_t>(s.h);
    const auto W = static_cast<std::ptrdiff_t>(s.w);
    const auto D = static_cast<std::ptrdiff_t>(s.d);
    const auto K = static_cast<std::ptrdiff_t>(k);
    if (grad_in) grad_in->assign(cin * vox, 0.0);
    for (std::size_t o = 0; o < cout; ++o) {
        const double* g = grad_pre.data() + o * vox;
        double bsum = 0.0;
        for (std::size_t v = 0; v < vox; ++v) bsum += g[v];
        grad_b[o] += bsum;
        for (std::size_t i = 0; i < cin; ++i) {
            const double* src = in.data() + i * vox;
            double* gsrc = grad_in ? grad_in->data() + i * vox : nullptr;
            const std::size_t wbase = (o * cin + i) * k * k * k;
            for (std::ptrdiff_t kz = 0; kz < K; ++kz) {
                const std::ptrdiff_t dz = kz - pad;
                const std::ptrdiff_t z0 = std::max<std::ptrdiff_t>(0, -dz);
                const std::ptrdiff_t z1 = std::min(D, D - dz);
                for (std::ptrdiff_t ky = 0; ky < K; ++ky) {
                    const std::ptrdiff_t dy = ky - pad;
                    const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy);
                    const std::ptrdiff_t y1 = std::min(H, H - dy);
                    for (std::ptrdiff_t kx = 0; kx < K; ++kx) {
                        const std::ptrdiff_t dx = kx - pad;
                        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
                        const std::ptrdiff_t x1 = std::min(W, W - dx);
                        const std::size_t widx = wbase + static_cast<std::size_t>((kz * K + ky) * K + kx);
                        const double wv = weight[widx];
                        double wsum = 0.0;
                        for (std::ptrdiff_t z = z0; z < z1; ++z) {
                            for (std::ptrdiff_t y = y0; y < y1; ++y) {
                                const double* grow = g + (z * H + y) * W + x0;
                                const std::ptrdiff_t soff = ((z + dz) * H + (y + dy)) * W + x0 + dx;
                                const double* srow = src + soff;
                                const std::ptrdiff_t len = x1 - x0;
                                for (std::ptrdiff_t x = 0; x < len; ++x) wsum += grow[x] * srow[x];
                                if (gsrc) {
                                    double* gs = gsrc + soff;
                                    for (std::ptrdiff_t x = 0; x < len; ++x) gs[x] += wv * grow[x];
                                }
                            }
                        }
                        grad_w[widx] += wsum;
                    }
                }
            }
        }
    }
}

void maxpool_forward(const std::vector<double>& in, std::size_t channels, const Shape3& s,
                     std::size_t p, std::vector<double>& out, std::vector<std::uint32_t>& arg) {
    const Shape3 o{s.h / p, s.w / p, s.d / p};
    const std::size_t ivox = s.voxels();
    const std::size_t ovox = o.voxels();
    out.assign(channels * ovox, 0.0);
    arg.assign(channels * ovox, 0);
    for (std::size_t c = 0; c < channels; ++c) {
        const double* src = in.data() + c * ivox;
        for (std::size_t z = 0; z < o.d; ++z) {
            for (std::size_t y = 0; y < o.h; ++y) {
                for (std::size_t x = 0; x < o.w; ++x) {
                    std::size_t best = (z * p * s.h + y * p) * s.w + x * p;
                    for (std::size_t pz = 0; pz < p; ++pz) {
                        for (std::size_t py = 0; py < p; ++py) {
                            for (std::size_t px = 0; px < p; ++px) {
                                const std::size_t idx =
                                    ((z * p + pz) * s.h + (y * p + py)) * s.w + (x * p + px);
                                if (src[idx] > src[best]) best = idx;
                            }
                        }
                    }
                    const std::size_t oi = c * ovox + (z * o.h + y) * o.w + x;
                    out[oi] = src[best];
                    arg[oi] = static_cast<std::uint32_t>(best);
                }
            }
        }
    }
}

void run_forward(const EncoderParams& params, const Volume& vol, SampleActivations& act) {
    const auto& cfg = params.config();
    const auto& lay = params.layout();
    if (!(vol.shape() == cfg.input_shape)) {
        throw std::invalid_argument("forward: volume shape " + vol.shape().str() +
                                    " does not match encoder input " + cfg.input_shape.str());
    }
    const std::size_t nb = cfg.conv_blocks.size();
    act.block_input.resize(nb + 1);
    act.block_conv.resize(nb);
    act.pool_argmax.resize(nb);
    act.block_input[0].assign(vol.values().begin(), vol.values().end());
    for (std::size_t b = 0; b < nb; ++b) {
        const auto& blk = cfg.conv_blocks[b];
        const Shape3& s = lay.block_input_shape[b];
        conv3d_forward(act.block_input[b], lay.block_input_channels[b], s,
                       params.slice(lay.conv_weight[b]), params.slice(lay.conv_bias[b]),
                       blk.out_channels, blk.kernel, act.block_conv[b]);
        for (double& v : act.block_conv[b]) v = std::max(v, 0.0);
        maxpool_forward(act.block_conv[b], blk.out_channels, s, blk.pool, act.block_input[b + 1],
                        act.pool_argmax[b]);
    }
    act.flat = act.block_input[nb];

    const auto w1 = params.slice(lay.hidden_weight);
    const auto b1 = params.slice(lay.hidden_bias);
    act.hidden.assign(cfg.hidden_dim, 0.0);
    for (std::size_t h = 0; h < cfg.hidden_dim; ++h) {
        const double* row = w1.data() + h * lay.flat_dim;
        double acc = b1[h];
        for (std::size_t f = 0; f < lay.flat_dim; ++f) acc += row[f] * act.flat[f];
        act.hidden[h] = std::max(acc, 0.0);
    }
    const auto w2 = params.slice(lay.embed_weight);
    const auto b2 = params.slice(lay.embed_bias);
    act.embed.assign(cfg.embed_dim, 0.0);
    double sq = 0.0;
    for (std::size_t e = 0; e < cfg.embed_dim; ++e) {
        const double* row = w2.data() + e * cfg.hidden_dim;
        double acc = b2[e];
        for (std::size_t h = 0; h < cfg.hidden_dim; ++h) acc += row[h] * act.hidden[h];
        act.embed[e] = acc;
        sq += acc * acc;
    }
    act.embed_norm = std::sqrt(sq);
}

void write_head(HeadMode mode, const SampleActivations& act, std::span<double> out) {
    if (mode == HeadMode::logits) {
        std::copy(act.embed.begin(), act.embed.end(), out.begin());
        return;
    }
    if (act.embed_norm < kNormalizeEps) {
        std::fill(out.begin(), out.end(), 0.0);
        out[0] = 1.0;
        return;
    }
    for (std::size_t e = 0; e < out.size(); ++e) out[e] = act.embed[e] / act.embed_norm;
}

}  // namespace

ForwardResult forward(const EncoderParams& params, VolumeBatch batch) {
    const auto& cfg = params.config();
    ForwardResult res;
    res.cache.revision = params.revision();
    res.cache.param_count = params.size();
    res.cache.head_mode = cfg.head_mode;
    res.cache.samples.resize(batch.size());
    res.output = Matrix(batch.size(), cfg.embed_dim);
    parallel_for(batch.size(), [&](std::size_t i) {
        run_forward(params, *batch[i], res.cache.samples[i]);
        write_head(cfg.head_mode, res.cache.samples[i], res.output.row(i));
    });
    res.cache.output = res.output;
    return res;
}

ForwardResult forward(const EncoderParams& params, const std::vector<Volume>& batch) {
    std::vector<const Volume*> refs;
    refs.reserve(batch.size());
    for (const auto& v : batch) refs.push_back(&v);
    return forward(params, refs);
}

namespace {

Matrix embed_impl(const EncoderParams& params, VolumeBatch batch, HeadMode mode) {
    Matrix out(batch.size(), params.config().embed_dim);
    parallel_for(batch.size(), [&](std::size_t i) {
        SampleActivations act;
        run_forward(params, *batch[i], act);
        write_head(mode, act, out.row(i));
    });
    return out;
}

}  // namespace

Matrix embed(const EncoderParams& params, VolumeBatch batch) {
    return embed_impl(params, batch, params.config().head_mode);
}

Matrix embed_pre_head(const EncoderParams& params, VolumeBatch batch) {
    return embed_impl(params, batch, HeadMode::logits);
}

std::vector<double> backward(const EncoderParams& params, const ForwardCache& cache,
                             const Matrix& grad_output) {
    if (cache.revision != params.revision() || cache.param_count != params.size()) {
        throw std::logic_error("backward: forward cache is stale (parameters changed since forward)");
    }
    const auto& cfg = params.config();
    const auto& lay = params.layout();
    const std::size_t n = cache.samples.size();
    if (grad_output.rows() != n || grad_output.cols() != cfg.embed_dim) {
        throw std::invalid_argument("backward: grad_output shape does not match forward output");
    }

    std::vector<std::vector<double>> per_sample(n);
    parallel_for(n, [&](std::size_t i) {
        const SampleActivations& act = cache.samples[i];
        std::vector<double>& g = per_sample[i];
        g.assign(params.size(), 0.0);
        const auto gout = grad_output.row(i);

        // Head.
        std::vector<double> dz(cfg.embed_dim, 0.0);
        if (cache.head_mode == HeadMode::logits) {
            std::copy(gout.begin(), gout.end(), dz.begin());
        } else if (act.embed_norm >= kNormalizeEps) {
            double dot = 0.0;
            for (std::size_t e = 0; e < cfg.embed_dim; ++e) dot += gout[e] * act.embed[e] / act.embed_norm;
            for (std::size_t e = 0; e < cfg.embed_dim; ++e) {
                dz[e] = (gout[e] - dot * act.embed[e] / act.embed_norm) / act.embed_norm;
            }
        }

        // Embedding layer.
        const auto w2 = params.slice(lay.embed_weight);
        std::vector<double> dh(cfg.hidden_dim, 0.0);
        for (std::size_t e = 0; e < cfg.embed_dim; ++e) {
            if (dz[e] == 0.0) continue;
            double* gw = g.data() + lay.embed_weight.offset + e * cfg.hidden_dim;
            const double* w = w2.data() + e * cfg.hidden_dim;
            for (std::size_t h = 0; h < cfg.hidden_dim; ++h) {
                gw[h] += dz[e] * act.hidden[h];
                dh[h] += dz[e] * w[h];
            }
            g[lay.embed_bias.offset + e] += dz[e];
        }

        // Hidden layer.
        const auto w1 = params.slice(lay.hidden_weight);
        std::vector<double> dflat(lay.flat_dim, 0.0);
        for (std::size_t h = 0; h < cfg.hidden_dim; ++h) {
            if (act.hidden[h] <= 0.0 || dh[h] == 0.0) continue;
            double* gw = g.data() + lay.hidden_weight.offset + h * lay.flat_dim;
            const double* w = w1.data() + h * lay.flat_dim;
            for (std::size_t f = 0; f < lay.flat_dim; ++f) {
                gw[f] += dh[h] * act.flat[f];
                dflat[f] += dh[h] * w[f];
            }
            g[lay.hidden_bias.offset + h] += dh[h];
        }

        // Conv blocks, last to first.
        std::vector<double> dpooled = std::move(dflat);
        std::vector<double> dconv;
        std::vector<double> dinput;
        for (std::size_t bi = cfg.conv_blocks.size(); bi-- > 0;) {
            const auto& blk = cfg.conv_blocks[bi];
            const Shape3& s = lay.block_input_shape[bi];
            dconv.assign(blk.out_channels * s.voxels(), 0.0);
            const auto& arg = act.pool_argmax[bi];
            const std::size_t ovox = arg.size() / blk.out_channels;
            for (std::size_t c = 0; c < blk.out_channels; ++c) {
                for (std::size_t v = 0; v < ovox; ++v) {
                    dconv[c * s.voxels() + arg[c * ovox + v]] += dpooled[c * ovox + v];
                }
            }
            const auto& conv_out = act.block_conv[bi];
            for (std::size_t v = 0; v < dconv.size(); ++v) {
                if (conv_out[v] <= 0.0) dconv[v] = 0.0;
            }
            conv3d_backward(act.block_input[bi], lay.block_input_channels[bi], s,
                            params.slice(lay.conv_weight[bi]), blk.out_channels, blk.kernel, dconv,
                            g.data() + lay.conv_weight[bi].offset, g.data() + lay.conv_bias[bi].offset,
                            bi > 0 ? &dinput : nullptr);
            if (bi > 0) dpooled.swap(dinput);
        }
    });

    std::vector<double> total(params.size(), 0.0);
    for (const auto& g : per_sample) {
        for (std::size_t k = 0; k < total.size(); ++k) total[k] += g[k];
    }
    return total;
}

void sgd_step(EncoderParams& params, std::span<const double> grads, double lr, double momentum,
              SgdState& state) {
    if (!(lr > 0.0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("sgd_step: momentum must be in [0, 1)");
    if (grads.size() != params.size()) throw std::invalid_argument("sgd_step: gradient size mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!std::isfinite(grads[i])) {
            throw std::runtime_error("sgd_step: non-finite gradient at parameter " + std::to_string(i));
        }
    }
    if (state.velocity.size() != grads.size()) state.velocity.assign(grads.size(), 0.0);
    auto values = params.mutable_flat();
    for (std::size_t i = 0; i < grads.size(); ++i) {
        state.velocity[i] = momentum * state.velocity[i] + grads[i];
        values[i] -= lr * state.velocity[i];
    }
}

bool transfer_params(const EncoderParams& src, EncoderParams& dst) {
    const auto& a = src.layout();
    const auto& b = dst.layout();
    auto same = [](ParamSlice x, ParamSlice y) { return x.offset == y.offset && x.count == y.count; };
    bool body_matches = a.conv_weight.size() == b.conv_weight.size() &&
                        same(a.hidden_weight, b.hidden_weight) && same(a.hidden_bias, b.hidden_bias);
    for (std::size_t i = 0; body_matches && i < a.conv_weight.size(); ++i) {
        body_matches = same(a.conv_weight[i], b.conv_weight[i]) && same(a.conv_bias[i], b.conv_bias[i]);
    }
    if (!body_matches || !(src.config().input_shape == dst.config().input_shape)) {
        throw std::invalid_argument("transfer_params: encoder bodies differ in shape");
    }
    const bool head_matches = src.config().embed_dim == dst.config().embed_dim;
    const std::size_t body_end = a.hidden_bias.offset + a.hidden_bias.count;
    const std::size_t count = head_matches ? src.size() : body_end;
    auto out = dst.mutable_flat();
    std::copy_n(src.flat().begin(), count, out.begin());
    return !head_matches;
}

}  // namespace dml
