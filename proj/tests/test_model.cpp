#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dml/losses.hpp"
#include "dml/model.hpp"
#include "dml/serialization.hpp"

using namespace dml;

namespace {

EncoderConfig tiny_config(HeadMode head = HeadMode::l2_normalized, std::size_t embed = 4) {
    EncoderConfig cfg;
    cfg.input_shape = {6, 6, 4};
    cfg.conv_blocks = {{2, 3, 2}, {3, 3, 2}};
    cfg.hidden_dim = 8;
    cfg.embed_dim = embed;
    cfg.head_mode = head;
    return cfg;
}

Volume random_volume(Shape3 s, RngStream& rng) {
    Volume v(s);
    for (double& x : v.values()) x = rng.uniform();
    return v;
}

// Closed-form parameter count, summed layer by layer.
std::size_t count_by_hand(const EncoderConfig& cfg) {
    std::size_t total = 0;
    std::size_t channels = 1;
    Shape3 s = cfg.input_shape;
    for (const auto& b : cfg.conv_blocks) {
        total += b.out_channels * channels * b.kernel * b.kernel * b.kernel + b.out_channels;
        channels = b.out_channels;
        s = {s.h / b.pool, s.w / b.pool, s.d / b.pool};
    }
    const std::size_t flat = channels * s.h * s.w * s.d;
    total += flat * cfg.hidden_dim + cfg.hidden_dim;
    total += cfg.hidden_dim * cfg.embed_dim + cfg.embed_dim;
    return total;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("dml_model_" + name);
}

}  // namespace

TEST(EncoderConfig, HandComputedParameterCount) {
    EncoderConfig cfg;
    cfg.input_shape = {8, 8, 4};
    cfg.conv_blocks = {{4, 3, 2}, {8, 3, 2}};
    cfg.hidden_dim = 32;
    cfg.embed_dim = 6;
    // conv1 4*1*27+4 = 112, conv2 8*4*27+8 = 872, flat 8*(2*2*1) = 32,
    // dense 32*32+32 = 1056, embed 32*6+6 = 198.
    EXPECT_EQ(cfg.parameter_count(), 2238u);
    EXPECT_EQ(EncoderParams(cfg).size(), 2238u);
}

TEST(EncoderConfig, CountMatchesAllocationForRandomConfigs) {
    RngStream rng(8);
    int built = 0;
    while (built < 20) {
        EncoderConfig cfg;
        cfg.input_shape = {4 + rng.uniform_index(12), 4 + rng.uniform_index(12), 2 + rng.uniform_index(6)};
        cfg.conv_blocks.clear();
        const std::size_t blocks = rng.uniform_index(3);
        for (std::size_t b = 0; b < blocks; ++b) {
            cfg.conv_blocks.push_back({1 + rng.uniform_index(4), 1 + 2 * rng.uniform_index(2), 1 + rng.uniform_index(2)});
        }
        cfg.embed_dim = 2 + rng.uniform_index(6);
        cfg.hidden_dim = cfg.embed_dim + rng.uniform_index(10);
        try {
            cfg.validate();
        } catch (const std::invalid_argument&) {
            continue;
        }
        EXPECT_EQ(cfg.parameter_count(), count_by_hand(cfg));
        EXPECT_EQ(EncoderParams(cfg).size(), count_by_hand(cfg));
        ++built;
    }
}

TEST(EncoderConfig, ValidationErrors) {
    EncoderConfig cfg = tiny_config();
    cfg.embed_dim = 1;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.hidden_dim = 2;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.conv_blocks.push_back({2, 3, 2});  // depth 4 -> 2 -> 1 -> 0
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.conv_blocks[0].kernel = 2;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    EXPECT_THROW(EncoderParams{cfg}, std::invalid_argument);
}

TEST(EncoderConfig, JsonRoundTripPreservesDigest) {
    const EncoderConfig cfg = tiny_config(HeadMode::logits, 5);
    const EncoderConfig back = encoder_config_from_json(to_json(cfg));
    EXPECT_EQ(back, cfg);
    EXPECT_EQ(back.digest(), cfg.digest());
    EXPECT_NE(tiny_config().digest(), cfg.digest());
    json bad = to_json(cfg);
    bad["hiden_dim"] = 3;
    EXPECT_THROW(encoder_config_from_json(bad), std::invalid_argument);
}

TEST(InitParams, DeterministicWithZeroBiases) {
    const EncoderConfig cfg = tiny_config();
    const EncoderParams a = init_params(cfg, RngStream(3));
    const EncoderParams b = init_params(cfg, RngStream(3));
    const EncoderParams c = init_params(cfg, RngStream(4));
    EXPECT_TRUE(std::equal(a.flat().begin(), a.flat().end(), b.flat().begin()));
    EXPECT_FALSE(std::equal(a.flat().begin(), a.flat().end(), c.flat().begin()));
    const auto& lay = a.layout();
    std::vector<ParamSlice> biases = lay.conv_bias;
    biases.push_back(lay.hidden_bias);
    biases.push_back(lay.embed_bias);
    for (const auto& s : biases)
        for (double v : a.slice(s)) EXPECT_EQ(v, 0.0);
}

TEST(EncoderParams, FlatViewRoundTrip) {
    EncoderParams p(tiny_config());
    const auto r0 = p.revision();
    for (std::size_t i = 0; i < p.size(); i += 7) {
        p.set(i, 0.25 * static_cast<double>(i));
        EXPECT_EQ(p.get(i), 0.25 * static_cast<double>(i));
    }
    EXPECT_NE(p.revision(), r0);
}

TEST(Forward, ZeroParamsEmitFallbackBasisRows) {
    const EncoderParams p(tiny_config());
    RngStream rng(1);
    std::vector<Volume> batch{random_volume(p.config().input_shape, rng), random_volume(p.config().input_shape, rng)};
    const ForwardResult r = forward(p, batch);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(r.output(i, 0), 1.0);
        for (std::size_t k = 1; k < r.output.cols(); ++k) EXPECT_EQ(r.output(i, k), 0.0);
    }
}

TEST(Forward, ConvolutionIsLinearInInput) {
    // Single conv block, no pooling, hidden layer wide enough; with only
    // positive weights/inputs every ReLU is active so the pre-head output is
    // affine in the input: f(2x) - f(0) == 2 (f(x) - f(0)).
    EncoderConfig cfg;
    cfg.input_shape = {4, 4, 2};
    cfg.conv_blocks = {{2, 3, 1}};
    cfg.hidden_dim = 4;
    cfg.embed_dim = 2;
    cfg.head_mode = HeadMode::logits;
    EncoderParams p(cfg);
    RngStream rng(2);
    for (double& v : p.mutable_flat()) v = rng.uniform(0.01, 0.2);
    Volume x(cfg.input_shape, 0.0);
    x.at(1, 2, 1) = 0.7;
    Volume x2 = x;
    x2.at(1, 2, 1) = 1.4;
    const Matrix f = forward(p, std::vector<Volume>{Volume(cfg.input_shape), x, x2}).output;
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(f(2, k) - f(0, k), 2.0 * (f(1, k) - f(0, k)), 1e-12);
}

TEST(Forward, NormalizedRowsAndShapeErrors) {
    const EncoderParams p = init_params(tiny_config(), RngStream(5));
    RngStream rng(9);
    std::vector<Volume> batch;
    for (int i = 0; i < 6; ++i) batch.push_back(random_volume(p.config().input_shape, rng));
    const Matrix out = forward(p, batch).output;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        double sq = 0.0;
        for (double v : out.row(i)) sq += v * v;
        EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-9);
    }
    EXPECT_EQ(embed(p, std::vector<const Volume*>{&batch[0], &batch[1]}).row(1)[0], out(1, 0));
    std::vector<Volume> wrong{Volume({6, 6, 3})};
    EXPECT_THROW(forward(p, wrong), std::invalid_argument);
}

TEST(Backward, ZeroUpstreamGradientGivesZero) {
    const EncoderParams p = init_params(tiny_config(), RngStream(5));
    RngStream rng(10);
    std::vector<Volume> batch{random_volume(p.config().input_shape, rng)};
    const ForwardResult r = forward(p, batch);
    const auto g = backward(p, r.cache, Matrix(1, p.config().embed_dim, 0.0));
    for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(Backward, RejectsStaleCache) {
    EncoderParams p = init_params(tiny_config(), RngStream(5));
    RngStream rng(10);
    std::vector<Volume> batch{random_volume(p.config().input_shape, rng)};
    const ForwardResult r = forward(p, batch);
    p.set(0, 1.0);
    EXPECT_THROW(backward(p, r.cache, Matrix(1, p.config().embed_dim, 1.0)), std::logic_error);
}

TEST(Backward, BatchGradientIsSumOfPerExampleGradients) {
    const EncoderParams p = init_params(tiny_config(), RngStream(6));
    RngStream rng(11);
    std::vector<Volume> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(random_volume(p.config().input_shape, rng));
    Matrix upstream(4, p.config().embed_dim);
    for (double& v : upstream.data()) v = rng.normal();
    const auto joint = backward(p, forward(p, batch).cache, upstream);
    std::vector<double> summed(p.size(), 0.0);
    for (std::size_t i = 0; i < 4; ++i) {
        Matrix up(1, upstream.cols());
        std::copy(upstream.row(i).begin(), upstream.row(i).end(), up.row(0).begin());
        const auto g = backward(p, forward(p, std::vector<Volume>{batch[i]}).cache, up);
        for (std::size_t k = 0; k < g.size(); ++k) summed[k] += g[k];
    }
    for (std::size_t k = 0; k < summed.size(); ++k) EXPECT_NEAR(joint[k], summed[k], 1e-9);
}

TEST(Backward, ThreadCountDoesNotChangeBits) {
    const EncoderParams p = init_params(tiny_config(), RngStream(6));
    RngStream rng(12);
    std::vector<Volume> batch;
    for (int i = 0; i < 5; ++i) batch.push_back(random_volume(p.config().input_shape, rng));
    Matrix upstream(5, p.config().embed_dim, 0.3);
    const auto one = backward(p, forward(p, batch).cache, upstream);
    set_thread_count(3);
    const auto three = backward(p, forward(p, batch).cache, upstream);
    set_thread_count(1);
    EXPECT_EQ(one, three);
}

namespace {

// Loss as a function of the flat parameter vector, for each training
// objective; the batch layout gives every loss valid structure.
double pipeline_loss(const EncoderParams& p, const std::vector<Volume>& batch, const std::string& loss,
                     Matrix* grad_out) {
    const ForwardResult r = forward(p, batch);
    LossResult lr;
    if (loss == "batch_hard") {
        lr = batch_hard_triplet({r.output, {0, 0, 1, 1, 2, 2}}, {.margin = 0.5});
    } else if (loss == "batch_all") {
        lr = batch_all_triplet({r.output, {0, 0, 1, 1, 2, 2}}, {.margin = 0.5});
    } else if (loss == "nt_xent") {
        lr = nt_xent({r.output, interleaved_pairs(3), 0.5});
    } else {
        lr = cross_entropy(r.output, {0, 1, 2, 3, 1, 0});
    }
    if (grad_out) *grad_out = lr.grad;
    return lr.value;
}

}  // namespace

class EndToEndGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(EndToEndGradient, MatchesFiniteDifferencesOnSampledParameters) {
    const std::string loss = GetParam();
    const HeadMode head = loss == "cross_entropy" ? HeadMode::logits : HeadMode::l2_normalized;
    EncoderParams p = init_params(tiny_config(head, 4), RngStream(21));
    RngStream rng(31);
    std::vector<Volume> batch;
    for (int i = 0; i < 6; ++i) batch.push_back(random_volume(p.config().input_shape, rng));

    Matrix upstream;
    pipeline_loss(p, batch, loss, &upstream);
    const ForwardResult r = forward(p, batch);
    const auto analytic = backward(p, r.cache, upstream);

    const double h = 1e-6;
    std::vector<double> a, n;
    for (int s = 0; s < 200; ++s) {
        const std::size_t idx = rng.uniform_index(p.size());
        const double orig = p.get(idx);
        p.set(idx, orig + h);
        const double fp = pipeline_loss(p, batch, loss, nullptr);
        p.set(idx, orig - h);
        const double fm = pipeline_loss(p, batch, loss, nullptr);
        p.set(idx, orig);
        a.push_back(analytic[idx]);
        n.push_back((fp - fm) / (2 * h));
    }
    EXPECT_LE(max_relative_error(a, n), 1e-3) << loss;
}

INSTANTIATE_TEST_SUITE_P(AllLosses, EndToEndGradient,
                         ::testing::Values("batch_hard", "batch_all", "nt_xent", "cross_entropy"));

TEST(Sgd, Arithmetic) {
    EncoderConfig cfg = tiny_config();
    EncoderParams p(cfg);
    p.set(0, 1.0);
    std::vector<double> g(p.size(), 0.0);
    g[0] = 2.0;
    SgdState state;
    sgd_step(p, g, 0.1, 0.0, state);
    EXPECT_NEAR(p.get(0), 0.8, 1e-15);
    const std::vector<double> before(p.flat().begin(), p.flat().end());
    SgdState fresh;
    sgd_step(p, std::vector<double>(p.size(), 0.0), 0.1, 0.0, fresh);
    EXPECT_TRUE(std::equal(before.begin(), before.end(), p.flat().begin()));
}

TEST(Sgd, MomentumUnrolls) {
    EncoderParams p(tiny_config());
    std::vector<double> g(p.size(), 0.5);
    SgdState state;
    sgd_step(p, g, 0.1, 0.9, state);
    sgd_step(p, g, 0.1, 0.9, state);
    EXPECT_NEAR(p.get(3), -0.1 * 0.5 * (1.0 + 1.9), 1e-15);
}

TEST(Sgd, RejectsNonFiniteAndBadHyperparameters) {
    EncoderParams p(tiny_config());
    std::vector<double> g(p.size(), 0.0);
    SgdState state;
    EXPECT_THROW(sgd_step(p, g, 0.0, 0.0, state), std::invalid_argument);
    EXPECT_THROW(sgd_step(p, g, 0.1, 1.0, state), std::invalid_argument);
    g[5] = NAN;
    EXPECT_THROW(sgd_step(p, g, 0.1, 0.0, state), std::runtime_error);
}

TEST(Training, TenStepLossTrajectoryIsBitIdentical) {
    auto run = [] {
        EncoderParams p = init_params(tiny_config(), RngStream(40));
        RngStream rng(41);
        std::vector<Volume> batch;
        for (int i = 0; i < 6; ++i) batch.push_back(random_volume(p.config().input_shape, rng));
        SgdState state;
        std::vector<double> losses;
        for (int step = 0; step < 10; ++step) {
            const ForwardResult r = forward(p, batch);
            const LossResult l = batch_hard_triplet({r.output, {0, 0, 1, 1, 2, 2}});
            losses.push_back(l.value);
            sgd_step(p, backward(p, r.cache, l.grad), 0.05, 0.9, state);
        }
        return losses;
    };
    const auto a = run();
    EXPECT_EQ(a, run());
    EXPECT_LT(a.back(), a.front());
}

TEST(Transfer, FullAndHeadOnly) {
    const EncoderParams src = init_params(tiny_config(HeadMode::l2_normalized, 4), RngStream(1));
    EncoderParams same = init_params(tiny_config(HeadMode::logits, 4), RngStream(2));
    EXPECT_FALSE(transfer_params(src, same));
    EXPECT_TRUE(std::equal(src.flat().begin(), src.flat().end(), same.flat().begin()));

    EncoderParams other = init_params(tiny_config(HeadMode::logits, 6), RngStream(2));
    const EncoderParams other_init = other;
    EXPECT_TRUE(transfer_params(src, other));
    const auto& lay = other.layout();
    for (std::size_t i = 0; i < lay.embed_weight.offset; ++i) EXPECT_EQ(other.get(i), src.get(i));
    for (std::size_t i = lay.embed_weight.offset; i < other.size(); ++i) EXPECT_EQ(other.get(i), other_init.get(i));

    EncoderConfig wider = tiny_config();
    wider.hidden_dim = 9;
    EncoderParams mismatch(wider);
    EXPECT_THROW(transfer_params(src, mismatch), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    RngStream rng(77);
    for (int i = 0; i < 20; ++i) {
        EncoderConfig cfg = tiny_config(i % 2 ? HeadMode::logits : HeadMode::l2_normalized, 2 + rng.uniform_index(5));
        EncoderParams p = init_params(cfg, rng.derive(i));
        auto v = p.mutable_flat();
        v[0] = -0.0;
        v[1] = 1e-310;  // subnormal
        const auto path = temp_path("rt.ckpt");
        save_checkpoint(path, p);
        const EncoderParams back = load_checkpoint(path, cfg);
        EXPECT_EQ(back.config(), cfg);
        ASSERT_EQ(back.size(), p.size());
        EXPECT_EQ(std::memcmp(back.flat().data(), p.flat().data(), p.size() * sizeof(double)), 0);
    }
}

TEST(Checkpoint, RejectsDigestMismatchTruncationAndBadMagic) {
    const EncoderParams p = init_params(tiny_config(), RngStream(1));
    const auto path = temp_path("bad.ckpt");
    save_checkpoint(path, p);
    EXPECT_THROW(load_checkpoint(path, tiny_config(HeadMode::logits)), std::runtime_error);

    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 3);
    EXPECT_THROW(load_checkpoint(path), std::runtime_error);

    std::ofstream(path, std::ios::binary) << "NOTACKPT-garbage";
    EXPECT_THROW(load_checkpoint(path), std::runtime_error);
    EXPECT_THROW(load_checkpoint(temp_path("missing.ckpt")), std::runtime_error);
}
