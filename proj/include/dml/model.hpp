#pragma once

// Small 3-D convolutional encoder with hand-written forward/backward passes.
//
// Architecture, per conv block: conv3d (zero "same" padding, stride 1) -> ReLU
// -> max-pool (cubic window, stride = window). The pooled output of the last
// block is flattened into dense(hidden) -> ReLU -> dense(embed_dim), followed
// by the head: unit-normalization for metric training or raw logits for
// cross-entropy. Inputs are single-channel volumes.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dml/numcore.hpp"
#include "dml/volume.hpp"

namespace dml {

enum class HeadMode { l2_normalized, logits };

std::string to_string(HeadMode mode);
HeadMode head_mode_from_string(const std::string& s);

struct ConvBlock {
    std::size_t out_channels = 4;
    std::size_t kernel = 3;  // odd
    std::size_t pool = 2;    // 1 disables pooling

    friend bool operator==(const ConvBlock&, const ConvBlock&) = default;
};

struct EncoderConfig {
    Shape3 input_shape{32, 32, 8};
    std::vector<ConvBlock> conv_blocks{{4, 3, 2}, {8, 3, 2}, {8, 3, 2}};
    std::size_t hidden_dim = 128;
    std::size_t embed_dim = 6;
    HeadMode head_mode = HeadMode::l2_normalized;

    /// Throws std::invalid_argument describing the first violated constraint.
    void validate() const;
    std::size_t parameter_count() const;
    /// FNV-1a over the canonical JSON form.
    std::uint64_t digest() const;

    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct ParamSlice {
    std::size_t offset = 0;
    std::size_t count = 0;
};

/// Offsets of every tensor inside the flat parameter vector, plus the
/// spatial shapes each conv block sees.
struct ParamLayout {
    std::vector<ParamSlice> conv_weight;  // [out][in][kz][ky][kx]
    std::vector<ParamSlice> conv_bias;
    ParamSlice hidden_weight;  // [hidden][flat]
    ParamSlice hidden_bias;
    ParamSlice embed_weight;  // [embed][hidden]
    ParamSlice embed_bias;
    std::vector<Shape3> block_input_shape;
    std::vector<std::size_t> block_input_channels;
    Shape3 final_shape;
    std::size_t flat_dim = 0;
    std::size_t total = 0;

    static ParamLayout build(const EncoderConfig& cfg);
};

class EncoderParams {
public:
    explicit EncoderParams(EncoderConfig cfg);

    const EncoderConfig& config() const { return cfg_; }
    const ParamLayout& layout() const { return layout_; }
    std::size_t size() const { return values_.size(); }

    double get(std::size_t i) const { return values_.at(i); }
    void set(std::size_t i, double v);

    std::span<const double> flat() const { return values_; }
    /// Mutable view; invalidates every cache produced from earlier values.
    std::span<double> mutable_flat();
    std::span<const double> slice(ParamSlice s) const { return {values_.data() + s.offset, s.count}; }

    /// Changes whenever values change; forward caches are tagged with it.
    std::uint64_t revision() const { return revision_; }

private:
    void touch();

    EncoderConfig cfg_;
    ParamLayout layout_;
    std::vector<double> values_;
    std::uint64_t revision_ = 0;
};

/// Fan-in scaled normal weights, zero biases.
EncoderParams init_params(const EncoderConfig& cfg, RngStream rng);

struct SampleActivations {
    std::vector<std::vector<double>> block_input;  // [block] channels x voxels
    std::vector<std::vector<double>> block_conv;   // post-ReLU conv output
    std::vector<std::vector<std::uint32_t>> pool_argmax;
    std::vector<double> flat;
    std::vector<double> hidden;  // post-ReLU
    std::vector<double> embed;   // pre-head
    double embed_norm = 0.0;
};

struct ForwardCache {
    std::uint64_t revision = 0;
    std::size_t param_count = 0;
    HeadMode head_mode = HeadMode::l2_normalized;
    std::vector<SampleActivations> samples;
    Matrix output;
};

struct ForwardResult {
    Matrix output;  // n x embed_dim
    ForwardCache cache;
};

using VolumeBatch = std::span<const Volume* const>;

ForwardResult forward(const EncoderParams& params, VolumeBatch batch);
ForwardResult forward(const EncoderParams& params, const std::vector<Volume>& batch);

/// Forward pass without keeping activations.
Matrix embed(const EncoderParams& params, VolumeBatch batch);

/// Pre-head output (the embedding layer before normalization).
Matrix embed_pre_head(const EncoderParams& params, VolumeBatch batch);

/// Flat gradient of sum_i <grad_output_i, output_i> with respect to every
/// parameter. Per-sample contributions are reduced in sample order so the
/// result does not depend on the worker count.
std::vector<double> backward(const EncoderParams& params, const ForwardCache& cache,
                             const Matrix& grad_output);

struct SgdState {
    std::vector<double> velocity;
};

/// v <- momentum * v + g; p <- p - lr * v. Rejects non-finite gradients.
void sgd_step(EncoderParams& params, std::span<const double> grads, double lr, double momentum,
              SgdState& state);

/// Copies every layer of `src` into `dst`. When embed_dim differs the final
/// embedding layer of `dst` is left untouched (callers pass freshly
/// initialized params). Returns true in that case. Conv and hidden layers
/// must agree in shape.
bool transfer_params(const EncoderParams& src, EncoderParams& dst);

inline constexpr char kCheckpointMagic[8] = {'D', 'M', 'L', 'P', 'A', 'R', 'A', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const EncoderParams& params);
EncoderParams load_checkpoint(const std::filesystem::path& path);
/// Also rejects checkpoints whose config digest differs from `expected`.
EncoderParams load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected);

}  // namespace dml
