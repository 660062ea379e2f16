#pragma once

// Batched forward/backward passes of the VPE. Used by the objectives in vpe.cpp and adapt.cpp.

#include <array>
#include <span>

#include "signadapt/nn.hpp"
#include "signadapt/vpe.hpp"

namespace signadapt::network {

/// Stack images into a channel-major (3 × B·H·W) matrix.
nn::Matrix to_channel_major(std::span<const Image* const> images);
nn::Matrix to_channel_major(std::span<const Image> images);
/// Inverse of to_channel_major for sample `index`, squashing logits through a sigmoid.
Image logits_to_image(const nn::Matrix& logits, int index, int height, int width);

struct EncoderPass {
    int batch = 0;
    std::array<nn::ConvCache, 3> conv;
    std::array<nn::Matrix, 3> activations;  // post-ELU outputs of each block
    nn::Matrix flat;                         // features × B
    nn::Matrix mean;                         // d_z × B
    nn::Matrix log_variance;                 // d_z × B
};

EncoderPass encoder_forward(const VpeParameters& params, const nn::Matrix& input, int batch);
/// Adds parameter gradients into `grad`. `grad_log_variance` may be empty (treated as zero).
void encoder_backward(const VpeParameters& params, const EncoderPass& pass, const nn::Matrix& grad_mean,
                      const nn::Matrix& grad_log_variance, std::span<double> grad);

struct DecoderPass {
    int batch = 0;
    nn::Matrix code;    // d_z × B
    nn::Matrix hidden;  // post-ELU fc output, features × B
    nn::Matrix hidden_maps;
    std::array<nn::DeconvCache, 3> deconv;
    std::array<nn::Matrix, 2> activations;
    nn::Matrix logits;  // 3 × B·H·W
};

DecoderPass decoder_forward(const VpeParameters& params, const nn::Matrix& code);
/// Adds parameter gradients into `grad`; returns d(code).
nn::Matrix decoder_backward(const VpeParameters& params, const DecoderPass& pass, const nn::Matrix& grad_logits,
                            std::span<double> grad);

/// Head logits (K × B) for a batch of codes.
nn::Matrix head_logits(const LinearHead& head, const nn::Matrix& code);

}  // namespace signadapt::network
