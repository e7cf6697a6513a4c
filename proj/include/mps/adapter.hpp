#pragma once

#include "mps/ops.hpp"
#include "mps/tensor.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace mps {

// Multi-head self-attention parameters over a fixed channel width.
struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

// Gated bottleneck adapter: down-projection into d channels, attention and a
// feed-forward branch in the compressed space, a scalar sigmoid gate, and a
// residual up-projection back to the token width.
struct AdapterParams {
    Tensor w1, b1;  // D×d, d
    AttentionParams attn;
    Tensor w2, b2;                          // d×d, d
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;  // d×d_ff, d_ff, d_ff×d, d
    Tensor gamma;                           // rank-0 gate logit
    Tensor w3, b3;                          // d×D, D
    int heads = 2;
    GeluForm gelu_form = GeluForm::Exact;
};

struct AdapterFlags {
    bool attn_on = true;
    bool gate_on = true;
};

// Scaled dot-product attention over all tokens, per head, heads concatenated
// and output-projected. Shape-preserving.
Tensor mhsa(const Tensor& z, const AttentionParams& p, int heads);

Tensor g2a_forward(const Tensor& x, const AdapterParams& p, AdapterFlags flags = {});

// Exact count of learnable scalars for the enabled configuration.
std::size_t count_params(const AdapterParams& p, AdapterFlags flags = {});

// Fresh adapter: projections and attention seeded small, gamma = 0 and the
// up-projection zeroed so the adapter starts as the identity map.
AdapterParams make_adapter(int dim, int bottleneck, int heads, int ffn_hidden, std::mt19937_64& rng,
                           GeluForm gelu_form = GeluForm::Exact);

// Learnable leaves in a fixed order, filtered by the enabled components.
std::vector<Tensor> adapter_leaves(const AdapterParams& p, AdapterFlags flags = {});

}  // namespace mps
