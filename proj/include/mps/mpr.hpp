#pragma once

#include "mps/ops.hpp"
#include "mps/tensor.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace mps {

struct MprHead {
    Tensor w1, b1;  // D×h_m, h_m
    Tensor w2, b2;  // h_m×D, D
};

// Fans a local semantic summary out into K independently parameterized,
// L2-normalized perspective embeddings.
struct MprParams {
    std::vector<MprHead> heads;
    double eps = 1e-8;
    double dropout_rate = 0.0;
    GeluForm gelu_form = GeluForm::Exact;
};

// Arithmetic mean over the K sub-perspective vectors; g_l is K×D.
Tensor aggregate(const Tensor& g_l);

// e (rank-1, length D) -> K×D; one two-layer head per output row. Dropout is
// applied between the layers only on the training path.
Tensor mpr_forward(const Tensor& e, const MprParams& p);
Tensor mpr_forward_train(const Tensor& e, const MprParams& p, std::mt19937_64& rng);

MprParams make_mpr(int k, int dim, int hidden, std::mt19937_64& rng, double eps = 1e-8,
                   double dropout_rate = 0.0, GeluForm gelu_form = GeluForm::Exact);

std::vector<Tensor> mpr_leaves(const MprParams& p);

}  // namespace mps
