#pragma once

#include "mps/tensor.hpp"

#include <random>
#include <span>

namespace mps {

enum class GeluForm { Exact, Tanh };

// Scalar math shared by ops and tests.
double sigmoid_scalar(double x);
double gelu_scalar(double x, GeluForm form = GeluForm::Exact);

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// M: N×d plus a rank-1 bias of length d, added to every row.
Tensor add_rowwise(const Tensor& m, const Tensor& bias);

Tensor scale(const Tensor& t, double c);
Tensor add_scalar(const Tensor& t, double c);
// Multiply by a learnable scalar (numel()==1 tensor); gradient reaches both.
Tensor scale_by(const Tensor& t, const Tensor& s);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& m);
Tensor reshape(const Tensor& t, std::vector<int> shape);

Tensor gelu(const Tensor& t, GeluForm form = GeluForm::Exact);
Tensor sigmoid(const Tensor& t);
Tensor relu(const Tensor& t);

Tensor softmax_rows(const Tensor& m);
Tensor log_softmax_rows(const Tensor& m);

// v/(||v||+eps). Rank-1 normalizes the vector, rank-2 each row independently.
// The zero vector maps to the zero vector.
Tensor l2_normalize(const Tensor& t, double eps);

Tensor mean_rows(const Tensor& m);  // N×D -> D
Tensor sum_all(const Tensor& t);    // -> rank-0
Tensor mean_all(const Tensor& t);   // -> rank-0
Tensor take_row(const Tensor& m, int row);

Tensor slice_cols(const Tensor& m, int c0, int c1);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor stack_rows(std::span<const Tensor> vectors);  // B rank-1 tensors -> B×D

Tensor diag_part(const Tensor& s);        // B×B -> B
Tensor offdiag_row_max(const Tensor& s);  // B×B -> B, requires B >= 2; ties to lowest index

// groups: (B*group_size)×D, queries: T×D.
// out[b][t] = max over the b-th group's rows of <row, queries[t]>; ties to lowest row.
Tensor group_max_dot(const Tensor& groups, int group_size, const Tensor& queries);

// Row-wise layer norm with affine gain/bias (rank-1, length = row width).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// Inverted dropout; caller guards training mode. rate in [0,1).
Tensor dropout(const Tensor& t, double rate, std::mt19937_64& rng);

}  // namespace mps
