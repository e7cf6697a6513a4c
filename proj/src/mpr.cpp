#include "mps/mpr.hpp"

#include "mps/util.hpp"

#include <cmath>
#include <stdexcept>

namespace mps {

Tensor aggregate(const Tensor& g_l) {
    if (g_l.rank() != 2) throw std::invalid_argument("aggregate: expected K×D perspectives, got " + shape_str(g_l.shape()));
    return mean_rows(g_l);
}

static Tensor mpr_run(const Tensor& e, const MprParams& p, std::mt19937_64* rng) {
    if (e.rank() != 1) throw std::invalid_argument("mpr_forward: expected a rank-1 summary, got " + shape_str(e.shape()));
    if (p.heads.empty()) throw std::invalid_argument("mpr_forward: no heads configured");
    Tensor row = reshape(e, {1, e.shape()[0]});
    std::vector<Tensor> outs;
    outs.reserve(p.heads.size());
    for (const auto& h : p.heads) {
        Tensor hidden = gelu(add_rowwise(matmul(row, h.w1), h.b1), p.gelu_form);
        if (rng && p.dropout_rate > 0.0) hidden = dropout(hidden, p.dropout_rate, *rng);
        Tensor out = add_rowwise(matmul(hidden, h.w2), h.b2);
        outs.push_back(l2_normalize(out, p.eps));
    }
    return concat_rows(outs);
}

Tensor mpr_forward(const Tensor& e, const MprParams& p) { return mpr_run(e, p, nullptr); }

Tensor mpr_forward_train(const Tensor& e, const MprParams& p, std::mt19937_64& rng) {
    return mpr_run(e, p, &rng);
}

MprParams make_mpr(int k, int dim, int hidden, std::mt19937_64& rng, double eps, double dropout_rate,
                   GeluForm gelu_form) {
    if (k < 1) throw std::invalid_argument("make_mpr: need at least one head");
    if (eps <= 0.0) throw std::invalid_argument("make_mpr: eps must be positive");
    if (dropout_rate < 0.0 || dropout_rate > 0.5)
        throw std::invalid_argument("make_mpr: dropout_rate must lie in [0, 0.5]");
    MprParams p;
    p.eps = eps;
    p.dropout_rate = dropout_rate;
    p.gelu_form = gelu_form;
    double s_in = 1.0 / std::sqrt(static_cast<double>(dim));
    double s_h = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (int i = 0; i < k; ++i) {
        MprHead h;
        std::vector<double> w1(static_cast<std::size_t>(dim) * hidden), w2(static_cast<std::size_t>(hidden) * dim);
        for (auto& v : w1) v = s_in * gaussian(rng);
        for (auto& v : w2) v = s_h * gaussian(rng);
        h.w1 = Tensor::from_data({dim, hidden}, std::move(w1), true);
        h.b1 = Tensor::zeros({hidden}, true);
        h.w2 = Tensor::from_data({hidden, dim}, std::move(w2), true);
        h.b2 = Tensor::zeros({dim}, true);
        p.heads.push_back(std::move(h));
    }
    return p;
}

std::vector<Tensor> mpr_leaves(const MprParams& p) {
    std::vector<Tensor> leaves;
    for (const auto& h : p.heads) leaves.insert(leaves.end(), {h.w1, h.b1, h.w2, h.b2});
    return leaves;
}

}  // namespace mps
