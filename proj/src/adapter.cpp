#include "mps/adapter.hpp"

#include "mps/util.hpp"

#include <cmath>
#include <stdexcept>

namespace mps {

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowwise(matmul(x, w), b);
}

Tensor ffn(const Tensor& x, const AdapterParams& p) {
    return linear(gelu(linear(x, p.ffn_w1, p.ffn_b1), p.gelu_form), p.ffn_w2, p.ffn_b2);
}

Tensor gaussian_tensor(std::vector<int> shape, double stddev, std::mt19937_64& rng) {
    std::size_t n = 1;
    for (int e : shape) n *= static_cast<std::size_t>(e);
    std::vector<double> data(n);
    for (auto& v : data) v = stddev * gaussian(rng);
    return Tensor::from_data(std::move(shape), std::move(data), true);
}

}  // namespace

Tensor mhsa(const Tensor& z, const AttentionParams& p, int heads) {
    if (z.rank() != 2) throw std::invalid_argument("mhsa: expected rank-2 tokens, got " + shape_str(z.shape()));
    int d = z.cols();
    if (heads < 1 || d % heads != 0) {
        throw std::invalid_argument("mhsa: head count " + std::to_string(heads) + " does not divide width " +
                                    std::to_string(d));
    }
    int dh = d / heads;
    Tensor q = linear(z, p.wq, p.bq);
    Tensor k = linear(z, p.wk, p.bk);
    Tensor v = linear(z, p.wv, p.bv);
    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
        head_outs.push_back(matmul(softmax_rows(scores), vh));
    }
    return linear(concat_cols(head_outs), p.wo, p.bo);
}

Tensor g2a_forward(const Tensor& x, const AdapterParams& p, AdapterFlags flags) {
    if (x.rank() != 2) throw std::invalid_argument("g2a_forward: expected rank-2 tokens, got " + shape_str(x.shape()));
    if (x.cols() != p.w1.rows()) {
        throw std::invalid_argument("g2a_forward: token width " + shape_str(x.shape()) +
                                    " does not match down-projection " + shape_str(p.w1.shape()));
    }
    Tensor z = gelu(linear(x, p.w1, p.b1), p.gelu_form);
    Tensor zt;
    if (flags.attn_on) {
        Tensor zh = linear(mhsa(z, p.attn, p.heads), p.w2, p.b2);
        zt = add(zh, ffn(mhsa(zh, p.attn, p.heads), p));
    } else {
        // ablation: both attention applications become the identity
        Tensor zh = linear(z, p.w2, p.b2);
        zt = add(zh, ffn(zh, p));
    }
    Tensor zg = flags.gate_on ? scale_by(zt, sigmoid(p.gamma)) : zt;
    return add(x, linear(zg, p.w3, p.b3));
}

std::size_t count_params(const AdapterParams& p, AdapterFlags flags) {
    std::size_t n = 0;
    n += p.w1.numel() + p.b1.numel();
    n += p.w2.numel() + p.b2.numel();
    n += p.ffn_w1.numel() + p.ffn_b1.numel() + p.ffn_w2.numel() + p.ffn_b2.numel();
    n += p.w3.numel() + p.b3.numel();
    if (flags.attn_on) {
        n += p.attn.wq.numel() + p.attn.bq.numel() + p.attn.wk.numel() + p.attn.bk.numel();
        n += p.attn.wv.numel() + p.attn.bv.numel() + p.attn.wo.numel() + p.attn.bo.numel();
    }
    if (flags.gate_on) n += 1;
    return n;
}

AdapterParams make_adapter(int dim, int bottleneck, int heads, int ffn_hidden, std::mt19937_64& rng,
                           GeluForm gelu_form) {
    if (bottleneck >= dim) throw std::invalid_argument("make_adapter: bottleneck must be smaller than the token width");
    if (heads < 1 || bottleneck % heads != 0)
        throw std::invalid_argument("make_adapter: head count must divide the bottleneck width");
    AdapterParams p;
    p.heads = heads;
    p.gelu_form = gelu_form;
    double s_in = 1.0 / std::sqrt(static_cast<double>(dim));
    double s_d = 1.0 / std::sqrt(static_cast<double>(bottleneck));
    double s_ff = 1.0 / std::sqrt(static_cast<double>(ffn_hidden));
    p.w1 = gaussian_tensor({dim, bottleneck}, s_in, rng);
    p.b1 = Tensor::zeros({bottleneck}, true);
    p.attn.wq = gaussian_tensor({bottleneck, bottleneck}, s_d, rng);
    p.attn.bq = Tensor::zeros({bottleneck}, true);
    p.attn.wk = gaussian_tensor({bottleneck, bottleneck}, s_d, rng);
    p.attn.bk = Tensor::zeros({bottleneck}, true);
    p.attn.wv = gaussian_tensor({bottleneck, bottleneck}, s_d, rng);
    p.attn.bv = Tensor::zeros({bottleneck}, true);
    p.attn.wo = gaussian_tensor({bottleneck, bottleneck}, s_d, rng);
    p.attn.bo = Tensor::zeros({bottleneck}, true);
    p.w2 = gaussian_tensor({bottleneck, bottleneck}, s_d, rng);
    p.b2 = Tensor::zeros({bottleneck}, true);
    p.ffn_w1 = gaussian_tensor({bottleneck, ffn_hidden}, s_d, rng);
    p.ffn_b1 = Tensor::zeros({ffn_hidden}, true);
    p.ffn_w2 = gaussian_tensor({ffn_hidden, bottleneck}, s_ff, rng);
    p.ffn_b2 = Tensor::zeros({bottleneck}, true);
    p.gamma = Tensor::scalar(0.0, true);
    p.w3 = Tensor::zeros({bottleneck, dim}, true);
    p.b3 = Tensor::zeros({dim}, true);
    return p;
}

std::vector<Tensor> adapter_leaves(const AdapterParams& p, AdapterFlags flags) {
    std::vector<Tensor> leaves{p.w1, p.b1};
    if (flags.attn_on) {
        leaves.insert(leaves.end(), {p.attn.wq, p.attn.bq, p.attn.wk, p.attn.bk, p.attn.wv, p.attn.bv,
                                     p.attn.wo, p.attn.bo});
    }
    leaves.insert(leaves.end(), {p.w2, p.b2, p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2});
    if (flags.gate_on) leaves.push_back(p.gamma);
    leaves.insert(leaves.end(), {p.w3, p.b3});
    return leaves;
}

}  // namespace mps
