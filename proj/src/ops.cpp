#include "mps/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace mps {

namespace {

Tensor make_out(std::vector<int> shape, std::vector<double> data, std::vector<Tensor> parents,
                std::function<void(const Tensor&)> bw) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    Tensor out = Tensor::from_data(std::move(shape), std::move(data), rg);
    if (rg) {
        auto node = std::make_shared<Node>();
        node->parents = std::move(parents);
        node->backward = std::move(bw);
        out.set_node(std::move(node));
    }
    return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
    }
}

// Accumulate g into t.grad() if t participates in the graph.
void accum(const Tensor& t, std::size_t i, double g) {
    if (t.requires_grad()) t.grad()[i] += g;
}

constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

}  // namespace

double sigmoid_scalar(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

double gelu_scalar(double x, GeluForm form) {
    if (form == GeluForm::Exact) {
        return x * 0.5 * std::erfc(-x * kInvSqrt2);
    }
    double u = std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

static double gelu_deriv(double x, GeluForm form) {
    if (form == GeluForm::Exact) {
        double phi = 0.5 * std::erfc(-x * kInvSqrt2);
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        return phi + x * pdf;
    }
    double c = std::sqrt(2.0 / M_PI);
    double u = c * (x + 0.044715 * x * x * x);
    double th = std::tanh(u);
    double sech2 = 1.0 - th * th;
    return 0.5 * (1.0 + th) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x);
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_out(a.shape(), std::move(out), {a, b}, [](const Tensor& o) {
        const auto& g = o.node()->parents;
        for (std::size_t i = 0; i < o.numel(); ++i) {
            double d = o.grad()[i];
            accum(g[0], i, d);
            accum(g[1], i, d);
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_out(a.shape(), std::move(out), {a, b}, [](const Tensor& o) {
        const auto& g = o.node()->parents;
        for (std::size_t i = 0; i < o.numel(); ++i) {
            double d = o.grad()[i];
            accum(g[0], i, d);
            accum(g[1], i, -d);
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_out(a.shape(), std::move(out), {a, b}, [](const Tensor& o) {
        const auto& p = o.node()->parents;
        for (std::size_t i = 0; i < o.numel(); ++i) {
            double d = o.grad()[i];
            accum(p[0], i, d * p[1].data()[i]);
            accum(p[1], i, d * p[0].data()[i]);
        }
    });
}

Tensor add_rowwise(const Tensor& m, const Tensor& bias) {
    require_rank2(m, "add_rowwise");
    if (bias.rank() != 1 || bias.shape()[0] != m.cols()) {
        throw std::invalid_argument("add_rowwise: bias shape " + shape_str(bias.shape()) +
                                    " does not match matrix " + shape_str(m.shape()));
    }
    int n = m.rows(), d = m.cols();
    std::vector<double> out(m.numel());
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) out[r * d + c] = m.at(r, c) + bias.data()[c];
    return make_out(m.shape(), std::move(out), {m, bias}, [n, d](const Tensor& o) {
        const auto& p = o.node()->parents;
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < d; ++c) {
                double g = o.grad()[r * d + c];
                accum(p[0], static_cast<std::size_t>(r) * d + c, g);
                accum(p[1], c, g);
            }
    });
}

Tensor scale(const Tensor& t, double c) {
    std::vector<double> out(t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.data()[i] * c;
    return make_out(t.shape(), std::move(out), {t}, [c](const Tensor& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) accum(o.node()->parents[0], i, o.grad()[i] * c);
    });
}

Tensor add_scalar(const Tensor& t, double c) {
    std::vector<double> out(t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.data()[i] + c;
    return make_out(t.shape(), std::move(out), {t}, [](const Tensor& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) accum(o.node()->parents[0], i, o.grad()[i]);
    });
}

Tensor scale_by(const Tensor& t, const Tensor& s) {
    if (s.numel() != 1) throw std::invalid_argument("scale_by: scale must have one element, got " + shape_str(s.shape()));
    double sv = s.data()[0];
    std::vector<double> out(t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.data()[i] * sv;
    return make_out(t.shape(), std::move(out), {t, s}, [sv](const Tensor& o) {
        const auto& p = o.node()->parents;
        double ds = 0.0;
        for (std::size_t i = 0; i < o.numel(); ++i) {
            double g = o.grad()[i];
            accum(p[0], i, g * sv);
            ds += g * p[0].data()[i];
        }
        accum(p[1], 0, ds);
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner extents differ, " + shape_str(a.shape()) + " * " +
                                    shape_str(b.shape()));
    }
    int n = a.rows(), k = a.cols(), m = b.cols();
    std::vector<double> out(static_cast<std::size_t>(n) * m, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            double acc = 0.0;
            for (int t = 0; t < k; ++t) acc += a.at(i, t) * b.at(t, j);
            out[static_cast<std::size_t>(i) * m + j] = acc;
        }
    return make_out({n, m}, std::move(out), {a, b}, [n, k, m](const Tensor& o) {
        const auto& p = o.node()->parents;
        const Tensor& A = p[0];
        const Tensor& B = p[1];
        // dA = dOut * B^T, dB = A^T * dOut
        if (A.requires_grad()) {
            auto& ga = o.node()->parents[0].grad();
            for (int i = 0; i < n; ++i)
                for (int t = 0; t < k; ++t) {
                    double acc = 0.0;
                    for (int j = 0; j < m; ++j) acc += o.grad()[static_cast<std::size_t>(i) * m + j] * B.at(t, j);
                    ga[static_cast<std::size_t>(i) * k + t] += acc;
                }
        }
        if (B.requires_grad()) {
            auto& gb = o.node()->parents[1].grad();
            for (int t = 0; t < k; ++t)
                for (int j = 0; j < m; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < n; ++i) acc += A.at(i, t) * o.grad()[static_cast<std::size_t>(i) * m + j];
                    gb[static_cast<std::size_t>(t) * m + j] += acc;
                }
        }
    });
}

Tensor transpose(const Tensor& m) {
    require_rank2(m, "transpose");
    int n = m.rows(), d = m.cols();
    std::vector<double> out(m.numel());
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) out[static_cast<std::size_t>(c) * n + r] = m.at(r, c);
    return make_out({d, n}, std::move(out), {m}, [n, d](const Tensor& o) {
        if (!o.node()->parents[0].requires_grad()) return;
        auto& g = o.node()->parents[0].grad();
        for (int c = 0; c < d; ++c)
            for (int r = 0; r < n; ++r)
                g[static_cast<std::size_t>(r) * d + c] += o.grad()[static_cast<std::size_t>(c) * n + r];
    });
}

Tensor reshape(const Tensor& t, std::vector<int> shape) {
    std::size_t n = 1;
    for (int e : shape) n *= static_cast<std::size_t>(e);
    if (n != t.numel()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(t.shape()) + " as " + shape_str(shape));
    }
    return make_out(std::move(shape), t.data(), {t}, [](const Tensor& o) {
        for (std::size_t i = 0; i < o.numel(); ++i) accum(o.node()->parents[0], i, o.grad()[i]);
    });
}

static Tensor elementwise(const Tensor& t, double (*fwd)(double), double (*bwd)(double)) {
    std::vector<double> out(t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(t.data()[i]);
    return make_out(t.shape(), std::move(out), {t}, [bwd](const Tensor& o) {
        const auto& p = o.node()->parents[0];
        for (std::size_t i = 0; i < o.numel(); ++i) accum(p, i, o.grad()[i] * bwd(p.data()[i]));
    });
}

Tensor gelu(const Tensor& t, GeluForm form) {
    std::vector<double> out(t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_scalar(t.data()[i], form);
    return make_out(t.shape(), std::move(out), {t}, [form](const Tensor& o) {
        const auto& p = o.node()->parents[0];
        for (std::size_t i = 0; i < o.numel(); ++i)
            accum(p, i, o.grad()[i] * gelu_deriv(p.data()[i], form));
    });
}

Tensor sigmoid(const Tensor& t) {
    std::vector<double> out(t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(t.data()[i]);
    return make_out(t.shape(), std::move(out), {t}, [](const Tensor& o) {
        const auto& p = o.node()->parents[0];
        for (std::size_t i = 0; i < o.numel(); ++i) {
            double y = o.data()[i];
            accum(p, i, o.grad()[i] * y * (1.0 - y));
        }
    });
}

Tensor relu(const Tensor& t) {
    return elementwise(
        t, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor softmax_rows(const Tensor& m) {
    require_rank2(m, "softmax_rows");
    int n = m.rows(), d = m.cols();
    std::vector<double> out(m.numel());
    for (int r = 0; r < n; ++r) {
        double mx = m.at(r, 0);
        for (int c = 1; c < d; ++c) mx = std::max(mx, m.at(r, c));
        double sum = 0.0;
        for (int c = 0; c < d; ++c) {
            double e = std::exp(m.at(r, c) - mx);
            out[static_cast<std::size_t>(r) * d + c] = e;
            sum += e;
        }
        for (int c = 0; c < d; ++c) out[static_cast<std::size_t>(r) * d + c] /= sum;
    }
    return make_out(m.shape(), std::move(out), {m}, [n, d](const Tensor& o) {
        const auto& p = o.node()->parents[0];
        if (!p.requires_grad()) return;
        for (int r = 0; r < n; ++r) {
            double dot = 0.0;
            for (int c = 0; c < d; ++c)
                dot += o.grad()[static_cast<std::size_t>(r) * d + c] * o.data()[static_cast<std::size_t>(r) * d + c];
            for (int c = 0; c < d; ++c) {
                std::size_t i = static_cast<std::size_t>(r) * d + c;
                accum(p, i, o.data()[i] * (o.grad()[i] - dot));
            }
        }
    });
}

Tensor log_softmax_rows(const Tensor& m) {
    require_rank2(m, "log_softmax_rows");
    int n = m.rows(), d = m.cols();
    std::vector<double> out(m.numel());
    for (int r = 0; r < n; ++r) {
        double mx = m.at(r, 0);
        for (int c = 1; c < d; ++c) mx = std::max(mx, m.at(r, c));
        double sum = 0.0;
        for (int c = 0; c < d; ++c) sum += std::exp(m.at(r, c) - mx);
        double lse = mx + std::log(sum);
        for (int c = 0; c < d; ++c) out[static_cast<std::size_t>(r) * d + c] = m.at(r, c) - lse;
    }
    return make_out(m.shape(), std::move(out), {m}, [n, d](const Tensor& o) {
        const auto& p = o.node()->parents[0];
        if (!p.requires_grad()) return;
        for (int r = 0; r < n; ++r) {
            double gsum = 0.0;
            for (int c = 0; c < d; ++c) gsum += o.grad()[static_cast<std::size_t>(r) * d + c];
            for (int c = 0; c < d; ++c) {
                std::size_t i = static_cast<std::size_t>(r) * d + c;
                accum(p, i, o.grad()[i] - std::exp(o.data()[i]) * gsum);
            }
        }
    });
}

Tensor l2_normalize(const Tensor& t, double eps) {
    if (eps <= 0.0) throw std::invalid_argument("l2_normalize: eps must be positive");
    if (t.rank() != 1 && t.rank() != 2) {
        throw std::invalid_argument("l2_normalize: expected rank-1 or rank-2 tensor, got " + shape_str(t.shape()));
    }
    int n = t.rank() == 2 ? t.rows() : 1;
    int d = t.rank() == 2 ? t.cols() : t.shape()[0];
    std::vector<double> out(t.numel());
    for (int r = 0; r < n; ++r) {
        double sq = 0.0;
        for (int c = 0; c < d; ++c) {
            double v = t.data()[static_cast<std::size_t>(r) * d + c];
            sq += v * v;
        }
        double norm = std::sqrt(sq);
        double denom = norm + eps;
        for (int c = 0; c < d; ++c) out[static_cast<std::size_t>(r) * d + c] = t.data()[static_cast<std::size_t>(r) * d + c] / denom;
    }
    return make_out(t.shape(), std::move(out), {t}, [n, d, eps](const Tensor& o) {
        const auto& p = o.node()->parents[0];
        if (!p.requires_grad()) return;
        for (int r = 0; r < n; ++r) {
            double sq = 0.0, dot = 0.0;
            for (int c = 0; c < d; ++c) {
                std::size_t i = static_cast<std::size_t>(r) * d + c;
                sq += p.data()[i] * p.data()[i];
                dot += o.grad()[i] * p.data()[i];
            }
            double norm = std::sqrt(sq);
            double denom = norm + eps;
            // d x = dout/denom - x * (dout.x) / (norm * denom^2); at x = 0 only
            // the diagonal term survives.
            for (int c = 0; c < d; ++c) {
                std::size_t i = static_cast<std::size_t>(r) * d + c;
                double g = o.grad()[i] / denom;
                if (norm > 0.0) g -= p.data()[i] * dot / (norm * denom * denom);
                accum(p, i, g);
            }
        }
    });
}

Tensor mean_rows(const Tensor& m) {
    require_rank2(m, "mean_rows");
    int n = m.rows(), d = m.cols();
    std::vector<double> out(d, 0.0);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) out[c] += m.at(r, c);
    for (int c = 0; c < d; ++c) out[c] /= n;
    return make_out({d}, std::move(out), {m}, [n, d](const Tensor& o) {
        const auto& p = o.node()->parents[0];
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < d; ++c) accum(p, static_cast<std::size_t>(r) * d + c, o.grad()[c] / n);
    });
}

Tensor sum_all(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v;
    return make_out({}, {s}, {t}, [](const Tensor& o) {
        double g = o.grad()[0];
        const auto& p = o.node()->parents[0];
        for (std::size_t i = 0; i < p.numel(); ++i) accum(p, i, g);
    });
}

Tensor mean_all(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v;
    double n = static_cast<double>(t.numel());
    return make_out({}, {s / n}, {t}, [n](const Tensor& o) {
        double g = o.grad()[0] / n;
        const auto& p = o.node()->parents[0];
        for (std::size_t i = 0; i < p.numel(); ++i) accum(p, i, g);
    });
}

Tensor take_row(const Tensor& m, int row) {
    require_rank2(m, "take_row");
    if (row < 0 || row >= m.rows()) throw std::invalid_argument("take_row: row index out of range");
    int d = m.cols();
    std::vector<double> out(d);
    for (int c = 0; c < d; ++c) out[c] = m.at(row, c);
    return make_out({d}, std::move(out), {m}, [row, d](const Tensor& o) {
        const auto& p = o.node()->parents[0];
        for (int c = 0; c < d; ++c) accum(p, static_cast<std::size_t>(row) * d + c, o.grad()[c]);
    });
}

Tensor slice_cols(const Tensor& m, int c0, int c1) {
    require_rank2(m, "slice_cols");
    if (c0 < 0 || c1 <= c0 || c1 > m.cols()) throw std::invalid_argument("slice_cols: bad column range");
    int n = m.rows(), d = m.cols(), w = c1 - c0;
    std::vector<double> out(static_cast<std::size_t>(n) * w);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < w; ++c) out[static_cast<std::size_t>(r) * w + c] = m.at(r, c0 + c);
    return make_out({n, w}, std::move(out), {m}, [n, d, w, c0](const Tensor& o) {
        const auto& p = o.node()->parents[0];
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < w; ++c)
                accum(p, static_cast<std::size_t>(r) * d + c0 + c, o.grad()[static_cast<std::size_t>(r) * w + c]);
    });
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    int n = parts[0].rows(), total = 0;
    for (const auto& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.rows() != n) throw std::invalid_argument("concat_cols: row count mismatch");
        total += p.cols();
    }
    std::vector<double> out(static_cast<std::size_t>(n) * total);
    std::vector<int> widths;
    int off = 0;
    for (const auto& p : parts) {
        int w = p.cols();
        widths.push_back(w);
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < w; ++c) out[static_cast<std::size_t>(r) * total + off + c] = p.at(r, c);
        off += w;
    }
    std::vector<Tensor> parents(parts.begin(), parts.end());
    return make_out({n, total}, std::move(out), std::move(parents), [n, total, widths](const Tensor& o) {
        int off2 = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            const auto& p = o.node()->parents[k];
            int w = widths[k];
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < w; ++c)
                    accum(p, static_cast<std::size_t>(r) * w + c, o.grad()[static_cast<std::size_t>(r) * total + off2 + c]);
            off2 += w;
        }
    });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    int d = parts[0].cols(), total = 0;
    for (const auto& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.cols() != d) throw std::invalid_argument("concat_rows: column count mismatch");
        total += p.rows();
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total) * d);
    std::vector<int> heights;
    for (const auto& p : parts) {
        heights.push_back(p.rows());
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    std::vector<Tensor> parents(parts.begin(), parts.end());
    return make_out({total, d}, std::move(out), std::move(parents), [d, heights](const Tensor& o) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < heights.size(); ++k) {
            const auto& p = o.node()->parents[k];
            std::size_t n = static_cast<std::size_t>(heights[k]) * d;
            for (std::size_t i = 0; i < n; ++i) accum(p, i, o.grad()[off + i]);
            off += n;
        }
    });
}

Tensor stack_rows(std::span<const Tensor> vectors) {
    if (vectors.empty()) throw std::invalid_argument("stack_rows: no vectors");
    int d = vectors[0].rank() == 1 ? vectors[0].shape()[0] : -1;
    for (const auto& v : vectors) {
        if (v.rank() != 1 || v.shape()[0] != d)
            throw std::invalid_argument("stack_rows: expected equal-length rank-1 tensors");
    }
    int b = static_cast<int>(vectors.size());
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(b) * d);
    for (const auto& v : vectors) out.insert(out.end(), v.data().begin(), v.data().end());
    std::vector<Tensor> parents(vectors.begin(), vectors.end());
    return make_out({b, d}, std::move(out), std::move(parents), [d](const Tensor& o) {
        for (std::size_t k = 0; k < o.node()->parents.size(); ++k) {
            const auto& p = o.node()->parents[k];
            for (int c = 0; c < d; ++c) accum(p, c, o.grad()[k * d + c]);
        }
    });
}

Tensor diag_part(const Tensor& s) {
    require_rank2(s, "diag_part");
    if (s.rows() != s.cols()) throw std::invalid_argument("diag_part: matrix is not square, " + shape_str(s.shape()));
    int b = s.rows();
    std::vector<double> out(b);
    for (int i = 0; i < b; ++i) out[i] = s.at(i, i);
    return make_out({b}, std::move(out), {s}, [b](const Tensor& o) {
        const auto& p = o.node()->parents[0];
        for (int i = 0; i < b; ++i) accum(p, static_cast<std::size_t>(i) * b + i, o.grad()[i]);
    });
}

Tensor offdiag_row_max(const Tensor& s) {
    require_rank2(s, "offdiag_row_max");
    if (s.rows() != s.cols() || s.rows() < 2)
        throw std::invalid_argument("offdiag_row_max: need a square matrix with at least 2 rows, got " +
                                    shape_str(s.shape()));
    int b = s.rows();
    std::vector<double> out(b);
    std::vector<int> arg(b);
    for (int i = 0; i < b; ++i) {
        int best = i == 0 ? 1 : 0;
        for (int j = 0; j < b; ++j) {
            if (j == i) continue;
            if (s.at(i, j) > s.at(i, best)) best = j;
        }
        out[i] = s.at(i, best);
        arg[i] = best;
    }
    return make_out({b}, std::move(out), {s}, [b, arg](const Tensor& o) {
        const auto& p = o.node()->parents[0];
        for (int i = 0; i < b; ++i) accum(p, static_cast<std::size_t>(i) * b + arg[i], o.grad()[i]);
    });
}

Tensor group_max_dot(const Tensor& groups, int group_size, const Tensor& queries) {
    require_rank2(groups, "group_max_dot");
    require_rank2(queries, "group_max_dot");
    if (group_size < 1) throw std::invalid_argument("group_max_dot: group_size must be >= 1");
    if (groups.rows() % group_size != 0)
        throw std::invalid_argument("group_max_dot: row count not divisible by group size");
    if (groups.cols() != queries.cols())
        throw std::invalid_argument("group_max_dot: width mismatch " + shape_str(groups.shape()) + " vs " +
                                    shape_str(queries.shape()));
    int b = groups.rows() / group_size;
    int t = queries.rows();
    int d = groups.cols();
    std::vector<double> out(static_cast<std::size_t>(b) * t);
    std::vector<int> arg(static_cast<std::size_t>(b) * t);
    for (int i = 0; i < b; ++i) {
        for (int j = 0; j < t; ++j) {
            double best = 0.0;
            int bestk = 0;
            for (int k = 0; k < group_size; ++k) {
                double acc = 0.0;
                int row = i * group_size + k;
                for (int c = 0; c < d; ++c) acc += groups.at(row, c) * queries.at(j, c);
                if (k == 0 || acc > best) {
                    best = acc;
                    bestk = k;
                }
            }
            out[static_cast<std::size_t>(i) * t + j] = best;
            arg[static_cast<std::size_t>(i) * t + j] = bestk;
        }
    }
    return make_out({b, t}, std::move(out), {groups, queries}, [b, t, d, group_size, arg](const Tensor& o) {
        const auto& pg = o.node()->parents[0];
        const auto& pq = o.node()->parents[1];
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < t; ++j) {
                double g = o.grad()[static_cast<std::size_t>(i) * t + j];
                if (g == 0.0) continue;
                int row = i * group_size + arg[static_cast<std::size_t>(i) * t + j];
                for (int c = 0; c < d; ++c) {
                    accum(pg, static_cast<std::size_t>(row) * d + c, g * pq.data()[static_cast<std::size_t>(j) * d + c]);
                    accum(pq, static_cast<std::size_t>(j) * d + c, g * pg.data()[static_cast<std::size_t>(row) * d + c]);
                }
            }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_rank2(x, "layer_norm");
    int n = x.rows(), d = x.cols();
    if (gain.rank() != 1 || gain.shape()[0] != d || bias.rank() != 1 || bias.shape()[0] != d)
        throw std::invalid_argument("layer_norm: gain/bias must be rank-1 of width " + std::to_string(d));
    std::vector<double> out(x.numel());
    for (int r = 0; r < n; ++r) {
        double mean = 0.0;
        for (int c = 0; c < d; ++c) mean += x.at(r, c);
        mean /= d;
        double var = 0.0;
        for (int c = 0; c < d; ++c) {
            double v = x.at(r, c) - mean;
            var += v * v;
        }
        var /= d;
        double inv = 1.0 / std::sqrt(var + eps);
        for (int c = 0; c < d; ++c)
            out[static_cast<std::size_t>(r) * d + c] = (x.at(r, c) - mean) * inv * gain.data()[c] + bias.data()[c];
    }
    return make_out(x.shape(), std::move(out), {x, gain, bias}, [n, d, eps](const Tensor& o) {
        const auto& px = o.node()->parents[0];
        const auto& pg = o.node()->parents[1];
        const auto& pb = o.node()->parents[2];
        for (int r = 0; r < n; ++r) {
            double mean = 0.0;
            for (int c = 0; c < d; ++c) mean += px.data()[static_cast<std::size_t>(r) * d + c];
            mean /= d;
            double var = 0.0;
            for (int c = 0; c < d; ++c) {
                double v = px.data()[static_cast<std::size_t>(r) * d + c] - mean;
                var += v * v;
            }
            var /= d;
            double inv = 1.0 / std::sqrt(var + eps);
            // dxhat, then the standard layer-norm backward.
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int c = 0; c < d; ++c) {
                std::size_t i = static_cast<std::size_t>(r) * d + c;
                double xhat = (px.data()[i] - mean) * inv;
                double dout = o.grad()[i];
                double dxhat = dout * pg.data()[c];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                accum(pg, c, dout * xhat);
                accum(pb, c, dout);
            }
            if (px.requires_grad()) {
                for (int c = 0; c < d; ++c) {
                    std::size_t i = static_cast<std::size_t>(r) * d + c;
                    double xhat = (px.data()[i] - mean) * inv;
                    double dxhat = o.grad()[i] * pg.data()[c];
                    accum(px, i, inv * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d));
                }
            }
        }
    });
}

Tensor dropout(const Tensor& t, double rate, std::mt19937_64& rng) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
    if (rate == 0.0) return t;
    double keep = 1.0 - rate;
    std::vector<double> mask(t.numel());
    for (std::size_t i = 0; i < mask.size(); ++i) {
        double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        mask[i] = u < rate ? 0.0 : 1.0 / keep;
    }
    std::vector<double> out(t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.data()[i] * mask[i];
    return make_out(t.shape(), std::move(out), {t}, [mask](const Tensor& o) {
        const auto& p = o.node()->parents[0];
        for (std::size_t i = 0; i < o.numel(); ++i) accum(p, i, o.grad()[i] * mask[i]);
    });
}

}  // namespace mps
