#pragma once

// Reverse-mode automatic differentiation over dense tensors. The tape is
// define-by-run: ops append nodes as they execute and a single backward
// traversal propagates gradients in reverse creation order (which is a
// topological order by construction). A tape is built, swept backward once,
// and discarded; re-traversal without a rebuild is an error.
//
// Shape rules are strict per op: elementwise ops demand identical shapes,
// matmul demands an exact contraction match, add_rowvec is the only
// broadcasting op. Every op validates that its output is finite.

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "tensor.hpp"

namespace forgetlab {

// Denominator guard for row normalization; backward reuses the same value.
inline constexpr double kNormGuard = 1e-12;

class Tape {
public:
    using Var = std::int32_t;
    using GradMap = std::unordered_map<Var, std::vector<double>>;

    Tape() = default;
    Tape(const Tape&) = delete;             // backward closures capture `this`
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = delete;
    Tape& operator=(Tape&&) = delete;

    // ---- graph construction ------------------------------------------------

    Var leaf(Tensor t) {
        bool rg = t.requires_grad;
        return push("leaf", std::move(t), rg, {});
    }

    Var constant(Tensor t) {
        t.requires_grad = false;
        return push("constant", std::move(t), false, {});
    }

    const Tensor& value(Var v) const { return node(v, "value").out; }

    // Gradient of the loss w.r.t. node v; valid after backward().
    const std::vector<double>& grad(Var v) {
        Node& n = nodes_.at(static_cast<std::size_t>(node_index(v, "grad")));
        if (!backward_done_) throw TensorError("grad: backward has not run");
        if (n.grad.empty()) n.grad.assign(n.out.size(), 0.0);
        return n.grad;
    }

    std::size_t node_count() const { return nodes_.size(); }

    // ---- elementwise -------------------------------------------------------

    Var add(Var a, Var b) {
        const Tensor& ta = val(a, "add");
        const Tensor& tb = val(b, "add");
        require_same_shape("add", ta, tb);
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += tb.values[i];
        return push("add", std::move(out), needs(a) || needs(b), [this, a, b](const Node& n) {
            accumulate(a, n.grad);
            accumulate(b, n.grad);
        });
    }

    Var sub(Var a, Var b) {
        const Tensor& ta = val(a, "sub");
        const Tensor& tb = val(b, "sub");
        require_same_shape("sub", ta, tb);
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out.values[i] -= tb.values[i];
        return push("sub", std::move(out), needs(a) || needs(b), [this, a, b](const Node& n) {
            accumulate(a, n.grad);
            accumulate_scaled(b, n.grad, -1.0);
        });
    }

    Var mul(Var a, Var b) {
        const Tensor& ta = val(a, "mul");
        const Tensor& tb = val(b, "mul");
        require_same_shape("mul", ta, tb);
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out.values[i] *= tb.values[i];
        return push("mul", std::move(out), needs(a) || needs(b), [this, a, b](const Node& n) {
            const Tensor& va = nodes_[a].out;
            const Tensor& vb = nodes_[b].out;
            if (nodes_[a].needs_grad) {
                auto& ga = grad_buf(a);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] * vb.values[i];
            }
            if (nodes_[b].needs_grad) {
                auto& gb = grad_buf(b);
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += n.grad[i] * va.values[i];
            }
        });
    }

    Var scale(Var a, double c) {
        Tensor out = val(a, "scale");
        for (double& v : out.values) v *= c;
        return push("scale", std::move(out), needs(a), [this, a, c](const Node& n) {
            accumulate_scaled(a, n.grad, c);
        });
    }

    // m[b,j] + v[j] for every row b.
    Var add_rowvec(Var m, Var v) {
        const Tensor& tm = val(m, "add_rowvec");
        const Tensor& tv = val(v, "add_rowvec");
        if (tm.shape.size() != 2 || tv.shape.size() != 1 || tv.shape[0] != tm.shape[1])
            throw ShapeError("add_rowvec: shape mismatch " + shape_str(tm.shape) + " vs " +
                             shape_str(tv.shape));
        Tensor out = tm;
        std::size_t rows = tm.shape[0], cols = tm.shape[1];
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) out.values[r * cols + c] += tv.values[c];
        return push("add_rowvec", std::move(out), needs(m) || needs(v),
                    [this, m, v, rows, cols](const Node& n) {
            accumulate(m, n.grad);
            if (nodes_[v].needs_grad) {
                auto& gv = grad_buf(v);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) gv[c] += n.grad[r * cols + c];
            }
        });
    }

    // ---- contractions ------------------------------------------------------

    Var matmul(Var a, Var b) {
        const Tensor& ta = val(a, "matmul");
        const Tensor& tb = val(b, "matmul");
        if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.shape[1] != tb.shape[0])
            throw ShapeError("matmul: shape mismatch " + shape_str(ta.shape) + " vs " +
                             shape_str(tb.shape));
        std::size_t n = ta.shape[0], k = ta.shape[1], m = tb.shape[1];
        Tensor out = Tensor::zeros({n, m});
        k_matmul(ta.values.data(), tb.values.data(), out.values.data(), n, k, m);
        return push("matmul", std::move(out), needs(a) || needs(b),
                    [this, a, b, n, k, m](const Node& nd) {
            if (nodes_[a].needs_grad) // ga += g @ b^T
                k_matmul_nt(nd.grad.data(), nodes_[b].out.values.data(), grad_buf(a).data(), n, m, k);
            if (nodes_[b].needs_grad) // gb += a^T @ g
                k_matmul_tn(nodes_[a].out.values.data(), nd.grad.data(), grad_buf(b).data(), n, k, m);
        });
    }

    // a[n,k] @ b[m,k]^T
    Var matmul_nt(Var a, Var b) {
        const Tensor& ta = val(a, "matmul_nt");
        const Tensor& tb = val(b, "matmul_nt");
        if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.shape[1] != tb.shape[1])
            throw ShapeError("matmul_nt: shape mismatch " + shape_str(ta.shape) + " vs " +
                             shape_str(tb.shape));
        std::size_t n = ta.shape[0], k = ta.shape[1], m = tb.shape[0];
        Tensor out = Tensor::zeros({n, m});
        k_matmul_nt(ta.values.data(), tb.values.data(), out.values.data(), n, k, m);
        return push("matmul_nt", std::move(out), needs(a) || needs(b),
                    [this, a, b, n, k, m](const Node& nd) {
            if (nodes_[a].needs_grad) // ga += g @ b
                k_matmul(nd.grad.data(), nodes_[b].out.values.data(), grad_buf(a).data(), n, m, k);
            if (nodes_[b].needs_grad) // gb += g^T @ a
                k_matmul_tn(nd.grad.data(), nodes_[a].out.values.data(), grad_buf(b).data(), n, m, k);
        });
    }

    Var transpose(Var a) {
        const Tensor& ta = val(a, "transpose");
        if (ta.shape.size() != 2)
            throw ShapeError("transpose: tensor is not 2-d, shape " + shape_str(ta.shape));
        std::size_t n = ta.shape[0], m = ta.shape[1];
        Tensor out = Tensor::zeros({m, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) out.values[j * n + i] = ta.values[i * m + j];
        return push("transpose", std::move(out), needs(a), [this, a, n, m](const Node& nd) {
            if (!nodes_[a].needs_grad) return;
            auto& ga = grad_buf(a);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += nd.grad[j * n + i];
        });
    }

    Var gather_rows(Var a, std::vector<int> idx) {
        const Tensor& ta = val(a, "gather_rows");
        if (ta.shape.size() != 2)
            throw ShapeError("gather_rows: tensor is not 2-d, shape " + shape_str(ta.shape));
        std::size_t m = ta.shape[1];
        Tensor out = Tensor::zeros({idx.size(), m});
        for (std::size_t r = 0; r < idx.size(); ++r) {
            int src = idx[r];
            if (src < 0 || static_cast<std::size_t>(src) >= ta.shape[0])
                throw ShapeError("gather_rows: row " + std::to_string(src) + " out of range for " +
                                 shape_str(ta.shape));
            for (std::size_t c = 0; c < m; ++c)
                out.values[r * m + c] = ta.values[static_cast<std::size_t>(src) * m + c];
        }
        return push("gather_rows", std::move(out), needs(a),
                    [this, a, idx = std::move(idx), m](const Node& nd) {
            if (!nodes_[a].needs_grad) return;
            auto& ga = grad_buf(a);
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t c = 0; c < m; ++c)
                    ga[static_cast<std::size_t>(idx[r]) * m + c] += nd.grad[r * m + c];
        });
    }

    // ---- activations -------------------------------------------------------

    Var relu(Var a) {
        Tensor out = val(a, "relu");
        for (double& v : out.values) v = v > 0.0 ? v : 0.0;
        return push("relu", std::move(out), needs(a), [this, a](const Node& nd) {
            if (!nodes_[a].needs_grad) return;
            auto& ga = grad_buf(a);
            const auto& x = nodes_[a].out.values;
            for (std::size_t i = 0; i < ga.size(); ++i)
                if (x[i] > 0.0) ga[i] += nd.grad[i];
        });
    }

    Var tanh_act(Var a) {
        Tensor out = val(a, "tanh");
        for (double& v : out.values) v = std::tanh(v);
        return push("tanh", std::move(out), needs(a), [this, a](const Node& nd) {
            if (!nodes_[a].needs_grad) return;
            auto& ga = grad_buf(a);
            const auto& y = nd.out.values;
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += nd.grad[i] * (1.0 - y[i] * y[i]);
        });
    }

    // ---- reductions ---------------------------------------------------------

    Var mean_axis(Var a, int axis) {
        const Tensor& ta = val(a, "mean_axis");
        if (ta.shape.size() == 1) {
            if (axis != 0) throw ShapeError("mean_axis: axis 0 required for 1-d, got " + std::to_string(axis));
            double inv = 1.0 / static_cast<double>(ta.shape[0]);
            double s = 0.0;
            for (double v : ta.values) s += v;
            Tensor out({1}, {s * inv});
            return push("mean_axis", std::move(out), needs(a), [this, a, inv](const Node& nd) {
                accumulate_uniform(a, nd.grad[0] * inv);
            });
        }
        if (ta.shape.size() != 2 || (axis != 0 && axis != 1))
            throw ShapeError("mean_axis: unsupported axis " + std::to_string(axis) + " for shape " +
                             shape_str(ta.shape));
        std::size_t rows = ta.shape[0], cols = ta.shape[1];
        if (axis == 0) {
            double inv = 1.0 / static_cast<double>(rows);
            Tensor out = Tensor::zeros({cols});
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) out.values[c] += ta.values[r * cols + c];
            for (double& v : out.values) v *= inv;
            return push("mean_axis", std::move(out), needs(a), [this, a, rows, cols, inv](const Node& nd) {
                if (!nodes_[a].needs_grad) return;
                auto& ga = grad_buf(a);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += nd.grad[c] * inv;
            });
        }
        double inv = 1.0 / static_cast<double>(cols);
        Tensor out = Tensor::zeros({rows});
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) s += ta.values[r * cols + c];
            out.values[r] = s * inv;
        }
        return push("mean_axis", std::move(out), needs(a), [this, a, rows, cols, inv](const Node& nd) {
            if (!nodes_[a].needs_grad) return;
            auto& ga = grad_buf(a);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += nd.grad[r] * inv;
        });
    }

    // Sum of squares over every element; scalar output.
    Var l2_norm_sq(Var a) {
        const Tensor& ta = val(a, "l2_norm_sq");
        double s = 0.0;
        for (double v : ta.values) s += v * v;
        return push("l2_norm_sq", Tensor::scalar(s), needs(a), [this, a](const Node& nd) {
            if (!nodes_[a].needs_grad) return;
            auto& ga = grad_buf(a);
            const auto& x = nodes_[a].out.values;
            double g = nd.grad[0];
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 2.0 * g * x[i];
        });
    }

    // Normalizes each row to unit length; the denominator is guarded by
    // max(norm, kNormGuard) in both forward and backward, so an all-zero row
    // stays all-zero instead of producing NaN.
    Var l2_normalize_rows(Var a) {
        const Tensor& ta = val(a, "l2_normalize_rows");
        auto [rows, cols] = as_rows(ta, "l2_normalize_rows");
        Tensor out = ta;
        std::vector<double> norms(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                double v = ta.values[r * cols + c];
                s += v * v;
            }
            norms[r] = std::sqrt(s);
            double denom = std::max(norms[r], kNormGuard);
            for (std::size_t c = 0; c < cols; ++c) out.values[r * cols + c] /= denom;
        }
        return push("l2_normalize_rows", std::move(out), needs(a),
                    [this, a, rows, cols, norms = std::move(norms)](const Node& nd) {
            if (!nodes_[a].needs_grad) return;
            auto& ga = grad_buf(a);
            for (std::size_t r = 0; r < rows; ++r) {
                double denom = std::max(norms[r], kNormGuard);
                const double* y = nd.out.values.data() + r * cols;
                const double* g = nd.grad.data() + r * cols;
                double* gx = ga.data() + r * cols;
                if (norms[r] > kNormGuard) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
                    for (std::size_t c = 0; c < cols; ++c) gx[c] += (g[c] - dot * y[c]) / denom;
                } else {
                    // Guard active: forward was x / kNormGuard, a constant scale.
                    for (std::size_t c = 0; c < cols; ++c) gx[c] += g[c] / denom;
                }
            }
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw ShapeError("concat_cols: no inputs");
        const Tensor& first = val(parts[0], "concat_cols");
        auto [rows, c0] = as_rows(first, "concat_cols");
        (void)c0;
        std::size_t total = 0;
        bool any_grad = false;
        std::vector<std::size_t> widths;
        for (Var p : parts) {
            const Tensor& tp = val(p, "concat_cols");
            auto [pr, pc] = as_rows(tp, "concat_cols");
            if (pr != rows)
                throw ShapeError("concat_cols: shape mismatch " + shape_str(first.shape) + " vs " +
                                 shape_str(tp.shape));
            widths.push_back(pc);
            total += pc;
            any_grad = any_grad || needs(p);
        }
        bool one_d = first.shape.size() == 1;
        Tensor out = one_d ? Tensor::zeros({total}) : Tensor::zeros({rows, total});
        std::size_t off = 0;
        for (std::size_t pi = 0; pi < parts.size(); ++pi) {
            const Tensor& tp = nodes_[parts[pi]].out;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < widths[pi]; ++c)
                    out.values[r * total + off + c] = tp.values[r * widths[pi] + c];
            off += widths[pi];
        }
        return push("concat_cols", std::move(out), any_grad,
                    [this, parts, widths = std::move(widths), rows, total](const Node& nd) {
            std::size_t off = 0;
            for (std::size_t pi = 0; pi < parts.size(); ++pi) {
                if (nodes_[parts[pi]].needs_grad) {
                    auto& gp = grad_buf(parts[pi]);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < widths[pi]; ++c)
                            gp[r * widths[pi] + c] += nd.grad[r * total + off + c];
                }
                off += widths[pi];
            }
        });
    }

    // Per-row log-sum-exp; a 1-d input is treated as a single row.
    Var logsumexp_rows(Var a) {
        const Tensor& ta = val(a, "logsumexp_rows");
        auto [rows, cols] = as_rows(ta, "logsumexp_rows");
        Tensor out = Tensor::zeros({rows});
        for (std::size_t r = 0; r < rows; ++r)
            out.values[r] = k_logsumexp(ta.values.data() + r * cols, cols);
        return push("logsumexp_rows", std::move(out), needs(a),
                    [this, a, rows, cols](const Node& nd) {
            if (!nodes_[a].needs_grad) return;
            auto& ga = grad_buf(a);
            const auto& x = nodes_[a].out.values;
            for (std::size_t r = 0; r < rows; ++r) {
                double lse = nd.out.values[r];
                double g = nd.grad[r];
                for (std::size_t c = 0; c < cols; ++c)
                    ga[r * cols + c] += g * std::exp(x[r * cols + c] - lse);
            }
        });
    }

    // ---- fused losses --------------------------------------------------------
    // The loss path never materializes softmax probabilities; everything runs
    // through max-subtracted log-sum-exp, so confident logits cannot overflow.

    // Mean over rows of lse(row) - row[label].
    Var softmax_cross_entropy(Var logits, std::vector<int> labels) {
        const Tensor& tl = val(logits, "softmax_cross_entropy");
        auto [rows, cols] = as_rows(tl, "softmax_cross_entropy");
        if (labels.size() != rows)
            throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                             " labels for " + std::to_string(rows) + " rows");
        double total = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            int lbl = labels[r];
            if (lbl < 0 || static_cast<std::size_t>(lbl) >= cols)
                throw ShapeError("softmax_cross_entropy: label " + std::to_string(lbl) +
                                 " out of range for " + std::to_string(cols) + " classes");
            total += k_logsumexp(tl.values.data() + r * cols, cols) -
                     tl.values[r * cols + static_cast<std::size_t>(lbl)];
        }
        double inv = 1.0 / static_cast<double>(rows);
        return push("softmax_cross_entropy", Tensor::scalar(total * inv), needs(logits),
                    [this, logits, labels = std::move(labels), rows, cols, inv](const Node& nd) {
            if (!nodes_[logits].needs_grad) return;
            auto& gl = grad_buf(logits);
            const auto& x = nodes_[logits].out.values;
            double g = nd.grad[0] * inv;
            for (std::size_t r = 0; r < rows; ++r) {
                double lse = k_logsumexp(x.data() + r * cols, cols);
                for (std::size_t c = 0; c < cols; ++c) {
                    double p = std::exp(x[r * cols + c] - lse);
                    double y = (static_cast<std::size_t>(labels[r]) == c) ? 1.0 : 0.0;
                    gl[r * cols + c] += g * (p - y);
                }
            }
        });
    }

    // Mean over rows of lse(row) - sum_i target[i] * row[i]; targets are a
    // constant distribution per row (each row of `target` sums to 1).
    Var soft_cross_entropy(Var logits, Tensor target) {
        const Tensor& tl = val(logits, "soft_cross_entropy");
        auto [rows, cols] = as_rows(tl, "soft_cross_entropy");
        if (target.shape != tl.shape)
            throw ShapeError("soft_cross_entropy: shape mismatch " + shape_str(tl.shape) + " vs " +
                             shape_str(target.shape));
        double total = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c)
                dot += target.values[r * cols + c] * tl.values[r * cols + c];
            total += k_logsumexp(tl.values.data() + r * cols, cols) - dot;
        }
        double inv = 1.0 / static_cast<double>(rows);
        return push("soft_cross_entropy", Tensor::scalar(total * inv), needs(logits),
                    [this, logits, target = std::move(target), rows, cols, inv](const Node& nd) {
            if (!nodes_[logits].needs_grad) return;
            auto& gl = grad_buf(logits);
            const auto& x = nodes_[logits].out.values;
            double g = nd.grad[0] * inv;
            for (std::size_t r = 0; r < rows; ++r) {
                double lse = k_logsumexp(x.data() + r * cols, cols);
                for (std::size_t c = 0; c < cols; ++c) {
                    double p = std::exp(x[r * cols + c] - lse);
                    gl[r * cols + c] += g * (p - target.values[r * cols + c]);
                }
            }
        });
    }

    // Contrastive row loss: mean over rows of
    //   -log( sum_{i in positives(r)} softmax(row)_i )
    // computed stably as lse(row) - lse(row[positives]). With a single
    // positive per row this is exactly softmax cross-entropy.
    Var info_nce_rows(Var logits, std::vector<std::vector<int>> positives) {
        const Tensor& tl = val(logits, "info_nce_rows");
        auto [rows, cols] = as_rows(tl, "info_nce_rows");
        if (positives.size() != rows)
            throw ShapeError("info_nce_rows: " + std::to_string(positives.size()) +
                             " positive sets for " + std::to_string(rows) + " rows");
        double total = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            const auto& pos = positives[r];
            if (pos.empty())
                throw ShapeError("info_nce_rows: empty positive set at row " + std::to_string(r));
            std::vector<double> posvals;
            posvals.reserve(pos.size());
            for (int c : pos) {
                if (c < 0 || static_cast<std::size_t>(c) >= cols)
                    throw ShapeError("info_nce_rows: positive " + std::to_string(c) +
                                     " out of range for " + std::to_string(cols) + " columns");
                posvals.push_back(tl.values[r * cols + static_cast<std::size_t>(c)]);
            }
            total += k_logsumexp(tl.values.data() + r * cols, cols) -
                     k_logsumexp(posvals.data(), posvals.size());
        }
        double inv = 1.0 / static_cast<double>(rows);
        return push("info_nce_rows", Tensor::scalar(total * inv), needs(logits),
                    [this, logits, positives = std::move(positives), rows, cols, inv](const Node& nd) {
            if (!nodes_[logits].needs_grad) return;
            auto& gl = grad_buf(logits);
            const auto& x = nodes_[logits].out.values;
            double g = nd.grad[0] * inv;
            for (std::size_t r = 0; r < rows; ++r) {
                double lse = k_logsumexp(x.data() + r * cols, cols);
                std::vector<double> posvals;
                posvals.reserve(positives[r].size());
                for (int c : positives[r]) posvals.push_back(x[r * cols + static_cast<std::size_t>(c)]);
                double lse_pos = k_logsumexp(posvals.data(), posvals.size());
                for (std::size_t c = 0; c < cols; ++c)
                    gl[r * cols + c] += g * std::exp(x[r * cols + c] - lse);
                for (int c : positives[r])
                    gl[r * cols + static_cast<std::size_t>(c)] -=
                        g * std::exp(x[r * cols + static_cast<std::size_t>(c)] - lse_pos);
            }
        });
    }

    // Pairwise cosine similarities: rows of a vs rows of b. Composite of
    // row normalization and matmul_nt, so gradients come for free.
    Var cosine_similarity(Var a, Var b) {
        return matmul_nt(l2_normalize_rows(a), l2_normalize_rows(b));
    }

    // ---- backward ------------------------------------------------------------

    // Propagates d loss / d node for every node reachable from `loss` and
    // returns the gradients of all requires-grad leaves. Also fills the
    // stored tensors' grad buffers. One traversal per tape.
    GradMap backward(Var loss) {
        if (backward_done_) throw TensorError("backward: tape already traversed; rebuild the graph");
        const Node& ln = node(loss, "backward");
        if (!ln.out.is_scalar())
            throw ShapeError("backward: loss must be scalar, got shape " + shape_str(ln.out.shape));
        backward_done_ = true;
        grad_buf(loss).assign(1, 1.0);
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.needs_grad || n.grad.empty() || !n.back) continue;
            n.back(n);
        }
        GradMap out;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            Node& n = nodes_[i];
            if (!n.is_leaf || !n.out.requires_grad) continue;
            if (n.grad.empty()) n.grad.assign(n.out.size(), 0.0);
            for (double g : n.grad)
                if (!std::isfinite(g))
                    throw NumericError("backward: non-finite gradient at leaf node " + std::to_string(i));
            n.out.grad = n.grad;
            out.emplace(static_cast<Var>(i), n.grad);
        }
        return out;
    }

private:
    struct Node {
        const char* op;
        Tensor out;
        std::vector<double> grad;
        bool needs_grad;
        bool is_leaf;
        std::function<void(const Node&)> back;
    };

    std::vector<Node> nodes_;
    bool backward_done_ = false;

    Var node_index(Var v, const char* ctx) const {
        if (v < 0 || static_cast<std::size_t>(v) >= nodes_.size())
            throw TensorError(std::string(ctx) + ": node " + std::to_string(v) + " is not on this tape");
        return v;
    }

    const Node& node(Var v, const char* ctx) const {
        return nodes_[static_cast<std::size_t>(node_index(v, ctx))];
    }

    const Tensor& val(Var v, const char* ctx) const { return node(v, ctx).out; }
    bool needs(Var v) const { return nodes_[static_cast<std::size_t>(v)].needs_grad; }

    static void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
        if (a.shape != b.shape)
            throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                             shape_str(b.shape));
    }

    // (rows, cols) view: 1-d tensors are one row.
    static std::pair<std::size_t, std::size_t> as_rows(const Tensor& t, const char* op) {
        if (t.shape.size() == 1) return {1, t.shape[0]};
        if (t.shape.size() == 2) return {t.shape[0], t.shape[1]};
        throw ShapeError(std::string(op) + ": expected 1-d or 2-d tensor, got " + shape_str(t.shape));
    }

    std::vector<double>& grad_buf(Var v) {
        Node& n = nodes_[static_cast<std::size_t>(v)];
        if (n.grad.empty()) n.grad.assign(n.out.size(), 0.0);
        return n.grad;
    }

    void accumulate(Var v, const std::vector<double>& g) {
        if (!nodes_[static_cast<std::size_t>(v)].needs_grad) return;
        auto& gv = grad_buf(v);
        for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += g[i];
    }

    void accumulate_scaled(Var v, const std::vector<double>& g, double c) {
        if (!nodes_[static_cast<std::size_t>(v)].needs_grad) return;
        auto& gv = grad_buf(v);
        for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += c * g[i];
    }

    void accumulate_uniform(Var v, double g) {
        if (!nodes_[static_cast<std::size_t>(v)].needs_grad) return;
        auto& gv = grad_buf(v);
        for (double& x : gv) x += g;
    }

    Var push(const char* op, Tensor out, bool needs_grad, std::function<void(const Node&)> back) {
        if (backward_done_)
            throw TensorError(std::string(op) + ": tape already traversed; rebuild the graph");
        if (!out.all_finite())
            throw NumericError(std::string(op) + ": non-finite output");
        Node n;
        n.op = op;
        n.out = std::move(out);
        n.needs_grad = needs_grad;
        n.is_leaf = !back;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<Var>(nodes_.size() - 1);
    }
};

} // namespace forgetlab
