#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gpo/tensor.hpp"

namespace gpo {

// Reverse-mode autodiff over a linear tape. Nodes are appended in
// execution order, which is a topological order by construction, so the
// backward pass is a single reverse sweep. Gradients accumulate with +=
// at fan-out. All reductions run left to right; identical inputs give
// bit-identical outputs.
template <typename T>
class Tape {
public:
    // out is the id of the node whose backward is running
    using BackwardFn = std::function<void(Tape&, int out)>;

    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // allocated on first touch
        bool requires_grad = false;
        BackwardFn backward;
    };

    int leaf(Tensor<T> value, bool requires_grad = false) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    const Tensor<T>& value(int id) const { return nodes_[id].value; }

    Tensor<T>& grad(int id) {
        Node& n = nodes_[id];
        if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.shape, T(0));
        return n.grad;
    }

    bool requires_grad(int id) const { return nodes_[id].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse order.
    // Nodes whose gradient was never touched are dead branches and skipped.
    void backward(int loss_id) {
        if (loss_id < 0 || loss_id >= static_cast<int>(nodes_.size()))
            throw ContractError("backward: loss node is not on the tape");
        if (nodes_[loss_id].value.numel() != 1)
            throw ContractError("backward: loss must be scalar, got shape " +
                                shape_str(nodes_[loss_id].value.shape));
        grad(loss_id).data[0] = T(1);
        for (int i = loss_id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.requires_grad && n.backward && !n.grad.data.empty()) n.backward(*this, i);
        }
    }

    // --- ops ------------------------------------------------------------

    int matmul(int a, int b) {
        const Tensor<T>& A = value(a);
        const Tensor<T>& B = value(b);
        if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
            throw DimensionError("matmul: incompatible shapes " + shape_str(A.shape) + " and " +
                                 shape_str(B.shape));
        const std::size_t M = A.shape[0], K = A.shape[1], N = B.shape[1];
        Tensor<T> C({M, N}, T(0));
        matmul_raw(A.data.data(), B.data.data(), C.data.data(), M, K, N);
        return emit(std::move(C), {a, b}, [a, b, M, K, N](Tape& t, int out) {
            const Tensor<T>& dC = t.grad(out);
            if (t.requires_grad(a)) {
                // dA += dC * B^T
                Tensor<T>& dA = t.grad(a);
                const Tensor<T>& Bv = t.value(b);
                for (std::size_t i = 0; i < M; ++i)
                    for (std::size_t k = 0; k < K; ++k) {
                        T acc = T(0);
                        for (std::size_t j = 0; j < N; ++j) acc += dC.data[i * N + j] * Bv.data[k * N + j];
                        dA.data[i * K + k] += acc;
                    }
            }
            if (t.requires_grad(b)) {
                // dB += A^T * dC
                Tensor<T>& dB = t.grad(b);
                const Tensor<T>& Av = t.value(a);
                for (std::size_t k = 0; k < K; ++k)
                    for (std::size_t j = 0; j < N; ++j) {
                        T acc = T(0);
                        for (std::size_t i = 0; i < M; ++i) acc += Av.data[i * K + k] * dC.data[i * N + j];
                        dB.data[k * N + j] += acc;
                    }
            }
        });
    }

    int add(int a, int b) {
        const Tensor<T>& A = value(a);
        const Tensor<T>& B = value(b);
        if (!A.same_shape(B))
            throw DimensionError("add: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
        Tensor<T> C(A.shape);
        for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] = A.data[i] + B.data[i];
        return emit(std::move(C), {a, b}, [a, b](Tape& t, int out) {
            const Tensor<T>& g = t.grad(out);
            if (t.requires_grad(a)) {
                Tensor<T>& ga = t.grad(a);
                for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
            }
            if (t.requires_grad(b)) {
                Tensor<T>& gb = t.grad(b);
                for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i];
            }
        });
    }

    int mul(int a, int b) {
        const Tensor<T>& A = value(a);
        const Tensor<T>& B = value(b);
        if (!A.same_shape(B))
            throw DimensionError("mul: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
        Tensor<T> C(A.shape);
        for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] = A.data[i] * B.data[i];
        return emit(std::move(C), {a, b}, [a, b](Tape& t, int out) {
            const Tensor<T>& g = t.grad(out);
            if (t.requires_grad(a)) {
                Tensor<T>& ga = t.grad(a);
                const Tensor<T>& Bv = t.value(b);
                for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * Bv.data[i];
            }
            if (t.requires_grad(b)) {
                Tensor<T>& gb = t.grad(b);
                const Tensor<T>& Av = t.value(a);
                for (std::size_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * Av.data[i];
            }
        });
    }

    int scale(int a, T c) {
        const Tensor<T>& A = value(a);
        Tensor<T> C(A.shape);
        for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] = A.data[i] * c;
        return emit(std::move(C), {a}, [a, c](Tape& t, int out) {
            if (!t.requires_grad(a)) return;
            const Tensor<T>& g = t.grad(out);
            Tensor<T>& ga = t.grad(a);
            for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * c;
        });
    }

    // x: R x D, bias: D (broadcast over rows)
    int bias_add(int x, int bias) {
        const Tensor<T>& X = value(x);
        const Tensor<T>& B = value(bias);
        if (X.rank() != 2 || B.rank() != 1 || X.shape[1] != B.shape[0])
            throw DimensionError("bias_add: shapes " + shape_str(X.shape) + " and " + shape_str(B.shape));
        const std::size_t R = X.shape[0], D = X.shape[1];
        Tensor<T> C({R, D});
        for (std::size_t i = 0; i < R; ++i)
            for (std::size_t j = 0; j < D; ++j) C.at(i, j) = X.at(i, j) + B.at(j);
        return emit(std::move(C), {x, bias}, [x, bias, R, D](Tape& t, int out) {
            const Tensor<T>& g = t.grad(out);
            if (t.requires_grad(x)) {
                Tensor<T>& gx = t.grad(x);
                for (std::size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
            }
            if (t.requires_grad(bias)) {
                Tensor<T>& gb = t.grad(bias);
                for (std::size_t j = 0; j < D; ++j) {
                    T acc = T(0);
                    for (std::size_t i = 0; i < R; ++i) acc += g.data[i * D + j];
                    gb.data[j] += acc;
                }
            }
        });
    }

    int sum(int a) {
        const Tensor<T>& A = value(a);
        T acc = T(0);
        for (std::size_t i = 0; i < A.numel(); ++i) acc += A.data[i];
        return emit(Tensor<T>::scalar(acc), {a}, [a](Tape& t, int out) {
            if (!t.requires_grad(a)) return;
            const T g = t.grad(out).data[0];
            Tensor<T>& ga = t.grad(a);
            for (std::size_t i = 0; i < ga.numel(); ++i) ga.data[i] += g;
        });
    }

    // GELU, tanh approximation
    int gelu(int a) {
        const Tensor<T>& A = value(a);
        Tensor<T> C(A.shape);
        for (std::size_t i = 0; i < C.numel(); ++i) C.data[i] = gelu_fwd(A.data[i]);
        return emit(std::move(C), {a}, [a](Tape& t, int out) {
            if (!t.requires_grad(a)) return;
            const Tensor<T>& g = t.grad(out);
            const Tensor<T>& Av = t.value(a);
            Tensor<T>& ga = t.grad(a);
            for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * gelu_bwd(Av.data[i]);
        });
    }

    // max-subtracted softmax over slices along `axis`
    int softmax(int a, std::size_t axis) {
        const Tensor<T>& A = value(a);
        if (axis >= A.rank())
            throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                                 shape_str(A.shape));
        Tensor<T> C(A.shape);
        for_each_slice(A.shape, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
            softmax_slice(A.data.data(), C.data.data(), base, stride, len);
        });
        return emit(std::move(C), {a}, [a, axis](Tape& t, int out) {
            if (!t.requires_grad(a)) return;
            const Tensor<T>& y = t.value(out);
            const Tensor<T>& g = t.grad(out);
            Tensor<T>& ga = t.grad(a);
            for_each_slice(y.shape, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
                T dot = T(0);
                for (std::size_t i = 0; i < len; ++i)
                    dot += y.data[base + i * stride] * g.data[base + i * stride];
                for (std::size_t i = 0; i < len; ++i) {
                    const std::size_t idx = base + i * stride;
                    ga.data[idx] += y.data[idx] * (g.data[idx] - dot);
                }
            });
        });
    }

    // x: R x D, gamma/beta: D. Per-row normalization with biased variance.
    int layer_norm(int x, int gamma, int beta, T eps) {
        const Tensor<T>& X = value(x);
        const Tensor<T>& G = value(gamma);
        const Tensor<T>& Bt = value(beta);
        if (X.rank() != 2 || G.rank() != 1 || Bt.rank() != 1 || X.shape[1] != G.shape[0] ||
            X.shape[1] != Bt.shape[0])
            throw DimensionError("layer_norm: shapes " + shape_str(X.shape) + ", " + shape_str(G.shape) +
                                 ", " + shape_str(Bt.shape));
        const std::size_t R = X.shape[0], D = X.shape[1];
        Tensor<T> out({R, D});
        Tensor<T> xhat({R, D});
        Tensor<T> inv_std({R});
        for (std::size_t i = 0; i < R; ++i) {
            T mean = T(0);
            for (std::size_t j = 0; j < D; ++j) mean += X.at(i, j);
            mean /= static_cast<T>(D);
            T var = T(0);
            for (std::size_t j = 0; j < D; ++j) {
                const T d = X.at(i, j) - mean;
                var += d * d;
            }
            var /= static_cast<T>(D);
            const T is = T(1) / std::sqrt(var + eps);
            inv_std.at(i) = is;
            for (std::size_t j = 0; j < D; ++j) {
                const T xh = (X.at(i, j) - mean) * is;
                xhat.at(i, j) = xh;
                out.at(i, j) = xh * G.at(j) + Bt.at(j);
            }
        }
        return emit(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, R, D, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)](Tape& t, int out) {
                        const Tensor<T>& g = t.grad(out);
                        const Tensor<T>& G = t.value(gamma);
                        if (t.requires_grad(gamma)) {
                            Tensor<T>& gg = t.grad(gamma);
                            for (std::size_t j = 0; j < D; ++j) {
                                T acc = T(0);
                                for (std::size_t i = 0; i < R; ++i)
                                    acc += g.data[i * D + j] * xhat.data[i * D + j];
                                gg.data[j] += acc;
                            }
                        }
                        if (t.requires_grad(beta)) {
                            Tensor<T>& gb = t.grad(beta);
                            for (std::size_t j = 0; j < D; ++j) {
                                T acc = T(0);
                                for (std::size_t i = 0; i < R; ++i) acc += g.data[i * D + j];
                                gb.data[j] += acc;
                            }
                        }
                        if (t.requires_grad(x)) {
                            Tensor<T>& gx = t.grad(x);
                            for (std::size_t i = 0; i < R; ++i) {
                                T mean_gy = T(0), mean_gyx = T(0);
                                for (std::size_t j = 0; j < D; ++j) {
                                    const T gy = g.data[i * D + j] * G.data[j];
                                    mean_gy += gy;
                                    mean_gyx += gy * xhat.data[i * D + j];
                                }
                                mean_gy /= static_cast<T>(D);
                                mean_gyx /= static_cast<T>(D);
                                const T is = inv_std.data[i];
                                for (std::size_t j = 0; j < D; ++j) {
                                    const T gy = g.data[i * D + j] * G.data[j];
                                    gx.data[i * D + j] +=
                                        (gy - mean_gy - xhat.data[i * D + j] * mean_gyx) * is;
                                }
                            }
                        }
                    });
    }

    // q, k, v: H x N x Dh. mask: N x N, mask(i,j) = token i may attend to j.
    // Disallowed logits get -1e9 before the max-subtracted softmax; weights
    // are then renormalized over the allowed positions so masked entries are
    // exactly zero.
    int masked_attention(int q, int k, int v, const BoolMatrix& mask) {
        const Tensor<T>& Q = value(q);
        const Tensor<T>& K = value(k);
        const Tensor<T>& V = value(v);
        if (Q.rank() != 3 || !Q.same_shape(K) || !Q.same_shape(V))
            throw DimensionError("masked_attention: q/k/v must share shape HxNxDh, got " +
                                 shape_str(Q.shape) + ", " + shape_str(K.shape) + ", " +
                                 shape_str(V.shape));
        const std::size_t H = Q.shape[0], N = Q.shape[1], Dh = Q.shape[2];
        if (mask.rows != N || mask.cols != N)
            throw DimensionError("masked_attention: mask must be NxN with N=" + std::to_string(N));
        for (std::size_t i = 0; i < N; ++i) {
            bool any = false;
            for (std::size_t j = 0; j < N; ++j) any = any || mask.at(i, j);
            if (!any)
                throw ContractError("masked_attention: mask row " + std::to_string(i) +
                                    " allows no positions");
        }
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(Dh));
        Tensor<T> out({H, N, Dh});
        Tensor<T> weights({H, N, N}, T(0));
        std::vector<T> logits(N);
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < N; ++i) {
                for (std::size_t j = 0; j < N; ++j) {
                    T dot = T(0);
                    for (std::size_t d = 0; d < Dh; ++d) dot += Q.at(h, i, d) * K.at(h, j, d);
                    logits[j] = dot * inv_sqrt + (mask.at(i, j) ? T(0) : T(-1e9));
                }
                T mx = logits[0];
                for (std::size_t j = 1; j < N; ++j) mx = std::max(mx, logits[j]);
                T denom = T(0);
                for (std::size_t j = 0; j < N; ++j) {
                    if (!mask.at(i, j)) continue;
                    const T e = std::exp(logits[j] - mx);
                    weights.at(h, i, j) = e;
                    denom += e;
                }
                for (std::size_t j = 0; j < N; ++j)
                    if (mask.at(i, j)) weights.at(h, i, j) /= denom;
                for (std::size_t d = 0; d < Dh; ++d) {
                    T acc = T(0);
                    for (std::size_t j = 0; j < N; ++j) acc += weights.at(h, i, j) * V.at(h, j, d);
                    out.at(h, i, d) = acc;
                }
            }
        }
        const bool needs_grad = requires_grad(q) || requires_grad(k) || requires_grad(v);
        BackwardFn back;
        if (needs_grad) {
            back = [q, k, v, H, N, Dh, inv_sqrt, weights = std::move(weights)](Tape& t, int out) {
                const Tensor<T>& g = t.grad(out);
                const Tensor<T>& Q = t.value(q);
                const Tensor<T>& K = t.value(k);
                const Tensor<T>& V = t.value(v);
                Tensor<T>* gq = t.requires_grad(q) ? &t.grad(q) : nullptr;
                Tensor<T>* gk = t.requires_grad(k) ? &t.grad(k) : nullptr;
                Tensor<T>* gv = t.requires_grad(v) ? &t.grad(v) : nullptr;
                std::vector<T> dw(N), dl(N);
                for (std::size_t h = 0; h < H; ++h) {
                    for (std::size_t i = 0; i < N; ++i) {
                        for (std::size_t j = 0; j < N; ++j) {
                            T acc = T(0);
                            for (std::size_t d = 0; d < Dh; ++d) acc += g.at(h, i, d) * V.at(h, j, d);
                            dw[j] = acc;
                        }
                        // softmax jacobian; masked weights are exactly 0 so they drop out
                        T dot = T(0);
                        for (std::size_t j = 0; j < N; ++j) dot += weights.at(h, i, j) * dw[j];
                        for (std::size_t j = 0; j < N; ++j)
                            dl[j] = weights.at(h, i, j) * (dw[j] - dot);
                        if (gq) {
                            for (std::size_t d = 0; d < Dh; ++d) {
                                T acc = T(0);
                                for (std::size_t j = 0; j < N; ++j) acc += dl[j] * K.at(h, j, d);
                                gq->at(h, i, d) += acc * inv_sqrt;
                            }
                        }
                        if (gk) {
                            for (std::size_t j = 0; j < N; ++j) {
                                const T c = dl[j] * inv_sqrt;
                                if (c == T(0)) continue;
                                for (std::size_t d = 0; d < Dh; ++d) gk->at(h, j, d) += c * Q.at(h, i, d);
                            }
                        }
                        if (gv) {
                            for (std::size_t j = 0; j < N; ++j) {
                                const T w = weights.at(h, i, j);
                                if (w == T(0)) continue;
                                for (std::size_t d = 0; d < Dh; ++d) gv->at(h, j, d) += w * g.at(h, i, d);
                            }
                        }
                    }
                }
            };
        }
        return emit_node(std::move(out), needs_grad, std::move(back));
    }

    // N x (H*Dh) -> H x N x Dh
    int split_heads(int x, std::size_t heads) {
        const Tensor<T>& X = value(x);
        if (X.rank() != 2 || X.shape[1] % heads != 0)
            throw DimensionError("split_heads: width " + shape_str(X.shape) + " not divisible into " +
                                 std::to_string(heads) + " heads");
        const std::size_t N = X.shape[0], Dh = X.shape[1] / heads;
        Tensor<T> out({heads, N, Dh});
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t d = 0; d < Dh; ++d) out.at(h, i, d) = X.at(i, h * Dh + d);
        return emit(std::move(out), {x}, [x, heads, N, Dh](Tape& t, int out) {
            if (!t.requires_grad(x)) return;
            const Tensor<T>& g = t.grad(out);
            Tensor<T>& gx = t.grad(x);
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t i = 0; i < N; ++i)
                    for (std::size_t d = 0; d < Dh; ++d) gx.at(i, h * Dh + d) += g.at(h, i, d);
        });
    }

    // H x N x Dh -> N x (H*Dh)
    int merge_heads(int x) {
        const Tensor<T>& X = value(x);
        if (X.rank() != 3) throw DimensionError("merge_heads: expected HxNxDh, got " + shape_str(X.shape));
        const std::size_t H = X.shape[0], N = X.shape[1], Dh = X.shape[2];
        Tensor<T> out({N, H * Dh});
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t d = 0; d < Dh; ++d) out.at(i, h * Dh + d) = X.at(h, i, d);
        return emit(std::move(out), {x}, [x, H, N, Dh](Tape& t, int out) {
            if (!t.requires_grad(x)) return;
            const Tensor<T>& g = t.grad(out);
            Tensor<T>& gx = t.grad(x);
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t i = 0; i < N; ++i)
                    for (std::size_t d = 0; d < Dh; ++d) gx.at(h, i, d) += g.at(i, h * Dh + d);
        });
    }

    // rows [begin, end) of a 2D tensor
    int slice_rows(int x, std::size_t begin, std::size_t end) {
        const Tensor<T>& X = value(x);
        if (X.rank() != 2 || begin >= end || end > X.shape[0])
            throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " +
                                 std::to_string(end) + ") invalid for " + shape_str(X.shape));
        const std::size_t D = X.shape[1], R = end - begin;
        Tensor<T> out({R, D});
        for (std::size_t i = 0; i < R; ++i)
            for (std::size_t j = 0; j < D; ++j) out.at(i, j) = X.at(begin + i, j);
        return emit(std::move(out), {x}, [x, begin, R, D](Tape& t, int out) {
            if (!t.requires_grad(x)) return;
            const Tensor<T>& g = t.grad(out);
            Tensor<T>& gx = t.grad(x);
            for (std::size_t i = 0; i < R; ++i)
                for (std::size_t j = 0; j < D; ++j) gx.at(begin + i, j) += g.at(i, j);
        });
    }

    int reshape(int x, std::vector<std::size_t> new_shape) {
        const Tensor<T>& X = value(x);
        if (Tensor<T>::numel_of(new_shape) != X.numel())
            throw DimensionError("reshape: " + shape_str(X.shape) + " -> " + shape_str(new_shape) +
                                 " changes element count");
        Tensor<T> out(std::move(new_shape), X.data);
        return emit(std::move(out), {x}, [x](Tape& t, int out) {
            if (!t.requires_grad(x)) return;
            const Tensor<T>& g = t.grad(out);
            Tensor<T>& gx = t.grad(x);
            for (std::size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i];
        });
    }

    // Mean per-block cross-entropy (natural log) between target distributions
    // and the per-block softmax of scores. scores/targets are 1D; blocks
    // partition their index range.
    int grouped_cross_entropy(int scores, const std::vector<std::pair<std::size_t, std::size_t>>& blocks,
                              int targets) {
        const Tensor<T>& S = value(scores);
        const Tensor<T>& Y = value(targets);
        if (S.rank() != 1 || Y.rank() != 1 || S.numel() != Y.numel())
            throw DimensionError("grouped_cross_entropy: scores " + shape_str(S.shape) + " vs targets " +
                                 shape_str(Y.shape));
        validate_blocks(blocks, S.numel());
        for (const auto& [b, e] : blocks) {
            T s = T(0);
            for (std::size_t i = b; i < e; ++i) s += Y.at(i);
            if (std::abs(static_cast<double>(s) - 1.0) > 1e-6)
                throw ValidationError("grouped_cross_entropy: target slice [" + std::to_string(b) + ", " +
                                      std::to_string(e) + ") sums to " + std::to_string(double(s)));
        }
        const std::size_t B = blocks.size();
        Tensor<T> probs({S.numel()});
        T loss = T(0);
        for (const auto& [b, e] : blocks) {
            softmax_slice(S.data.data(), probs.data.data(), b, 1, e - b);
            T block_loss = T(0);
            for (std::size_t i = b; i < e; ++i) block_loss -= Y.at(i) * std::log(probs.at(i));
            loss += block_loss;
        }
        loss /= static_cast<T>(B);
        return emit(Tensor<T>::scalar(loss), {scores, targets},
                    [scores, targets, B, blocks, probs = std::move(probs)](Tape& t, int out) {
                        if (!t.requires_grad(scores)) return;
                        const T g = t.grad(out).data[0];
                        const Tensor<T>& Y = t.value(targets);
                        Tensor<T>& gs = t.grad(scores);
                        const T inv_b = T(1) / static_cast<T>(B);
                        for (const auto& [b, e] : blocks)
                            for (std::size_t i = b; i < e; ++i)
                                gs.at(i) += g * inv_b * (probs.at(i) - Y.at(i));
                    });
    }

    // --- helpers shared with callers -------------------------------------

    static void validate_blocks(const std::vector<std::pair<std::size_t, std::size_t>>& blocks,
                                std::size_t n) {
        std::size_t cursor = 0;
        for (const auto& [b, e] : blocks) {
            if (b != cursor || e <= b)
                throw ValidationError("blocks must partition [0, " + std::to_string(n) + ") contiguously");
            cursor = e;
        }
        if (cursor != n) throw ValidationError("blocks do not cover all " + std::to_string(n) + " scores");
    }

    static void matmul_raw(const T* A, const T* B, T* C, std::size_t M, std::size_t K, std::size_t N) {
        // ikj order: streams rows of B, keeps the per-element accumulation order fixed
        for (std::size_t i = 0; i < M; ++i) {
            T* Ci = C + i * N;
            for (std::size_t k = 0; k < K; ++k) {
                const T a = A[i * K + k];
                const T* Bk = B + k * N;
                for (std::size_t j = 0; j < N; ++j) Ci[j] += a * Bk[j];
            }
        }
    }

    static T gelu_fwd(T x) {
        const T c = T(0.7978845608028654);  // sqrt(2/pi)
        const T u = c * (x + T(0.044715) * x * x * x);
        return T(0.5) * x * (T(1) + std::tanh(u));
    }

    static T gelu_bwd(T x) {
        const T c = T(0.7978845608028654);
        const T u = c * (x + T(0.044715) * x * x * x);
        const T th = std::tanh(u);
        const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
        return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
    }

private:
    // iterate over 1D slices along `axis` of a row-major tensor
    template <typename F>
    static void for_each_slice(const std::vector<std::size_t>& shape, std::size_t axis, F&& f) {
        std::size_t stride = 1;
        for (std::size_t d = axis + 1; d < shape.size(); ++d) stride *= shape[d];
        const std::size_t len = shape[axis];
        std::size_t outer = 1;
        for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < stride; ++in) f(o * len * stride + in, stride, len);
    }

    static void softmax_slice(const T* in, T* out, std::size_t base, std::size_t stride, std::size_t len) {
        T mx = in[base];
        for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, in[base + i * stride]);
        T denom = T(0);
        for (std::size_t i = 0; i < len; ++i) {
            const T e = std::exp(in[base + i * stride] - mx);
            out[base + i * stride] = e;
            denom += e;
        }
        for (std::size_t i = 0; i < len; ++i) out[base + i * stride] /= denom;
    }

    int emit(Tensor<T> value, std::initializer_list<int> inputs, BackwardFn back) {
        bool req = false;
        for (int i : inputs) req = req || nodes_[i].requires_grad;
        return emit_node(std::move(value), req, std::move(back));
    }

    int emit_node(Tensor<T> value, bool req, BackwardFn back) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = req;
        if (req) n.backward = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::vector<Node> nodes_;
};

}  // namespace gpo
