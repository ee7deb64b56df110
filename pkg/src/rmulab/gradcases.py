"""Finite-difference check cases for every differentiable op and for the full
adaptive-RMU objective with respect to an MLP down-projection weight.

Each case contracts the op output against fixed random weights so gradients
are O(1) and every coordinate is exercised.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, finite_diff_check


def _proj(rng, shape):
    return rng.normal(size=shape)


def op_cases(seed: int) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """name -> (scalar function of one tensor, point at which to check)."""
    rng = np.random.default_rng(seed)
    n = lambda *s: rng.normal(size=s)  # noqa: E731
    A, B, C = n(3, 4), n(4, 5), n(2, 3, 4)
    w35, w34 = _proj(rng, (3, 5)), _proj(rng, (3, 4))
    bias4 = n(4)
    q, k = n(2, 5, 3), n(2, 5, 3)
    # masked (future) scores are a constant fill; give them zero weight
    w255 = np.tril(_proj(rng, (2, 5, 5)))
    g6, b6, x46 = n(6), n(6), n(4, 6)
    w46 = _proj(rng, (4, 6))
    table, ids = n(7, 3), rng.integers(0, 7, size=(2, 4))
    w243 = _proj(rng, (2, 4, 3))
    logits, tgt = n(5, 6), rng.integers(0, 6, size=5)
    mask = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    other = n(2, 4)
    w54 = _proj(rng, (5, 4))
    w3 = _proj(rng, 3)
    const34 = n(3, 4)
    idx = (slice(None), [0, 2, 2])
    w235, w62, w33, w4 = _proj(rng, (2, 3, 5)), _proj(rng, (6, 2)), _proj(rng, (3, 3)), _proj(rng, 4)

    def dot(t, w):
        return ad.tsum(ad.mul(t, w))

    return {
        "add": (lambda x: dot(ad.add(x, bias4), w34), A),
        "add_broadcast_bias": (lambda b: dot(ad.add(A, b), w34), bias4),
        "sub": (lambda x: dot(ad.sub(const34, x), w34), A),
        "mul": (lambda x: dot(ad.mul(x, const34), w34), A),
        "scale": (lambda x: dot(ad.scale(x, -1.7), w34), A),
        "matmul_left": (lambda x: dot(ad.matmul(x, B), w35), A),
        "matmul_right": (lambda x: dot(ad.matmul(A, x), w35), B),
        "matmul_batched_weight": (lambda x: dot(ad.matmul(C, x), w235), B),
        "softmax_rows": (lambda x: dot(ad.softmax_rows(x), w34), A),
        "causal_scores_q": (lambda x: dot(ad.causal_scores(x, k, 0.6), w255), q),
        "causal_scores_k": (lambda x: dot(ad.causal_scores(q, x, 0.6), w255), k),
        "attention_pattern": (lambda x: dot(ad.softmax_rows(ad.causal_scores(x, k, 0.6)), w255), q),
        "layer_norm_x": (lambda x: dot(ad.layer_norm(x, g6, b6), w46), x46),
        "layer_norm_gain": (lambda g: dot(ad.layer_norm(x46, g, b6), w46), g6),
        "layer_norm_bias": (lambda b: dot(ad.layer_norm(x46, g6, b), w46), b6),
        "gelu": (lambda x: dot(ad.gelu(x), w34), A),
        "embedding": (lambda t: dot(ad.embedding(t, ids), w243), table),
        "cross_entropy": (lambda x: ad.cross_entropy(x, tgt, mask), logits),
        "l2_norm": (lambda x: dot(ad.l2_norm(x), w3), A),
        "concat": (lambda x: dot(ad.concat([x, other], axis=0), w54), n(3, 4)),
        "mse": (lambda x: ad.mse(x, const34), A),
        "reshape_transpose": (lambda x: dot(x.reshape(2, 6).transpose(), w62), A),
        "getitem": (lambda x: dot(x[idx], w33), A),
        "sum_axis": (lambda x: dot(ad.tsum(x, axis=0), w4), A),
        "mean": (lambda x: ad.mean(ad.mul(x, w34)), A),
    }


def check_ops(seed: int, tol: float = 1e-4) -> list[GradCheckReport]:
    return [finite_diff_check(f, x, tol=tol, name=name) for name, (f, x) in op_cases(seed).items()]


def adaptive_rmu_case(seed: int, n_layers: int = 3, d_model: int = 8, layer: int = 2, beta: float = 5.0,
                      alpha: float = 100.0):
    """Scalar function of one MLP down-projection weight giving the full adaptive-RMU loss."""
    from .model import ModelConfig, build_model, clone_frozen, hidden_states
    from .unlearn import adaptive_forget_loss, make_control_vector, retain_loss

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(vocab_size=12, n_layers=n_layers, d_model=d_model, n_heads=2, max_seq_len=8,
                      mlp_ratio=2, seed=seed)
    model = build_model(cfg)
    for p in model.params.values():
        p.data = p.data * 20.0 if p.data.ndim == 2 else p.data + rng.normal(0, 0.1, size=p.shape)
        p.requires_grad = False
    frozen = clone_frozen(model)
    name = f"h{layer - 2}.mlp.w_down"
    w0 = model.params[name].data + rng.normal(0, 0.3, size=model.params[name].shape)
    forget_ids, retain_ids = rng.integers(0, 12, size=5), rng.integers(0, 12, size=4)
    u = make_control_vector(d_model, seed)
    hf_f = hidden_states(frozen, forget_ids, [layer])[layer].data
    hf_r = hidden_states(frozen, retain_ids, [layer])[layer].data

    def f(w: Tensor) -> Tensor:
        model.params[name] = w
        hu_f = hidden_states(model, forget_ids, [layer])[layer]
        hu_r = hidden_states(model, retain_ids, [layer])[layer]
        return ad.add(adaptive_forget_loss(hu_f, hf_f, u, beta), ad.scale(retain_loss(hu_r, hf_r), alpha))

    return f, w0


def check_adaptive_rmu(seed: int, tol: float = 1e-4) -> GradCheckReport:
    f, w0 = adaptive_rmu_case(seed)
    return finite_diff_check(f, w0, tol=tol, name="adaptive_rmu_loss")
