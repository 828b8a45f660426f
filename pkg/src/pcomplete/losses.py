"""Chamfer distances, codeword matching loss and the scheduled total loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geom import NNIndex

SQRT_EPS = 1e-12


def _batched(x) -> Tensor:
    t = ad.as_tensor(x)
    if t.ndim == 2:
        t = ad.reshape(t, (1,) + t.shape)
    if t.ndim != 3 or t.shape[-1] != 3:
        raise ValueError(f"expected (N, 3) or (B, N, 3) points, got {t.shape}")
    if t.shape[1] == 0:
        raise ValueError("chamfer distance of an empty cloud")
    return t


def chamfer_terms(P, Q) -> tuple[Tensor, Tensor]:
    """Directional mean nearest squared distances, one value per batch item.

    Returns ``(L_PQ, L_QP)`` with shape ``(B,)``. Nearest neighbors are
    found exactly and treated as constants for differentiation.
    """
    P, Q = _batched(P), _batched(Q)
    if P.shape[0] != Q.shape[0]:
        raise ValueError(f"batch size mismatch: {P.shape[0]} vs {Q.shape[0]}")
    B = P.shape[0]
    nn_pq = np.empty(P.shape[:2], dtype=np.int64)
    nn_qp = np.empty(Q.shape[:2], dtype=np.int64)
    l_pq = np.empty(B)
    l_qp = np.empty(B)
    for b in range(B):
        idx, d2 = NNIndex(Q.data[b]).query(P.data[b])
        nn_pq[b], l_pq[b] = idx, d2.mean()
        idx, d2 = NNIndex(P.data[b]).query(Q.data[b])
        nn_qp[b], l_qp[b] = idx, d2.mean()
    dtype = np.result_type(P.dtype, Q.dtype)
    bidx = np.arange(B)[:, None]
    # residual vectors from each point to its assigned neighbor
    r_pq = P.data - Q.data[bidx, nn_pq]
    r_qp = Q.data - P.data[bidx, nn_qp]
    n_p, n_q = P.shape[1], Q.shape[1]

    def back_pq(g):
        g = np.asarray(g, dtype=dtype)[:, None, None]
        gp = 2.0 * g * r_pq / n_p
        gq = np.zeros_like(Q.data, dtype=dtype)
        np.add.at(gq, (bidx, nn_pq), -gp)
        return gp, gq

    def back_qp(g):
        g = np.asarray(g, dtype=dtype)[:, None, None]
        gq = 2.0 * g * r_qp / n_q
        gp = np.zeros_like(P.data, dtype=dtype)
        np.add.at(gp, (bidx, nn_qp), -gq)
        return gp, gq

    return (ad._result(l_pq.astype(dtype), (P, Q), back_pq),
            ad._result(l_qp.astype(dtype), (P, Q), back_qp))


def _reduce(x: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return ad.mean(x)
    if reduction == "sum":
        return ad.tsum(x)
    if reduction == "none":
        return x
    raise ValueError(f"unknown reduction {reduction!r}")


def cd_t(P, Q, reduction: str = "mean") -> Tensor:
    """L_PQ + L_QP. Batched inputs are averaged over the batch by default."""
    l_pq, l_qp = chamfer_terms(P, Q)
    return _reduce(l_pq + l_qp, reduction)


def cd_p(P, Q, reduction: str = "mean") -> Tensor:
    """(sqrt(L_PQ) + sqrt(L_QP)) / 2."""
    l_pq, l_qp = chamfer_terms(P, Q)
    return _reduce((ad.sqrt(l_pq, SQRT_EPS) + ad.sqrt(l_qp, SQRT_EPS)) * 0.5, reduction)


CHAMFER = {"cdt": cd_t, "cdp": cd_p}


def feat_match(f_partial, f_complete) -> Tensor:
    """Sum over the batch of Euclidean distances between paired codewords."""
    fp, fc = ad.as_tensor(f_partial), ad.as_tensor(f_complete)
    if fp.shape != fc.shape:
        raise ValueError(f"codeword shape mismatch: {fp.shape} vs {fc.shape}")
    if fp.ndim == 1:
        fp, fc = ad.reshape(fp, (1, -1)), ad.reshape(fc, (1, -1))
    diff = fp - fc
    dist = ad.sqrt(ad.tsum(ad.square(diff), axis=-1), SQRT_EPS)
    return ad.tsum(dist)


@dataclass
class LossWeights:
    """Weights (alpha, beta, gamma) of the total loss as a function of step.

    alpha decays linearly from ``alpha_start`` to ``alpha_end`` over the first
    ``alpha_decay_frac`` of training and then stays put; beta is constant;
    gamma ramps linearly from ``gamma_start`` to ``gamma_end`` over all steps.
    """

    max_steps: int = 5000
    alpha_start: float = 1.0
    alpha_end: float = 0.1
    alpha_decay_frac: float = 0.5
    beta: float = 1.0
    gamma_start: float = 0.5
    gamma_end: float = 1.0

    def __post_init__(self):
        vals = (self.alpha_start, self.alpha_end, self.beta, self.gamma_start, self.gamma_end)
        if min(vals) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @classmethod
    def constant(cls, alpha: float, beta: float, gamma: float, max_steps: int = 1):
        return cls(max_steps=max_steps, alpha_start=alpha, alpha_end=alpha,
                   beta=beta, gamma_start=gamma, gamma_end=gamma)

    def at(self, step: int) -> tuple[float, float, float]:
        if not 0 <= step <= self.max_steps:
            raise ValueError(f"step {step} outside schedule domain [0, {self.max_steps}]")
        decay_steps = self.alpha_decay_frac * self.max_steps
        t = min(step / decay_steps, 1.0) if decay_steps > 0 else 1.0
        alpha = self.alpha_start + (self.alpha_end - self.alpha_start) * t
        s = step / self.max_steps
        gamma = self.gamma_start + (self.gamma_end - self.gamma_start) * s
        return alpha, self.beta, gamma


def overall_loss(feat, cd_coarse, cd_final, weights: LossWeights, step: int) -> Tensor:
    alpha, beta, gamma = weights.at(step)
    return ad.as_tensor(feat) * alpha + ad.as_tensor(cd_coarse) * beta + ad.as_tensor(cd_final) * gamma
