"""Hopfield-style energies over token sets and their closed-form gradients.

Two complementary energies drive the token dynamics:

* attention energy: per subspace head h with projections Z_h = W_h^T X,
  ``beta^-1 * sum_i log sum_j exp(beta * z_i . z_j)``. Minimising it spreads
  the projected tokens apart on the radius-sqrt(p) hypersphere (repulsion).
* feedforward energy: ``-1/2 * sum_i sum_m relu(d_m . x_i)^2``. Minimising it
  pulls each token toward the half-spaces of the semantic basis D
  (attraction).

Closed-form gradients are computed directly in numpy; the energies are also
expressible as autodiff graphs, which is the ground truth the closed forms
are validated against (see ``grad_check``). Generalised kernel variants of
both energies (sigmoid/linear attention, softmax/gated feedforward) follow
the same pattern, plus a classic continuous Hopfield associative memory used
as a baseline.

Sign convention: every ``grad_*`` function returns the gradient of the
energy it is named after; descent directions are their negations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

ATTN_VARIANTS = ("bi_softmax", "sigmoid", "linear")
FF_VARIANTS = ("relu", "softmax", "gated")


class EnergyError(ValueError):
    """Raised when an energy evaluation violates its contract."""


@dataclass(frozen=True)
class EnergyConfig:
    """Dimensions and kernel choices for the two token energies.

    ``d`` ambient dimension, ``H`` subspace heads of dimension ``p = d/H``,
    ``M`` feedforward basis size, ``beta`` inverse temperature (defaults to
    1/sqrt(p) and is never learned).
    """

    d: int
    H: int
    M: int
    beta: float | None = None
    attn_variant: str = "bi_softmax"
    ff_variant: str = "relu"

    def __post_init__(self):
        if self.d < 1 or self.H < 1 or self.M < 1:
            raise EnergyError(f"dimensions must be positive: d={self.d} H={self.H} M={self.M}")
        if self.d % self.H != 0:
            raise EnergyError(f"H must divide d so that H*p == d; got d={self.d}, H={self.H}")
        if self.beta is not None and self.beta <= 0:
            raise EnergyError(f"beta must be positive, got {self.beta}")
        if self.attn_variant not in ATTN_VARIANTS:
            raise EnergyError(f"unknown attn_variant {self.attn_variant!r}; expected one of {ATTN_VARIANTS}")
        if self.ff_variant not in FF_VARIANTS:
            raise EnergyError(f"unknown ff_variant {self.ff_variant!r}; expected one of {FF_VARIANTS}")

    @property
    def p(self) -> int:
        return self.d // self.H

    @property
    def beta_value(self) -> float:
        return self.beta if self.beta is not None else 1.0 / math.sqrt(self.p)


@dataclass
class Bases:
    """Shared basis matrices: W (d x H*p, per-head column blocks) and D (d x M)."""

    W: Tensor
    D: Tensor

    def head(self, h: int, cfg: EnergyConfig) -> Tensor:
        """Column block W_h (d x p) of head ``h``; differentiable slice."""
        p = cfg.p
        return T.slice_axis(self.W, -1, h * p, (h + 1) * p)


@dataclass
class EnergyReport:
    """Scalar energy summary; ``e_total`` is always the sum of the two parts."""

    e_attn_per_head: list[float] = field(default_factory=list)
    e_attn: float = 0.0
    e_ff: float = 0.0

    @property
    def e_total(self) -> float:
        return self.e_attn + self.e_ff


# --- shared shape plumbing ---


def _check_tokens(X: Tensor, cfg: EnergyConfig, op: str) -> None:
    if X.shape[-2] != cfg.d:
        raise EnergyError(f"{op}: token matrix has {X.shape[-2]} channels, config says d={cfg.d}")


def _per_head(Z: Tensor, cfg: EnergyConfig) -> Tensor:
    """(..., d, N) -> (..., H, p, N); rows of W^T X are already head-blocked."""
    lead = Z.shape[:-2]
    return T.reshape(Z, (*lead, cfg.H, cfg.p, Z.shape[-1]))


def _merge_heads(Zh: Tensor, cfg: EnergyConfig) -> Tensor:
    lead = Zh.shape[:-3]
    return T.reshape(Zh, (*lead, cfg.d, Zh.shape[-1]))


def project_subspace(X: Tensor, W_h: Tensor) -> Tensor:
    """Latent coordinates Z = W_h^T X of every token in one subspace."""
    if W_h.shape[-2] != X.shape[-2]:
        raise EnergyError(f"project_subspace: basis {W_h.shape} does not match tokens {X.shape}")
    return T.matmul(T.transpose(W_h), X)


# --- attention energy family (graph-building; autodiff-ready) ---


def attn_energy(X: Tensor, bases: Bases, cfg: EnergyConfig,
                normalized: bool = False, variant: str | None = None) -> tuple[Tensor, Tensor]:
    """Attention energy as a differentiable graph.

    Returns ``(total, per_head)`` where ``per_head`` has shape (..., H).
    ``normalized`` first projects each head's coordinates onto the
    radius-sqrt(p) sphere (unit gain), the constrained form used in traces.
    """
    _check_tokens(X, cfg, "attn_energy")
    variant = variant or cfg.attn_variant
    beta = cfg.beta_value
    Zh = _per_head(T.matmul(T.transpose(bases.W), X), cfg)  # (..., H, p, N)
    if normalized:
        Zh = T.rmsnorm(Zh, axis=-2)
    if variant == "bi_softmax":
        A = T.scale(T.matmul(T.transpose(Zh), Zh), beta)  # (..., H, N, N)
        lse = T.logsumexp(A, "rows")                      # (..., H, N)
        per_head = T.scale(lse.sum(axis=-1), 1.0 / beta)
    elif variant == "sigmoid":
        A = T.scale(T.matmul(T.transpose(Zh), Zh), beta)
        per_head = T.scale(T.sigmoid(A).sum(axis=(-1, -2)), 0.5 / beta)
    elif variant == "linear":
        P = T.sigmoid(Zh)
        S = T.matmul(T.transpose(P), P)                   # (..., H, N, N)
        per_head = T.scale((S * S).sum(axis=(-1, -2)), beta / 4.0)
    else:
        raise EnergyError(f"unknown attention variant {variant!r}")
    return per_head.sum(), per_head


def e_attn(X: Tensor, bases: Bases, cfg: EnergyConfig, normalized: bool = False) -> EnergyReport:
    """Attention-energy report (bi-softmax form): per-head values and total."""
    with T.no_grad():
        _, per_head = attn_energy(X, bases, cfg, normalized=normalized, variant="bi_softmax")
    values = np.asarray(per_head.data, dtype=np.float64).reshape(-1, cfg.H).sum(axis=0)
    for h, v in enumerate(values):
        if not np.isfinite(v):
            raise EnergyError(f"attention energy non-finite at head {h}")
    return EnergyReport(e_attn_per_head=[float(v) for v in values], e_attn=float(values.sum()))


def grad_e_attn(X: Tensor, bases: Bases, cfg: EnergyConfig) -> Tensor:
    """Closed-form gradient of the (unconstrained) bi-softmax attention energy.

    Per head: W_h W_h^T X (softmax_cols(A) + softmax_rows(A)) with
    A = beta (W_h^T X)^T (W_h^T X). The descent direction is the negation.
    """
    _check_tokens(X, cfg, "grad_e_attn")
    W = bases.W.data
    Xd = X.data
    lead = Xd.shape[:-2]
    Z = (W.T @ Xd).reshape(*lead, cfg.H, cfg.p, Xd.shape[-1])
    A = cfg.beta_value * (Z.swapaxes(-1, -2) @ Z)
    S = _np_softmax(A, axis=-2) + _np_softmax(A, axis=-1)
    U = (Z @ S).reshape(*lead, cfg.d, Xd.shape[-1])
    return Tensor(W @ U)


def e_attn_variant(X: Tensor, bases: Bases, cfg: EnergyConfig, normalized: bool = False) -> float:
    """Generalised attention energy selected by ``cfg.attn_variant``."""
    with T.no_grad():
        total, _ = attn_energy(X, bases, cfg, normalized=normalized)
    return total.item()


def grad_e_attn_variant(X: Tensor, bases: Bases, cfg: EnergyConfig,
                        method: str = "autodiff") -> Tensor:
    """Gradient of the generalised attention energy.

    ``method='autodiff'`` differentiates the energy graph (ground truth);
    ``method='closed_form'`` uses the per-variant formula, which must agree.
    As differentiation of the written energies confirms, the kernelised
    variants have gradients of the same sign structure as the bi-softmax
    form: descent is always the negation of what is returned here.
    """
    if method == "autodiff":
        return _autodiff_grad(lambda Xv: attn_energy(Xv, bases, cfg)[0], X)
    if method != "closed_form":
        raise EnergyError(f"unknown gradient method {method!r}")
    variant = cfg.attn_variant
    if variant == "bi_softmax":
        return grad_e_attn(X, bases, cfg)
    W = bases.W.data
    Xd = X.data
    lead = Xd.shape[:-2]
    beta = cfg.beta_value
    Z = (W.T @ Xd).reshape(*lead, cfg.H, cfg.p, Xd.shape[-1])
    if variant == "sigmoid":
        A = beta * (Z.swapaxes(-1, -2) @ Z)
        sig = 1.0 / (1.0 + np.exp(-A))
        U = Z @ (sig * (1.0 - sig))
    elif variant == "linear":
        P = 1.0 / (1.0 + np.exp(-Z))
        U = beta * (P * (1.0 - P)) * (P @ (P.swapaxes(-1, -2) @ P))
    else:
        raise EnergyError(f"unknown attention variant {variant!r}")
    return Tensor(W @ U.reshape(*lead, cfg.d, Xd.shape[-1]))


# --- feedforward energy family ---


def ff_energy(X: Tensor, bases: Bases, cfg: EnergyConfig,
              normalized: bool = False, variant: str | None = None) -> Tensor:
    """Feedforward energy as a differentiable graph (scalar Tensor)."""
    _check_tokens(X, cfg, "ff_energy")
    variant = variant or cfg.ff_variant
    G = T.matmul(T.transpose(bases.D), X)  # (..., M, N)
    if normalized:
        G = T.rmsnorm(G, axis=-2)
    if variant == "relu":
        r = T.relu(G)
        return T.scale((r * r).sum(), -0.5)
    if variant == "softmax":
        return T.neg(T.logsumexp(G, "cols").sum())
    if variant == "gated":
        s = T.sigmoid(G).sum(axis=-2)  # (..., N)
        return T.scale((s * s).sum(), -0.5)
    raise EnergyError(f"unknown feedforward variant {variant!r}")


def e_ff(X: Tensor, bases: Bases, cfg: EnergyConfig, normalized: bool = False) -> float:
    """Feedforward alignment energy, -1/2 sum relu(D^T X)^2 (relu form)."""
    with T.no_grad():
        return ff_energy(X, bases, cfg, normalized=normalized, variant="relu").item()


def grad_e_ff(X: Tensor, bases: Bases, cfg: EnergyConfig) -> Tensor:
    """Closed-form gradient of the relu feedforward energy: -D relu(D^T X)."""
    _check_tokens(X, cfg, "grad_e_ff")
    D = bases.D.data
    return Tensor(-(D @ np.maximum(D.T @ X.data, 0.0)))


def e_ff_variant(X: Tensor, bases: Bases, cfg: EnergyConfig, normalized: bool = False) -> float:
    """Generalised feedforward energy selected by ``cfg.ff_variant``."""
    with T.no_grad():
        return ff_energy(X, bases, cfg, normalized=normalized).item()


def grad_e_ff_variant(X: Tensor, bases: Bases, cfg: EnergyConfig,
                      method: str = "autodiff") -> Tensor:
    """Gradient of the generalised feedforward energy (autodiff ground truth)."""
    if method == "autodiff":
        return _autodiff_grad(lambda Xv: ff_energy(Xv, bases, cfg), X)
    if method != "closed_form":
        raise EnergyError(f"unknown gradient method {method!r}")
    variant = cfg.ff_variant
    if variant == "relu":
        return grad_e_ff(X, bases, cfg)
    D = bases.D.data
    G = D.T @ X.data  # (..., M, N)
    if variant == "softmax":
        return Tensor(-(D @ _np_softmax(G, axis=-2)))
    if variant == "gated":
        sig = 1.0 / (1.0 + np.exp(-G))
        s = sig.sum(axis=-2, keepdims=True)  # per-token gate sum
        return Tensor(-(D @ (sig * (1.0 - sig) * s)))
    raise EnergyError(f"unknown feedforward variant {variant!r}")


def energy_report(X: Tensor, bases: Bases, cfg: EnergyConfig, normalized: bool = False) -> EnergyReport:
    """Both energies (config-selected variants) in one report."""
    with T.no_grad():
        total, per_head = attn_energy(X, bases, cfg, normalized=normalized)
        ff = ff_energy(X, bases, cfg, normalized=normalized)
    values = np.asarray(per_head.data, dtype=np.float64).reshape(-1, cfg.H).sum(axis=0)
    for h, v in enumerate(values):
        if not np.isfinite(v):
            raise EnergyError(f"attention energy non-finite at head {h}")
    return EnergyReport(
        e_attn_per_head=[float(v) for v in values],
        e_attn=float(values.sum()),
        e_ff=ff.item(),
    )


# --- continuous Hopfield associative-memory baseline ---


def e_mch(x: Tensor, patterns: Tensor) -> float:
    """Continuous Hopfield energy -log sum_i exp(xi_i . x) + x.x/2."""
    xd = np.asarray(x.data, dtype=np.float64).reshape(-1)
    Xi = np.asarray(patterns.data, dtype=np.float64)
    if Xi.shape[0] != xd.shape[0]:
        raise EnergyError(f"e_mch: state dim {xd.shape[0]} vs patterns {Xi.shape}")
    scores = Xi.T @ xd
    m = scores.max()
    return float(-(m + np.log(np.exp(scores - m).sum())) + 0.5 * xd @ xd)


def mch_update(x: Tensor, patterns: Tensor) -> Tensor:
    """One retrieval step x <- Xi softmax(Xi^T x); provably non-increasing in energy."""
    xd = np.asarray(x.data, dtype=np.float64).reshape(-1)
    Xi = np.asarray(patterns.data, dtype=np.float64)
    scores = Xi.T @ xd
    e = np.exp(scores - scores.max())
    return Tensor(Xi @ (e / e.sum()))


# --- internals ---


def _np_softmax(a: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _autodiff_grad(energy_fn, X: Tensor) -> Tensor:
    leaf = Tensor(X.data, requires_grad=True)
    energy_fn(leaf).backward()
    return Tensor(leaf.grad)
