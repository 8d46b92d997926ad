"""Contrastive, reconstruction and combined losses with analytic gradients.

Everything here works in float64 on plain arrays. Local embeddings are
flattened, so their inner product is the Frobenius product. Bank negatives are
treated as constants: no gradient is returned for them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CohortError, ConfigError, NumericalError, ShapeError


@dataclass
class LossConfig:
    tau: float = 0.2
    lam: float = 0.5
    lambda_r: float = 10.0
    # "positives": divide by |positives| as written; "pairs": divide by the number of unordered pairs
    con_normalizer: str = "positives"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if self.lambda_r < 0:
            raise ConfigError("lambda_r must be non-negative")
        if self.con_normalizer not in ("positives", "pairs"):
            raise ConfigError(f"unknown con_normalizer {self.con_normalizer!r}")


def _flat(x):
    return np.asarray(x, dtype=np.float64).reshape(-1)


def _flat_rows(x, width=None):
    a = np.asarray(x, dtype=np.float64)
    if a.size == 0:
        return a.reshape(0, width or 0)
    return a.reshape(len(a), -1)


def _logsumexp_rows(s):
    if s.shape[1] == 0:
        return np.full(s.shape[0], -np.inf)
    m = s.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(s - m).sum(axis=1, keepdims=True)))[:, 0]


def nce_loss(v, v_plus, negatives, tau: float = 0.2):
    """InfoNCE for one anchor/positive pair.

    Returns ``(loss, grad_v, grad_v_plus)``; gradients have the input shapes.
    """
    shape = np.shape(v)
    if np.shape(v_plus) != shape:
        raise ShapeError(f"anchor {shape} and positive {np.shape(v_plus)} differ in kind")
    a, b = _flat(v), _flat(v_plus)
    neg = _flat_rows(negatives, a.size)
    if neg.shape[0] and neg.shape[1] != a.size:
        raise ShapeError(f"negatives of width {neg.shape[1]} do not match embedding width {a.size}")
    logits = np.concatenate([[a @ b], neg @ a]) / tau
    loss, p = nce_from_logits(logits)
    grad_v = ((p[0] - 1.0) * b + p[1:] @ neg) / tau
    grad_vp = (p[0] - 1.0) * a / tau
    return loss, grad_v.reshape(shape), grad_vp.reshape(shape)


def nce_from_logits(logits):
    """Loss and softmax for a logit vector whose first entry is the positive."""
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max()
    e = np.exp(logits - m)
    z = e.sum()
    loss = float(m - logits[0] + np.log(z))
    return max(loss, 0.0), e / z


def _lse_from_mass(rows, neg, mass, tau: float):
    """Log-sum-exp of ``rows @ neg.T / tau`` given each row's mass over ``neg`` plus ``rows``.

    ``mass[i]`` is the sum of ``exp((rows[i] . q - 1) / tau)`` over every ``q``
    in ``neg`` and in ``rows``; subtracting the ``rows`` part leaves the
    negatives. Rows where that difference cancels badly are summed directly.
    """
    if len(mass) != len(rows):
        raise ShapeError(f"row_mass has {len(mass)} entries for {len(rows)} bank positives")
    own = np.exp((rows @ rows.T - 1.0) / tau).sum(axis=1)
    rest = mass - own
    out = np.empty(len(rows))
    ok = rest > 1e-6 * mass
    out[ok] = 1.0 / tau + np.log(rest[ok])
    if not ok.all():
        s = rows[~ok] @ neg.T / tau
        m = s.max(axis=1, keepdims=True)
        out[~ok] = (m + np.log(np.exp(s - m).sum(axis=1, keepdims=True)))[:, 0]
    return out


def con_loss(positives, negatives, tau: float = 0.2, normalizer: str = "positives", n_grad: int | None = None,
             keys=None, row_mass=None):
    """Symmetric NCE summed over every unordered pair of positives.

    Each pair contributes both directions. Returns ``(loss, grad_positives)``.
    With ``n_grad`` only the first ``n_grad`` gradient rows are computed (the
    rest are returned as zeros), which is all a caller with constant bank
    positives needs.

    ``keys``, when given, holds a second embedding of every positive (e.g. from
    a momentum network). Term ``(i, j)`` then scores query ``positives[i]``
    against key ``keys[j]`` and the keys are constants; with ``keys`` equal to
    ``positives`` the loss value is unchanged.

    ``row_mass`` avoids the (bank positives x negatives) block when the bank
    is large: for each positive past ``n_grad`` it gives the sum of
    ``exp((p_i . q - 1) / tau)`` over the negatives and the bank positives
    together, i.e. over the whole bank (see ``memory_bank.BankMass``).
    """
    pos = np.asarray(positives, dtype=np.float64)
    n = len(pos)
    if n < 2:
        raise CohortError(f"need at least two positives, got {n}")
    shape = pos.shape
    p = pos.reshape(n, -1)
    neg = _flat_rows(negatives, p.shape[1])
    if neg.shape[0] and neg.shape[1] != p.shape[1]:
        raise ShapeError("negatives do not match the positives' embedding width")
    k = n if n_grad is None else int(np.clip(n_grad, 0, n))
    if keys is None:
        kk = p
    else:
        kk = np.asarray(keys, dtype=np.float64).reshape(n, -1)
        if kk.shape != p.shape:
            raise ShapeError(f"keys {np.shape(keys)} do not match positives {shape}")

    s_pp = p @ kk.T / tau
    e = z = None
    if neg.shape[0]:
        direct = n if row_mass is None else k
        s_pn = p[:direct] @ neg.T / tau  # (direct, N)
        m = s_pn.max(axis=1, keepdims=True)
        e = np.exp(s_pn - m)
        z = e.sum(axis=1, keepdims=True)
        lse = np.empty(n)
        lse[:direct] = (m + np.log(z))[:, 0]
        if direct < n:
            lse[direct:] = _lse_from_mass(p[direct:], neg, np.asarray(row_mass, dtype=np.float64), tau)
    else:
        lse = np.full(n, -np.inf)
    # NCE(i, j) = log(1 + exp(lse_i - s_ij)) for i != j
    x = lse[:, None] - s_pp
    off = ~np.eye(n, dtype=bool)
    terms = np.where(off, np.logaddexp(0.0, x), 0.0)
    if normalizer == "positives":
        norm = float(n)
    elif normalizer == "pairs":
        norm = n * (n - 1) / 2.0
    else:
        raise ConfigError(f"unknown normalizer {normalizer!r}")
    loss = float(terms.sum() / norm)

    grad = np.zeros_like(p)
    if k:
        sig = np.where(off[:k], 0.5 * (1.0 + np.tanh(0.5 * x[:k])), 0.0)  # d NCE_ij / d x_ij
        # with shared embeddings each positive is also the key of the reverse term
        if keys is None:
            sig_t = np.where(off[:, :k], 0.5 * (1.0 + np.tanh(0.5 * x[:, :k])), 0.0)
            pull = sig + sig_t.T
        else:
            pull = sig
        grad[:k] = -pull @ kk / (norm * tau)
        if neg.shape[0]:
            r = sig.sum(axis=1) / norm
            w = e[:k] / z[:k]  # softmax over negatives, per anchor row
            grad[:k] += (r[:, None] * (w @ neg)) / tau
    return loss, grad.reshape(shape)


def recon_loss(target, output):
    """Mean squared error; returns ``(loss, grad_output)``."""
    t = np.asarray(target, dtype=np.float64)
    o = np.asarray(output, dtype=np.float64)
    if t.shape != o.shape:
        raise ShapeError(f"target {t.shape} and output {o.shape} differ")
    d = o - t
    return float(np.mean(d * d)), 2.0 * d / d.size


def total_loss(l_g: float, l_l: float, l_r: float, cfg: LossConfig | None = None):
    """``lam * l_g + (1 - lam) * l_l + lambda_r * l_r`` and its partials."""
    cfg = cfg or LossConfig()
    for name, val in (("global", l_g), ("local", l_l), ("reconstruction", l_r)):
        if not np.isfinite(val):
            raise NumericalError(f"{name} loss is not finite ({val})", component=name)
    weights = (cfg.lam, 1.0 - cfg.lam, cfg.lambda_r)
    return float(weights[0] * l_g + weights[1] * l_l + weights[2] * l_r), weights
