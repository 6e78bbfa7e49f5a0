"""Many short attention problems inside one long attention call.

Independent single-head instances of length ``M`` are stacked into one
sequence of length ``N``. Each instance's queries carry a tag ``u_i`` and its
keys a tag ``v_i`` with ``<u_i, v_i> = 0`` and ``<u_i, v_j> <= -B^2`` for
``i != j``, so cross-instance scores are pushed down by ``B^2`` and the one
shared softmax almost factorises into the per-instance softmaxes. The only
other work is three small matrix products per instance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from itertools import combinations
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError
from .oracle import CallLedger
from .reference import HeadParams, attention_head
from .tensor import as_matrix, matmul

__all__ = [
    "TagSet",
    "ReverseConfig",
    "tag_width",
    "make_tags",
    "required_b_squared",
    "error_bound",
    "choose_b",
    "build_large_call",
    "foreign_weight_mass",
    "reverse_simulate",
]

B_CAP = 40.0
B_FLOOR = 1e-3


@dataclass(frozen=True, eq=False)
class TagSet:
    r: int
    b_scale: float
    u: np.ndarray  # (count, r)
    v: np.ndarray

    @property
    def count(self) -> int:
        return self.u.shape[0]

    def violations(self, tol: float = 1e-9) -> list[str]:
        """Every broken tag invariant; empty when the set is valid."""
        problems = []
        g = self.u @ self.v.T
        b2 = self.b_scale ** 2
        if np.any(np.abs(np.diag(g)) > tol):
            problems.append("some <u_i, v_i> is not zero")
        off = g[~np.eye(self.count, dtype=bool)]
        if off.size and off.max() > -b2 + tol * max(1.0, b2):
            problems.append(f"some <u_i, v_j> exceeds -B^2 = {-b2}")
        if len({tuple(row) for row in self.u.tolist()}) != self.count:
            problems.append("tags are not distinct")
        if self.count > math.comb(self.r, self.r // 2):
            problems.append("more tags than zero-position subsets")
        return problems


def tag_width(count: int) -> int:
    """Smallest even ``r`` with ``C(r, r/2) >= count``."""
    if count < 1:
        raise ConfigurationError(f"need at least one tag, got {count}")
    r = 2
    while math.comb(r, r // 2) < count:
        r += 2
    return r


def make_tags(count: int, b_scale: float) -> TagSet:
    """Tags with ``r/2`` zeros each, zero positions taken in lexicographic order.

    >>> t = make_tags(2, 10.0)
    >>> t.u.tolist(), t.v.tolist()
    ([[0.0, -10.0], [-10.0, 0.0]], [[10.0, 0.0], [0.0, 10.0]])
    """
    if not b_scale > 0:
        raise ConfigurationError(f"B must be positive, got {b_scale}")
    r = tag_width(count)
    u = np.full((count, r), -float(b_scale))
    for i, zeros in zip(range(count), combinations(range(r), r // 2)):
        u[i, list(zeros)] = 0.0
    return TagSet(r, float(b_scale), u, u + b_scale)


def required_b_squared(c_bound: float, n_total: int, m_len: int, target_err: float) -> float:
    """``B^2`` at which the leakage bound ``N C e^{2C^2 - B^2} (1 + e^{C^2}) / M`` equals ``target_err``."""
    if not target_err > 0:
        raise ConfigurationError(f"target error must be positive, got {target_err}")
    c2 = c_bound ** 2
    return 2 * c2 + math.log(n_total * c_bound / m_len) + math.log1p(math.exp(c2)) - math.log(target_err)


def error_bound(c_bound: float, n_total: int, m_len: int, b_scale: float) -> float:
    c2 = c_bound ** 2
    return n_total * c_bound * math.exp(2 * c2 - b_scale ** 2) * (1 + math.exp(c2)) / m_len


def choose_b(c_bound: float, n_total: int, m_len: int, target_err: float) -> float:
    """Smallest ``B`` on a 0.001 grid meeting the leakage bound, floored at 0.001 and capped at 40."""
    b2 = required_b_squared(c_bound, n_total, m_len, target_err)
    if b2 <= 0:
        return B_FLOOR
    b = math.ceil(math.sqrt(b2) * 1000 - 1e-9) / 1000
    return float(min(max(b, B_FLOOR), B_CAP))


@dataclass(frozen=True)
class ReverseConfig:
    """``c_bound`` bounds every ``||X||_{inf,2} ||W||_2``; ``b_scale``/``r`` are filled by :meth:`resolve`."""

    c_bound: float
    target_err: float
    b_scale: float | None = None
    r: int | None = None

    def resolve(self, n_total: int, m_len: int, count: int) -> "ReverseConfig":
        b = self.b_scale if self.b_scale is not None else choose_b(self.c_bound, n_total, m_len, self.target_err)
        return replace(self, b_scale=b, r=tag_width(count))

    def bound(self, n_total: int, m_len: int) -> float:
        if self.b_scale is None:
            raise ConfigurationError("resolve the configuration before asking for its bound")
        return error_bound(self.c_bound, n_total, m_len, self.b_scale)


def _row_norm(x: np.ndarray) -> float:
    return float(np.linalg.norm(x, axis=1).max())


def _check_instances(instances, c_bound: float):
    if not instances:
        raise ConfigurationError("no instances given")
    shapes = {as_matrix(x).shape for x, _ in instances}
    if len(shapes) != 1:
        raise ConfigurationError(f"instances must share their shape, got {sorted(shapes)}")
    for k, (x, head) in enumerate(instances):
        xn = _row_norm(as_matrix(x))
        for name in ("wq", "wk", "wv"):
            w = getattr(head, name)
            if w.shape[0] != as_matrix(x).shape[1]:
                raise ConfigurationError(f"instance {k}: weights do not match the input width")
            prod = xn * float(np.linalg.norm(w, 2))
            if prod > c_bound * (1 + 1e-12):
                raise ConfigurationError(
                    f"instance {k}: ||X|| ||{name}|| = {prod:.4g} exceeds c_bound={c_bound}"
                )


def build_large_call(instances, tags: TagSet, ledger: CallLedger | None = None):
    """Assemble the stacked input and selector head of the single long call.

    Returns ``(x, head)``: ``x`` has rows ``[Q_i u_i | K_i v_i | V_i 0]``
    (width ``3 (d + r)``) and the head selects the three column groups.
    """
    rows = []
    for k, (x, head) in enumerate(instances):
        x = as_matrix(x)
        q = matmul(x, head.wq)
        kk = matmul(x, head.wk)
        v = matmul(x, head.wv)
        if ledger is not None:
            for _ in range(3):
                ledger.record("small-matmul", x.shape[0])
        m = x.shape[0]
        rows.append(np.hstack([
            q, np.repeat(tags.u[k:k + 1], m, axis=0),
            kk, np.repeat(tags.v[k:k + 1], m, axis=0),
            v, np.zeros((m, tags.r)),
        ]))
    d = instances[0][1].m
    dp = d + tags.r
    eye = np.eye(dp)
    WQ, WK, WV = (np.zeros((3 * dp, 3 * dp)) for _ in range(3))
    WQ[0:dp, 0:dp] = eye
    WK[dp:2 * dp, 0:dp] = eye
    WV[2 * dp:3 * dp, 0:dp] = eye
    return np.vstack(rows), HeadParams(WQ, WK, WV)


def foreign_weight_mass(instances, tags: TagSet) -> np.ndarray:
    """Per query, the total softmax weight the long call puts on other instances' keys."""
    x, head = build_large_call(instances, tags)
    q = x @ head.wq
    k = x @ head.wk
    s = q @ k.T
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    m = as_matrix(instances[0][0]).shape[0]
    owner = np.repeat(np.arange(len(instances)), m)
    return np.where(owner[:, None] != owner[None, :], p, 0.0).sum(axis=1)


def reverse_simulate(
    instances: Sequence[tuple],
    cfg: ReverseConfig,
    ledger: CallLedger | None = None,
) -> list[np.ndarray]:
    """Outputs of every instance from one long attention call.

    ``ledger`` (if given) records three ``small-matmul`` entries per instance
    and one ``large-call``.
    """
    instances = [(as_matrix(x, "instance input"), head) for x, head in instances]
    _check_instances(instances, cfg.c_bound)
    m, d = instances[0][0].shape
    n = m * len(instances)
    cfg = cfg.resolve(n, m, len(instances))
    tags = make_tags(len(instances), cfg.b_scale)
    x, head = build_large_call(instances, tags, ledger)
    out = attention_head(x, head)
    if ledger is not None:
        ledger.record("large-call", n)
    return [out[k * m:(k + 1) * m, :d] for k in range(len(instances))]
