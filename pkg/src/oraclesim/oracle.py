"""The length-capped transformer oracle and the restricted host workbench.

Simulation algorithms may do exactly two kinds of work: call the
:class:`Oracle` (a small transformer whose input length, depth, width and
mask are capped by an :class:`OracleCapacity`) and rearrange data with the
:class:`Workbench`, which only concatenates, selects, pads a bounded number
of constants, and runs a short list of declared MLP-equivalent maps. Every
oracle call lands in a :class:`CallLedger`, grouped into adaptivity rounds.
"""
from __future__ import annotations

import inspect
import json
import threading
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, DegenerateRatioError, RestrictionError, ShapeError
from .mlp import MlpSpec, PadConst, mlp_apply
from .reference import HeadParams, Layer, TransformerParams, transformer_forward
from .tensor import Dense, MaskKind, as_matrix, concat, pad_constants

__all__ = [
    "OracleCapacity",
    "CallRecord",
    "CallLedger",
    "Oracle",
    "Workbench",
    "sum_via_oracle",
    "audit_restriction",
    "ALLOWED_WORKBENCH_OPS",
]


@dataclass(frozen=True)
class OracleCapacity:
    """Limits of the small transformer.

    ``m_max`` caps the input length, ``l_small``/``h_small`` the layer and
    head counts, ``d_small`` the embedding width. ``mlp_factor`` sets the
    per-token MLP budget to ``mlp_factor * d_small**2``.
    """

    m_max: int
    l_small: int = 1
    h_small: int = 1
    d_small: int = 64
    mask: MaskKind = Dense()
    mlp_factor: int = 8

    def __post_init__(self):
        if self.m_max < 1:
            raise ConfigurationError(f"m_max must be >= 1, got {self.m_max}")
        if self.l_small < 1 or self.h_small < 1:
            raise ConfigurationError("the oracle needs at least one layer and one head")
        if self.d_small % self.h_small:
            raise ConfigurationError(f"d_small={self.d_small} is not divisible by h_small={self.h_small}")

    @property
    def slots(self) -> int:
        """Independent single-head instances one call can carry."""
        return self.h_small * self.l_small

    @property
    def mlp_budget(self) -> int:
        return self.mlp_factor * self.d_small ** 2


@dataclass(frozen=True)
class CallRecord:
    round: int
    tag: str
    input_len: int
    instances: int = 1


class CallLedger:
    """Audited record of oracle calls.

    ``rounds`` counts :meth:`begin_round` invocations; calls are filed under
    the current round. Appends are serialised with a lock so concurrent
    callers inside one round produce a consistent ledger.
    """

    def __init__(self):
        self.calls: list[CallRecord] = []
        self.rounds = 0
        self._lock = threading.Lock()

    def begin_round(self) -> int:
        with self._lock:
            self.rounds += 1
            return self.rounds

    def record(self, tag: str, input_len: int, instances: int = 1) -> CallRecord:
        with self._lock:
            if self.rounds == 0:
                self.rounds = 1
            rec = CallRecord(self.rounds, tag, int(input_len), int(instances))
            self.calls.append(rec)
            return rec

    def __len__(self):
        return len(self.calls)

    def count(self, tag: str | None = None) -> int:
        if tag is None:
            return len(self.calls)
        return sum(1 for c in self.calls if c.tag == tag)

    def by_tag(self) -> dict[str, int]:
        return dict(sorted(Counter(c.tag for c in self.calls).items()))

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "calls": [
                {"round": c.round, "tag": c.tag, "input_len": c.input_len, "instances": c.instances}
                for c in self.calls
            ],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "CallLedger":
        led = cls()
        led.rounds = int(data["rounds"])
        led.calls = [
            CallRecord(int(c["round"]), c["tag"], int(c["input_len"]), int(c.get("instances", 1)))
            for c in data["calls"]
        ]
        return led


class Oracle:
    """A capacity-checked small transformer.

    Calling it evaluates :func:`transformer_forward` and files a
    :class:`CallRecord`. Any capacity violation raises
    :class:`RestrictionError`; inputs are never truncated.
    """

    def __init__(self, capacity: OracleCapacity, ledger: CallLedger | None = None):
        self.capacity = capacity
        self.ledger = ledger if ledger is not None else CallLedger()

    def check(self, x: np.ndarray, params: TransformerParams) -> None:
        cap = self.capacity
        if x.shape[0] > cap.m_max:
            raise RestrictionError(f"oracle input has {x.shape[0]} tokens, capacity is {cap.m_max}")
        if params.L > cap.l_small:
            raise RestrictionError(f"oracle params have {params.L} layers, capacity is {cap.l_small}")
        if params.H > cap.h_small:
            raise RestrictionError(f"oracle params have {params.H} heads, capacity is {cap.h_small}")
        if params.d > cap.d_small:
            raise RestrictionError(f"oracle embedding width {params.d} exceeds capacity {cap.d_small}")
        if params.mask != cap.mask:
            raise RestrictionError(f"oracle mask is {cap.mask!r}, params ask for {params.mask!r}")

    def __call__(self, x, params: TransformerParams, tag: str = "call", instances: int = 1) -> np.ndarray:
        x = as_matrix(x, "oracle input")
        self.check(x, params)
        out = transformer_forward(x, params, mlp_budget=self.capacity.mlp_budget)
        self.ledger.record(tag, x.shape[0], instances)
        return out

    def begin_round(self) -> int:
        return self.ledger.begin_round()


def sum_via_oracle(
    oracle: Oracle,
    rows,
    input_mlp: MlpSpec | None = None,
    output_mlp: MlpSpec | None = None,
    tag: str = "sum",
) -> np.ndarray:
    """Column sum of ``rows`` from one oracle call.

    The input MLP appends a constant-one column; query and key weights project
    every token onto that column, so all scores coincide and attention is a
    uniform average. Value weights scaled by the row count turn the average
    into the sum. ``input_mlp`` runs first (per token) and ``output_mlp`` is
    the layer MLP, e.g. to divide two sums.
    """
    rows = as_matrix(rows, "rows")
    n = rows.shape[0]
    pre = input_mlp or MlpSpec.identity()
    w, _ = pre.cost(rows.shape[1])
    e = w + 1
    ones = np.zeros((e, e))
    ones[w, :] = 1.0
    wv = np.zeros((e, e))
    wv[:w, :w] = n * np.eye(w)
    params = TransformerParams(
        layers=(Layer((HeadParams(ones, ones, wv),), output_mlp or MlpSpec.identity()),),
        d=e,
        mask=oracle.capacity.mask,
        input_mlp=pre.then(PadConst((1.0,))),
    )
    # under a causal mask only the last token sees every row
    out = oracle(rows, params, tag=tag)
    return out[n - 1:n, :w]


ALLOWED_WORKBENCH_OPS = frozenset(
    {"select", "concat", "pad_constants", "permute_rows", "apply_mlp", "weighted_average"}
)


class Workbench:
    """The only host-side processing a simulation may perform.

    It offers no exponentials, logarithms or softmax. ``pad_budget`` caps
    constants per edit (default ``d**2``). ``apply_mlp`` and
    ``weighted_average`` are the declared MLP-equivalent maps: token-wise
    arithmetic an MLP is allowed to do. ``permute_rows`` is a declared
    exemption for host-side random permutations. Every operation is logged.
    """

    def __init__(self, d: int, pad_budget: int | None = None):
        self.d = int(d)
        self.pad_budget = pad_budget if pad_budget is not None else max(self.d, 2) ** 2
        self.log: list[tuple[str, str]] = []

    def _note(self, op: str, label: str = "") -> None:
        self.log.append((op, label))

    def select(self, m, rows=None, cols=None) -> np.ndarray:
        m = as_matrix(m)
        self._note("select")
        if rows is not None:
            m = m[np.asarray(rows, dtype=int) if not isinstance(rows, slice) else rows]
        if cols is not None:
            m = m[:, np.asarray(cols, dtype=int) if not isinstance(cols, slice) else cols]
        return np.array(m)

    def concat(self, parts, axis: str = "rows") -> np.ndarray:
        self._note("concat")
        return concat(parts, axis)

    def pad_constants(self, m, values, axis: str = "rows", where: str = "end") -> np.ndarray:
        self._note("pad_constants")
        return pad_constants(m, values, axis, where, budget=self.pad_budget)

    def permute_rows(self, m, perm) -> np.ndarray:
        self._note("permute_rows", "exempt:randperm")
        return np.array(as_matrix(m)[np.asarray(perm, dtype=int)])

    def apply_mlp(self, spec: MlpSpec, x, label: str = "mlp") -> np.ndarray:
        self._note("apply_mlp", label)
        return mlp_apply(spec, x)

    def weighted_average(self, ratios, weights, signs=None, label: str = "recombine") -> np.ndarray:
        """Row-wise ``sum_k s_k w_k r_k / sum_k s_k w_k``.

        ``ratios`` are ``(N, m)`` blocks, ``weights`` are length-``N``
        columns and ``signs`` optional per-term ``+1``/``-1`` factors, so a
        window normaliser can be written as a difference of prefix sums. A
        weight of exactly zero removes its term whatever the ratio holds.
        """
        self._note("weighted_average", label)
        signs = [1.0] * len(ratios) if signs is None else [float(s) for s in signs]
        num = None
        den = None
        for r, w, s in zip(ratios, weights, signs, strict=True):
            r = as_matrix(r)
            w = s * np.asarray(w, dtype=np.float64).reshape(-1, 1)
            if w.shape[0] != r.shape[0]:
                raise ShapeError(f"weight column of length {w.shape[0]} for {r.shape[0]} ratio rows")
            term = np.where(w == 0.0, 0.0, r * w)
            num = term if num is None else num + term
            den = w if den is None else den + w
        if num is None:
            raise ShapeError("nothing to average")
        if np.any(den <= 0.0):
            raise DegenerateRatioError("recombination denominator is not positive")
        return as_matrix(num / den, "recombination")


def audit_restriction(
    bench: Workbench,
    ledger: CallLedger | None = None,
    expected_calls: int | None = None,
) -> list[str]:
    """Return every way ``bench``/``ledger`` departs from the restricted model.

    Checks that the workbench exposes only the allowed operations, that none
    of them has been replaced, that its log holds only allowed operations,
    and (optionally) that the ledger matches the closed-form call count. An
    empty list means the run honoured the model.
    """
    problems: list[str] = []
    public = {
        name for name, _ in inspect.getmembers(type(bench), callable) if not name.startswith("_")
    }
    extra = sorted(public - ALLOWED_WORKBENCH_OPS)
    if extra:
        problems.append(f"workbench exposes unrestricted operations: {extra}")
    for name in sorted(ALLOWED_WORKBENCH_OPS):
        impl = getattr(type(bench), name, None)
        if impl is not getattr(Workbench, name):
            problems.append(f"workbench operation {name!r} is not the restricted implementation")
    for k, v in vars(bench).items():
        if callable(v):
            problems.append(f"workbench instance carries callable attribute {k!r}")
    logged = sorted({op for op, _ in getattr(bench, "log", [])} - ALLOWED_WORKBENCH_OPS)
    if logged:
        problems.append(f"workbench log contains disallowed operations: {logged}")
    if ledger is not None and expected_calls is not None and len(ledger) != expected_calls:
        problems.append(f"ledger holds {len(ledger)} oracle calls, closed form expects {expected_calls}")
    return problems
