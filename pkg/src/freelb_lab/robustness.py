"""Embedding-space robustness: maximum loss increment inside a Frobenius ball.

Attacks are vectorised over samples but each sample is independent: its own
budget, its own random start (drawn from ``rng.child(sample_index, ...)``)
and its own normalised step.  Anything exposing the :class:`AttackTarget`
methods can be attacked, which is how the closed-form toy models used as
oracles plug in.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from .adversary import Perturbation, ascent_step, frobenius_norms, init_delta
from .model import Batch, ModelParams
from .tensor import NonFiniteError, RngState

EPS_MODES = ("fixed", "relative", "searched")


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 2000
    step_size: float = 5e-3
    eps_mode: str = "searched"
    eps: float = 0.01            # absolute budget (fixed) or multiple of ||X||_F (relative)
    restarts: int = 1
    eps_start_factor: float = 1.1
    decrement: float | None = None   # None: eps_start / 20
    chunk: int = 256

    def __post_init__(self):
        if self.steps < 1 or self.step_size <= 0:
            raise ValueError("attack needs steps >= 1 and step_size > 0")
        if self.eps_mode not in EPS_MODES:
            raise ValueError(f"eps_mode must be one of {EPS_MODES}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


class ProtocolError(ValueError):
    """The evaluation protocol's preconditions are violated."""


# ---------------------------------------------------------------------------
# targets


class AttackTarget:
    """Interface: a frozen classifier over a fixed set of samples."""

    token_mask: np.ndarray
    labels: np.ndarray
    dim: int

    def __len__(self):
        return len(self.labels)

    def evaluate(self, delta: np.ndarray, with_grad: bool = True):
        """Per-sample losses, predictions and d(sum of losses)/d(delta)."""
        raise NotImplementedError

    def subset(self, idx) -> "AttackTarget":
        raise NotImplementedError

    def input_norms(self) -> np.ndarray:
        raise NotImplementedError


class ClassifierTarget(AttackTarget):
    def __init__(self, params: ModelParams, batch: Batch):
        self.params = params
        self.batch = batch
        self.token_mask = batch.mask
        self.labels = batch.labels
        self.dim = params.config.dim

    def evaluate(self, delta, with_grad=True):
        try:
            return M.per_sample_loss_and_grad(self.batch, delta, self.params, with_grad)
        except NonFiniteError:
            if len(self) == 1:
                n = 1
                return np.full(n, np.inf), np.full(n, -1), (np.zeros_like(delta) if with_grad else None)
        # isolate the offending samples
        parts = [self.subset([i]).evaluate(delta[i:i + 1], with_grad) for i in range(len(self))]
        losses = np.concatenate([p[0] for p in parts])
        preds = np.concatenate([p[1] for p in parts])
        grad = np.concatenate([p[2] for p in parts]) if with_grad else None
        return losses, preds, grad

    def subset(self, idx):
        return ClassifierTarget(self.params, self.batch.subset(idx))

    def input_norms(self):
        return frobenius_norms(M.embed(self.batch, self.params).data)


class LinearTarget(AttackTarget):
    """Multinomial logistic model ``logits = (x + delta) @ W + b`` on single-token inputs.

    ``x`` is (n, d).  Used as a closed-form oracle for the attack code.
    """

    def __init__(self, W, b, x, labels):
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.x = np.asarray(x, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.dim = self.x.shape[1]
        self.token_mask = np.ones((len(self.labels), 1))

    def logits(self, delta):
        return (self.x + delta[:, 0, :]) @ self.W + self.b

    def evaluate(self, delta, with_grad=True):
        z = self.logits(delta)
        m = z.max(axis=1, keepdims=True)
        p = np.exp(z - m)
        p /= p.sum(axis=1, keepdims=True)
        rows = np.arange(len(self.labels))
        losses = (m[:, 0] + np.log(np.exp(z - m).sum(axis=1))) - z[rows, self.labels]
        preds = z.argmax(axis=1)
        if not with_grad:
            return losses, preds, None
        p[rows, self.labels] -= 1.0
        return losses, preds, (p @ self.W.T)[:, None, :]

    def subset(self, idx):
        idx = np.asarray(idx)
        return LinearTarget(self.W, self.b, self.x[idx], self.labels[idx])

    def input_norms(self):
        return np.linalg.norm(self.x, axis=1)


# ---------------------------------------------------------------------------
# PGD attack


@dataclass
class AttackResult:
    max_increase: np.ndarray
    natural_loss: np.ndarray
    final_delta: np.ndarray
    flipped: np.ndarray
    nonfinite: np.ndarray


def _sample_rngs(rng: RngState, ids, *keys):
    return [rng.child(int(i), *keys) for i in ids]


def _pgd(target: AttackTarget, eps: np.ndarray, atk: AttackConfig, rngs, stop_on_flip: bool = False,
         steps: int | None = None) -> AttackResult:
    steps = atk.steps if steps is None else steps
    n = len(target)
    nat, nat_pred, _ = target.evaluate(np.zeros((n, target.token_mask.shape[1], target.dim)), False)
    delta = init_delta(target.token_mask, target.dim, eps, rngs)
    best = np.zeros(n)
    flipped = np.zeros(n, dtype=bool)
    bad = ~np.isfinite(nat)
    active = np.flatnonzero(~bad)
    values = delta.values
    sub = target.subset(active) if len(active) < n else target
    for t in range(steps + 1):
        if not len(active):
            break
        cur = Perturbation(values[active], eps[active], delta.n_delta[active])
        losses, preds, grad = sub.evaluate(cur.values, with_grad=t < steps)
        nonfin = ~np.isfinite(losses)
        if nonfin.any():
            bad[active[nonfin]] = True
        inc = np.where(nonfin, 0.0, losses - nat[active])
        best[active] = np.maximum(best[active], inc)
        flipped[active] |= (preds != sub.labels) & ~nonfin
        if t == steps:
            break
        cur = ascent_step(cur, grad, atk.step_size)
        values[active] = cur.values
        drop = nonfin | (flipped[active] if stop_on_flip else False)
        if np.any(drop):
            keep = ~drop
            active = active[keep]
            sub = sub.subset(np.flatnonzero(keep))
    best[bad] = np.inf
    return AttackResult(best, nat, values, flipped, bad)


def _chunks(n: int, size: int):
    for s in range(0, n, size):
        yield np.arange(s, min(s + size, n))


def _run_chunked(target, eps, atk, rng, sample_ids, keys, stop_on_flip=False):
    n = len(target)
    out = AttackResult(np.zeros(n), np.zeros(n), np.zeros((n, target.token_mask.shape[1], target.dim)),
                       np.zeros(n, dtype=bool), np.zeros(n, dtype=bool))
    for idx in _chunks(n, atk.chunk):
        sub = target.subset(idx) if len(idx) < n else target
        res = _pgd(sub, eps[idx], atk, _sample_rngs(rng, sample_ids[idx], *keys), stop_on_flip)
        out.max_increase[idx] = res.max_increase
        out.natural_loss[idx] = res.natural_loss
        out.final_delta[idx] = res.final_delta
        out.flipped[idx] = res.flipped
        out.nonfinite[idx] = res.nonfinite
    return out


def max_loss_increase(target: AttackTarget, eps, atk: AttackConfig, rng: RngState,
                      sample_ids=None, restart: int = 0) -> AttackResult:
    """``max_{||delta||_F <= eps} L(X + delta) - L(X)`` estimated by PGD, per sample.

    The estimate is the maximum over the whole trajectory, including the
    clean point, so it is never negative.  Non-finite losses give ``+inf``
    and set ``nonfinite``.
    """
    n = len(target)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (n,)).copy()
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    return _run_chunked(target, eps, atk, rng, ids, ("attack", restart))


def attack_convergence(target: AttackTarget, eps, atk: AttackConfig, restarts: int, rng: RngState,
                       sample_ids=None) -> dict:
    """Spread of the attack's estimate across independent random starts."""
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    runs = np.stack([max_loss_increase(target, eps, atk, rng, sample_ids, r).max_increase
                     for r in range(restarts)])
    hi, lo = runs.max(axis=0), runs.min(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        spread = np.where(hi > 0, (hi - lo) / np.where(hi > 0, hi, 1.0), 0.0)
    return {"max": hi, "min": lo, "spread": spread, "values": runs}


def per_sample_epsilon_search(reference: AttackTarget, eps_start, decrement, atk: AttackConfig,
                              rng: RngState, sample_ids=None) -> np.ndarray:
    """Largest ``eps_start - k * decrement`` at which PGD cannot flip the reference's prediction.

    A trial counts as defended only if every iterate of the ``atk.steps``
    attack is still classified correctly.  Samples never defended get 0.
    """
    n = len(reference)
    eps_start = np.broadcast_to(np.asarray(eps_start, dtype=np.float64), (n,)).copy()
    decrement = np.broadcast_to(np.asarray(decrement, dtype=np.float64), (n,)).copy()
    if np.any(decrement <= 0):
        raise ValueError("decrement must be positive")
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    _, preds, _ = reference.evaluate(np.zeros((n, reference.token_mask.shape[1], reference.dim)), False)
    wrong = np.flatnonzero(preds != reference.labels)
    if wrong.size:
        raise ProtocolError(f"{wrong.size} sample(s) are misclassified by the reference model "
                            f"without perturbation (first index {int(ids[wrong[0]])})")
    result = np.zeros(n)
    pending = np.arange(n)
    k = 0
    while pending.size:
        eps_k = eps_start[pending] - k * decrement[pending]
        live = eps_k > 1e-12 * np.maximum(eps_start[pending], 1e-300)
        pending, eps_k = pending[live], eps_k[live]
        if not pending.size:
            break
        sub = reference.subset(pending)
        res = _run_chunked(sub, eps_k, atk, rng, ids[pending], ("search", k), stop_on_flip=True)
        held = ~res.flipped & ~res.nonfinite
        result[pending[held]] = eps_k[held]
        pending = pending[~held]
        k += 1
    return result


def invariance_cardinality(K: int, eps: float, alpha: float, n_delta: int | None = None) -> int:
    """Approximate number of distinct norm constraints FreeLB-K visits.

    ``min(K, ceil((eps - E||delta_0||) / alpha) + 1)`` with
    ``E||delta_0|| ~ eps / sqrt(3)`` for the uniform start.  ``n_delta`` is
    accepted for symmetry with the sampler; the estimate does not depend on it.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    expected_start = eps / math.sqrt(3.0)
    return int(min(K, math.ceil((eps - expected_start) / alpha) + 1))


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    model: str
    reference: str | None
    rows: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["model"], d.get("reference"), d.get("rows", []), d.get("aggregate", {}),
                   d.get("diagnostics", {}))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        if math.isnan(x):
            return None
        return x
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def aggregate(rows: list) -> dict:
    kept = [r for r in rows if not r["filtered"]]
    inc = np.array([r["delta_loss_max"] for r in kept], dtype=np.float64)
    nat = np.array([r["natural_loss"] for r in kept], dtype=np.float64)
    finite = inc[np.isfinite(inc)]
    return {
        "count": len(kept),
        "median_delta_loss_max": float(np.median(inc)) if inc.size else None,
        "std_delta_loss_max": float(np.std(finite)) if finite.size else None,
        "median_natural_loss": float(np.median(nat)) if nat.size else None,
        "nonfinite": int(inc.size - finite.size),
    }


def _budgets(targets: dict, reference: str, kept: np.ndarray, atk: AttackConfig, rng: RngState,
             eps_start: float | None, sample_ids: np.ndarray) -> np.ndarray:
    ref = targets[reference].subset(kept)
    if atk.eps_mode == "fixed":
        return np.full(kept.size, float(atk.eps))
    if atk.eps_mode == "relative":
        return atk.eps * ref.input_norms()
    if eps_start is None:
        raise ValueError("searched budgets need eps_start")
    dec = atk.decrement if atk.decrement is not None else eps_start / 20.0
    return per_sample_epsilon_search(ref, eps_start, dec, atk, rng.child("search"), sample_ids[kept])


def robustness_report(models: dict, data: Batch, reference: str, atk: AttackConfig, rng: RngState,
                      eps_start: float | None = None) -> dict:
    """Per-model :class:`EvalReport` at budgets set by ``reference``.

    Only samples every model classifies correctly are attacked; the others
    are kept as rows flagged ``filtered``.  ``models`` maps name to either
    :class:`ModelParams` or an :class:`AttackTarget` over ``data``.
    """
    if not models:
        raise ValueError("need at least one model")
    if reference not in models:
        raise ValueError(f"reference {reference!r} is not among the models {sorted(models)}")
    targets = {name: (ClassifierTarget(m, data) if isinstance(m, ModelParams) else m)
               for name, m in models.items()}
    n = len(next(iter(targets.values())))
    zero = {name: t.evaluate(np.zeros((n, t.token_mask.shape[1], t.dim)), False) for name, t in targets.items()}
    correct = {name: z[1] == t.labels for (name, z), t in zip(zero.items(), targets.values())}
    keep_mask = np.logical_and.reduce([c for c in correct.values()])
    kept = np.flatnonzero(keep_mask)
    if not kept.size:
        accs = {name: float(c.mean()) for name, c in correct.items()}
        raise ProtocolError(f"no sample is classified correctly by every model; accuracies: {accs}")
    ids = np.arange(n)
    eps = _budgets(targets, reference, kept, atk, rng, eps_start, ids)
    reports = {}
    for name in sorted(targets):
        t = targets[name].subset(kept)
        res = max_loss_increase(t, eps, atk, rng, ids[kept])
        rows = []
        pos = {int(i): j for j, i in enumerate(kept)}
        for i in range(n):
            j = pos.get(i)
            if j is None:
                rows.append({"index": i, "filtered": True, "correct": bool(correct[name][i]),
                             "eps": None, "delta_loss_max": None, "natural_loss": float(zero[name][0][i]),
                             "nonfinite": False})
            else:
                rows.append({"index": i, "filtered": False, "correct": True, "eps": float(eps[j]),
                             "delta_loss_max": float(res.max_increase[j]),
                             "natural_loss": float(res.natural_loss[j]), "nonfinite": bool(res.nonfinite[j])})
        reports[name] = EvalReport(name, reference, rows, aggregate(rows),
                                   {"accuracy": float(correct[name].mean()), "eps_mode": atk.eps_mode,
                                    "eps_start": eps_start, "median_eps": float(np.median(eps))})
    return reports


def compare(models: dict, data: Batch, references, atk: AttackConfig, rng: RngState,
            eps_start: float | None = None) -> dict:
    """``{reference: {model: EvalReport}}``, one full report set per reference."""
    return {ref: robustness_report(models, data, ref, atk, rng, eps_start) for ref in references}


def render_table(comparison: dict, scale: float | None = None) -> str:
    """Plain-text table: one M-Inc column per reference, then N-Loss."""
    refs = list(comparison)
    models = sorted(next(iter(comparison.values())))
    cols = [f"M-Inc ({r})" for r in refs] + ["N-Loss"]
    vals = {}
    for m in models:
        row = [comparison[r][m].aggregate["median_delta_loss_max"] for r in refs]
        row.append(comparison[refs[0]][m].aggregate["median_natural_loss"])
        vals[m] = row
    if scale is None:
        finite = [abs(v) for row in vals.values() for v in row if v]
        scale = 10.0 ** math.floor(math.log10(max(finite))) if finite else 1.0
    exp = int(round(math.log10(scale)))
    width = max(len(c) for c in cols) + 2
    name_w = max(8, max(len(m) for m in models) + 2)
    lines = [f"{'Method':<{name_w}}" + "".join(f"{c:>{width}}" for c in cols),
             f"{'':<{name_w}}" + "".join(f"{'(1e' + str(exp) + ')':>{width}}" for _ in cols)]
    for m in models:
        cells = "".join(f"{'-' if v is None else format(v / scale, '.2f'):>{width}}" for v in vals[m])
        lines.append(f"{m:<{name_w}}" + cells)
    count = comparison[refs[0]][models[0]].aggregate["count"]
    lines.append(f"samples correctly classified by all models: {count}")
    return "\n".join(lines) + "\n"
