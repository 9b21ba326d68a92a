"""Update rules and the epoch loop for natural, PGD, FreeAT, FreeLB and YOPO training.

Step functions are pure: they take a :class:`TrainState` and a minibatch and
return a new state, leaving the input untouched.  Randomness for a step is
derived from ``(seed, step)`` so every step is reproducible in isolation.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import model as M
from .adversary import ascent_step, init_delta
from .model import Batch, ModelConfig, ModelParams, PassCounter
from .tensor import NonFiniteError, RngState

METHODS = ("natural", "pgd", "freeat", "freelb", "yopo")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class AdvConfig:
    method: str = "natural"
    steps: int = 3              # K ascent steps (m for YOPO)
    alpha: float = 3e-2
    eps: float = 1.5e-1
    inner_steps: int = 2        # YOPO n
    split_after: int = 1        # YOPO prefix depth in blocks
    lr: float = 0.1
    optimizer: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    reuse_mask: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        min_steps = 0 if self.method == "pgd" else 1
        if self.steps < min_steps:
            raise ValueError(f"steps must be >= {min_steps} for {self.method}")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.eps < 0 or self.alpha < 0:
            raise ValueError("eps and alpha must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


# ---------------------------------------------------------------------------
# hyper-parameter presets (per-task FreeLB settings for GLUE finetuning)


@dataclass(frozen=True)
class Preset:
    eps: float
    alpha: float
    steps: int


PRESETS = {
    "mnli": Preset(2e-1, 1e-1, 2),
    "qnli": Preset(1.5e-1, 1e-1, 2),
    "qqp": Preset(4.5e-1, 1.5e-1, 2),
    "rte": Preset(1.5e-1, 3e-2, 3),
    "sst-2": Preset(6e-1, 1e-1, 2),
    "mrpc": Preset(4e-1, 4e-2, 3),
    "cola": Preset(2e-1, 2.5e-2, 3),
    "sts-b": Preset(3e-1, 1e-1, 3),
    "wnli": Preset(1e-2, 5e-3, 2),
}


def apply_preset(cfg: AdvConfig, name: str, scale: float = 1.0) -> AdvConfig:
    """Return ``cfg`` with a preset's eps/alpha (times ``scale``) and step count."""
    try:
        p = PRESETS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None
    return replace(cfg, eps=p.eps * scale, alpha=p.alpha * scale, steps=p.steps)


def embedding_scale(params: ModelParams) -> float:
    """Mean L2 norm of the non-PAD word-embedding rows."""
    rows = params["tok_emb"][1:]
    return float(np.linalg.norm(rows, axis=1).mean())


# ---------------------------------------------------------------------------
# optimisers


def init_opt_state(params: ModelParams, cfg: AdvConfig) -> dict:
    if cfg.optimizer == "sgd":
        return {}
    zeros = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    return {"m": zeros, "v": {k: np.zeros_like(v) for k, v in params.arrays.items()}, "t": 0}


def apply_update(params: ModelParams, grads: dict, opt_state: dict, cfg: AdvConfig):
    """One optimiser step; returns new ``(params, opt_state)``."""
    if cfg.optimizer == "sgd":
        arrays = {k: v - cfg.lr * grads[k] for k, v in params.arrays.items()}
        return ModelParams(params.config, arrays), opt_state
    t = opt_state["t"] + 1
    m, v, arrays = {}, {}, {}
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for k, p in params.arrays.items():
        g = grads[k]
        m[k] = cfg.beta1 * opt_state["m"][k] + (1.0 - cfg.beta1) * g
        v[k] = cfg.beta2 * opt_state["v"][k] + (1.0 - cfg.beta2) * g * g
        arrays[k] = p - cfg.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + cfg.adam_eps)
    return ModelParams(params.config, arrays), {"m": m, "v": v, "t": t}


# ---------------------------------------------------------------------------
# state and instrumentation


@dataclass
class TrainState:
    params: ModelParams
    opt_state: dict
    seed: int
    step: int = 0        # minibatches consumed
    updates: int = 0     # parameter updates applied
    counter: PassCounter = field(default_factory=PassCounter)
    loss: float = float("nan")

    @classmethod
    def create(cls, params: ModelParams, cfg: AdvConfig) -> "TrainState":
        return cls(params, init_opt_state(params, cfg), cfg.seed)

    def step_rng(self) -> RngState:
        return RngState(self.seed).child("step", self.step)


@dataclass
class StepTrace:
    """What a step did: perturbation trajectory, gradients, masks, provenance."""

    deltas: list = field(default_factory=list)
    delta_grads: list = field(default_factory=list)
    theta_grads: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    theta_versions: list = field(default_factory=list)
    accumulated: dict | None = None
    updates_applied: int = 0


def _masks_for(state: TrainState, batch: Batch, cfg: AdvConfig, t: int, rng: RngState):
    if cfg.reuse_mask:
        t = 0
    return M.sample_masks(state.params.config, (len(batch), batch.seq_len), rng.child("dropout", t))


def _advance(state: TrainState, params, opt_state, loss, updates: int, counter) -> TrainState:
    return TrainState(params, opt_state, state.seed, state.step + 1, state.updates + updates,
                      counter, loss)


def _accumulate(acc: dict | None, grads: dict, weight: float) -> dict:
    if acc is None:
        acc = {k: np.zeros_like(v) for k, v in grads.items()}
    return {k: acc[k] + weight * grads[k] for k in acc}


def natural_step(state: TrainState, batch: Batch, cfg: AdvConfig, trace: StepTrace | None = None) -> TrainState:
    counter = state.counter.copy()
    rng = state.step_rng()
    masks = _masks_for(state, batch, cfg, 0, rng)
    delta = np.zeros((len(batch), batch.seq_len, state.params.config.dim))
    lg = M.loss_and_grads(batch, delta, state.params, masks, ("theta",), counter)
    params, opt = apply_update(state.params, lg.theta, state.opt_state, cfg)
    if trace is not None:
        trace.losses.append(lg.loss)
        trace.theta_grads.append(lg.theta)
        trace.masks.append(masks)
        trace.accumulated = lg.theta
        trace.updates_applied = 1
    return _advance(state, params, opt, lg.loss, 1, counter)


def pgd_k_step(state: TrainState, batch: Batch, cfg: AdvConfig, trace: StepTrace | None = None) -> TrainState:
    """K ascent steps on delta only, then one update at the final perturbation."""
    counter = state.counter.copy()
    rng = state.step_rng()
    dim = state.params.config.dim
    delta = init_delta(batch.mask, dim, cfg.eps, rng.child("delta"))
    for t in range(cfg.steps):
        masks = _masks_for(state, batch, cfg, t, rng)
        lg = M.loss_and_grads(batch, delta.values, state.params, masks, ("delta",), counter)
        if trace is not None:
            trace.deltas.append(delta.values)
            trace.delta_grads.append(lg.delta)
            trace.losses.append(lg.loss)
            trace.masks.append(masks)
        delta = ascent_step(delta, lg.delta, cfg.alpha)
    masks = _masks_for(state, batch, cfg, cfg.steps, rng)
    lg = M.loss_and_grads(batch, delta.values, state.params, masks, ("theta",), counter)
    params, opt = apply_update(state.params, lg.theta, state.opt_state, cfg)
    if trace is not None:
        trace.deltas.append(delta.values)
        trace.losses.append(lg.loss)
        trace.masks.append(masks)
        trace.theta_grads.append(lg.theta)
        trace.accumulated = lg.theta
        trace.updates_applied = 1
    return _advance(state, params, opt, lg.loss, 1, counter)


def freeat_step(state: TrainState, batch: Batch, cfg: AdvConfig, trace: StepTrace | None = None) -> TrainState:
    """Replay the batch K times, updating both theta and delta on every replay."""
    counter = state.counter.copy()
    rng = state.step_rng()
    params, opt = state.params, state.opt_state
    delta = init_delta(batch.mask, params.config.dim, cfg.eps, rng.child("delta"))
    losses = []
    for t in range(cfg.steps):
        masks = _masks_for(state, batch, cfg, t, rng)
        lg = M.loss_and_grads(batch, delta.values, params, masks, ("theta", "delta"), counter)
        if trace is not None:
            trace.deltas.append(delta.values)
            trace.delta_grads.append(lg.delta)
            trace.theta_grads.append(lg.theta)
            trace.losses.append(lg.loss)
            trace.masks.append(masks)
            trace.theta_versions.append(state.updates + t)
        params, opt = apply_update(params, lg.theta, opt, cfg)
        delta = ascent_step(delta, lg.delta, cfg.alpha)
        losses.append(lg.loss)
    if trace is not None:
        trace.deltas.append(delta.values)
        trace.updates_applied = cfg.steps
    return _advance(state, params, opt, float(np.mean(losses)), cfg.steps, counter)


def freelb_step(state: TrainState, batch: Batch, cfg: AdvConfig, trace: StepTrace | None = None,
                project: bool = True) -> TrainState:
    """K ascent steps; parameter gradients from every step are averaged into one update."""
    counter = state.counter.copy()
    rng = state.step_rng()
    K = cfg.steps
    delta = init_delta(batch.mask, state.params.config.dim, cfg.eps, rng.child("delta"))
    acc = None
    losses = []
    for t in range(K):
        masks = _masks_for(state, batch, cfg, t, rng)
        lg = M.loss_and_grads(batch, delta.values, state.params, masks, ("theta", "delta"), counter)
        acc = _accumulate(acc, lg.theta, 1.0 / K)
        if trace is not None:
            trace.deltas.append(delta.values)
            trace.delta_grads.append(lg.delta)
            trace.theta_grads.append(lg.theta)
            trace.losses.append(lg.loss)
            trace.masks.append(masks)
        delta = ascent_step(delta, lg.delta, cfg.alpha, project=project)
        losses.append(lg.loss)
    params, opt = apply_update(state.params, acc, state.opt_state, cfg)
    if trace is not None:
        trace.deltas.append(delta.values)
        trace.accumulated = acc
        trace.updates_applied = 1
    return _advance(state, params, opt, float(np.mean(losses)), 1, counter)


def yopo_step(state: TrainState, batch: Batch, cfg: AdvConfig, trace: StepTrace | None = None,
              project: bool = True) -> TrainState:
    """YOPO-m-n: m full passes, each followed by n prefix-only delta updates at step alpha/n.

    The gradient at the prefix output is held fixed during the n inner
    updates; theta gets one update with the mean of the m full-pass gradients.
    """
    counter = state.counter.copy()
    rng = state.step_rng()
    m, n = cfg.steps, cfg.inner_steps
    step = cfg.alpha / n
    delta = init_delta(batch.mask, state.params.config.dim, cfg.eps, rng.child("delta"))
    acc = None
    losses = []
    for t in range(m):
        masks = _masks_for(state, batch, cfg, t, rng)
        sg = M.grad_at_split(batch, delta.values, state.params, masks, cfg.split_after, counter)
        acc = _accumulate(acc, sg.theta, 1.0 / m)
        losses.append(sg.loss)
        if trace is not None:
            trace.deltas.append(delta.values)
            trace.delta_grads.append(sg.delta)
            trace.theta_grads.append(sg.theta)
            trace.losses.append(sg.loss)
            trace.masks.append(masks)
        for _ in range(n):
            g = M.prefix_vjp(batch, delta.values, state.params, sg.split_grad, masks,
                             cfg.split_after, counter)
            delta = ascent_step(delta, g, step, project=project)
    params, opt = apply_update(state.params, acc, state.opt_state, cfg)
    if trace is not None:
        trace.deltas.append(delta.values)
        trace.accumulated = acc
        trace.updates_applied = 1
    return _advance(state, params, opt, float(np.mean(losses)), 1, counter)


STEP_FUNCTIONS = {
    "natural": natural_step,
    "pgd": pgd_k_step,
    "freeat": freeat_step,
    "freelb": freelb_step,
    "yopo": yopo_step,
}


def expected_passes(cfg: AdvConfig) -> tuple:
    """(forwards, backwards, partial) per minibatch for ``cfg.method``."""
    K = cfg.steps
    return {
        "natural": (1, 1, 0),
        "pgd": (K + 1, K + 1, 0),
        "freeat": (K, K, 0),
        "freelb": (K, K, 0),
        "yopo": (K, K, K * cfg.inner_steps),
    }[cfg.method]


# ---------------------------------------------------------------------------
# training loop


class TrainingDiverged(RuntimeError):
    pass


def trim(batch: Batch) -> Batch:
    """Drop trailing columns that are padding in every row."""
    cols = np.flatnonzero(batch.mask.any(axis=0))
    s = int(cols[-1]) + 1 if cols.size else 1
    if s == batch.seq_len:
        return batch
    return Batch(batch.ids[:, :s], batch.mask[:, :s], batch.labels)


def evaluate(params: ModelParams, data: Batch, batch_size: int = 256) -> dict:
    """Clean accuracy and mean loss with dropout off."""
    correct, total_loss = 0, 0.0
    for start in range(0, len(data), batch_size):
        b = trim(data.subset(np.arange(start, min(start + batch_size, len(data)))))
        losses, preds, _ = M.per_sample_loss_and_grad(
            b, np.zeros((len(b), b.seq_len, params.config.dim)), params, with_grad=False)
        correct += int((preds == b.labels).sum())
        total_loss += float(losses.sum())
    n = len(data)
    return {"accuracy": correct / n if n else 0.0, "loss": total_loss / n if n else 0.0, "n": n}


@dataclass
class TrainReport:
    method: str
    records: list = field(default_factory=list)
    best_epoch: int | None = None
    best_dev_acc: float | None = None
    init_dev_acc: float | None = None
    wall_ms: float | None = None

    @property
    def final_dev_acc(self) -> float | None:
        return self.records[-1]["dev_acc"] if self.records else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["final_dev_acc"] = self.final_dev_acc
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


@dataclass
class TrainResult:
    report: TrainReport
    best: ModelParams
    last: ModelParams


def train(cfg: AdvConfig, model_config: ModelConfig, train_data: Batch, dev_data: Batch,
          record_timing: bool = True, init: ModelParams | None = None, log=None) -> TrainResult:
    """Seeded epoch loop; keeps the parameters with the best dev accuracy."""
    if len(train_data) == 0:
        raise ValueError("training set is empty")
    root = RngState(cfg.seed)
    params = init if init is not None else M.init_params(model_config, root.child("init"))
    state = TrainState.create(params, cfg)
    step_fn = STEP_FUNCTIONS[cfg.method]
    report = TrainReport(cfg.method)
    report.init_dev_acc = evaluate(params, dev_data)["accuracy"] if len(dev_data) else None
    best = params
    t_run = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        before = state.counter.copy()
        perm = root.child("shuffle", epoch).permutation(len(train_data))
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            batch = trim(train_data.subset(perm[start:start + cfg.batch_size]))
            try:
                state = step_fn(state, batch, cfg)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite value at epoch {epoch}, step {state.step}: {exc}") from exc
            losses.append(state.loss)
        dev = evaluate(state.params, dev_data) if len(dev_data) else {"accuracy": float("nan")}
        passes = state.counter - before
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "dev_acc": dev["accuracy"],
            "forwards": passes.forwards,
            "backwards": passes.backwards,
            "partial_passes": passes.partial,
            "wall_ms": round((time.perf_counter() - t0) * 1e3, 3) if record_timing else None,
        }
        report.records.append(record)
        if report.best_dev_acc is None or dev["accuracy"] > report.best_dev_acc:
            report.best_dev_acc, report.best_epoch = dev["accuracy"], epoch
            best = state.params
        if log is not None:
            log(record)
    if report.best_epoch is None:
        report.best_dev_acc = report.init_dev_acc
    report.wall_ms = round((time.perf_counter() - t_run) * 1e3, 3) if record_timing else None
    return TrainResult(report, best, state.params)
