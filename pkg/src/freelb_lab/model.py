"""Small post-LN transformer encoder classifier.

The word-embedding lookup ``X = V[Z]`` is kept separate from the rest of the
network so that perturbations enter as ``forward(X + delta, ...)``; the
positional table is added inside ``forward``, after the perturbation.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import DropoutMask, RngState, Tensor

PAD_ID = 0
ATTN_OFFSET = -1e9
LN_EPS = 1e-5
CHECKPOINT_FORMAT = "freelb-lab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    dim: int = 32
    heads: int = 2
    blocks: int = 1
    ff_dim: int = 64
    max_len: int = 32
    dropout: float = 0.1
    num_classes: int = 2

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")
        if self.blocks < 1:
            raise ValueError("need at least one transformer block")
        if self.vocab_size < 1 or self.num_classes < 2:
            raise ValueError("vocab_size must be >= 1 and num_classes >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def dropout_sites(self) -> list[str]:
        sites = ["emb"]
        for l in range(self.blocks):
            sites += [f"attn{l}", f"ffn{l}"]
        return sites


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())


@dataclass
class Batch:
    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids.ndim != 2 or self.ids.shape != self.mask.shape:
            raise T.ShapeError("ids and mask must both be (batch, seq)")
        if self.labels.shape != (self.ids.shape[0],):
            raise T.ShapeError("labels must be (batch,)")
        if np.any((self.ids == PAD_ID) & (self.mask != 0)):
            raise ValueError("PAD positions must have mask 0")

    def __len__(self):
        return self.ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.ids.shape[1]

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(self.ids[idx], self.mask[idx], self.labels[idx])


class PassCounter:
    """Counts full forward/backward passes and partial (prefix-only) passes."""

    __slots__ = ("forwards", "backwards", "partial")

    def __init__(self, forwards=0, backwards=0, partial=0):
        self.forwards, self.backwards, self.partial = forwards, backwards, partial

    def copy(self) -> "PassCounter":
        return PassCounter(self.forwards, self.backwards, self.partial)

    def as_tuple(self) -> tuple:
        return self.forwards, self.backwards, self.partial

    def __sub__(self, other):
        return PassCounter(*(a - b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def __repr__(self):
        return f"PassCounter(forwards={self.forwards}, backwards={self.backwards}, partial={self.partial})"


class LossGrads(NamedTuple):
    loss: float
    theta: dict | None
    delta: np.ndarray | None


class SplitGrads(NamedTuple):
    loss: float
    theta: dict
    split_grad: np.ndarray
    delta: np.ndarray


# ---------------------------------------------------------------------------
# parameters


def init_params(config: ModelConfig, rng: RngState) -> ModelParams:
    d, f = config.dim, config.ff_dim

    def normal(shape, std):
        return rng.generator.normal(0.0, std, size=shape)

    arrays = {}
    emb = normal((config.vocab_size, d), 1.0 / math.sqrt(d))
    emb[PAD_ID] = 0.0
    arrays["tok_emb"] = emb
    arrays["pos_emb"] = normal((config.max_len, d), 0.5 / math.sqrt(d))
    for l in range(config.blocks):
        pre = f"blocks.{l}."
        for name in ("q", "k", "v", "o"):
            arrays[pre + "w" + name] = normal((d, d), 1.0 / math.sqrt(d))
            arrays[pre + "b" + name] = np.zeros(d)
        arrays[pre + "ln1.g"] = np.ones(d)
        arrays[pre + "ln1.b"] = np.zeros(d)
        arrays[pre + "w1"] = normal((d, f), 1.0 / math.sqrt(d))
        arrays[pre + "b1"] = np.zeros(f)
        arrays[pre + "w2"] = normal((f, d), 1.0 / math.sqrt(f))
        arrays[pre + "b2"] = np.zeros(d)
        arrays[pre + "ln2.g"] = np.ones(d)
        arrays[pre + "ln2.b"] = np.zeros(d)
    arrays["head.w"] = normal((d, config.num_classes), 1.0 / math.sqrt(d))
    arrays["head.b"] = np.zeros(config.num_classes)
    return ModelParams(config, arrays)


def _tensors(params: ModelParams, requires_grad: bool) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.arrays.items()}


def sample_masks(config: ModelConfig, batch_shape, rng: RngState) -> dict:
    """One inverted-dropout mask per dropout site, each from its own sub-stream."""
    b, s = batch_shape
    return {site: T.sample_dropout_mask((b, s, config.dim), config.dropout, rng.child(site))
            for site in config.dropout_sites}


# ---------------------------------------------------------------------------
# forward pieces


def _check_ids(batch: Batch, config: ModelConfig):
    if batch.ids.size and (batch.ids.min() < 0 or batch.ids.max() >= config.vocab_size):
        raise IndexError(f"token id out of range [0, {config.vocab_size})")
    if batch.seq_len > config.max_len:
        raise T.ShapeError(f"sequence length {batch.seq_len} exceeds max_len {config.max_len}")


def _dropout(h: Tensor, masks, site: str) -> Tensor:
    if masks is None:
        return h
    try:
        mask = masks[site]
    except KeyError:
        raise KeyError(f"dropout masks are missing site {site!r}") from None
    return T.apply_dropout(h, mask)


def _attn_offset(batch: Batch) -> Tensor:
    off = (1.0 - batch.mask) * ATTN_OFFSET
    return Tensor._wrap(off[:, None, None, :])


def _stem(x: Tensor, P: dict, masks) -> Tensor:
    s = x.shape[1]
    pos = T.select(P["pos_emb"], slice(0, s))
    return _dropout(x + pos, masks, "emb")


def _block(h: Tensor, l: int, P: dict, offset: Tensor, masks, config: ModelConfig) -> Tensor:
    b, s, d = h.shape
    nh = config.heads
    dh = d // nh
    pre = f"blocks.{l}."

    def heads(name):
        t = T.matmul(h, P[pre + "w" + name]) + P[pre + "b" + name]
        return t.reshape(b, s, nh, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + offset
    ctx = T.matmul(T.softmax_rows(scores), v).transpose(0, 2, 1, 3).reshape(b, s, d)
    o = T.matmul(ctx, P[pre + "wo"]) + P[pre + "bo"]
    h = T.layer_norm(h + _dropout(o, masks, f"attn{l}"), P[pre + "ln1.g"], P[pre + "ln1.b"], LN_EPS)
    f = T.matmul(T.gelu(T.matmul(h, P[pre + "w1"]) + P[pre + "b1"]), P[pre + "w2"]) + P[pre + "b2"]
    return T.layer_norm(h + _dropout(f, masks, f"ffn{l}"), P[pre + "ln2.g"], P[pre + "ln2.b"], LN_EPS)


def _head(h: Tensor, P: dict) -> Tensor:
    pooled = T.select(h, (slice(None), 0))
    return T.matmul(pooled, P["head.w"]) + P["head.b"]


def _prefix(x: Tensor, batch: Batch, P: dict, masks, config: ModelConfig, split_after: int) -> Tensor:
    if split_after == 0:
        return x
    h = _stem(x, P, masks)
    offset = _attn_offset(batch)
    for l in range(split_after):
        h = _block(h, l, P, offset, masks, config)
    return h


def _suffix(h: Tensor, batch: Batch, P: dict, masks, config: ModelConfig, split_after: int) -> Tensor:
    if split_after == 0:
        h = _stem(h, P, masks)
    offset = _attn_offset(batch)
    for l in range(split_after, config.blocks):
        h = _block(h, l, P, offset, masks, config)
    return _head(h, P)


def _check_split(config: ModelConfig, split_after: int):
    if not 0 <= split_after <= config.blocks:
        raise ValueError(f"split_after must be in [0, {config.blocks}]")


def _as_input(x, batch: Batch, config: ModelConfig) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape != (len(batch), batch.seq_len, config.dim):
        raise T.ShapeError(f"perturbed embeddings have shape {x.shape}, "
                           f"expected {(len(batch), batch.seq_len, config.dim)}")
    return x


# ---------------------------------------------------------------------------
# public operations


def embed(batch: Batch, params, requires_grad: bool = False) -> Tensor:
    """Word embeddings ``X[b, i] = V[Z[b, i]]``, without positional terms.

    ``params`` may be a :class:`ModelParams` (wrapped as constants unless
    ``requires_grad``) or a dict of tensors already on a tape.
    """
    if isinstance(params, ModelParams):
        _check_ids(batch, params.config)
        table = Tensor(params["tok_emb"], requires_grad=requires_grad)
    else:
        table = params["tok_emb"]
    return T.take_rows(table, batch.ids)


def forward(x_pert, batch: Batch, params, masks: dict | None = None) -> Tensor:
    """Logits for perturbed word embeddings ``x_pert = X + delta``.

    ``masks`` maps dropout site to :class:`DropoutMask`; ``None`` disables
    dropout.
    """
    config, P = _resolve(params)
    _check_ids(batch, config)
    x = _as_input(x_pert, batch, config)
    return _suffix(_prefix(x, batch, P, masks, config, 1), batch, P, masks, config, 1)


def forward_split(x_pert, batch: Batch, params, masks: dict | None = None, split_after: int = 1):
    """Run the prefix ``f0`` (stem plus the first ``split_after`` blocks).

    Returns ``(h1, continuation)`` where ``continuation(h)`` maps a prefix
    output to logits.  ``split_after=0`` makes ``f0`` the identity on the
    perturbed word embeddings.
    """
    config, P = _resolve(params)
    _check_ids(batch, config)
    _check_split(config, split_after)
    x = _as_input(x_pert, batch, config)
    h1 = _prefix(x, batch, P, masks, config, split_after)

    def continuation(h):
        return _suffix(h if isinstance(h, Tensor) else Tensor(h), batch, P, masks, config, split_after)

    return h1, continuation


def _resolve(params):
    if isinstance(params, ModelParams):
        return params.config, _tensors(params, False)
    config, P = params
    return config, P


def _token_mask(batch: Batch) -> np.ndarray:
    return batch.mask[:, :, None]


def _finish_theta(grads: dict) -> dict:
    emb = grads.get("tok_emb")
    if emb is not None:
        emb[PAD_ID] = 0.0
    return grads


def loss_and_grads(batch: Batch, delta, params: ModelParams, masks: dict | None = None,
                   wanted=("theta", "delta"), counter: PassCounter | None = None) -> LossGrads:
    """Batch-mean cross-entropy at ``X + delta`` and its gradients.

    Both gradients come out of a single backward pass over one tape.  The
    PAD row of the embedding gradient and the PAD positions of the delta
    gradient are zeroed.
    """
    wanted = set(wanted)
    if not wanted <= {"theta", "delta"}:
        raise ValueError(f"unknown gradient request {wanted - {'theta', 'delta'}}")
    config = params.config
    _check_ids(batch, config)
    P = _tensors(params, "theta" in wanted)
    d_t = Tensor(delta, requires_grad="delta" in wanted)
    x = embed(batch, P) + d_t
    logits = forward(x, batch, (config, P), masks)
    loss = T.cross_entropy(logits, batch.labels)
    if counter is not None:
        counter.forwards += 1
    if not wanted:
        return LossGrads(loss.item(), None, None)
    leaves = (list(P.values()) if "theta" in wanted else []) + ([d_t] if "delta" in wanted else [])
    g = T.backward(loss, leaves)
    if counter is not None:
        counter.backwards += 1
    theta = _finish_theta({k: g[t] for k, t in P.items()}) if "theta" in wanted else None
    gd = g[d_t] * _token_mask(batch) if "delta" in wanted else None
    return LossGrads(loss.item(), theta, gd)


def grad_at_split(batch: Batch, delta, params: ModelParams, masks: dict | None = None,
                  split_after: int = 1, counter: PassCounter | None = None) -> SplitGrads:
    """One full forward/backward that also exposes ``dL/dh1`` at the split.

    The continuation is differentiated with ``h1`` as a detached leaf; the
    resulting ``dL/dh1`` is then pulled back through the prefix, so the
    parameter and delta gradients are the full ones.
    """
    config = params.config
    _check_ids(batch, config)
    _check_split(config, split_after)
    P = _tensors(params, True)
    d_t = Tensor(delta, requires_grad=True)
    h1, cont = forward_split(embed(batch, P) + d_t, batch, (config, P), masks, split_after)
    h1_leaf = Tensor._wrap(h1.data)
    h1_leaf.requires_grad = True
    loss = T.cross_entropy(cont(h1_leaf), batch.labels)
    if counter is not None:
        counter.forwards += 1
    params_t = list(P.values())
    g_tail = T.backward(loss, params_t + [h1_leaf])
    p = g_tail[h1_leaf]
    g_head = T.backward(h1, params_t + [d_t], grad_output=p)
    if counter is not None:
        counter.backwards += 1
    theta = _finish_theta({k: g_tail[t] + g_head[t] for k, t in P.items()})
    return SplitGrads(loss.item(), theta, p, g_head[d_t] * _token_mask(batch))


def prefix_vjp(batch: Batch, delta, params: ModelParams, split_grad: np.ndarray,
               masks: dict | None = None, split_after: int = 1,
               counter: PassCounter | None = None) -> np.ndarray:
    """``J_f0(X + delta)^T @ split_grad``, recomputing only the prefix."""
    config = params.config
    _check_ids(batch, config)
    _check_split(config, split_after)
    P = _tensors(params, False)
    d_t = Tensor(delta, requires_grad=True)
    h1, _ = forward_split(embed(batch, P) + d_t, batch, (config, P), masks, split_after)
    g = T.backward(h1, [d_t], grad_output=split_grad)[d_t]
    if counter is not None:
        counter.partial += 1
    return g * _token_mask(batch)


def logits(batch: Batch, params: ModelParams, delta=None) -> np.ndarray:
    """Evaluation-mode logits (dropout off)."""
    x = embed(batch, params)
    if delta is not None:
        x = x + Tensor(delta)
    return forward(x, batch, params).data


def per_sample_loss_and_grad(batch: Batch, delta, params: ModelParams, with_grad: bool = True):
    """Per-sample losses, predictions and ``d(sum of losses)/d delta``; dropout off."""
    config = params.config
    P = _tensors(params, False)
    d_t = Tensor(delta, requires_grad=with_grad)
    out = forward(embed(batch, P) + d_t, batch, (config, P))
    losses = T.cross_entropy(out, batch.labels, reduction="none")
    preds = out.data.argmax(axis=1)
    if not with_grad:
        return losses.data, preds, None
    g = T.backward(losses, [d_t], grad_output=np.ones(len(batch)))[d_t]
    return losses.data, preds, g * _token_mask(batch)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, seed: int, meta: dict | None = None) -> None:
    """JSON header line, then little-endian float64 arrays in manifest order."""
    manifest, offset = [], 0
    blobs = []
    for name, arr in params.arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(params.config),
        "seed": int(seed),
        "arrays": manifest,
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    config = ModelConfig(**header["model_config"])
    body = raw[nl + 1:]
    expected = init_params_shapes(config)
    arrays = {}
    for entry in header["arrays"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise ValueError(f"{path}: array {name!r} has shape {shape}, expected {expected.get(name)}")
        start, n = entry["offset"], entry["nbytes"]
        if n != 8 * int(np.prod(shape)) or start + n > len(body):
            raise ValueError(f"{path}: array {name!r} is truncated or mis-sized")
        arrays[name] = np.frombuffer(body[start:start + n], dtype="<f8").reshape(shape).astype(np.float64)
    missing = set(expected) - set(arrays)
    if missing:
        raise ValueError(f"{path}: missing arrays {sorted(missing)}")
    return ModelParams(config, arrays), header


def init_params_shapes(config: ModelConfig) -> dict:
    d, f, c = config.dim, config.ff_dim, config.num_classes
    shapes = {"tok_emb": (config.vocab_size, d), "pos_emb": (config.max_len, d)}
    for l in range(config.blocks):
        pre = f"blocks.{l}."
        for name in ("q", "k", "v", "o"):
            shapes[pre + "w" + name] = (d, d)
            shapes[pre + "b" + name] = (d,)
        shapes.update({pre + "ln1.g": (d,), pre + "ln1.b": (d,), pre + "w1": (d, f), pre + "b1": (f,),
                       pre + "w2": (f, d), pre + "b2": (d,), pre + "ln2.g": (d,), pre + "ln2.b": (d,)})
    shapes["head.w"] = (d, c)
    shapes["head.b"] = (c,)
    return shapes
