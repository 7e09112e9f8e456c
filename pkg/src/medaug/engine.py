"""Momentum-contrast training core in numpy.

The encoder is a ReLU MLP on flattened pixels (the backbone) followed by a
two-layer projection head whose output is L2-normalized. Gradients are
written out by hand and only flow through the query encoder; the key encoder
is an exponential moving average of it. Negatives come from a FIFO queue of
past keys tagged with laterality, and every negative strategy reduces to a
list of ``(embedding, weight)`` terms fed to a weighted InfoNCE.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from medaug.cohort import Laterality
from medaug.errors import DegenerateProportionError, NumericAbort

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
UNIT_NORM_TOL = 1e-6
INPUT_CENTER = 0.5

Params = dict  # name -> np.ndarray, insertion-ordered


# --------------------------------------------------------------------------- encoder


@dataclass
class EncoderConfig:
    input_dim: int = 256
    widths: tuple[int, ...] = (256, 128)
    head_width: int = 128
    embed_dim: int = 64


def layer_names(cfg: EncoderConfig) -> list[str]:
    return [f"backbone.{i}" for i in range(len(cfg.widths))] + ["head.0", "head.1"]


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> Params:
    dims = [cfg.input_dim, *cfg.widths, cfg.head_width, cfg.embed_dim]
    params = {}
    for name, fan_in, fan_out in zip(layer_names(cfg), dims[:-1], dims[1:]):
        params[f"{name}.W"] = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        params[f"{name}.b"] = np.zeros(fan_out)
    return params


def _layers(params: Params, upto: str = "head"):
    names = [k[:-2] for k in params if k.endswith(".W")]
    if upto == "backbone":
        names = [n for n in names if n.startswith("backbone.")]
    return names


def forward(params: Params, x: np.ndarray, upto: str = "head"):
    """Forward pass on a batch ``x`` of shape (N, input_dim).

    ``upto="backbone"`` stops at the (ReLU) representation used by probes.
    ``upto="head"`` returns unit-norm projections. Returns ``(out, cache)``.
    """
    names = _layers(params, upto)
    w0 = params[f"{names[0]}.W"]
    if x.ndim != 2 or x.shape[1] != w0.shape[0]:
        raise ValueError(f"input has shape {x.shape}, encoder expects (N, {w0.shape[0]})")
    acts = [x]
    h = x
    last = len(names) - 1
    for i, name in enumerate(names):
        h = h @ params[f"{name}.W"] + params[f"{name}.b"]
        if not (upto == "head" and i == last):
            h = np.maximum(h, 0.0)
        acts.append(h)
    if upto == "backbone":
        return h, {"acts": acts, "names": names, "upto": upto}
    norm = np.linalg.norm(h, axis=1, keepdims=True)
    z = h / norm
    return z, {"acts": acts, "names": names, "upto": upto, "norm": norm, "z": z}


def backward(params: Params, cache: dict, grad_out: np.ndarray) -> Params:
    """Gradients of a scalar w.r.t. ``params`` given its gradient w.r.t. the forward output."""
    acts, names = cache["acts"], cache["names"]
    g = grad_out
    if cache["upto"] == "head":
        z = cache["z"]
        # d(h/|h|) = (I - z z^T) / |h|
        g = (g - z * np.sum(g * z, axis=1, keepdims=True)) / cache["norm"]
    grads = {}
    last = len(names) - 1
    for i in range(last, -1, -1):
        name = names[i]
        out = acts[i + 1]
        if not (cache["upto"] == "head" and i == last):
            g = g * (out > 0.0)
        grads[f"{name}.W"] = acts[i].T @ g
        grads[f"{name}.b"] = g.sum(axis=0)
        if i > 0:
            g = g @ params[f"{name}.W"].T
    return {k: grads[k] for k in params if k in grads}


def encode(params: Params, view) -> np.ndarray:
    pixels = view.pixels if hasattr(view, "pixels") else np.asarray(view)
    z, _ = forward(params, as_input(pixels[None]))
    return z[0]


def as_input(pixels) -> np.ndarray:
    """Flatten a stack of (H, W) grids and center intensities at zero."""
    pixels = np.asarray(pixels, dtype=np.float64)
    return pixels.reshape(len(pixels), -1) - INPUT_CENTER


def features(params: Params, x: np.ndarray) -> np.ndarray:
    return forward(params, x, upto="backbone")[0]


def flatten(params: Params) -> np.ndarray:
    return np.concatenate([v.ravel() for v in params.values()])


def unflatten(vector: np.ndarray, like: Params) -> Params:
    out, i = {}, 0
    for k, v in like.items():
        out[k] = vector[i : i + v.size].reshape(v.shape).copy()
        i += v.size
    return out


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def momentum_update(key_params: Params, query_params: Params, m: float) -> Params:
    """theta_k <- m * theta_k + (1 - m) * theta_q, elementwise."""
    if key_params.keys() != query_params.keys():
        raise ValueError("key and query parameters have different layouts")
    out = {}
    for k, v in key_params.items():
        q = query_params[k]
        if v.shape != q.shape:
            raise ValueError(f"shape mismatch for {k}: {v.shape} vs {q.shape}")
        out[k] = m * v + (1.0 - m) * q
    return out


@dataclass
class EncoderState:
    query: Params
    key: Params
    momentum: float = 0.999
    temperature: float = 0.2

    @classmethod
    def create(cls, cfg: EncoderConfig, rng, momentum=0.999, temperature=0.2):
        query = init_params(cfg, rng)
        return cls(query, copy_params(query), momentum, temperature)


# --------------------------------------------------------------------------- loss


def info_nce(q, k_pos, negatives, weights=None, tau: float = 0.2) -> float:
    """Weighted InfoNCE for one query.

    ``negatives`` is an (n, d) array or a list of ``(embedding, weight)``
    pairs; in the latter case ``weights`` must be omitted.
    """
    return info_nce_grad(q, k_pos, negatives, weights, tau)[0]


def _as_terms(negatives, weights, dim):
    if weights is None and isinstance(negatives, (list, tuple)):
        if negatives:
            z = np.stack([np.asarray(e, dtype=np.float64) for e, _ in negatives])
            w = np.array([float(wt) for _, wt in negatives])
        else:
            z, w = np.zeros((0, dim)), np.zeros(0)
        return z, w
    z = np.asarray(negatives, dtype=np.float64).reshape(-1, dim)
    w = np.ones(len(z)) if weights is None else np.asarray(weights, dtype=np.float64)
    return z, w


def info_nce_grad(q, k_pos, negatives, weights=None, tau: float = 0.2):
    """Loss and its gradient w.r.t. ``q`` (keys and negatives are constants)."""
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    q = np.asarray(q, dtype=np.float64)
    k_pos = np.asarray(k_pos, dtype=np.float64)
    z, w = _as_terms(negatives, weights, q.shape[-1])
    if np.any(w <= 0):
        raise ValueError("negative weights must be > 0")
    pos = q @ k_pos / tau
    neg = z @ q / tau + np.log(w)
    top = max(pos, neg.max()) if len(neg) else pos
    e_pos = np.exp(pos - top)
    e_neg = np.exp(neg - top)
    denom = e_pos + e_neg.sum()
    loss = float(top + np.log(denom) - pos)
    p_pos = e_pos / denom
    p_neg = e_neg / denom
    grad = ((p_pos - 1.0) * k_pos + p_neg @ z) / tau
    return loss, grad


# --------------------------------------------------------------------------- queue


_LAT_CODE = {Laterality.FRONTAL: 0, Laterality.LATERAL: 1}


def lat_code(lat) -> int:
    if isinstance(lat, (int, np.integer)):
        return int(lat)
    return _LAT_CODE[Laterality(lat)]


class NegativeQueue:
    """FIFO ring of key embeddings with laterality and source tags."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._emb = np.zeros((capacity, dim))
        self._lat = np.zeros(capacity, dtype=np.int8)
        self._img = np.zeros(capacity, dtype=np.int64)
        self._pat = np.zeros(capacity, dtype=np.int64)
        self._next = 0
        self.size = 0

    def __len__(self):
        return self.size

    def _order(self) -> np.ndarray:
        start = (self._next - self.size) % self.capacity
        return (start + np.arange(self.size)) % self.capacity

    @property
    def embeddings(self) -> np.ndarray:
        return self._emb[self._order()]

    @property
    def lateralities(self) -> np.ndarray:
        return self._lat[self._order()]

    @property
    def image_ids(self) -> np.ndarray:
        return self._img[self._order()]

    @property
    def patient_ids(self) -> np.ndarray:
        return self._pat[self._order()]

    def push(self, emb, lateralities, image_ids, patient_ids) -> None:
        emb = np.asarray(emb, dtype=np.float64).reshape(-1, self.dim)
        if len(emb) == 0:
            return
        norms = np.linalg.norm(emb, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ValueError("queue entries must be unit-norm")
        lats = np.array([lat_code(v) for v in lateralities], dtype=np.int8)
        for i in range(len(emb)):
            self._emb[self._next] = emb[i]
            self._lat[self._next] = lats[i]
            self._img[self._next] = image_ids[i]
            self._pat[self._next] = patient_ids[i]
            self._next = (self._next + 1) % self.capacity
        self.size = min(self.size + len(emb), self.capacity)

    def filtered(self, mask) -> "NegativeQueue":
        """A new queue holding only the masked entries, order preserved."""
        mask = np.asarray(mask, dtype=bool)
        out = NegativeQueue(self.capacity, self.dim)
        out.push(self.embeddings[mask], self.lateralities[mask], self.image_ids[mask], self.patient_ids[mask])
        return out

    def state(self) -> dict:
        return {
            "queue.emb": self.embeddings,
            "queue.lat": self.lateralities,
            "queue.img": self.image_ids,
            "queue.pat": self.patient_ids,
        }

    @classmethod
    def from_state(cls, capacity: int, dim: int, state: dict) -> "NegativeQueue":
        q = cls(capacity, dim)
        q.push(state["queue.emb"], state["queue.lat"], state["queue.img"], state["queue.pat"])
        return q


def enqueue(queue: NegativeQueue, emb, lateralities, image_ids, patient_ids) -> NegativeQueue:
    queue.push(emb, lateralities, image_ids, patient_ids)
    return queue


# --------------------------------------------------------------------------- negative strategies


class NegativeKind(str, enum.Enum):
    DEFAULT = "default"
    SAME_LATERALITY = "same_laterality"
    REWEIGHTED = "reweighted"
    APPENDED = "appended"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class NegativeStrategy:
    kind: NegativeKind = NegativeKind.DEFAULT
    target: float = 0.1  # reweighted: share of total weight on same-laterality keys
    m: int | None = None  # appended / synthetic sample size; None -> min(64, available)
    match_proportion: bool = False  # reweighted with t = r (identity weights)

    def __post_init__(self):
        object.__setattr__(self, "kind", NegativeKind(self.kind))
        if self.kind is NegativeKind.REWEIGHTED and not self.match_proportion:
            if not 0.0 < self.target < 1.0:
                raise ValueError("reweighted target must be in (0, 1)")
        if self.m is not None and self.m < 1:
            raise ValueError("m must be >= 1")

    @property
    def name(self) -> str:
        if self.kind is NegativeKind.REWEIGHTED:
            return "reweighted(t=r)" if self.match_proportion else f"reweighted(t={self.target:g})"
        if self.kind in (NegativeKind.APPENDED, NegativeKind.SYNTHETIC) and self.m is not None:
            return f"{self.kind.value}(m={self.m})"
        return self.kind.value


DEFAULT_SAMPLE_CAP = 64


def reweight(n_same: int, n_total: int, target: float | None):
    """Per-key weights ``(w_same, w_diff)`` putting ``target`` of the total weight on same-laterality keys.

    ``target=None`` uses ``t = r``, which gives unit weights.
    """
    if n_total == 0 or n_same == 0 or n_same == n_total:
        raise DegenerateProportionError(
            f"same-laterality proportion r = {n_same}/{n_total} leaves reweighting undefined"
        )
    r = n_same / n_total
    t = r if target is None else target
    return t / r, (1.0 - t) / (1.0 - r)


def synthetic_negative(s_i, s_j, u: float) -> np.ndarray:
    h = u * np.asarray(s_i) + (1.0 - u) * np.asarray(s_j)
    norm = np.linalg.norm(h)
    if norm == 0.0:
        return np.asarray(s_i, dtype=np.float64).copy()
    return h / norm


def negative_terms(queue: NegativeQueue, query_laterality, strategy: NegativeStrategy, rng):
    """Negatives and weights for one query: ``(embeddings (n, d), weights (n,))``."""
    emb = queue.embeddings
    same = queue.lateralities == lat_code(query_laterality)
    kind = strategy.kind
    if kind is NegativeKind.DEFAULT:
        return emb, np.ones(len(emb))
    if kind is NegativeKind.SAME_LATERALITY:
        return emb[same], np.ones(int(same.sum()))
    if kind is NegativeKind.REWEIGHTED:
        w_s, w_d = reweight(int(same.sum()), len(emb), None if strategy.match_proportion else strategy.target)
        return emb, np.where(same, w_s, w_d)
    idx = np.flatnonzero(same)
    if len(idx) == 0:
        log.warning("no same-laterality keys in queue; %s falls back to default", kind.value)
        return emb, np.ones(len(emb))
    m = min(strategy.m or DEFAULT_SAMPLE_CAP, len(idx))
    sample = emb[rng.choice(idx, size=m, replace=False)]
    if kind is NegativeKind.APPENDED:
        extra = sample
    else:
        if m >= 2:
            pairs = np.array([rng.choice(m, size=2, replace=False) for _ in range(m)])
        else:
            pairs = np.zeros((m, 2), dtype=np.int64)
        u = rng.random(m)
        synth = np.stack([synthetic_negative(sample[i], sample[j], uu) for (i, j), uu in zip(pairs, u)])
        extra = np.concatenate([sample, synth])
    z = np.concatenate([emb, extra])
    return z, np.ones(len(z))


# --------------------------------------------------------------------------- training


@dataclass
class SGD:
    lr: float = 1e-3
    momentum: float = 0.0
    weight_decay: float = 0.0
    _velocity: dict = field(default_factory=dict, repr=False)

    def step(self, params: Params, grads: Params) -> Params:
        out = {}
        for k, p in params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            if self.momentum:
                v = self.momentum * self._velocity.get(k, 0.0) + g
                self._velocity[k] = v
                g = v
            out[k] = p - self.lr * g
        return out


@dataclass
class Batch:
    """Flattened query/partner views plus the tags the queue needs."""

    xq: np.ndarray
    xk: np.ndarray
    query_lat: np.ndarray
    key_lat: np.ndarray
    key_image: np.ndarray
    key_patient: np.ndarray
    query_image: np.ndarray
    rngs: list  # one generator per sample, for strategy sampling


@dataclass
class StepResult:
    loss: float | None
    n_negatives: float
    same_share: float
    fallbacks: int


def batch_loss_and_grad(state: EncoderState, queue: NegativeQueue, batch: Batch, strategy: NegativeStrategy):
    """Mean per-sample loss and its gradient w.r.t. the query params; keys and stats ride along."""
    zq, cache = forward(state.query, batch.xq)
    zk, _ = forward(state.key, batch.xk)
    n = len(zq)
    dz = np.zeros_like(zq)
    losses = np.zeros(n)
    n_negs, shares, fallbacks = [], [], 0
    for i in range(n):
        try:
            z, w = negative_terms(queue, batch.query_lat[i], strategy, batch.rngs[i])
        except DegenerateProportionError as exc:
            log.warning("%s; using default weights", exc)
            fallbacks += 1
            z, w = negative_terms(queue, batch.query_lat[i], NegativeStrategy(), batch.rngs[i])
        losses[i], dz[i] = info_nce_grad(zq[i], zk[i], z, w, state.temperature)
        n_negs.append(len(z))
        same = queue.lateralities == lat_code(batch.query_lat[i])
        if strategy.kind is NegativeKind.REWEIGHTED and len(w) == len(same) and w.sum() > 0:
            shares.append(w[same].sum() / w.sum())
        else:
            shares.append(float(same.mean()) if len(same) else 0.0)
    grads = backward(state.query, cache, dz / n)
    stats = StepResult(float(losses.mean()), float(np.mean(n_negs)), float(np.mean(shares)), fallbacks)
    return float(losses.mean()), grads, zk, stats, losses


def train_step(
    state: EncoderState,
    queue: NegativeQueue,
    batch: Batch,
    strategy: NegativeStrategy,
    optimizer: SGD,
    warmup: int = 0,
    dump_dir=None,
):
    """One MoCo step. Returns ``(state, queue, StepResult)``.

    While the queue holds fewer than ``warmup`` entries the step only encodes
    and enqueues keys; the reported loss is ``None``.
    """
    if len(queue) < max(warmup, 1):
        zk, _ = forward(state.key, batch.xk)
        queue.push(zk, batch.key_lat, batch.key_image, batch.key_patient)
        return state, queue, StepResult(None, 0.0, 0.0, 0)

    loss, grads, zk, stats, losses = batch_loss_and_grad(state, queue, batch, strategy)
    finite = np.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values())
    if not finite:
        path = None
        if dump_dir is not None:
            path = Path(dump_dir) / "numeric_abort.npz"
            np.savez(
                path,
                xq=batch.xq,
                xk=batch.xk,
                query_image=batch.query_image,
                key_image=batch.key_image,
                losses=losses,
            )
        bad = batch.query_image[~np.isfinite(losses)].tolist() if len(losses) else []
        raise NumericAbort(f"non-finite loss/gradient (loss={loss}, offending queries={bad})", path)
    query = optimizer.step(state.query, grads)
    key = momentum_update(state.key, query, state.momentum)
    state = EncoderState(query, key, state.momentum, state.temperature)
    queue.push(zk, batch.key_lat, batch.key_image, batch.key_patient)
    return state, queue, stats


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, state: EncoderState, queue: NegativeQueue, meta: dict) -> None:
    arrays = {f"query.{k}": v for k, v in state.query.items()}
    arrays.update({f"key.{k}": v for k, v in state.key.items()})
    arrays.update(queue.state())
    header = {
        "version": CHECKPOINT_VERSION,
        "momentum": state.momentum,
        "temperature": state.temperature,
        "queue_capacity": queue.capacity,
        "queue_dim": queue.dim,
        **meta,
    }
    arrays["meta"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns ``(state, queue, meta)``."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        query = {k[6:]: data[k] for k in data.files if k.startswith("query.")}
        key = {k[4:]: data[k] for k in data.files if k.startswith("key.")}
        queue = NegativeQueue.from_state(
            meta["queue_capacity"], meta["queue_dim"], {k: data[k] for k in data.files if k.startswith("queue.")}
        )
    return EncoderState(query, key, meta["momentum"], meta["temperature"]), queue, meta


def strategy_dict(strategy: NegativeStrategy) -> dict:
    d = asdict(strategy)
    d["kind"] = strategy.kind.value
    return d
