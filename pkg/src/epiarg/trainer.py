"""Episodic training of the toy encoder (plus the NNShot reducer).

The loss is the mean cross-entropy of a softmax over negative distances
against the gold token labels, with O as a class. All gradients are
analytic; ``forward_backward`` is the single source of truth checked
against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import SplitCorpus
from .encoder import (
    ChunkPlan,
    EncoderConfig,
    ToyEncoderParams,
    chunk_document,
    window_means,
    window_means_backward,
)
from .heads import HeadConfig, TokenAssignment, io_labels, kmeans_nota
from .sampler import Episode, SamplerConfig, generate_episode_set, sample_episode, PoolIndex
from .seeds import substream

_CKPT_MAGIC = b"FDCK"
_CKPT_VERSION = 1
_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


class NumericalError(RuntimeError):
    """Training produced a non-finite quantity."""


@dataclass(frozen=True)
class TrainConfig:
    episodes: int
    learning_rate: float = 1e-5
    grad_clip_norm: float = 1.0
    validate_every: int = 4000
    seed: int = 0
    batch_size: int = 2
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    dev_episodes: int = 200

    def __post_init__(self):
        if self.learning_rate <= 0 or self.grad_clip_norm <= 0:
            raise ValueError("learning_rate and grad_clip_norm must be positive")
        if self.episodes < 0 or self.validate_every < 1 or self.batch_size < 1 or self.dev_episodes < 1:
            raise ValueError(f"invalid train config {self}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.episodes > 0 and self.validate_every > self.episodes:
            raise ValueError("validate_every must not exceed the episode budget")

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "learning_rate": self.learning_rate,
            "grad_clip_norm": self.grad_clip_norm,
            "validate_every": self.validate_every,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer,
            "weight_decay": self.weight_decay,
            "dev_episodes": self.dev_episodes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


@dataclass
class ModelParams:
    encoder: ToyEncoderParams
    reducer: np.ndarray | None = None  # (d_model, d_reduced)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"table": self.encoder.table, "projection": self.encoder.projection}
        if self.reducer is not None:
            out["reducer"] = self.reducer
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            encoder=self.encoder.copy(),
            reducer=None if self.reducer is None else self.reducer.copy(),
        )


def initialize_params(
    encoder_cfg: EncoderConfig,
    head_cfg: HeadConfig,
    rng: np.random.Generator,
    vocab_tokens: Sequence[str] = (),
) -> ModelParams:
    encoder = ToyEncoderParams.initialize(encoder_cfg, rng, vocab_tokens)
    reducer = None
    if head_cfg.name == "nnshot":
        reducer = rng.uniform(
            -encoder_cfg.init_scale, encoder_cfg.init_scale, size=(encoder_cfg.d_model, head_cfg.d_reduced)
        )
    return ModelParams(encoder=encoder, reducer=reducer)


@dataclass
class Gradients:
    table: np.ndarray
    projection: np.ndarray
    reducer: np.ndarray | None = None

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Gradients":
        return cls(
            table=np.zeros_like(params.encoder.table),
            projection=np.zeros_like(params.encoder.projection),
            reducer=None if params.reducer is None else np.zeros_like(params.reducer),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"table": self.table, "projection": self.projection}
        if self.reducer is not None:
            out["reducer"] = self.reducer
        return out

    def zero_(self) -> None:
        for arr in self.arrays().values():
            arr.fill(0.0)

    def scale_(self, factor: float) -> None:
        for arr in self.arrays().values():
            arr *= factor

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.square(a).sum()) for a in self.arrays().values())))


@dataclass
class EpisodeTensors:
    """One episode lowered to bucket indices and integer IO labels."""

    support_buckets: list[np.ndarray]
    support_plans: list[ChunkPlan]
    support_labels: np.ndarray
    query_buckets: list[np.ndarray]
    query_plans: list[ChunkPlan]
    query_labels: np.ndarray
    n_types: int


def episode_tensors(episode: Episode, params: ModelParams, chunk_length: int) -> EpisodeTensors:
    def lower(docs):
        buckets, plans, labels = [], [], []
        for doc in docs:
            buckets.append(params.encoder.bucket_indices(doc.tokens))
            plans.append(chunk_document(len(doc.tokens), chunk_length))
            labels.append(io_labels(len(doc.tokens), doc.arguments, episode.active_types))
        return buckets, plans, np.concatenate(labels) if labels else np.empty(0, dtype=np.int64)

    sb, sp, sl = lower(episode.support)
    qb, qp, ql = lower(episode.query)
    return EpisodeTensors(sb, sp, sl, qb, qp, ql, n_types=len(episode.active_types))


def episode_loss(assignment: TokenAssignment, gold: np.ndarray) -> float:
    """Mean cross-entropy of softmax over negative distances, O included as a class."""
    logits = -assignment.class_distances()
    gold = np.asarray(gold)
    if gold.shape[0] != logits.shape[0]:
        raise ValueError("one gold label per query token required")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(logits.shape[0]), gold]))


def _softmax_ce_backward(logits: np.ndarray, gold: np.ndarray) -> tuple[float, np.ndarray]:
    """Returns (mean CE loss, dloss/dlogits)."""
    m = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - m)
    z = exp.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(z[:, 0])
    n = logits.shape[0]
    loss = float(np.mean(lse - logits[np.arange(n), gold]))
    grad = exp / z
    grad[np.arange(n), gold] -= 1.0
    return loss, grad / n


def _encode_docs(
    params: ModelParams,
    buckets: Sequence[np.ndarray],
    plans: Sequence[ChunkPlan],
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward the encoder over documents; returns stacked H and per-doc window means."""
    mixed = []
    for b, plan in zip(buckets, plans):
        mixed.append(window_means(params.encoder.table[b], plan, params.encoder.config.radius))
    stacked = np.vstack(mixed)
    return stacked @ params.encoder.projection, mixed


def _encoder_backward(
    params: ModelParams,
    buckets: Sequence[np.ndarray],
    plans: Sequence[ChunkPlan],
    mixed: Sequence[np.ndarray],
    d_hidden: np.ndarray,
    grads: Gradients,
) -> None:
    """Accumulate dL/dtable and dL/dprojection given dL/dH for stacked documents."""
    radius = params.encoder.config.radius
    offset = 0
    for b, plan, m in zip(buckets, plans, mixed):
        dh = d_hidden[offset : offset + len(b)]
        offset += len(b)
        grads.projection += m.T @ dh
        dmixed = dh @ params.encoder.projection.T
        drows = window_means_backward(dmixed, plan, radius)
        np.add.at(grads.table, b, drows)


def _prototype_forward(hidden: np.ndarray, labels: np.ndarray, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    protos = np.empty((n_classes, hidden.shape[1]))
    counts = np.empty(n_classes)
    for c in range(n_classes):
        mask = labels == c
        if not mask.any():
            raise NumericalError(f"support class {c} has no tokens; episode cannot be trained")
        protos[c] = hidden[mask].mean(axis=0)
        counts[c] = mask.sum()
    return protos, counts


def _squared_distances(query: np.ndarray, protos: np.ndarray) -> np.ndarray:
    return np.square(query[:, None, :] - protos[None, :, :]).sum(axis=2)


def forward_backward(
    params: ModelParams,
    tensors: EpisodeTensors,
    head_cfg: HeadConfig,
    *,
    nota_rng: np.random.Generator | int | None = None,
    fixed_nota: np.ndarray | None = None,
    out: Gradients | None = None,
) -> tuple[float, Gradients]:
    """Episode loss and analytic gradients for the chosen head.

    For MNAV the NOTA centroids are recomputed by k-means inside the forward
    pass (or taken from ``fixed_nota``) and treated as constants: gradients
    flow through the type prototypes and the query embeddings only.
    """
    grads = out if out is not None else Gradients.zeros_like(params)
    n = tensors.n_types
    h_support, mixed_s = _encode_docs(params, tensors.support_buckets, tensors.support_plans)
    h_query, mixed_q = _encode_docs(params, tensors.query_buckets, tensors.query_plans)
    gold = tensors.query_labels

    if head_cfg.name == "protonet":
        protos, counts = _prototype_forward(h_support, tensors.support_labels, n + 1)
        dist = _squared_distances(h_query, protos)
        loss, dlogits = _softmax_ce_backward(-dist, gold)
        ddist = -dlogits
        d_hq = 2.0 * (ddist.sum(axis=1, keepdims=True) * h_query - ddist @ protos)
        d_protos = -2.0 * (ddist.T @ h_query - ddist.sum(axis=0)[:, None] * protos)
        d_hs = d_protos[tensors.support_labels] / counts[tensors.support_labels][:, None]
    elif head_cfg.name == "mnav":
        protos, counts = _prototype_forward(h_support, tensors.support_labels, n + 1)
        if fixed_nota is not None:
            nota = fixed_nota
        else:
            rng = nota_rng if isinstance(nota_rng, np.random.Generator) else np.random.default_rng(nota_rng)
            o_rows = h_support[tensors.support_labels == n]
            nota = kmeans_nota(o_rows, head_cfg.kmeans_k, rng, head_cfg.kmeans_iters).centroids
        type_protos = protos[:n]
        dist_types = _squared_distances(h_query, type_protos)
        dist_nota = _squared_distances(h_query, nota)
        nearest = dist_nota.argmin(axis=1)
        logits = -np.hstack([dist_types, dist_nota[np.arange(dist_nota.shape[0]), nearest][:, None]])
        loss, dlogits = _softmax_ce_backward(logits, gold)
        all_rows = np.vstack([type_protos, nota])
        ddist = np.zeros((h_query.shape[0], all_rows.shape[0]))
        ddist[:, :n] = -dlogits[:, :n]
        ddist[np.arange(ddist.shape[0]), n + nearest] = -dlogits[:, n]
        d_hq = 2.0 * (ddist.sum(axis=1, keepdims=True) * h_query - ddist @ all_rows)
        d_type_protos = -2.0 * (ddist[:, :n].T @ h_query - ddist[:, :n].sum(axis=0)[:, None] * type_protos)
        d_hs = np.zeros_like(h_support)
        typed = tensors.support_labels < n
        d_hs[typed] = d_type_protos[tensors.support_labels[typed]] / counts[tensors.support_labels[typed]][:, None]
    elif head_cfg.name == "nnshot":
        if params.reducer is None:
            raise ValueError("nnshot training requires a reducer")
        r_support = h_support @ params.reducer
        r_query = h_query @ params.reducer
        dmin = np.empty((r_query.shape[0], n + 1))
        umin = np.empty((r_query.shape[0], n + 1), dtype=np.int64)
        dist = np.abs(r_query[:, None, :] - r_support[None, :, :]).sum(axis=2)
        for c in range(n + 1):
            idx = np.flatnonzero(tensors.support_labels == c)
            if idx.size == 0:
                raise NumericalError(f"support class {c} has no tokens; episode cannot be trained")
            sub = dist[:, idx]
            local = sub.argmin(axis=1)
            dmin[:, c] = sub[np.arange(sub.shape[0]), local]
            umin[:, c] = idx[local]
        loss, dlogits = _softmax_ce_backward(-dmin, gold)
        ddmin = -dlogits
        d_rq = np.zeros_like(r_query)
        d_rs = np.zeros_like(r_support)
        for c in range(n + 1):
            sel = umin[:, c]
            sgn = np.sign(r_query - r_support[sel])
            weighted = ddmin[:, c][:, None] * sgn
            d_rq += weighted
            np.add.at(d_rs, sel, -weighted)
        grads.reducer += h_support.T @ d_rs + h_query.T @ d_rq
        d_hq = d_rq @ params.reducer.T
        d_hs = d_rs @ params.reducer.T
    else:
        raise ValueError(f"head {head_cfg.name!r} is not trainable")

    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss!r}")
    _encoder_backward(params, tensors.support_buckets, tensors.support_plans, mixed_s, d_hs, grads)
    _encoder_backward(params, tensors.query_buckets, tensors.query_plans, mixed_q, d_hq, grads)
    return loss, grads


class AdamState:
    def __init__(self, params: ModelParams):
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays().items()}


def clip_global_norm(arrays: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradient arrays in place so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.square(a).sum()) for a in arrays.values())))
    if not np.isfinite(norm):
        raise NumericalError(f"non-finite gradient norm {norm!r}")
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for arr in arrays.values():
            arr *= factor
    return norm


def apply_update(
    arrays: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    cfg: TrainConfig,
    state: AdamState | None,
) -> None:
    """Global-norm clip followed by one SGD or AdamW update, in place."""
    clip_global_norm(grads, cfg.grad_clip_norm)
    if cfg.optimizer == "sgd":
        for name, p in arrays.items():
            p -= cfg.learning_rate * grads[name]
            if cfg.weight_decay:
                p -= cfg.learning_rate * cfg.weight_decay * p
        return
    assert state is not None, "adamw requires optimizer state"
    state.t += 1
    bias1 = 1.0 - _ADAM_BETA1**state.t
    bias2 = 1.0 - _ADAM_BETA2**state.t
    for name, p in arrays.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= _ADAM_BETA1
        m += (1.0 - _ADAM_BETA1) * g
        v *= _ADAM_BETA2
        v += (1.0 - _ADAM_BETA2) * np.square(g)
        update = (m / bias1) / (np.sqrt(v / bias2) + _ADAM_EPS)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p
        p -= cfg.learning_rate * update


def step(params: ModelParams, grads: Gradients, cfg: TrainConfig, state: AdamState | None = None) -> ModelParams:
    """One optimizer step; validates gradient finiteness before touching parameters."""
    for name, g in grads.arrays().items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name!r}")
    apply_update(params.arrays(), grads.arrays(), cfg, state)
    return params


@dataclass
class Checkpoint:
    params: ModelParams
    config: dict
    episode: int
    history: tuple[tuple[int, float], ...] = ()

    @property
    def best_f1(self) -> float:
        return max((f1 for _, f1 in self.history), default=0.0)


def train(
    split: SplitCorpus,
    sampler_cfg: SamplerConfig,
    train_cfg: TrainConfig,
    head_cfg: HeadConfig = HeadConfig("protonet"),
    encoder_cfg: EncoderConfig = EncoderConfig(),
    *,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Episodic training on the train pool with dev-set checkpoint selection.

    Validation runs every ``validate_every`` episodes (and at the end); the
    returned checkpoint carries the parameters with the best dev macro-F1,
    or the final parameters when no validation ever ran.
    """
    from .inference import evaluate_episodes  # local import to avoid a module cycle

    vocab_tokens = [t for doc in split.train for t in doc.tokens]
    params = initialize_params(encoder_cfg, head_cfg, substream(train_cfg.seed, "init"), vocab_tokens)
    config_echo = {
        "sampler": sampler_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "head": head_cfg.to_dict(),
        "encoder": encoder_cfg.to_dict(),
    }
    if train_cfg.episodes == 0:
        return Checkpoint(params=params, config=config_echo, episode=0, history=())

    dev_episodes = generate_episode_set(
        split.dev, sampler_cfg, train_cfg.dev_episodes, label="dev"
    ).episodes
    train_index = PoolIndex(split.train)

    grads = Gradients.zeros_like(params)
    state = AdamState(params) if train_cfg.optimizer == "adamw" else None
    history: list[tuple[int, float]] = []
    best_f1 = -1.0
    best_params = params.copy()
    in_batch = 0
    log_handle = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for i in range(train_cfg.episodes):
            rng = substream(sampler_cfg.seed, "sampler", "train", i)
            episode = sample_episode(train_index, sampler_cfg, rng, episode_id=i)
            tensors = episode_tensors(episode, params, encoder_cfg.chunk_length)
            loss, _ = forward_backward(
                params,
                tensors,
                head_cfg,
                nota_rng=substream(train_cfg.seed, "kmeans", i),
                out=grads,
            )
            in_batch += 1
            record: dict = {"episode": i + 1, "loss": loss}
            if in_batch == train_cfg.batch_size or i == train_cfg.episodes - 1:
                grads.scale_(1.0 / in_batch)
                step(params, grads, train_cfg, state)
                grads.zero_()
                in_batch = 0
            if (i + 1) % train_cfg.validate_every == 0 or i == train_cfg.episodes - 1:
                report = evaluate_episodes(
                    dev_episodes, params, head_cfg, encoder_cfg, seed=train_cfg.seed
                )
                history.append((i + 1, report.macro_f1))
                record["dev_f1"] = report.macro_f1
                if report.macro_f1 > best_f1:
                    best_f1 = report.macro_f1
                    best_params = params.copy()
            if log_handle is not None:
                log_handle.write(json.dumps(record) + "\n")
    finally:
        if log_handle is not None:
            log_handle.close()
    return Checkpoint(
        params=best_params,
        config=config_echo,
        episode=train_cfg.episodes,
        history=tuple(history),
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Versioned binary: magic, config JSON blob, then named f32 tensors with shapes."""
    meta = {
        "config": ckpt.config,
        "episode": ckpt.episode,
        "history": [[e, f] for e, f in ckpt.history],
        "vocab": ckpt.params.encoder.vocab,
    }
    blob = json.dumps(meta, ensure_ascii=False).encode("utf-8")
    tensors = dict(ckpt.params.arrays())
    with open(path, "wb") as handle:
        handle.write(_CKPT_MAGIC)
        handle.write(struct.pack("<I", _CKPT_VERSION))
        handle.write(struct.pack("<Q", len(blob)))
        handle.write(blob)
        handle.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            handle.write(struct.pack("<I", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<I", arr.ndim))
            handle.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            handle.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as handle:
        if handle.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", handle.read(4))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<Q", handle.read(8))
        meta = json.loads(handle.read(blob_len).decode("utf-8"))
        (n_tensors,) = struct.unpack("<I", handle.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", handle.read(4))
            name = handle.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", handle.read(4))
            shape = struct.unpack(f"<{ndim}Q", handle.read(8 * ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(handle.read(count * 4), dtype="<f4").astype(np.float64)
            tensors[name] = data.reshape(shape)
    encoder_cfg = EncoderConfig.from_dict(meta["config"]["encoder"])
    encoder = ToyEncoderParams(
        config=encoder_cfg,
        vocab=dict(meta["vocab"]),
        table=tensors["table"],
        projection=tensors["projection"],
    )
    params = ModelParams(encoder=encoder, reducer=tensors.get("reducer"))
    return Checkpoint(
        params=params,
        config=meta["config"],
        episode=meta["episode"],
        history=tuple((int(e), float(f)) for e, f in meta["history"]),
    )
