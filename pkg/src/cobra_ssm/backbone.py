"""Mamba language model: embeddings, stacked blocks, logits, loss and decoding.

Visual tokens enter as continuous vectors prepended to the text embeddings;
they never pass through the embedding table. Training loss is next-token
cross-entropy on answer tokens only.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .errors import ConfigurationError, PreconditionError, ShapeError, StateError
from .nn import log_softmax
from .prompting import BASE_VOCAB, EOT_ID, detokenize
from .ssm import (
    NORM_EPS,
    MambaBlockWeights,
    SsmState,
    _rms_norm_backward,
    init_mamba_block,
    mamba_block_backward,
    mamba_block_forward,
    mamba_block_step,
    rms_norm,
)

__all__ = [
    "BackboneConfig", "BackboneWeights", "MultimodalSequence", "SamplingConfig", "GenerationSession",
    "init_backbone", "fuse_sequence", "forward_logits", "next_token_loss", "generate", "detokenize",
]


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 300
    d_model: int = 16
    n_layers: int = 2
    d_state: int = 4
    expand: int = 2
    conv_width: int = 4
    dt_rank: int = 0  # 0 -> ceil(d_model / 16)
    tie_embeddings: bool = True
    zoh_b: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "d_state", "expand", "conv_width"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.vocab_size < BASE_VOCAB:
            raise ConfigurationError(f"vocab_size must be >= {BASE_VOCAB} (256 bytes + special tokens)")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def resolved_dt_rank(self) -> int:
        return self.dt_rank or max(1, -(-self.d_model // 16))


@dataclass(frozen=True)
class BackboneWeights:
    config: BackboneConfig = field(metadata={"param": False})
    embedding: np.ndarray = None          # (V, D)
    layers: tuple[MambaBlockWeights, ...] = ()
    norm_f: np.ndarray = None             # (D,)
    lm_head: np.ndarray | None = None     # (D, V); None when tied to the embedding

    @property
    def unembedding(self) -> np.ndarray:
        return self.embedding.T if self.lm_head is None else self.lm_head

    def new_states(self) -> list[SsmState]:
        return [blk.new_state() for blk in self.layers]


def init_backbone(config: BackboneConfig, seed: int = 0) -> BackboneWeights:
    rng = np.random.default_rng(seed)
    D = config.d_model
    layers = tuple(
        init_mamba_block(D, config.d_state, config.expand, config.conv_width, config.resolved_dt_rank, rng)
        for _ in range(config.n_layers)
    )
    emb = rng.normal(0.0, 0.02, size=(config.vocab_size, D))
    head = None if config.tie_embeddings else rng.normal(0.0, D ** -0.5, size=(D, config.vocab_size))
    return BackboneWeights(config, emb, layers, np.ones(D), head)


def embed(weights: BackboneWeights, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weights.config.vocab_size):
        raise ShapeError(f"token id out of range [0, {weights.config.vocab_size})")
    return weights.embedding[ids]


@dataclass(frozen=True)
class MultimodalSequence:
    """``H = [H_v; embed(text)]`` with per-position token ids and loss mask.

    ``token_ids`` is -1 at visual positions; ``loss_mask[p]`` is true when
    position ``p`` holds an answer token (predicted from position ``p - 1``).
    """

    embeddings: np.ndarray
    token_ids: np.ndarray
    loss_mask: np.ndarray
    n_visual: int = 0

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def fuse_sequence(H_v, text_ids, weights: BackboneWeights, answer_mask=None) -> MultimodalSequence:
    """Prepend visual embeddings (or nothing, for text-only input) to the text embeddings."""
    text_ids = np.asarray(text_ids, dtype=np.int64)
    if text_ids.size == 0:
        raise PreconditionError("text must contain at least one token")
    text_emb = embed(weights, text_ids)
    if H_v is None:
        vis = np.zeros((0, weights.config.d_model))
    else:
        vis = np.asarray(getattr(H_v, "tokens", H_v), dtype=np.float64)
        if vis.ndim != 2 or vis.shape[1] != weights.config.d_model:
            raise ShapeError(f"visual tokens must be (M, {weights.config.d_model}), got {vis.shape}")
    n_vis = vis.shape[0]
    mask_text = np.zeros(text_ids.size, bool) if answer_mask is None else np.asarray(answer_mask, bool)
    if mask_text.shape != text_ids.shape:
        raise ShapeError("answer mask must have one flag per text token")
    return MultimodalSequence(
        embeddings=np.concatenate([vis, text_emb], axis=0),
        token_ids=np.concatenate([np.full(n_vis, -1, np.int64), text_ids]),
        loss_mask=np.concatenate([np.zeros(n_vis, bool), mask_text]),
        n_visual=n_vis,
    )


def _embeddings_of(seq) -> np.ndarray:
    return seq.embeddings if isinstance(seq, MultimodalSequence) else np.asarray(seq, dtype=np.float64)


def forward_logits(weights: BackboneWeights, seq, *, mode: str = "parallel", return_cache: bool = False):
    """Logits ``(L_in, V)`` for every position of ``seq`` (a sequence or raw ``(L, D)`` embeddings)."""
    h = _embeddings_of(seq)
    if h.ndim != 2 or h.shape[1] != weights.config.d_model:
        raise ShapeError(f"embeddings must be (L, {weights.config.d_model}), got {h.shape}")
    zoh_b = weights.config.zoh_b
    caches, states = [], []
    for blk in weights.layers:
        if return_cache:
            h, cache, state = mamba_block_forward(h, blk, mode=mode, zoh_b=zoh_b, return_cache=True)
            caches.append(cache)
            states.append(state)
        else:
            h = mamba_block_forward(h, blk, mode=mode, zoh_b=zoh_b)
    hn = rms_norm(h, weights.norm_f, NORM_EPS)
    logits = hn @ weights.unembedding
    if return_cache:
        return logits, dict(blocks=caches, h=h, hn=hn), states
    return logits


def backbone_backward(weights: BackboneWeights, cache: dict, dlogits: np.ndarray):
    """Backward of :func:`forward_logits`: returns ``(dH, grads)``.

    ``dH`` is the gradient w.r.t. the input embeddings; ``grads`` a
    :class:`BackboneWeights` whose ``embedding`` entry holds only the
    unembedding contribution when weights are tied (callers add the lookup part).
    """
    d_unemb = cache["hn"].T @ dlogits
    dhn = dlogits @ weights.unembedding.T
    dh, d_norm_f = _rms_norm_backward(cache["h"], weights.norm_f, NORM_EPS, dhn)
    layer_grads = []
    for blk, c in zip(reversed(weights.layers), reversed(cache["blocks"])):
        dh, g = mamba_block_backward(blk, c, dh)
        layer_grads.append(g)
    tied = weights.lm_head is None
    grads = BackboneWeights(
        config=weights.config,
        embedding=d_unemb.T.copy() if tied else np.zeros_like(weights.embedding),
        layers=tuple(reversed(layer_grads)),
        norm_f=d_norm_f,
        lm_head=None if tied else d_unemb,
    )
    return dh, grads


def _loss_targets(seq: MultimodalSequence) -> tuple[np.ndarray, np.ndarray]:
    mask = np.asarray(seq.loss_mask, bool).copy()
    mask[0] = False  # nothing predicts the first position
    positions = np.nonzero(mask)[0]
    if positions.size == 0:
        raise PreconditionError("loss mask selects no positions")
    return positions - 1, seq.token_ids[positions]


def next_token_loss(logits: np.ndarray, seq: MultimodalSequence, return_grad: bool = False):
    """Mean negative log-likelihood of every answer token given everything before it."""
    src, tgt = _loss_targets(seq)
    logp = log_softmax(logits[src])
    loss = -np.mean(logp[np.arange(src.size), tgt])
    if not return_grad:
        return float(loss)
    d = np.exp(logp)
    d[np.arange(src.size), tgt] -= 1.0
    dlogits = np.zeros_like(logits)
    np.add.at(dlogits, src, d / src.size)
    return float(loss), dlogits


# --------------------------------------------------------------------------
# decoding
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingConfig:
    greedy: bool = True
    temperature: float = 1.0
    max_new: int = 64
    stop_id: int | None = EOT_ID
    seed: int = 0


@dataclass
class GenerationSession:
    """Per-request decoding state. Owned by a single caller; not thread-safe."""

    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    states: list[SsmState] | None = None
    tokens: list[int] = field(default_factory=list)
    last_logits: np.ndarray | None = None
    stopped: bool = False

    def state_bytes(self) -> bytes:
        if self.states is None:
            return b""
        return b"".join(s.to_bytes() for s in self.states)

    @property
    def state_nbytes(self) -> int:
        return 0 if self.states is None else sum(s.nbytes for s in self.states)


def step_embedding(weights: BackboneWeights, states: list[SsmState], x_t: np.ndarray):
    """Push one embedding through every layer; returns ``(logits_t, new_states)``."""
    if len(states) != len(weights.layers):
        raise StateError(f"session has {len(states)} layer states, model has {len(weights.layers)} layers")
    h = x_t
    new = []
    for blk, st in zip(weights.layers, states):
        h, st = mamba_block_step(st, h, blk, zoh_b=weights.config.zoh_b)
        new.append(st)
    return rms_norm(h, weights.norm_f, NORM_EPS) @ weights.unembedding, new


def prefill(weights: BackboneWeights, session: GenerationSession, seq) -> np.ndarray:
    """Consume the prompt: one parallel pass for a fresh session, stepwise when resuming."""
    H = _embeddings_of(seq)
    if session.states is None:
        logits, _, states = forward_logits(weights, H, return_cache=True)
        session.states = states
        session.last_logits = logits[-1]
        return logits
    rows = []
    for x_t in H:
        session.last_logits, session.states = step_embedding(weights, session.states, x_t)
        rows.append(session.last_logits)
    return np.array(rows)


def _pick(logits: np.ndarray, sampling: SamplingConfig, rng: np.random.Generator) -> int:
    if sampling.greedy:
        return int(np.argmax(logits))
    p = np.exp(log_softmax(logits / sampling.temperature))
    return int(rng.choice(p.size, p=p))


TraceSink = Callable[[dict], None]


def jsonl_trace(fh: TextIO) -> TraceSink:
    def sink(rec: dict) -> None:
        fh.write(json.dumps(rec) + "\n")
    return sink


def generate(session: GenerationSession, seq, weights: BackboneWeights,
             trace: TraceSink | None = None) -> list[int]:
    """Prefill with ``seq`` then decode one token per SSM step.

    Stops after ``max_new`` tokens or when the stop token is produced (the stop
    token is not included in the result). ``trace`` receives one record per
    step: ``{"step", "token", "latency_us"}``.
    """
    sp = session.sampling
    if session.states is not None and len(session.states) != len(weights.layers):
        raise StateError("session state does not match the model configuration")
    if sp.max_new <= 0:
        return []
    rng = np.random.default_rng(sp.seed)
    t0 = time.perf_counter_ns()
    prefill(weights, session, seq)
    out: list[int] = []
    for i in range(sp.max_new):
        tok = _pick(session.last_logits, sp, rng)
        if sp.stop_id is not None and tok == sp.stop_id:
            session.stopped = True
            if trace:
                trace({"step": i, "token": tok, "latency_us": (time.perf_counter_ns() - t0) / 1e3})
            break
        out.append(tok)
        session.tokens.append(tok)
        session.last_logits, session.states = step_embedding(weights, session.states, weights.embedding[tok])
        now = time.perf_counter_ns()
        if trace:
            trace({"step": i, "token": tok, "latency_us": (now - t0) / 1e3})
        t0 = now
    return out
