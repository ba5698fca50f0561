"""Throughput and decode-scaling measurements.

``measure_throughput`` times the whole answer path, from image encoding to
the last generated token, and reports ``Eval_avg = n_out / T_total``.
``scaling_sweep`` compares per-token decode latency of the SSM backbone with
a single-head causal attention layer with a KV cache as context grows: the
former should stay flat, the latter should grow with cache length.

Timings use ``time.perf_counter_ns`` with one warm-up run and the median of
five repetitions by default. Absolute numbers depend on the machine; only
ratios are meaningful.
"""

from __future__ import annotations

import csv
import gc
import os
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backbone import BackboneWeights, GenerationSession, SamplingConfig, forward_logits, generate, step_embedding
from .errors import CobraError, PreconditionError, ShapeError
from .model import CobraModel, build_sequence, encode_image, project_visual
from .prompting import Conversation
from .vision import ImageInput, VisualFeatures

DEFAULT_CONTEXTS = (256, 512, 1024, 2048, 4096)


class TimerResolutionError(CobraError, RuntimeError):
    pass


@dataclass
class ThroughputReport:
    model: str
    visual_tokens: int
    output_tokens: int
    total_seconds: float
    latencies_us: list[float] = field(default_factory=list)
    contexts: list[int] = field(default_factory=list)
    requested_tokens: int | None = None
    repetitions: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.total_seconds > 0:
            raise ValueError("T_total must be positive")

    @property
    def eval_avg(self) -> float:
        return self.output_tokens / self.total_seconds

    @property
    def truncated(self) -> bool:
        return self.requested_tokens is not None and self.output_tokens < self.requested_tokens


def _time_generation(model: CobraModel, source, conv: Conversation, n_out: int, template: str,
                     respect_stop: bool):
    sampling = SamplingConfig(max_new=n_out, stop_id=SamplingConfig.stop_id if respect_stop else None)
    trace: list[dict] = []
    t0 = time.perf_counter_ns()
    if source is None:
        visual = None
    else:
        feats = source if isinstance(source, VisualFeatures) else encode_image(model, source)
        visual = project_visual(model, feats)
    seq = build_sequence(model, visual, conv, template)
    out = generate(GenerationSession(sampling), seq, model.backbone, trace=trace.append)
    t1 = time.perf_counter_ns()
    return (t1 - t0) / 1e9, out, trace, (0 if visual is None else visual.num_tokens), len(seq)


def measure_throughput(model: CobraModel, image: ImageInput | VisualFeatures | None,
                       question: str = "Describe the image specifically", n_out: int = 256, *,
                       repeats: int = 5, warmup: int = 1, template: str = "chat",
                       respect_stop: bool = False, tag: str = "cobra-toy") -> ThroughputReport:
    """Time ``n_out`` greedy tokens for one image + question; report the median run.

    With ``respect_stop`` the stop token may end generation early; the report is
    then flagged ``truncated`` and ``Eval_avg`` uses the actual token count.
    """
    if n_out < 1:
        raise PreconditionError("n_out must be >= 1: nothing to measure")
    conv = Conversation.single(question)
    for _ in range(warmup):
        _time_generation(model, image, conv, n_out, template, respect_stop)
    runs = [_time_generation(model, image, conv, n_out, template, respect_stop) for _ in range(max(1, repeats))]
    totals = [r[0] for r in runs]
    median_idx = int(np.argsort(totals)[len(totals) // 2])
    total, out, trace, n_vis, prompt_len = runs[median_idx]
    return ThroughputReport(
        model=tag, visual_tokens=n_vis, output_tokens=len(out), total_seconds=total,
        latencies_us=[r["latency_us"] for r in trace if r["step"] < len(out)],
        contexts=[prompt_len + i for i in range(len(out))],
        requested_tokens=n_out, repetitions=totals,
    )


TABLE_HEADER = ("Model", "Visual Tokens", "Eval_avg (tokens/s)", "Total (s)")


def format_table(reports: Sequence[ThroughputReport]) -> str:
    """Aligned plain-text table with columns model / visual tokens / Eval_avg / total seconds."""
    rows = [TABLE_HEADER] + [
        (r.model, str(r.visual_tokens), f"{r.eval_avg:.2f}", f"{r.total_seconds:.2f}") for r in reports
    ]
    widths = [max(len(row[i]) for row in rows) for i in range(len(TABLE_HEADER))]
    lines = []
    for j, row in enumerate(rows):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_reports_csv(path: str | os.PathLike, reports: Sequence[ThroughputReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "visual_tokens", "output_tokens", "total_seconds", "eval_avg", "truncated"])
        for r in reports:
            w.writerow([r.model, r.visual_tokens, r.output_tokens, repr(r.total_seconds), repr(r.eval_avg),
                        int(r.truncated)])


# --------------------------------------------------------------------------
# attention reference
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AttentionWeights:
    """Single-head causal softmax attention, ``y = softmax(q K^T / sqrt(d)) V @ wo``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


def init_attention(dim: int, seed: int = 0) -> AttentionWeights:
    rng = np.random.default_rng(seed)
    return AttentionWeights(*(rng.normal(0.0, dim ** -0.5, size=(dim, dim)) for _ in range(4)))


class KVCache:
    """Append-only key/value store; capacity doubles, ``len`` counts entries."""

    def __init__(self, dim: int, capacity: int = 64):
        self.keys = np.empty((capacity, dim))
        self.values = np.empty((capacity, dim))
        self.length = 0

    def __len__(self) -> int:
        return self.length

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        n = k.shape[0] if k.ndim == 2 else 1
        need = self.length + n
        if need > self.keys.shape[0]:
            cap = max(need, 2 * self.keys.shape[0])
            for name in ("keys", "values"):
                old = getattr(self, name)
                new = np.empty((cap, old.shape[1]))
                new[:self.length] = old[:self.length]
                setattr(self, name, new)
        self.keys[self.length:need] = k
        self.values[self.length:need] = v
        self.length = need

    def truncate(self, length: int) -> None:
        self.length = min(self.length, length)

    @property
    def nbytes(self) -> int:
        return 2 * self.length * self.keys.shape[1] * self.keys.itemsize


def attention_forward(x: np.ndarray, w: AttentionWeights) -> np.ndarray:
    """Full-sequence causal attention, ``(L, d) -> (L, d)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.dim:
        raise ShapeError(f"attention input must be (L, {w.dim}), got {x.shape}")
    q, k, v = x @ w.wq, x @ w.wk, x @ w.wv
    s = q @ k.T / np.sqrt(w.dim)
    s[np.triu_indices(x.shape[0], 1)] = -np.inf
    s = np.exp(s - s.max(axis=1, keepdims=True))
    return (s / s.sum(axis=1, keepdims=True)) @ v @ w.wo


def attention_reference_step(cache: KVCache, x_t: np.ndarray, w: AttentionWeights):
    """Decode one token: append its key/value, attend over the whole cache.

    The cache is extended in place and also returned for symmetry with ``ssm_step``.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (w.dim,):
        raise ShapeError(f"x_t must have shape ({w.dim},), got {x_t.shape}")
    cache.append(x_t @ w.wk, x_t @ w.wv)
    n = cache.length
    s = cache.keys[:n] @ (x_t @ w.wq) / np.sqrt(w.dim)
    p = np.exp(s - s.max())
    y = (p @ cache.values[:n]) / p.sum() @ w.wo
    return y, cache


def attention_prefill(x: np.ndarray, w: AttentionWeights) -> KVCache:
    cache = KVCache(w.dim, capacity=max(64, x.shape[0]))
    cache.append(x @ w.wk, x @ w.wv)
    return cache


# --------------------------------------------------------------------------
# scaling sweep
# --------------------------------------------------------------------------


@dataclass
class ScalingResult:
    contexts: list[int]
    ssm_latency_us: list[float]
    attention_latency_us: list[float]
    ssm_state_bytes: list[int]
    attention_cache_entries: list[int]
    attention_cache_bytes: list[int]

    @property
    def ssm_slope(self) -> float:
        return float(np.polyfit(self.contexts, self.ssm_latency_us, 1)[0])

    @property
    def attention_slope(self) -> float:
        return float(np.polyfit(self.contexts, self.attention_latency_us, 1)[0])

    @property
    def ssm_ratio(self) -> float:
        return self.ssm_latency_us[-1] / self.ssm_latency_us[0]

    @property
    def attention_ratio(self) -> float:
        return self.attention_latency_us[-1] / self.attention_latency_us[0]

    def table(self) -> str:
        lines = [f"{'context':>8}  {'ssm us/tok':>11}  {'attn us/tok':>11}  {'ssm state B':>11}  {'kv entries':>10}"]
        for row in zip(self.contexts, self.ssm_latency_us, self.attention_latency_us,
                       self.ssm_state_bytes, self.attention_cache_entries):
            lines.append(f"{row[0]:>8}  {row[1]:>11.1f}  {row[2]:>11.1f}  {row[3]:>11}  {row[4]:>10}")
        lines.append(f"slope (us per context token): ssm {self.ssm_slope:.2e}, attention {self.attention_slope:.2e}")
        return "\n".join(lines)


def _min_measurable_ns() -> float:
    return 100 * time.get_clock_info("perf_counter").resolution * 1e9


def _timed(step_once, n_steps: int) -> float:
    step_once(max(1, n_steps // 16))  # re-warm caches evicted by the previous measurement
    t0 = time.perf_counter_ns()
    step_once(n_steps)
    dt = time.perf_counter_ns() - t0
    if dt < _min_measurable_ns():
        raise TimerResolutionError(
            f"{n_steps} steps took {dt} ns, below timer resolution; increase n_steps to amortize"
        )
    return dt / n_steps / 1e3


def scaling_sweep(backbone: BackboneWeights, attention: AttentionWeights | None = None,
                  contexts: Sequence[int] = DEFAULT_CONTEXTS, *, n_steps: int = 256, repeats: int = 5,
                  warmup: int = 1, seed: int = 0) -> ScalingResult:
    """Median per-token decode latency after prefilling each context length.

    Every repetition restarts from the same prefilled state, so the probed
    context stays at ``c`` (plus at most ``n_steps``). Repetitions visit all
    contexts round-robin so slow drift of the machine hits every context alike.
    """
    rng = np.random.default_rng(seed)
    D = backbone.config.d_model
    attention = attention or init_attention(backbone.config.d_inner, seed)
    longest = max(contexts)
    prompt = rng.normal(size=(longest, D))
    attn_prompt = rng.normal(size=(longest, attention.dim))
    tok_in = rng.normal(size=D)
    attn_in = rng.normal(size=attention.dim)

    ssm_runs, attn_runs = [], []
    res = ScalingResult(list(contexts), [], [], [], [], [])
    for c in contexts:
        _, _, states0 = forward_logits(backbone, prompt[:c], return_cache=True)
        cache = attention_prefill(attn_prompt[:c], attention)
        res.attention_cache_entries.append(len(cache))
        res.attention_cache_bytes.append(cache.nbytes)
        holder = {}

        def ssm_steps(n, states0=states0, holder=holder):
            states = states0
            for _ in range(n):
                _, states = step_embedding(backbone, states, tok_in)
            holder["states"] = states

        def attn_steps(n, cache=cache, c=c):
            cache.truncate(c)
            for _ in range(n):
                attention_reference_step(cache, attn_in, attention)

        ssm_runs.append((ssm_steps, holder))
        attn_runs.append(attn_steps)

    ssm_samples = [[] for _ in contexts]
    attn_samples = [[] for _ in contexts]
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for r in range(warmup + repeats):
            for i in range(len(contexts)):
                ts = _timed(ssm_runs[i][0], n_steps)
                ta = _timed(attn_runs[i], n_steps)
                if r >= warmup:
                    ssm_samples[i].append(ts)
                    attn_samples[i].append(ta)
    finally:
        if gc_was_enabled:
            gc.enable()
    res.ssm_latency_us = [float(np.median(s)) for s in ssm_samples]
    res.attention_latency_us = [float(np.median(s)) for s in attn_samples]
    res.ssm_state_bytes = [sum(len(s.to_bytes()) for s in h["states"]) for _, h in ssm_runs]
    return res
