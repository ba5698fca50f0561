"""Toy-scale supervised fine-tuning.

The recipe: no projector pre-alignment stage, projector and backbone tuned
jointly, AdamW with decoupled weight decay 0.1, linear warm-up over the first
3% of steps followed by cosine decay, two epochs. The vision encoders stay
frozen. A procedurally generated image/question/answer set replaces the real
instruction data; its answers are a pure function of the image, so the task
is learnable by construction.

Paper-scale values kept as defaults in :class:`TrainConfig`: lr 2e-5, global
batch 128. Toy runs override both (see ``demos/`` and the tests).
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CobraError, ConfigurationError, PreconditionError
from .model import TRAINABLE_PREFIXES, CobraModel, encode_image, loss_and_grads
from .nn import flatten, unflatten
from .prompting import Conversation, prompt_segments, tokenize_segments
from .vision import ImageInput

PAPER_GLOBAL_BATCH = 128


class TrainingDivergedError(CobraError, FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-5
    weight_decay: float = 0.1
    warmup_ratio: float = 0.03
    epochs: int = 2
    batch_size: int = 4
    seed: int = 0
    steps: int | None = None  # overrides epochs * ceil(n / batch_size) when set
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    template: str = "chat"

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigurationError("warmup_ratio must be in [0, 1)")
        if self.lr < 0:
            raise ConfigurationError("lr must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.steps is not None and self.steps < 1:
            raise ConfigurationError("steps must be >= 1")


def load_train_config(path: str | os.PathLike, **overrides) -> TrainConfig:
    """Read ``key = value`` lines (``#`` comments allowed) into a :class:`TrainConfig`."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
            if key == "betas":
                values[key] = tuple(float(v) for v in raw.split(","))
            elif key == "template":
                values[key] = raw
            elif key in ("epochs", "batch_size", "seed", "steps"):
                values[key] = int(raw)
            else:
                values[key] = float(raw)
    values.update(overrides)
    return TrainConfig(**values)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``cfg.lr`` over ``ceil(warmup_ratio * total)`` steps, then cosine to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = math.ceil(cfg.warmup_ratio * total_steps)
    if step < warm:
        return cfg.lr * step / warm
    if total_steps == warm:
        return cfg.lr
    progress = (step - warm) / (total_steps - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
CORNERS = ("top left", "top right", "bottom left", "bottom right")
QUESTIONS = ("What color is the square?", "Where is the square?")


@dataclass(frozen=True)
class SyntheticSample:
    image: ImageInput
    question: str
    answer: str
    color: str
    corner: str


def render_square_image(size: int, color: str, corner: str) -> np.ndarray:
    """Grey background with a coloured square filling one quadrant."""
    px = np.full((3, size, size), 0.5)
    half = size // 2
    r0 = 0 if corner.startswith("top") else half
    c0 = 0 if corner.endswith("left") else half
    px[:, r0:r0 + half, c0:c0 + half] = np.asarray(COLORS[color])[:, None, None]
    return px


def answer_for(question: str, color: str, corner: str) -> str:
    if question == QUESTIONS[0]:
        return color
    if question == QUESTIONS[1]:
        return corner
    raise ValueError(f"unknown question {question!r}")


def make_synthetic_dataset(n: int, image_size: int = 16, seed: int = 0) -> list[SyntheticSample]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        color = list(COLORS)[rng.integers(len(COLORS))]
        corner = CORNERS[rng.integers(len(CORNERS))]
        q = QUESTIONS[rng.integers(len(QUESTIONS))]
        img = ImageInput(render_square_image(image_size, color, corner), source="synthetic")
        out.append(SyntheticSample(img, q, answer_for(q, color, corner), color, corner))
    return out


@dataclass(frozen=True)
class _Prepared:
    feats: object
    ids: np.ndarray
    mask: np.ndarray


def _prepare(model: CobraModel, data: Sequence[SyntheticSample], template: str) -> list[_Prepared]:
    prepared = []
    for s in data:
        ids, flags = tokenize_segments(prompt_segments(Conversation.single(s.question, s.answer), template))
        prepared.append(_Prepared(encode_image(model, s.image), np.array(ids), np.array(flags)))
    return prepared


def dataset_loss(model: CobraModel, data: Sequence[SyntheticSample], template: str = "chat") -> float:
    prepared = _prepare(model, data, template)
    return float(np.mean([loss_and_grads(model, p.feats, p.ids, p.mask)[0] for p in prepared]))


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------


@dataclass
class AdamW:
    """Adam moments with decoupled weight decay; decay only touches >= 2-D weights."""

    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.1
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        b1, b2 = self.betas
        self.t += 1
        out = dict(params)
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p = params[k]
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if p.ndim >= 2:
                update = update + self.weight_decay * p
            out[k] = p - lr * update
        return out


@dataclass
class TrainResult:
    model: CobraModel
    losses: list[float]
    lrs: list[float]
    phases: list[str] = field(default_factory=list)
    initial_loss: float | None = None
    final_loss: float | None = None

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "loss"])
            for i, (lr, loss) in enumerate(zip(self.lrs, self.losses)):
                w.writerow([i, repr(lr), repr(loss)])


def _trainable(model: CobraModel, which: str) -> dict[str, np.ndarray]:
    flat = flatten(model)
    prefixes = TRAINABLE_PREFIXES if which == "all" else ("projector.",)
    return {k: v for k, v in flat.items() if k.startswith(prefixes)}


def train_toy(model: CobraModel, dataset: Sequence[SyntheticSample], cfg: TrainConfig,
              trainable: str = "all", epochs: int | None = None) -> TrainResult:
    """Fine-tune ``model`` on ``dataset``; returns the trained model and per-step curves.

    ``trainable`` is ``"all"`` (projector + backbone) or ``"projector"``.
    Batches are drawn from a seeded per-epoch permutation, so a fixed seed gives
    bitwise-identical results.
    """
    if not dataset:
        raise PreconditionError("dataset is empty")
    if trainable not in ("all", "projector"):
        raise ConfigurationError(f"unknown trainable set {trainable!r}")
    prepared = _prepare(model, dataset, cfg.template)
    n = len(prepared)
    epochs = cfg.epochs if epochs is None else epochs
    per_epoch = -(-n // cfg.batch_size)
    total = cfg.steps if cfg.steps is not None else epochs * per_epoch
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(cfg.betas, cfg.eps, cfg.weight_decay)
    params = _trainable(model, trainable)
    full = flatten(model)
    losses, lrs = [], []
    order: list[int] = []
    for step in range(total):
        if not order:
            order = list(rng.permutation(n))
        batch = [order.pop(0) for _ in range(min(cfg.batch_size, len(order)))]
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        batch_loss = 0.0
        for idx in batch:
            p = prepared[idx]
            loss, g = loss_and_grads(model, p.feats, p.ids, p.mask)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at step {step} on sample {idx} "
                    f"(question {dataset[idx].question!r}, answer {dataset[idx].answer!r})"
                )
            batch_loss += loss / len(batch)
            for k in grads:
                grads[k] += g[k] / len(batch)
        lr = lr_at(step + 1, total, cfg)
        if lr != 0.0:
            params = opt.step(params, grads, lr)
            full.update(params)
            model = unflatten(model, full)
        losses.append(batch_loss)
        lrs.append(lr)
    return TrainResult(model, losses, lrs, phases=[trainable] * total)


# --------------------------------------------------------------------------
# ablation variants
# --------------------------------------------------------------------------

VARIANTS = {
    # id: sequence of (trainable set, epochs)
    "ft2ep": (("all", 2),),
    "ft1ep": (("all", 1),),
    "prealign_ft": (("projector", 1), ("all", 1)),
}
DEFAULT_VARIANT = "ft2ep"


def ablation_modes(variant: str = DEFAULT_VARIANT) -> tuple[tuple[str, int], ...]:
    """Training phases for a variant: ``((trainable, epochs), ...)``."""
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ConfigurationError(f"unknown training variant {variant!r}; choose from {sorted(VARIANTS)}") from None


def run_variant(model: CobraModel, dataset: Sequence[SyntheticSample], cfg: TrainConfig,
                variant: str = DEFAULT_VARIANT) -> TrainResult:
    phases = ablation_modes(variant)
    losses, lrs, tags = [], [], []
    for i, (which, ep) in enumerate(phases):
        res = train_toy(model, dataset, dataclasses.replace(cfg, seed=cfg.seed + i, steps=None), which, epochs=ep)
        model = res.model
        losses += res.losses
        lrs += res.lrs
        tags += res.phases
    return TrainResult(model, losses, lrs, tags)


def compare_variants(model: CobraModel, dataset: Sequence[SyntheticSample], cfg: TrainConfig,
                     variants: Sequence[str] = tuple(VARIANTS)) -> dict[str, TrainResult]:
    out = {}
    for v in variants:
        res = run_variant(model, dataset, cfg, v)
        res.initial_loss = dataset_loss(model, dataset, cfg.template)
        res.final_loss = dataset_loss(res.model, dataset, cfg.template)
        out[v] = res
    return out
