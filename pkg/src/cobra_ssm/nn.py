"""Elementwise activations with their derivatives, plus parameter-tree helpers.

Weight containers throughout the package are frozen dataclasses whose fields
are arrays, nested weight dataclasses, or tuples of those. ``flatten`` and
``unflatten`` map such a tree to and from a flat ``{dotted.name: array}`` dict,
which is what the optimizer and the binary container work with.
"""

from __future__ import annotations

import dataclasses
from typing import Any

import numpy as np
from scipy.special import erf, expit


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return expit(x)


def silu(x):
    return x * expit(x)


def silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    # exact (erf) form, not the tanh approximation
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def flatten(tree: Any, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten a weight dataclass tree into ``{dotted.name: array}``.

    Non-array leaves (ints, bools, configs) are skipped; ``None`` fields are omitted.
    """
    out: dict[str, np.ndarray] = {}
    for f in dataclasses.fields(tree):
        value = getattr(tree, f.name)
        name = f"{prefix}{f.name}"
        if isinstance(value, np.ndarray):
            out[name] = value
        elif dataclasses.is_dataclass(value) and f.metadata.get("param", True):
            out.update(flatten(value, name + "."))
        elif isinstance(value, tuple) and value and dataclasses.is_dataclass(value[0]):
            for i, item in enumerate(value):
                out.update(flatten(item, f"{name}.{i}."))
    return out


def unflatten(template: Any, flat: dict[str, np.ndarray], prefix: str = "") -> Any:
    """Rebuild a tree shaped like ``template`` with arrays taken from ``flat``."""
    changes = {}
    for f in dataclasses.fields(template):
        value = getattr(template, f.name)
        name = f"{prefix}{f.name}"
        if isinstance(value, np.ndarray):
            new = np.asarray(flat[name], dtype=np.float64)
            if new.shape != value.shape:
                raise ValueError(f"shape mismatch for {name}: {new.shape} vs {value.shape}")
            changes[f.name] = new
        elif dataclasses.is_dataclass(value) and f.metadata.get("param", True):
            changes[f.name] = unflatten(value, flat, name + ".")
        elif isinstance(value, tuple) and value and dataclasses.is_dataclass(value[0]):
            changes[f.name] = tuple(unflatten(item, flat, f"{name}.{i}.") for i, item in enumerate(value))
    return dataclasses.replace(template, **changes)


def zeros_like_tree(tree: Any) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in flatten(tree).items()}
