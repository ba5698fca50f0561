"""Image -> visual token pipeline: patchify, dual toy encoders, projectors.

The two encoders stand in for a pair of pretrained ViTs (one tuned for
low-level spatial detail, one for semantics). Each is a seeded per-patch
linear embedding plus one global mixing step; their outputs are concatenated
along the channel axis. Real features computed elsewhere can be brought in
with :func:`ingest_external_features`.

Projectors map the concatenated features into the language model's embedding
space: ``mlp`` keeps one token per patch, ``ldp`` average-pools the token grid
down (27 x 27 -> 14 x 14 with stride 2).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import container
from .container import ContainerFormatError
from .errors import ConfigurationError, ShapeError
from .nn import gelu, gelu_grad


@dataclass(frozen=True)
class ImageInput:
    pixels: np.ndarray  # (3, H, W), values in [0, 1]
    source: str | None = None
    original_size: tuple[int, int] | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[0] != 3:
            raise ShapeError(f"image must be (3, H, W), got {px.shape}")
        if px.shape[1] != px.shape[2]:
            raise ShapeError(f"image must be square, got {px.shape[1]}x{px.shape[2]}")
        object.__setattr__(self, "pixels", px)

    @property
    def size(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class PatchGrid:
    patches: np.ndarray  # (N_v, 3 * P * P), rows in row-major grid order
    side: int            # grid side g = H / P
    patch_size: int

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]


@dataclass(frozen=True)
class VisualFeatures:
    features: np.ndarray  # (N_v, D_a + D_b)
    side: int | None = None
    split: tuple[int, ...] = ()

    @property
    def num_tokens(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class ProjectedVisualTokens:
    tokens: np.ndarray  # (M, D_model)
    side: int | None = None

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]


def patchify(img: ImageInput, patch_size: int) -> PatchGrid:
    """Split into non-overlapping P x P patches, flattened channel-major per patch."""
    H = img.size
    if patch_size < 1 or H % patch_size:
        raise ConfigurationError(f"image side {H} is not divisible by patch size {patch_size}")
    g = H // patch_size
    p = img.pixels.reshape(3, g, patch_size, g, patch_size)
    patches = p.transpose(1, 3, 0, 2, 4).reshape(g * g, 3 * patch_size * patch_size)
    return PatchGrid(patches, g, patch_size)


# --------------------------------------------------------------------------
# toy encoders
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyEncoderWeights:
    embed: np.ndarray  # (3 P^2, D)
    bias: np.ndarray   # (D,)
    mix: np.ndarray    # (D, D) global-context mixing

    @property
    def patch_size(self) -> int:
        return int(round(math.sqrt(self.embed.shape[0] / 3)))

    @property
    def dim(self) -> int:
        return self.embed.shape[1]


def init_toy_encoder(patch_size: int, dim: int, seed: int) -> ToyEncoderWeights:
    rng = np.random.default_rng(seed)
    fan_in = 3 * patch_size * patch_size
    return ToyEncoderWeights(
        embed=rng.normal(0.0, fan_in ** -0.5, size=(fan_in, dim)),
        bias=rng.normal(0.0, 0.1, size=dim),
        mix=rng.normal(0.0, dim ** -0.5, size=(dim, dim)),
    )


def toy_encode(grid: PatchGrid, enc: ToyEncoderWeights) -> np.ndarray:
    """Per-patch embedding plus the projected mean over all patches (pre-head features)."""
    if enc.embed.shape[0] != grid.patches.shape[1]:
        raise ShapeError(
            f"encoder expects patch vectors of {enc.embed.shape[0]} values, grid has {grid.patches.shape[1]}"
        )
    e = grid.patches @ enc.embed + enc.bias
    return e + e.mean(axis=0) @ enc.mix


def encode_dual(grid: PatchGrid, enc_a: ToyEncoderWeights, enc_b: ToyEncoderWeights) -> VisualFeatures:
    """Channel-wise concatenation ``[enc_a(grid); enc_b(grid)]``."""
    fa = toy_encode(grid, enc_a)
    fb = toy_encode(grid, enc_b)
    return VisualFeatures(np.concatenate([fa, fb], axis=1), grid.side, (enc_a.dim, enc_b.dim))


def write_features(path: str | os.PathLike, feats: VisualFeatures | np.ndarray) -> None:
    arr = feats.features if isinstance(feats, VisualFeatures) else np.asarray(feats)
    container.write(path, {"features": arr})


def _grid_side(n: int) -> int | None:
    s = math.isqrt(n)
    return s if s * s == n else None


def ingest_external_features(path: str | os.PathLike) -> VisualFeatures:
    """Load precomputed patch features (entry ``features``, shape ``(N_v, D_v)``)."""
    entries = container.read(path)
    if "features" not in entries:
        raise ContainerFormatError("container has no 'features' entry", 12)
    f = entries["features"]
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise ContainerFormatError(f"'features' must be a non-empty 2-D array, got shape {f.shape}", 12)
    if not np.all(np.isfinite(f)):
        raise ContainerFormatError("'features' contains NaN or Inf", 12)
    return VisualFeatures(f, _grid_side(f.shape[0]))


# --------------------------------------------------------------------------
# projectors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpProjector:
    """``gelu(R @ w1 + b1) @ w2 + b2`` applied per token."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]


@dataclass(frozen=True)
class LdpProjector:
    """Pointwise MLP, adaptive average pool of the token grid, pointwise linear."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    stride: int = 2

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w3.shape[1]


def init_mlp_projector(in_dim: int, out_dim: int, rng: np.random.Generator) -> MlpProjector:
    return MlpProjector(
        w1=rng.normal(0.0, in_dim ** -0.5, size=(in_dim, out_dim)), b1=np.zeros(out_dim),
        w2=rng.normal(0.0, out_dim ** -0.5, size=(out_dim, out_dim)), b2=np.zeros(out_dim),
    )


def init_ldp_projector(in_dim: int, out_dim: int, rng: np.random.Generator, stride: int = 2) -> LdpProjector:
    m = init_mlp_projector(in_dim, out_dim, rng)
    return LdpProjector(m.w1, m.b1, m.w2, m.b2,
                        w3=rng.normal(0.0, out_dim ** -0.5, size=(out_dim, out_dim)), b3=np.zeros(out_dim),
                        stride=stride)


def _check_in(R: np.ndarray, in_dim: int) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[1] != in_dim:
        raise ShapeError(f"projector expects (N, {in_dim}) features, got {R.shape}")
    return R


def project_mlp(R, w: MlpProjector, return_cache: bool = False):
    R = _check_in(R.features if isinstance(R, VisualFeatures) else R, w.in_dim)
    pre = R @ w.w1 + w.b1
    out = gelu(pre) @ w.w2 + w.b2
    if return_cache:
        return out, dict(R=R, pre=pre)
    return out


def project_mlp_backward(w: MlpProjector, cache: dict, dout: np.ndarray) -> MlpProjector:
    act = gelu(cache["pre"])
    dpre = (dout @ w.w2.T) * gelu_grad(cache["pre"])
    return MlpProjector(w1=cache["R"].T @ dpre, b1=dpre.sum(axis=0), w2=act.T @ dout, b2=dout.sum(axis=0))


def adaptive_pool_matrix(side: int, out_side: int) -> np.ndarray:
    """``(out_side^2, side^2)`` averaging matrix with adaptive bins.

    Bin ``i`` covers rows ``floor(i * side / out_side)`` to ``ceil((i + 1) * side / out_side)``
    (exclusive); bins may overlap when ``side`` is not a multiple of ``out_side``.
    """
    if out_side < 1 or out_side > side:
        raise ConfigurationError(f"pooled grid {out_side} must be between 1 and the input grid {side}")
    P1 = np.zeros((out_side, side))
    for i in range(out_side):
        lo = (i * side) // out_side
        hi = -(-((i + 1) * side) // out_side)
        P1[i, lo:hi] = 1.0 / (hi - lo)
    return np.kron(P1, P1)


def ldp_output_side(side: int, stride: int) -> int:
    return -(-side // int(stride))


def project_ldp(R, w: LdpProjector, side: int | None = None, out_side: int | None = None,
                return_cache: bool = False):
    """Token-reducing projector; returns ``(out_side**2, D_model)`` tokens.

    ``side`` is the input grid side (inferred from the token count when square);
    ``out_side`` defaults to ``ceil(side / stride)``.
    """
    if isinstance(R, VisualFeatures):
        side = side or R.side
        R = R.features
    R = _check_in(R, w.in_dim)
    side = side or _grid_side(R.shape[0])
    if side is None or side * side != R.shape[0]:
        raise ConfigurationError(f"{R.shape[0]} tokens do not form a square grid")
    out_side = out_side or ldp_output_side(side, w.stride)
    pool = adaptive_pool_matrix(side, out_side)
    pre = R @ w.w1 + w.b1
    mid = gelu(pre) @ w.w2 + w.b2
    pooled = pool @ mid
    out = pooled @ w.w3 + w.b3
    if return_cache:
        return out, dict(R=R, pre=pre, pool=pool, pooled=pooled)
    return out


def project_ldp_backward(w: LdpProjector, cache: dict, dout: np.ndarray) -> LdpProjector:
    dpooled = dout @ w.w3.T
    dmid = cache["pool"].T @ dpooled
    act = gelu(cache["pre"])
    dpre = (dmid @ w.w2.T) * gelu_grad(cache["pre"])
    return LdpProjector(
        w1=cache["R"].T @ dpre, b1=dpre.sum(axis=0), w2=act.T @ dmid, b2=dmid.sum(axis=0),
        w3=cache["pooled"].T @ dout, b3=dout.sum(axis=0), stride=w.stride,
    )


def project(R: VisualFeatures, w: MlpProjector | LdpProjector) -> ProjectedVisualTokens:
    if isinstance(w, MlpProjector):
        return ProjectedVisualTokens(project_mlp(R.features, w), R.side)
    out = project_ldp(R, w)
    return ProjectedVisualTokens(out, _grid_side(out.shape[0]))


# --------------------------------------------------------------------------
# image files
# --------------------------------------------------------------------------


class ImageFormatError(ContainerFormatError):
    pass


def _ppm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers (``#`` comments allowed)."""
    vals, pos = [], 2
    while len(vals) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed PPM header", start)
        vals.append(int(data[start:pos]))
    return vals, pos + 1  # exactly one whitespace byte before the raster


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Binary PPM (P6) -> ``(3, H, W)`` float array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P6":
        raise ImageFormatError(f"not a binary PPM (magic {data[:2]!r}, expected b'P6')", 0)
    (w, h, maxval), pos = _ppm_tokens(data, 3)
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"bad PPM maxval {maxval}", pos)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * 3 * dtype.itemsize
    if len(data) - pos < need:
        raise ImageFormatError(f"PPM raster truncated: need {need} bytes, have {len(data) - pos}", pos)
    raster = np.frombuffer(data[pos:pos + need], dtype=dtype).reshape(h, w, 3)
    return raster.transpose(2, 0, 1).astype(np.float64) / maxval


def write_ppm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    px = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.transpose(1, 2, 0).tobytes())


def read_raw(path: str | os.PathLike) -> np.ndarray:
    """Raw little-endian float64 ``3 x S x S`` image; ``S`` is inferred from the file size."""
    data = np.fromfile(path, dtype="<f8")
    side = _grid_side(data.size // 3) if data.size % 3 == 0 else None
    if side is None:
        raise ImageFormatError(f"raw image of {data.size} floats is not 3 x S x S", 0)
    return data.reshape(3, side, side).astype(np.float64)


def resize_nearest(pixels: np.ndarray, size: int) -> np.ndarray:
    _, h, w = pixels.shape
    rows = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(int)
    cols = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(int)
    return pixels[:, rows][:, :, cols]


def load_image(path: str | os.PathLike, size: int) -> ImageInput:
    """Read a ``.ppm`` or raw float64 image and resize it to ``size x size``."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        is_ppm = fh.read(2) == b"P6"
    px = read_ppm(path) if is_ppm else read_raw(path)
    original = (px.shape[1], px.shape[2])
    if original != (size, size):
        px = resize_nearest(px, size)
    return ImageInput(np.clip(px, 0.0, 1.0), source=path, original_size=original)
