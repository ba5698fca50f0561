"""End-to-end model: dual vision encoder -> projector -> mamba backbone.

Also holds checkpoint I/O (the shared CSSM container, with the configuration
stored as ``config.*`` scalar entries) and the joint loss/gradient used by
training.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from . import container
from .backbone import (
    BackboneConfig,
    BackboneWeights,
    MultimodalSequence,
    backbone_backward,
    forward_logits,
    fuse_sequence,
    init_backbone,
    next_token_loss,
)
from .errors import CobraError, ConfigurationError
from .nn import flatten, unflatten
from .prompting import Conversation, prompt_segments, tokenize_segments
from .vision import (
    ImageInput,
    LdpProjector,
    MlpProjector,
    ProjectedVisualTokens,
    ToyEncoderWeights,
    VisualFeatures,
    encode_dual,
    init_ldp_projector,
    init_mlp_projector,
    init_toy_encoder,
    patchify,
    project,
    project_ldp,
    project_ldp_backward,
    project_mlp,
    project_mlp_backward,
)


class CheckpointError(CobraError, ValueError):
    pass


@dataclass(frozen=True)
class CobraConfig:
    image_size: int = 378
    patch_size: int = 14
    dino_dim: int = 8
    siglip_dim: int = 16
    projector: str = "mlp"  # "mlp" | "ldp"
    ldp_stride: int = 2
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.projector not in ("mlp", "ldp"):
            raise ConfigurationError(f"projector must be 'mlp' or 'ldp', got {self.projector!r}")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image size {self.image_size} is not divisible by patch size {self.patch_size}"
            )

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def visual_dim(self) -> int:
        return self.dino_dim + self.siglip_dim

    @property
    def num_visual_tokens(self) -> int:
        if self.projector == "mlp":
            return self.grid_side ** 2
        return (-(-self.grid_side // self.ldp_stride)) ** 2


@dataclass(frozen=True)
class CobraModel:
    config: CobraConfig = field(metadata={"param": False})
    encoder_a: ToyEncoderWeights = None
    encoder_b: ToyEncoderWeights = None
    projector: MlpProjector | LdpProjector = None
    backbone: BackboneWeights = None


def init_cobra(config: CobraConfig | None = None, seed: int = 0) -> CobraModel:
    config = config or CobraConfig()
    rng = np.random.default_rng(seed + 1)
    D = config.backbone.d_model
    if config.projector == "mlp":
        proj = init_mlp_projector(config.visual_dim, D, rng)
    else:
        proj = init_ldp_projector(config.visual_dim, D, rng, config.ldp_stride)
    return CobraModel(
        config=config,
        encoder_a=init_toy_encoder(config.patch_size, config.dino_dim, seed + 101),
        encoder_b=init_toy_encoder(config.patch_size, config.siglip_dim, seed + 202),
        projector=proj,
        backbone=init_backbone(config.backbone, seed),
    )


def encode_image(model: CobraModel, img: ImageInput) -> VisualFeatures:
    return encode_dual(patchify(img, model.config.patch_size), model.encoder_a, model.encoder_b)


def project_visual(model: CobraModel, feats: VisualFeatures) -> ProjectedVisualTokens:
    return project(feats, model.projector)


def build_sequence(model: CobraModel, visual: ProjectedVisualTokens | None, conv: Conversation,
                   template: str = "chat") -> MultimodalSequence:
    ids, flags = tokenize_segments(prompt_segments(conv, template))
    return fuse_sequence(visual, ids, model.backbone, answer_mask=flags)


TRAINABLE_PREFIXES = ("projector.", "backbone.")


def loss_and_grads(model: CobraModel, feats: VisualFeatures | None, text_ids, answer_mask):
    """Answer-token loss and its gradient for every projector and backbone weight.

    Returns ``(loss, grads)`` with ``grads`` keyed like :func:`flatten` names.
    """
    bb = model.backbone
    if feats is not None:
        if isinstance(model.projector, MlpProjector):
            Hv, pcache = project_mlp(feats.features, model.projector, return_cache=True)
        else:
            Hv, pcache = project_ldp(feats, model.projector, return_cache=True)
    else:
        Hv, pcache = None, None
    seq = fuse_sequence(Hv, text_ids, bb, answer_mask=answer_mask)
    logits, cache, _ = forward_logits(bb, seq, return_cache=True)
    loss, dlogits = next_token_loss(logits, seq, return_grad=True)
    dH, g_bb = backbone_backward(bb, cache, dlogits)
    M = seq.n_visual
    d_emb = g_bb.embedding.copy()
    np.add.at(d_emb, seq.token_ids[M:], dH[M:])
    g_bb = dataclasses.replace(g_bb, embedding=d_emb)
    grads = flatten(g_bb, "backbone.")
    if pcache is not None:
        if isinstance(model.projector, MlpProjector):
            g_p = project_mlp_backward(model.projector, pcache, dH[:M])
        else:
            g_p = project_ldp_backward(model.projector, pcache, dH[:M])
        grads.update(flatten(g_p, "projector."))
    else:
        grads.update({k: np.zeros_like(v) for k, v in flatten(model.projector, "projector.").items()})
    return loss, grads


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

_CONFIG_FIELDS = ("image_size", "patch_size", "dino_dim", "siglip_dim", "ldp_stride")
_BACKBONE_FIELDS = ("vocab_size", "d_model", "n_layers", "d_state", "expand", "conv_width", "dt_rank",
                    "tie_embeddings", "zoh_b")


def checkpoint_entries(model: CobraModel) -> dict[str, np.ndarray]:
    cfg = model.config
    entries = {f"config.{k}": np.array(float(getattr(cfg, k))) for k in _CONFIG_FIELDS}
    entries["config.projector_ldp"] = np.array(float(cfg.projector == "ldp"))
    entries.update({f"config.backbone.{k}": np.array(float(getattr(cfg.backbone, k))) for k in _BACKBONE_FIELDS})
    entries.update(flatten(model))
    return entries


def save_checkpoint(model: CobraModel, path: str | os.PathLike) -> None:
    container.write(path, checkpoint_entries(model))


def model_from_entries(entries: dict[str, np.ndarray]) -> CobraModel:
    try:
        bb = BackboneConfig(**{
            k: (bool(entries[f"config.backbone.{k}"]) if k in ("tie_embeddings", "zoh_b")
                else int(entries[f"config.backbone.{k}"]))
            for k in _BACKBONE_FIELDS
        })
        cfg = CobraConfig(
            **{k: int(entries[f"config.{k}"]) for k in _CONFIG_FIELDS},
            projector="ldp" if entries["config.projector_ldp"] else "mlp",
            backbone=bb,
        )
        template = init_cobra(cfg)
        return unflatten(template, entries)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing entry {exc.args[0]!r}") from None
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"checkpoint is inconsistent: {exc}") from None


def load_checkpoint(path: str | os.PathLike) -> CobraModel:
    return model_from_entries(container.read(path))
