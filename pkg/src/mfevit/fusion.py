"""Data-level RGB + depth fusion into a single patch-embedding sequence.

Images are numpy arrays in ``[0, 1]``: RGB is ``[..., S, S, 3]`` and depth is
``[..., S, S, 1]``; any leading batch axes are carried through.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoder import EmbeddingSequence, Params, embed, patchify
from .errors import ConfigError, DimensionError

# ImageNet channel statistics; applied per channel slot, including slots holding depth.
CHANNEL_MEAN = np.array([0.485, 0.456, 0.406])
CHANNEL_STD = np.array([0.229, 0.224, 0.225])


@dataclass
class ImagePair:
    rgb: np.ndarray
    depth: np.ndarray
    subject_id: str = ""
    expression: int = 0
    intensity: int = 0
    sample_id: str = ""
    noisy: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim == 2:
            self.depth = self.depth[..., None]
        check_pair(self.rgb, self.depth)


def check_pair(rgb: np.ndarray, depth: np.ndarray) -> None:
    if rgb.ndim < 3 or rgb.shape[-1] != 3:
        raise DimensionError(f"rgb must be [..., H, W, 3], got {rgb.shape}")
    if depth.shape[-1] != 1 or depth.shape[:-1] != rgb.shape[:-1]:
        raise DimensionError(f"depth {depth.shape} is not aligned with rgb {rgb.shape}")
    for name, arr in (("rgb", rgb), ("depth", depth)):
        if not np.all(np.isfinite(arr)) or arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
            raise ValueError(f"{name} values must be finite and within [0, 1]")


@dataclass
class FusedTriple:
    i_rgd: np.ndarray
    i_rdb: np.ndarray
    i_dgb: np.ndarray

    def streams(self) -> list[np.ndarray]:
        return [self.i_rgd, self.i_rdb, self.i_dgb]


def channel_replace(rgb: np.ndarray | ImagePair, depth: np.ndarray | None = None) -> FusedTriple:
    """Replace B, G and R in turn with the depth plane."""
    if isinstance(rgb, ImagePair):
        rgb, depth = rgb.rgb, rgb.depth
    rgb = np.asarray(rgb)
    depth = np.asarray(depth)
    if depth.shape[-1] != 1 or depth.shape[:-1] != rgb.shape[:-1] or rgb.shape[-1] != 3:
        raise DimensionError(f"depth {depth.shape} is not aligned with rgb {rgb.shape}")
    out = []
    for slot in (2, 1, 0):
        img = rgb.copy()
        img[..., slot] = depth[..., 0]
        out.append(img)
    return FusedTriple(*out)


def gray3(depth: np.ndarray) -> np.ndarray:
    """Copy a single-channel map into three channels."""
    return np.repeat(np.asarray(depth), 3, axis=-1)


def standardize(image: np.ndarray) -> np.ndarray:
    return (image - CHANNEL_MEAN) / CHANNEL_STD


def _embed_image(image: np.ndarray, params: Params, config: ModelConfig, stream: int) -> EmbeddingSequence:
    if config.standardize:
        image = standardize(image)
    return embed(patchify(image, config.patch_size, config.image_size), params, config, stream)


def _mean(seqs: list[EmbeddingSequence]) -> EmbeddingSequence:
    # a + sum(s - a) / n: same average, but bitwise equal to a when all streams agree
    first = seqs[0].tokens
    if len(seqs) == 1:
        return EmbeddingSequence(first, includes_class_token=False)
    spread = T.sub(seqs[1].tokens, first)
    for s in seqs[2:]:
        spread = T.add(spread, T.sub(s.tokens, first))
    return EmbeddingSequence(T.add(first, T.scale(spread, 1.0 / len(seqs))), includes_class_token=False)


def fuse_alternative(triple: FusedTriple, params: Params, config: ModelConfig) -> EmbeddingSequence:
    """Patchwise mean of the three independently projected streams."""
    if config.num_streams != 3:
        raise ConfigError("alternative fusion needs three patch projections")
    return _mean([_embed_image(img, params, config, j) for j, img in enumerate(triple.streams())])


def fuse_naive(rgb: np.ndarray, depth: np.ndarray, params: Params, config: ModelConfig) -> EmbeddingSequence:
    """Mean of the RGB projection and the projection of depth copied to three channels."""
    if config.num_streams != 2:
        raise ConfigError("naive fusion needs two patch projections")
    return _mean([
        _embed_image(rgb, params, config, 0),
        _embed_image(gray3(depth), params, config, 1),
    ])


def fuse_unimodal(
    rgb: np.ndarray, depth: np.ndarray, mode: str, params: Params, config: ModelConfig
) -> EmbeddingSequence:
    if mode != config.fusion_mode or mode not in ("rgb_only", "depth_only"):
        raise ConfigError(f"unimodal mode {mode!r} does not match config {config.fusion_mode!r}")
    image = rgb if mode == "rgb_only" else gray3(depth)
    return _embed_image(image, params, config, 0)


def fuse(rgb: np.ndarray, depth: np.ndarray, params: Params, config: ModelConfig) -> EmbeddingSequence:
    """Patch embeddings for ``config.fusion_mode``."""
    mode = config.fusion_mode
    if mode == "alternative":
        return fuse_alternative(channel_replace(rgb, depth), params, config)
    if mode == "naive":
        return fuse_naive(rgb, depth, params, config)
    return fuse_unimodal(rgb, depth, mode, params, config)
