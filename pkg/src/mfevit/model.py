"""Full forward pass: fusion -> class token + positions -> encoder -> head."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoder import Params, add_class_and_position, encoder_forward, head
from .fusion import fuse
from .tensor import Tensor


def forward(
    rgb: np.ndarray,
    depth: np.ndarray,
    params: Params,
    config: ModelConfig,
    trace: dict | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits ``[B, 6(N+1)]`` (or ``[6(N+1)]`` for unbatched input)."""
    seq = fuse(rgb, depth, params, config)
    if trace is not None:
        trace["fusion.output"] = seq.tokens.shape
    seq = add_class_and_position(seq, params, config)
    if trace is not None:
        trace["embedding.with_class"] = seq.tokens.shape
    logits = head(encoder_forward(seq, params, config, trace, rng), params)
    if trace is not None:
        trace["head.logits"] = logits.shape
    return logits


def predict_proba(rgb, depth, params: Params, config: ModelConfig, batch_size: int = 64) -> np.ndarray:
    """Softmax over all 6(N+1) outputs, without recording gradients."""
    rgb = np.asarray(rgb)
    depth = np.asarray(depth)
    out = []
    with T.no_grad():
        for start in range(0, len(rgb), batch_size):
            logits = forward(rgb[start : start + batch_size], depth[start : start + batch_size], params, config)
            out.append(T.softmax(logits, axis=-1).data)
    if not out:
        return np.zeros((0, config.num_labels))
    return np.concatenate(out, axis=0)
