"""Single-branch ViT encoder: patches, embeddings, pre-norm blocks, widened head."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .tensor import Tensor

logger = logging.getLogger(__name__)

Params = dict[str, Tensor]


@dataclass
class EmbeddingSequence:
    """Token matrix ``[..., length, D]``; length is M or M+1 (with class token)."""

    tokens: Tensor
    includes_class_token: bool = False

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]


# --------------------------------------------------------------------------
# parameters


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Closed-form shape of every parameter tensor, in creation order."""
    d, p, k = config.embed_dim, config.patch_dim, config.num_labels
    shapes: dict[str, tuple[int, ...]] = {}
    for j in range(config.num_streams):
        shapes[f"patch_embed.{j}.weight"] = (p, d)
        shapes[f"patch_embed.{j}.bias"] = (d,)
    shapes["cls_token"] = (1, d)
    shapes["pos_embed"] = (config.seq_len, d)
    for i in range(config.num_layers):
        pre = f"blocks.{i}"
        shapes[f"{pre}.norm1.gain"] = (d,)
        shapes[f"{pre}.norm1.bias"] = (d,)
        shapes[f"{pre}.attn.qkv.weight"] = (d, 3 * d)
        shapes[f"{pre}.attn.qkv.bias"] = (3 * d,)
        shapes[f"{pre}.attn.out.weight"] = (d, d)
        shapes[f"{pre}.attn.out.bias"] = (d,)
        shapes[f"{pre}.norm2.gain"] = (d,)
        shapes[f"{pre}.norm2.bias"] = (d,)
        shapes[f"{pre}.mlp.fc1.weight"] = (d, config.mlp_dim)
        shapes[f"{pre}.mlp.fc1.bias"] = (config.mlp_dim,)
        shapes[f"{pre}.mlp.fc2.weight"] = (config.mlp_dim, d)
        shapes[f"{pre}.mlp.fc2.bias"] = (d,)
    shapes["norm.gain"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (d, k)
    shapes["head.bias"] = (k,)
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def _init_one(name: str, shape, config: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".weight"):
        return _trunc_normal(rng, shape, config.init_std)
    if name.endswith(".gain"):
        return np.ones(shape)
    return np.zeros(shape)


def init_params(config: ModelConfig, seed: int | np.random.Generator = 0, dtype=np.float64) -> Params:
    """Truncated-normal weights; zero biases, class token and position embeddings."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return {
        name: Tensor(_init_one(name, shape, config, rng), requires_grad=True, name=name, dtype=dtype)
        for name, shape in param_shapes(config).items()
    }


def audit_params(params: Params, config: ModelConfig) -> None:
    expected = param_shapes(config)
    problems = [f"missing {n}" for n in expected if n not in params]
    problems += [f"unexpected {n}" for n in params if n not in expected]
    problems += [
        f"{n}: shape {params[n].shape} != {s}"
        for n, s in expected.items()
        if n in params and params[n].shape != s
    ]
    if problems:
        raise DimensionError("parameter audit failed: " + "; ".join(problems))


@dataclass(frozen=True)
class ParameterCount:
    total: int
    groups: dict[str, int]


def count_parameters(config: ModelConfig) -> ParameterCount:
    """Exact scalar count with a per-group breakdown."""
    groups: dict[str, int] = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("patch_embed."):
            key = "patch_embed." + name.split(".")[1]
        elif name.startswith("blocks."):
            i, part = name.split(".")[1:3]
            key = f"blocks.{i}.{'attn' if part in ('norm1', 'attn') else 'mlp'}"
        else:
            key = name.split(".")[0]
        groups[key] = groups.get(key, 0) + int(np.prod(shape))
    return ParameterCount(total=sum(groups.values()), groups=groups)


# --------------------------------------------------------------------------
# forward pieces


def patchify(image, patch_size: int, image_size: int | None = None) -> Tensor:
    """``[..., S, S, C]`` image -> ``[..., M, patch_size**2 * C]`` row-major patch rows."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim < 3:
        raise DimensionError(f"patchify: expected [..., H, W, C], got {arr.shape}")
    *lead, h, w, c = arr.shape
    if h != w or h % patch_size or (image_size is not None and h != image_size):
        want = f"{image_size}x{image_size}" if image_size else f"square, multiple of {patch_size}"
        raise DimensionError(f"patchify: image is {h}x{w}, expected {want}")
    g = h // patch_size
    x = arr.reshape(*lead, g, patch_size, g, patch_size, c)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return Tensor(x.reshape(*lead, g * g, patch_size * patch_size * c), dtype=arr.dtype)


def unpatchify(patches, patch_size: int, channels: int = 3) -> np.ndarray:
    arr = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    *lead, m, _ = arr.shape
    g = int(round(m**0.5))
    if g * g != m:
        raise DimensionError(f"unpatchify: {m} patches do not form a square grid")
    n = len(lead)
    x = arr.reshape(*lead, g, g, patch_size, patch_size, channels)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, g * patch_size, g * patch_size, channels)


def embed(patches: Tensor, params: Params, config: ModelConfig, stream: int = 0) -> EmbeddingSequence:
    """Linear projection of patch rows through stream ``stream``'s weights."""
    if not 0 <= stream < config.num_streams:
        raise ConfigError(
            f"projection {stream} does not exist in fusion mode {config.fusion_mode!r} "
            f"({config.num_streams} stream(s))"
        )
    if patches.shape[-1] != config.patch_dim:
        raise DimensionError(f"embed: patch width {patches.shape[-1]} != {config.patch_dim}")
    w = params[f"patch_embed.{stream}.weight"]
    b = params[f"patch_embed.{stream}.bias"]
    return EmbeddingSequence(T.add(T.matmul(patches, w), b), includes_class_token=False)


def add_class_and_position(seq: EmbeddingSequence, params: Params, config: ModelConfig) -> EmbeddingSequence:
    if seq.includes_class_token:
        raise ContractError("sequence already carries a class token")
    if seq.length != config.num_patches:
        raise DimensionError(f"expected {config.num_patches} patch tokens, got {seq.length}")
    tokens = seq.tokens
    cls = params["cls_token"]
    if tokens.ndim == 3:
        cls = T.expand_leading(cls, tokens.shape[0])
    full = T.concat([cls, tokens], axis=-2)
    return EmbeddingSequence(T.add(full, params["pos_embed"]), includes_class_token=True)


def _linear(x: Tensor, params: Params, name: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])


def attention(x: Tensor, params: Params, config: ModelConfig, prefix: str, trace: dict | None = None) -> Tensor:
    """Multi-head self-attention over ``[B, L, D]`` tokens."""
    b, length, d = x.shape
    h, dh = config.num_heads, config.head_dim
    qkv = _linear(x, params, f"{prefix}.qkv")
    qkv = T.transpose(T.reshape(qkv, (b, length, 3, h, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh))
    probs = T.softmax(scores, axis=-1)
    ctx = T.matmul(probs, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, length, d))
    if trace is not None:
        trace[f"{prefix}.qkv"] = qkv.shape
        trace[f"{prefix}.scores"] = scores.shape
        trace[f"{prefix}.probs"] = probs.data
        trace[f"{prefix}.context"] = ctx.shape
    return _linear(ctx, params, f"{prefix}.out")


def block(x: Tensor, params: Params, config: ModelConfig, i: int, trace=None, rng=None) -> Tensor:
    pre = f"blocks.{i}"
    eps = config.layernorm_eps
    y = T.layernorm(x, params[f"{pre}.norm1.gain"], params[f"{pre}.norm1.bias"], eps)
    x = T.add(x, T.dropout(attention(y, params, config, f"{pre}.attn", trace), config.dropout, rng))
    y = T.layernorm(x, params[f"{pre}.norm2.gain"], params[f"{pre}.norm2.bias"], eps)
    hidden = T.gelu(_linear(y, params, f"{pre}.mlp.fc1"))
    if trace is not None:
        trace[f"{pre}.mlp.hidden"] = hidden.shape
    x = T.add(x, T.dropout(_linear(hidden, params, f"{pre}.mlp.fc2"), config.dropout, rng))
    return x


def encoder_forward(
    seq: EmbeddingSequence,
    params: Params,
    config: ModelConfig,
    trace: dict | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the block stack and return the normalized class-token row(s), ``[D]`` or ``[B, D]``."""
    if not seq.includes_class_token:
        raise ContractError("encoder_forward needs a sequence with the class token")
    x = seq.tokens
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if trace is not None:
        trace["encoder.input"] = x.shape
    x = T.dropout(x, config.dropout, rng)
    for i in range(config.num_layers):
        x = block(x, params, config, i, trace, rng)
        if not np.all(np.isfinite(x.data)):
            raise NumericError(f"non-finite activation after encoder layer {i}")
        if trace is not None:
            trace[f"blocks.{i}.output"] = x.shape
    x = T.layernorm(x, params["norm.gain"], params["norm.bias"], config.layernorm_eps)
    cls_out = x[:, 0, :]
    if trace is not None:
        trace["encoder.class_output"] = cls_out.shape
    return cls_out[0] if single else cls_out


def head(cls_out: Tensor, params: Params) -> Tensor:
    """Affine map of the class-token state to 6*(N+1) logits."""
    if cls_out.ndim == 1:
        logits = T.matmul(T.reshape(cls_out, (1, cls_out.shape[0])), params["head.weight"])
        return T.add(T.reshape(logits, (logits.shape[1],)), params["head.bias"])
    return T.add(T.matmul(cls_out, params["head.weight"]), params["head.bias"])


# --------------------------------------------------------------------------
# checkpoints
#
# Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header
# ({"version", "config", "dtype", "tensors": [{name, shape, offset, count}],
# "meta"}), then the concatenated little-endian float payload.

CHECKPOINT_MAGIC = b"MFEVCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: Params, config: ModelConfig, meta: dict | None = None) -> None:
    audit_params(params, config)
    entries, blobs, offset = [], [], 0
    for name in param_shapes(config):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "dtype": "<f8",
        "tensors": entries,
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    if "version" not in header:
        raise ContractError(f"{path}: checkpoint header has no version")
    if header["version"] != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {header['version']}")
    payload = memoryview(data)[12 + hlen :]
    dtype = np.dtype(header.get("dtype", "<f8"))
    arrays = {}
    for entry in header["tensors"]:
        start = entry["offset"]
        stop = start + entry["count"] * dtype.itemsize
        arrays[entry["name"]] = np.frombuffer(payload[start:stop], dtype=dtype).reshape(entry["shape"]).copy()
    return header, arrays


def load_checkpoint(
    path: str | Path,
    config: ModelConfig | None = None,
    seed: int | np.random.Generator = 0,
) -> tuple[Params, ModelConfig]:
    """Load parameters, optionally into a different ``config``.

    Only the head may disagree in shape with ``config`` (for example a wider
    6*(N+1) head on a 6-way checkpoint); it is then freshly initialized.
    """
    header, arrays = read_checkpoint(path)
    stored = ModelConfig(**header["config"])
    config = config or stored
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params: Params = {}
    problems = []
    for name, shape in param_shapes(config).items():
        arr = arrays.get(name)
        if arr is not None and arr.shape == shape:
            params[name] = Tensor(arr, requires_grad=True, name=name)
        elif name.startswith("head."):
            logger.info("re-initializing %s (checkpoint shape %s, wanted %s)", name,
                        None if arr is None else arr.shape, shape)
            params[name] = Tensor(_init_one(name, shape, config, rng), requires_grad=True, name=name)
        else:
            problems.append(f"{name}: checkpoint has {None if arr is None else arr.shape}, need {shape}")
    if problems:
        raise DimensionError("checkpoint does not fit config: " + "; ".join(problems))
    return params, config
