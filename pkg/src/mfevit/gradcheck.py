"""Finite-difference audit of every model parameter's gradient."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .encoder import Params, init_params
from .model import forward

TINY = ModelConfig(image_size=32, patch_size=16, embed_dim=8, num_layers=2, num_heads=2,
                   num_subclasses=1, fusion_mode="alternative")

SIZES = {"tiny": TINY}


def random_params(config: ModelConfig, seed: int = 0, scale: float = 0.3) -> Params:
    """Parameters in general position: every tensor random, gains near one."""
    rng = np.random.default_rng(seed)
    params = init_params(config, rng)
    for name, p in params.items():
        noise = rng.normal(0.0, scale, p.shape)
        p.data[...] = 1.0 + noise if name.endswith(".gain") else noise
    return params


def random_batch(config: ModelConfig, n: int = 2, seed: int = 0):
    rng = np.random.default_rng([seed, 99])
    s = config.image_size
    rgb = rng.uniform(0.0, 1.0, (n, s, s, 3))
    depth = rng.uniform(0.0, 1.0, (n, s, s, 1))
    labels = rng.integers(0, config.num_labels, n)
    return rgb, depth, labels


@dataclass(frozen=True)
class GradReport:
    name: str
    size: int
    rel_error: float
    grad_norm: float


def check_gradients(config: ModelConfig = TINY, seed: int = 0, h: float = 1e-4,
                    n: int = 2, names: list[str] | None = None) -> list[GradReport]:
    """Compare tape gradients with central differences for each parameter tensor."""
    params = random_params(config, seed)
    rgb, depth, labels = random_batch(config, n, seed)

    def loss_fn() -> T.Tensor:
        return T.cross_entropy(forward(rgb, depth, params, config), labels)

    T.get_tape().reset()
    for p in params.values():
        p.grad = None
    T.backward(loss_fn())
    reports = []
    for name in names or list(params):
        p = params[name]
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        numeric = T.finite_difference_grad(lambda _x: loss_fn(), p, h)
        reports.append(GradReport(name, p.size, T.max_relative_error(analytic, numeric),
                                  float(np.abs(analytic).max())))
    return reports
