"""Reference implementations written from the definitions, independent of the library code paths."""
from __future__ import annotations

import math

import numpy as np

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def matmul_loops(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_direct(x):
    e = [math.exp(v) for v in x]
    total = sum(e)
    return np.array([v / total for v in e])


def param_count_closed_form(image, patch, d, layers, mlp_ratio, n_sub, streams):
    m = (image // patch) ** 2
    p = patch * patch * 3
    hidden = mlp_ratio * d
    width = 6 * (n_sub + 1)
    projections = streams * (p * d + d)
    tokens = d + (m + 1) * d
    per_layer = (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (2 * d) + (d * hidden + hidden) + (hidden * d + d)
    return projections + tokens + layers * per_layer + 2 * d + d * width + width


# --------------------------------------------------------------------------
# sample filtering


def group_members_oracle(expression, n_sub):
    return [expression] + [6 + expression * n_sub + k for k in range(n_sub)]


def relabel_oracle(probs, current, original, delta, n_sub):
    """The relabel rule evaluated branch by branch with explicit scans."""
    p_max = probs[0]
    for v in probs:
        if v > p_max:
            p_max = v
    p_gt = probs[current]
    if not (p_max - p_gt > delta):
        return current
    members = group_members_oracle(original, n_sub)
    best = None
    for idx in members:
        if best is None or probs[idx] > probs[best]:
            best = idx
    runner = None
    for idx in members:
        if idx == best:
            continue
        if runner is None or probs[idx] > probs[runner]:
            runner = idx
    if best != current:
        return best
    return current if runner is None else runner


# --------------------------------------------------------------------------
# optimizer


def adamw_scalar(x, grad_fn, steps, lr, b1, b2, wd, eps):
    m = v = 0.0
    xs = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        x = x - lr * wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
        xs.append(x)
    return xs


# --------------------------------------------------------------------------
# straight-line forward pass for one image pair


def _layernorm(row, gain, bias, eps):
    mu = sum(row) / len(row)
    var = sum((r - mu) ** 2 for r in row) / len(row)
    return np.array([(r - mu) / math.sqrt(var + eps) * g + b for r, g, b in zip(row, gain, bias)])


def _gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def _patches(img, p):
    s = img.shape[0]
    rows = []
    for gy in range(s // p):
        for gx in range(s // p):
            vals = []
            for y in range(p):
                for x in range(p):
                    for c in range(img.shape[2]):
                        vals.append(img[gy * p + y, gx * p + x, c])
            rows.append(vals)
    return np.array(rows)


def forward_oracle(rgb, depth, params, cfg):
    """Logits for a single ``[S, S, 3]`` / ``[S, S, 1]`` pair; ``params`` maps names to numpy arrays."""
    mode = cfg.fusion_mode
    d0 = depth[..., 0]
    if mode == "alternative":
        streams = []
        for slot in (2, 1, 0):
            img = np.array(rgb, dtype=float)
            img[:, :, slot] = d0
            streams.append(img)
    elif mode == "naive":
        streams = [np.array(rgb, dtype=float), np.stack([d0, d0, d0], axis=-1)]
    elif mode == "rgb_only":
        streams = [np.array(rgb, dtype=float)]
    else:
        streams = [np.stack([d0, d0, d0], axis=-1)]
    embeddings = []
    for j, img in enumerate(streams):
        if cfg.standardize:
            img = np.stack([(img[:, :, c] - IMAGENET_MEAN[c]) / IMAGENET_STD[c] for c in range(3)], axis=-1)
        patches = _patches(img, cfg.patch_size)
        embeddings.append(patches @ params[f"patch_embed.{j}.weight"] + params[f"patch_embed.{j}.bias"])
    fused = sum(embeddings) / len(embeddings)
    x = np.vstack([params["cls_token"], fused]) + params["pos_embed"]

    d, h = cfg.embed_dim, cfg.num_heads
    dh = d // h
    eps = cfg.layernorm_eps
    for i in range(cfg.num_layers):
        pre = f"blocks.{i}"
        y = np.array([_layernorm(r, params[f"{pre}.norm1.gain"], params[f"{pre}.norm1.bias"], eps) for r in x])
        qkv = y @ params[f"{pre}.attn.qkv.weight"] + params[f"{pre}.attn.qkv.bias"]
        heads = []
        for head in range(h):
            q = qkv[:, head * dh:(head + 1) * dh]
            k = qkv[:, d + head * dh:d + (head + 1) * dh]
            v = qkv[:, 2 * d + head * dh:2 * d + (head + 1) * dh]
            out = np.zeros((x.shape[0], dh))
            for t in range(x.shape[0]):
                scores = [float(q[t] @ k[u]) / math.sqrt(dh) for u in range(x.shape[0])]
                top = max(scores)
                w = softmax_direct([s - top for s in scores])
                out[t] = sum(w[u] * v[u] for u in range(x.shape[0]))
            heads.append(out)
        ctx = np.hstack(heads)
        x = x + ctx @ params[f"{pre}.attn.out.weight"] + params[f"{pre}.attn.out.bias"]
        y = np.array([_layernorm(r, params[f"{pre}.norm2.gain"], params[f"{pre}.norm2.bias"], eps) for r in x])
        hidden = y @ params[f"{pre}.mlp.fc1.weight"] + params[f"{pre}.mlp.fc1.bias"]
        hidden = np.vectorize(_gelu)(hidden)
        x = x + hidden @ params[f"{pre}.mlp.fc2.weight"] + params[f"{pre}.mlp.fc2.bias"]
    cls = _layernorm(x[0], params["norm.gain"], params["norm.bias"], eps)
    return cls @ params["head.weight"] + params["head.bias"]
