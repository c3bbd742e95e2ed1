"""Differentiable layers of the attractor-guided network.

All feature maps are channels-last: ``[B, N, T, C]`` (batch, joints, time,
channels).  Unbatched ``[N, T, C]`` inputs are accepted everywhere and
returned unbatched.  Parameters are plain ``dict[str, Tensor]`` keyed by the
relative names produced by the matching ``init_*`` function.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, ShapeError
from .tensor import Tensor

Params = Mapping[str, Tensor]


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [N,T,C] or [B,N,T,C], got {x.shape}")


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------------------
# multi-timescale dynamics


def velocity(x: Tensor) -> Tensor:
    """Frame differences along the time axis (axis -2)."""
    t = x.shape[-2]
    if t < 2:
        raise InputError(f"velocity needs at least 2 frames, got {t}")
    return T.sub(T.slice_axis(x, -2, 1, t), T.slice_axis(x, -2, 0, t - 1))


def init_mtde(rng, coord_dim: int, d_p: int, timescales: Sequence[int] = (3, 5, 7),
              dtype=np.float32, use_mtde: bool = True) -> dict[str, Tensor]:
    p = {}
    for stream in ("pos", "vel"):
        if not use_mtde:
            continue
        for k in timescales:
            p[f"{stream}.k{k}.weight"] = _uniform(rng, (k, coord_dim, d_p), k * coord_dim, dtype)
            p[f"{stream}.k{k}.bias"] = _zeros((d_p,), dtype)
        n_cat = len(timescales) * d_p
        p[f"{stream}.reduce.weight"] = _uniform(rng, (n_cat, d_p), n_cat, dtype)
        p[f"{stream}.reduce.bias"] = _zeros((d_p,), dtype)
    if not use_mtde:
        p["lift.weight"] = _uniform(rng, (coord_dim, d_p), coord_dim, dtype)
        p["lift.bias"] = _zeros((d_p,), dtype)
    return p


def _timescales(p: Params, stream: str) -> list[int]:
    ks = sorted(int(name.split(".")[1][1:]) for name in p
                if name.startswith(stream + ".k") and name.endswith(".weight"))
    return ks


def _mtde_stream(x: Tensor, p: Params, stream: str) -> Tensor:
    feats = [T.conv_temporal(x, p[f"{stream}.k{k}.weight"], p[f"{stream}.k{k}.bias"])
             for k in _timescales(p, stream)]
    cat = T.concat(feats, axis=-1)
    return T.conv_1x1(cat, p[f"{stream}.reduce.weight"], p[f"{stream}.reduce.bias"])


def mtde_forward(x: Tensor, p: Params) -> Tensor:
    """Position and velocity streams, each through parallel temporal convolutions.

    ``x`` is ``[(B,) N, T, D]``; the result is ``[(B,) N, 2T-1, D_p]`` with the
    position stream followed by the velocity stream along time.  When the
    parameters hold a single ``lift`` map instead of per-stream kernels, both
    streams share that 1x1 lift.
    """
    v = velocity(x)
    if "lift.weight" in p:
        pos = T.conv_1x1(x, p["lift.weight"], p["lift.bias"])
        vel = T.conv_1x1(v, p["lift.weight"], p["lift.bias"])
    else:
        pos = _mtde_stream(x, p, "pos")
        vel = _mtde_stream(v, p, "vel")
    return T.concat([pos, vel], axis=-2)


# ---------------------------------------------------------------------------
# global coordination extractor


def init_gce(rng, n_joints: int, channels: int, dtype=np.float32) -> dict[str, Tensor]:
    c = channels
    return {
        "conv_ba.weight": _uniform(rng, (n_joints, 1), n_joints, dtype),
        "conv_ba.bias": _zeros((1,), dtype),
        "conv_emb.weight": _uniform(rng, (c, c), c, dtype),
        "conv_emb.bias": _zeros((c,), dtype),
        "conv_intra.weight": _uniform(rng, (1, 3, c, c), 3 * c, dtype),
        "conv_intra.bias": _zeros((c,), dtype),
    }


def balance_attractor(x: Tensor, p: Params) -> tuple[Tensor, Tensor]:
    """Learned weighted aggregate of all joints and each joint relative to it.

    Returns ``(ba, x_new)``: ``ba`` is ``[(B,) T, C, 1]`` (time-major, one
    aggregate "joint"), ``x_new`` has the shape of ``x``.
    """
    xb, squeeze = _batched(x)
    if xb.shape[1] != p["conv_ba.weight"].shape[0]:
        raise ShapeError(f"balance attractor built for {p['conv_ba.weight'].shape[0]} joints, "
                         f"input has {xb.shape[1]}")
    xt = T.transpose(xb, (0, 2, 3, 1))  # B, T, C, N
    ba = T.conv_1x1(xt, p["conv_ba.weight"], p["conv_ba.bias"])
    x_new = T.transpose(T.broadcast_sub(xt, ba), (0, 3, 1, 2))
    return _unbatch(ba, squeeze), _unbatch(x_new, squeeze)


def cosine_similarity_unit(x_new: Tensor, p: Params) -> Tensor:
    """Per-frame joint correlation graphs, ``[(B,) T, N, N]``."""
    xb, squeeze = _batched(x_new)
    emb = T.conv_1x1(xb, p["conv_emb.weight"], p["conv_emb.bias"])
    stack = T.cosine_rows(T.transpose(emb, (0, 2, 1, 3)))
    return _unbatch(stack, squeeze)


def gce_forward(x: Tensor, p: Params) -> Tensor:
    xb, squeeze = _batched(x)
    if "conv_ba.weight" in p:
        _, x_new = balance_attractor(xb, p)
    else:
        x_new = xb
    graphs = cosine_similarity_unit(x_new, p)
    feats = T.conv2d(xb, p["conv_intra.weight"], p["conv_intra.bias"])
    agg = T.matmul(graphs, T.transpose(feats, (0, 2, 1, 3)))  # B, T, N, C
    return _unbatch(T.transpose(agg, (0, 2, 1, 3)), squeeze)


# ---------------------------------------------------------------------------
# local interaction extractor


def init_lie(rng, channels: int, dtype=np.float32) -> dict[str, Tensor]:
    if channels % 2:
        raise ConfigError(f"local interaction extractor needs an even width, got {channels}")
    c, h = channels, channels // 2
    return {
        "conv_adjacent.weight": _uniform(rng, (3, 3, c, c), 9 * c, dtype),
        "conv_adjacent.bias": _zeros((c,), dtype),
        "theta.weight": _uniform(rng, (c, h), c, dtype),
        "theta.bias": _zeros((h,), dtype),
        "phi.weight": _uniform(rng, (c, h), c, dtype),
        "phi.bias": _zeros((h,), dtype),
        "g.weight": _uniform(rng, (c, h), c, dtype),
        "g.bias": _zeros((h,), dtype),
        "out.weight": _uniform(rng, (h, c), h, dtype),
        "out.bias": _zeros((c,), dtype),
    }


def attention_weights(x: Tensor, p: Params) -> Tensor:
    """Softmax attention over all joint-time positions, ``[B, N*T, N*T]``."""
    xb, _ = _batched(x)
    B, N, Tc, _ = xb.shape
    theta = T.reshape(T.conv_1x1(xb, p["theta.weight"], p["theta.bias"]), (B, N * Tc, -1))
    phi = T.reshape(T.conv_1x1(xb, p["phi.weight"], p["phi.bias"]), (B, N * Tc, -1))
    return T.softmax_rows(T.matmul(theta, T.swap_last(phi)))


def nonlocal_forward(x: Tensor, p: Params) -> Tensor:
    xb, squeeze = _batched(x)
    B, N, Tc, _ = xb.shape
    attn = attention_weights(xb, p)
    g = T.reshape(T.conv_1x1(xb, p["g.weight"], p["g.bias"]), (B, N * Tc, -1))
    y = T.reshape(T.matmul(attn, g), (B, N, Tc, -1))
    return _unbatch(T.conv_1x1(y, p["out.weight"], p["out.bias"]), squeeze)


def lie_forward(x: Tensor, p: Params) -> tuple[Tensor, Tensor]:
    """``(f_adjacent, f_distant)``; the non-local path has no residual."""
    if x.shape[-1] % 2:
        raise ConfigError(f"local interaction extractor needs an even width, got {x.shape[-1]}")
    adjacent = T.conv2d(x, p["conv_adjacent.weight"], p["conv_adjacent.bias"])
    return adjacent, nonlocal_forward(x, p)


# ---------------------------------------------------------------------------
# adaptive feature fusion


def init_affm(rng, n_inputs: int, channels: int, ratio: int = 4, dtype=np.float32) -> dict[str, Tensor]:
    if ratio < 1 or channels % ratio:
        raise ConfigError(f"fusion width {channels} not divisible by ratio {ratio}")
    c, cat, h = channels, n_inputs * channels, channels // ratio
    return {
        "reduce.weight": _uniform(rng, (cat, c), cat, dtype),
        "reduce.bias": _zeros((c,), dtype),
        "squeeze.weight": _uniform(rng, (c, h), c, dtype),
        "squeeze.bias": _zeros((h,), dtype),
        "excite.weight": _uniform(rng, (h, c), h, dtype),
        "excite.bias": _zeros((c,), dtype),
    }


def affm_gate(z: Tensor, p: Params) -> Tensor:
    """Per-channel importance in (0, 1), shape ``[B, 1, 1, C]``."""
    pooled = T.mean_over(z, (1, 2), keepdims=True)
    hidden = T.relu(T.conv_1x1(pooled, p["squeeze.weight"], p["squeeze.bias"]))
    return T.sigmoid(T.conv_1x1(hidden, p["excite.weight"], p["excite.bias"]))


def affm_forward(features: Sequence[Tensor], p: Params) -> Tensor:
    shapes = {f.shape for f in features}
    if len(shapes) != 1:
        raise ShapeError(f"fusion inputs differ in shape: {[f.shape for f in features]}")
    batched = [_batched(f)[0] for f in features]
    squeeze = features[0].ndim == 3
    z = T.conv_1x1(T.concat(batched, axis=-1), p["reduce.weight"], p["reduce.bias"])
    return _unbatch(T.mul(z, affm_gate(z, p)), squeeze)
