"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _scalarize(out: Tensor, seed: int) -> Tensor:
    if out.size == 1:
        return T.reshape(out, ())
    # fixed random projection so every output coordinate contributes
    rng = np.random.default_rng(seed)
    proj = Tensor(rng.standard_normal(out.shape), dtype=out.dtype)
    return T.sum(T.mul(out, proj))


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``.

    The input is promoted to float64; ``f`` must close over float64 parameters
    for the check to be meaningful.  Non-scalar outputs are reduced with a fixed
    random projection.  ``max_coords`` limits the check to a seeded random
    subset of input coordinates.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    leaf = Tensor(base.copy(), requires_grad=True)
    loss = _scalarize(f(leaf), seed)
    T.backward(loss)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    def value(arr: np.ndarray) -> float:
        return float(_scalarize(f(Tensor(arr)), seed).data)

    coords = np.arange(base.size)
    if max_coords is not None and max_coords < base.size:
        coords = np.sort(np.random.default_rng(seed + 1).choice(base.size, max_coords, replace=False))

    worst = 0.0
    flat = base.reshape(-1)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        plus = value(base)
        flat[i] = orig - eps
        minus = value(base)
        flat[i] = orig
        numeric = (plus - minus) / (2 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst


def _check_params(fn, x: np.ndarray, params: dict, max_coords: int | None, seed: int) -> float:
    """Worst error of ``fn(x, params)`` over the input and every parameter tensor."""
    worst = grad_check(lambda v: fn(v, params), x, max_coords=max_coords, seed=seed)
    for name in params:
        def f(v, name=name):
            return fn(Tensor(x), {**params, name: v})
        worst = max(worst, grad_check(f, params[name].data, max_coords=max_coords, seed=seed))
    return worst


def _jitter(params: dict, rng) -> dict:
    # zero-initialised biases hide sign errors, so perturb every tensor a little
    return {k: Tensor(v.data + 0.1 * rng.standard_normal(v.shape), requires_grad=True)
            for k, v in params.items()}


def gradient_suite(seed: int = 0, max_coords: int | None = 40) -> list[tuple[str, float]]:
    """Gradient-check every layer, a tiny full model and the loss; returns (name, max error)."""
    from . import layers as L
    from .model import AGN, ModelConfig, ParamStore, build, mpjpe_loss

    rng = np.random.default_rng(seed)
    f64 = np.float64
    n, t, c = 3, 5, 4
    x = rng.standard_normal((n, t, c))
    rows = []

    mtde = _jitter(L.init_mtde(rng, 3, c, dtype=f64), rng)
    rows.append(("mtde", _check_params(L.mtde_forward, rng.standard_normal((n, t, 3)), mtde, max_coords, seed)))

    gce = _jitter(L.init_gce(rng, n, c, dtype=f64), rng)
    bau = {k: v for k, v in gce.items() if not k.startswith("conv_intra")}
    rows.append(("bau+csu", _check_params(
        lambda v, q: L.cosine_similarity_unit(L.balance_attractor(v, q)[1], q), x, bau, max_coords, seed)))
    rows.append(("gce", _check_params(L.gce_forward, x, gce, max_coords, seed)))

    lie = _jitter(L.init_lie(rng, c, dtype=f64), rng)
    adj = {k: v for k, v in lie.items() if k.startswith("conv_adjacent")}
    rows.append(("lie_adjacent", _check_params(
        lambda v, q: T.conv2d(v, q["conv_adjacent.weight"], q["conv_adjacent.bias"]), x, adj, max_coords, seed)))
    far = {k: v for k, v in lie.items() if not k.startswith("conv_adjacent")}
    rows.append(("lie_nonlocal", _check_params(L.nonlocal_forward, x, far, max_coords, seed)))

    affm = _jitter(L.init_affm(rng, 3, c, ratio=2, dtype=f64), rng)
    others = [Tensor(rng.standard_normal((n, t, c))) for _ in range(2)]
    rows.append(("affm", _check_params(lambda v, q: L.affm_forward([v] + others, q), x, affm, max_coords, seed)))

    cfg = ModelConfig(n_joints=4, t_in=4, t_out=2, d_p=8, temporal_dim=6, encoder_layers=2, decoder_layers=1)
    _, store = build(cfg, seed=seed, dtype=f64)
    items = _jitter(dict(store.items()), rng)

    def model_fn(v, q):
        return AGN(cfg, ParamStore(q)).forward(v)

    rows.append(("model", _check_params(model_fn, rng.standard_normal((4, 4, 3)), items, max_coords, seed)))

    truth = Tensor(rng.standard_normal((n, 2, 3)))
    rows.append(("mpjpe", grad_check(lambda v: mpjpe_loss(v, truth), rng.standard_normal((n, 2, 3)), seed=seed)))
    return [(name, float(err)) for name, err in rows]
