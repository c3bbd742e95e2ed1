"""Encoder-decoder assembly, MPJPE loss and parameter storage."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ConfigError, InputError, ShapeError
from .tensor import Tensor


@dataclass
class ModelConfig:
    n_joints: int = 22
    coord_dim: int = 3
    t_in: int = 10
    t_out: int = 10
    d_p: int = 32
    timescales: tuple = (3, 5, 7)
    temporal_dim: int = 64
    encoder_layers: int = 5
    decoder_layers: int = 4
    affm_ratio: int = 4
    use_gce: bool = True
    use_lie: bool = True
    use_affm: bool = True
    use_mtde: bool = True
    seed: int = 0

    def __post_init__(self):
        self.timescales = tuple(int(k) for k in self.timescales)
        self.validate()

    def validate(self) -> None:
        ints = ("n_joints", "coord_dim", "t_in", "t_out", "d_p", "temporal_dim",
                "encoder_layers", "decoder_layers", "affm_ratio")
        for name in ints:
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.t_in < 2:
            raise ConfigError(f"t_in must be at least 2, got {self.t_in}")
        ks = self.timescales
        if not ks or any(k <= 0 or k % 2 == 0 for k in ks) or list(ks) != sorted(set(ks)):
            raise ConfigError(f"timescales must be odd and strictly ascending, got {ks}")
        if self.d_p % 2:
            raise ConfigError(f"d_p must be even, got {self.d_p}")
        width = self.block_width
        if width % 2:
            raise ConfigError(f"block width d_p/2={width} must be even (d_p divisible by 4)")
        if width % self.affm_ratio:
            raise ConfigError(f"block width d_p/2={width} not divisible by affm_ratio={self.affm_ratio}")
        if not (self.use_gce or self.use_lie):
            raise ConfigError("at least one of use_gce / use_lie must be enabled")

    @property
    def block_width(self) -> int:
        return self.d_p // 2

    @property
    def mtde_length(self) -> int:
        return 2 * self.t_in - 1

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    # float vector stored alongside checkpoints
    _VECTOR_FIELDS = ("n_joints", "coord_dim", "t_in", "t_out", "d_p", "temporal_dim",
                      "encoder_layers", "decoder_layers", "affm_ratio",
                      "use_gce", "use_lie", "use_affm", "use_mtde", "seed")

    def to_vector(self) -> np.ndarray:
        vals = [float(getattr(self, f)) for f in self._VECTOR_FIELDS]
        vals.append(float(len(self.timescales)))
        vals.extend(float(k) for k in self.timescales)
        return np.asarray(vals, dtype=np.float32)

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "ModelConfig":
        vals = [int(round(float(v))) for v in np.asarray(vec).reshape(-1)]
        n = len(cls._VECTOR_FIELDS)
        if len(vals) < n + 1 or len(vals) != n + 1 + vals[n]:
            raise ConfigError("malformed stored model config")
        kw = dict(zip(cls._VECTOR_FIELDS, vals[:n]))
        for flag in ("use_gce", "use_lie", "use_affm", "use_mtde"):
            kw[flag] = bool(kw[flag])
        kw["timescales"] = tuple(vals[n + 1:])
        return cls(**kw)


class ParamStore:
    """Ordered mapping from hierarchical names to learnable tensors."""

    def __init__(self, items: Mapping[str, Tensor] | None = None):
        self._items: dict[str, Tensor] = {}
        for name, t in (items or {}).items():
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._items:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._items[name] = t
        return t

    def add_group(self, prefix: str, group: Mapping[str, Tensor]) -> None:
        for name, t in group.items():
            self.add(f"{prefix}.{name}", t)

    def scope(self, prefix: str) -> dict[str, Tensor]:
        head = prefix + "."
        return {k[len(head):]: v for k, v in self._items.items() if k.startswith(head)}

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def items(self):
        return self._items.items()

    def names(self) -> list[str]:
        return list(self._items)

    def n_params(self) -> int:
        return int(sum(t.size for t in self._items.values()))

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: Tensor(v.data.astype(dtype), requires_grad=True)
                           for k, v in self._items.items()})

    def copy(self) -> "ParamStore":
        return self.astype(None)

    def shapes(self) -> list[tuple[str, tuple]]:
        return [(k, v.shape) for k, v in self._items.items()]


def init_block(rng, config: ModelConfig, dtype=np.float32) -> dict[str, Tensor]:
    """Bottleneck relation block: reduce, GCE/LIE, fuse, expand."""
    c, w = config.d_p, config.block_width
    p = {
        "reduce.weight": L._uniform(rng, (c, w), c, dtype),
        "reduce.bias": L._zeros((w,), dtype),
    }
    n_inputs = 0
    if config.use_gce:
        p.update({f"gce.{k}": v for k, v in L.init_gce(rng, config.n_joints, w, dtype).items()})
        n_inputs += 1
    if config.use_lie:
        p.update({f"lie.{k}": v for k, v in L.init_lie(rng, w, dtype).items()})
        n_inputs += 2
    if config.use_affm:
        p.update({f"affm.{k}": v for k, v in
                  L.init_affm(rng, n_inputs, w, config.affm_ratio, dtype).items()})
    p["expand.weight"] = L._uniform(rng, (w, c), w, dtype)
    p["expand.bias"] = L._zeros((c,), dtype)
    return p


def _sub(p: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    head = prefix + "."
    return {k[len(head):]: v for k, v in p.items() if k.startswith(head)}


def block_forward(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    h = T.conv_1x1(x, p["reduce.weight"], p["reduce.bias"])
    feats = []
    gce = _sub(p, "gce")
    if gce:
        feats.append(L.gce_forward(h, gce))
    lie = _sub(p, "lie")
    if lie:
        feats.extend(L.lie_forward(h, lie))
    affm = _sub(p, "affm")
    if affm:
        fused = L.affm_forward(feats, affm)
    else:
        fused = feats[0]
        for f in feats[1:]:
            fused = T.add(fused, f)
    return T.add(x, T.conv_1x1(fused, p["expand.weight"], p["expand.bias"]))


def skip_source(config: ModelConfig, decoder_index: int) -> int | None:
    """Encoder block averaged into the input of a decoder block (mirror pairing).

    Averaging rather than plain summation keeps identity blocks an identity
    of the whole encoder-decoder.
    """
    src = config.encoder_layers - 2 - decoder_index
    return src if src >= 0 else None


class AGN:
    """The attractor-guided network bound to a parameter store."""

    def __init__(self, config: ModelConfig, params: ParamStore):
        self.config = config
        self.params = params

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        batched = x.ndim == 4
        xb = x if batched else T.reshape(x, (1,) + x.shape)
        expected = (cfg.n_joints, cfg.t_in, cfg.coord_dim)
        if xb.ndim != 4 or xb.shape[1:] != expected:
            raise InputError(f"model expects input [(B,) {', '.join(map(str, expected))}], got {x.shape}")
        p = self.params
        h = L.mtde_forward(xb, p.scope("mtde"))
        h = _temporal_map(h, p["proj.weight"], p["proj.bias"])
        skips = []
        for i in range(cfg.encoder_layers):
            h = block_forward(h, p.scope(f"encoder.{i}"))
            skips.append(h)
        for i in range(cfg.decoder_layers):
            src = skip_source(cfg, i)
            if src is not None:
                h = T.scale(T.add(h, skips[src]), 0.5)
            h = block_forward(h, p.scope(f"decoder.{i}"))
        h = T.conv_1x1(h, p["head.channel.weight"], p["head.channel.bias"])
        out = _temporal_map(h, p["head.temporal.weight"], p["head.temporal.bias"])
        return out if batched else T.reshape(out, out.shape[1:])

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass on a plain array without recording gradients."""
        dtype = next(iter(self.params.items()))[1].dtype
        frozen = AGN(self.config, ParamStore({k: Tensor(v.data) for k, v in self.params.items()}))
        return frozen.forward(Tensor(np.asarray(x, dtype=dtype))).data

    def with_params(self, params: ParamStore) -> "AGN":
        return AGN(self.config, params)


def _temporal_map(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Learned linear map along the time axis of ``[B, N, T, C]``."""
    xt = T.transpose(x, (0, 1, 3, 2))
    return T.transpose(T.conv_1x1(xt, weight, bias), (0, 1, 3, 2))


def build(config: ModelConfig, seed: int | None = None, dtype=np.float32) -> tuple[AGN, ParamStore]:
    """Deterministically initialise every parameter from ``seed`` (default ``config.seed``)."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    store = ParamStore()
    store.add_group("mtde", L.init_mtde(rng, config.coord_dim, config.d_p, config.timescales,
                                        dtype, use_mtde=config.use_mtde))
    t_mid = config.mtde_length
    store.add("proj.weight", L._uniform(rng, (t_mid, config.temporal_dim), t_mid, dtype))
    store.add("proj.bias", L._zeros((config.temporal_dim,), dtype))
    for i in range(config.encoder_layers):
        store.add_group(f"encoder.{i}", init_block(rng, config, dtype))
    for i in range(config.decoder_layers):
        store.add_group(f"decoder.{i}", init_block(rng, config, dtype))
    store.add("head.channel.weight", L._uniform(rng, (config.d_p, config.coord_dim), config.d_p, dtype))
    store.add("head.channel.bias", L._zeros((config.coord_dim,), dtype))
    store.add("head.temporal.weight",
              L._uniform(rng, (config.temporal_dim, config.t_out), config.temporal_dim, dtype))
    store.add("head.temporal.bias", L._zeros((config.t_out,), dtype))
    return AGN(config, store), store


def forward(model: AGN, x: Tensor) -> Tensor:
    return model.forward(x)


def mpjpe_loss(pred: Tensor, truth) -> Tensor:
    """Mean Euclidean distance between predicted and true joint positions."""
    truth = truth if isinstance(truth, Tensor) else Tensor(np.asarray(truth, dtype=pred.dtype))
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    return T.mean(T.norm_last(T.sub(pred, truth)))


def last_frame_params(config: ModelConfig, dtype=np.float32) -> ParamStore:
    """Parameters under which the network repeats the last observed frame.

    Relation blocks are zeroed (so they are identities), the position stream
    copies coordinates through the smallest kernel's centre tap, the temporal
    projection reads the last input frame, and the head copies it to every
    output frame.  Useful as a known-answer model.
    """
    if not config.use_mtde:
        raise ConfigError("last-frame construction needs the multi-timescale extractor")
    if config.d_p < config.coord_dim:
        raise ConfigError("d_p must be at least coord_dim")
    _, store = build(config, dtype=dtype)
    for _, t in store.items():
        t.data[...] = 0
    D, k0 = config.coord_dim, config.timescales[0]
    eye = np.eye(D, config.d_p, dtype=dtype)
    store[f"mtde.pos.k{k0}.weight"].data[k0 // 2] = eye
    store["mtde.pos.reduce.weight"].data[:config.d_p] = np.eye(config.d_p, dtype=dtype)
    store["proj.weight"].data[config.t_in - 1, :] = 1.0 / config.temporal_dim
    store["head.channel.weight"].data[...] = eye.T
    store["head.temporal.weight"].data[...] = 1.0
    return store
