"""Network assembly: encoders, coarse decoder, refinement unit, full pipeline.

Parameter names are grouped by prefix:

* ``ae1.encoder.*``, ``ae1.decoder.*`` - auto-encoder for complete shapes
* ``ae2.encoder.*`` - encoder for partial shapes (shares ``ae1.decoder``)
* ``refiner.*`` - per-point residual predictor

All batched tensors are ``(B, N, 3)`` for points and ``(B, C)`` for codewords.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import geom
from .autodiff import ModelParams, Tensor
from .errors import StateError


@dataclass
class ModelConfig:
    encoder_widths1: tuple = (128, 256)
    encoder_widths2: tuple = (512,)
    code_dim: int = 1024
    decoder_widths: tuple = (1024, 1024)
    coarse_points: int = 512
    refiner_widths: tuple = (512, 256, 128, 64, 128, 256, 512)
    grid_extent: float = 0.05
    mirror_plane: str = "xy"  # "none" disables the mirrored copy
    refine: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        for f in ("encoder_widths1", "encoder_widths2", "decoder_widths", "refiner_widths"):
            setattr(self, f, tuple(int(w) for w in getattr(self, f)))
        if not self.encoder_widths1 or not self.refiner_widths:
            raise ValueError("encoder_widths1 and refiner_widths must be non-empty")
        if self.code_dim < 1 or self.coarse_points < 1:
            raise ValueError("code_dim and coarse_points must be positive")
        if self.mirror_plane not in ("none", *geom.PLANES):
            raise ValueError(f"mirror_plane must be one of none/xy/yz/xz, got {self.mirror_plane!r}")

    @classmethod
    def desk(cls, **overrides):
        """Narrow layers and few points, for CPU-minute training runs."""
        base = dict(encoder_widths1=(64, 128), encoder_widths2=(256,), code_dim=1024,
                    decoder_widths=(256, 256), coarse_points=128,
                    refiner_widths=(128, 64, 32, 64, 128))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @property
    def plane(self) -> Optional[str]:
        return None if self.mirror_plane == "none" else self.mirror_plane

    def iterations_for(self, resolution: int) -> int:
        """Number of doubling loops that turn ``coarse_points`` into ``resolution``."""
        ratio = resolution / self.coarse_points
        m = round(math.log2(ratio)) if ratio >= 1 else -1
        if m < 0 or self.coarse_points * 2 ** m != resolution:
            raise ValueError(f"resolution {resolution} is not {self.coarse_points} * 2^m")
        return m


def _layer_shapes(config: ModelConfig) -> dict[str, list[tuple[int, int]]]:
    def chain(d_in, widths):
        dims = [d_in, *widths]
        return list(zip(dims[:-1], dims[1:]))

    w1 = config.encoder_widths1
    enc = chain(3, w1) + chain(2 * w1[-1], (*config.encoder_widths2, config.code_dim))
    return {
        "ae1.encoder": enc,
        "ae2.encoder": enc,
        "ae1.decoder": chain(config.code_dim, (*config.decoder_widths, config.coarse_points * 3)),
        "refiner": chain(3 + 2 + config.code_dim, (*config.refiner_widths, 3)),
    }


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Each group draws from its own stream so adding a group never shifts the
    others. The refiner's last layer starts at zero.
    """
    dtype = np.dtype(config.dtype)
    params = ModelParams()
    for gi, (group, shapes) in enumerate(_layer_shapes(config).items()):
        rng = np.random.default_rng([seed, gi])
        for li, (d_in, d_out) in enumerate(shapes):
            bound = 1.0 / math.sqrt(d_in)
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
            b = rng.uniform(-bound, bound, size=d_out)
            if group == "refiner" and li == len(shapes) - 1:
                w[:] = 0.0
                b[:] = 0.0
            params.add(f"{group}.l{li}.weight", w.astype(dtype))
            params.add(f"{group}.l{li}.bias", b.astype(dtype))
    return params


def _layers(params: ModelParams, group: str, start: int = 0, stop: Optional[int] = None):
    out = []
    i = start
    while f"{group}.l{i}.weight" in params and (stop is None or i < stop):
        out.append((params[f"{group}.l{i}.weight"], params[f"{group}.l{i}.bias"]))
        i += 1
    return out


def _points_tensor(points, dtype) -> Tensor:
    t = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=dtype))
    if t.ndim == 2:
        t = ad.reshape(t, (1,) + t.shape)
    if t.ndim != 3 or t.shape[-1] != 3:
        raise ValueError(f"expected (N, 3) or (B, N, 3) points, got {t.shape}")
    if t.shape[1] == 0:
        raise ValueError("cannot encode an empty point cloud")
    return t


def _expand_points(x: Tensor) -> Tensor:
    """(B, D) -> (B, 1, D) so it broadcasts against per-point features."""
    return ad.reshape(x, (x.shape[0], 1, x.shape[1]))


def encode(points, params: ModelParams, config: ModelConfig, branch: str = "ae1") -> Tensor:
    """Two-stage point encoder; returns ``(B, code_dim)`` codewords.

    Per-point MLP, max-pool, append the pooled feature to every point, a
    second per-point MLP, max-pool again. The first layer of the second MLP
    is split into its per-point and global halves so the pooled feature is
    multiplied once per cloud instead of once per point.
    """
    group = f"{branch}.encoder"
    x = _points_tensor(points, config.dtype)
    n1 = len(config.encoder_widths1)
    feat = ad.shared_mlp(x, _layers(params, group, 0, n1))
    pooled = ad.maxpool_points(feat)
    d = feat.shape[-1]
    w, b = params[f"{group}.l{n1}.weight"], params[f"{group}.l{n1}.bias"]
    h = ad.dense(feat, w[:d], b) + _expand_points(ad.matmul(pooled, w[d:]))
    rest = _layers(params, group, n1 + 1)
    if rest:
        h = ad.shared_mlp(ad.relu(h), rest)
    return ad.maxpool_points(h)


def decode_coarse(code, params: ModelParams, config: ModelConfig) -> Tensor:
    code = ad.as_tensor(code)
    if code.ndim == 1:
        code = ad.reshape(code, (1, -1))
    if code.shape[-1] != config.code_dim:
        raise ValueError(f"codeword length {code.shape[-1]} != configured {config.code_dim}")
    out = ad.shared_mlp(code, _layers(params, "ae1.decoder"))
    return ad.reshape(out, (code.shape[0], config.coarse_points, 3))


def siamese_forward(partial, complete, params: ModelParams, config: ModelConfig):
    """Return ``(C2, C1, coarse)``: partial codeword, complete codeword, decoded C2.

    The complete-shape auto-encoder must be frozen, which guarantees that
    gradients can only reach the partial encoder.
    """
    if not (params.is_frozen("ae1.encoder") and params.is_frozen("ae1.decoder")):
        raise StateError("ae1 must be frozen before training the partial encoder")
    with ad.no_grad():
        c1 = encode(complete, params, config, "ae1")
    c2 = encode(partial, params, config, "ae2")
    coarse = decode_coarse(c2, params, config)
    return c2, c1, coarse


def synthesize(partial, coarse, config: ModelConfig, target_n: Optional[int] = None) -> Tensor:
    """Batched synthesis: FPS over [partial, mirror(partial), coarse].

    ``partial`` is data (no gradient); ``coarse`` may carry one, and selected
    coarse points keep their gradient path.
    """
    coarse = _points_tensor(coarse, config.dtype)
    part = np.asarray(partial.data if isinstance(partial, Tensor) else partial, dtype=coarse.dtype)
    if part.ndim == 2:
        part = part[None]
    if part.shape[0] != coarse.shape[0]:
        raise ValueError("partial and coarse batch sizes differ")
    if part.shape[1] == 0 or coarse.shape[1] == 0:
        raise ValueError("synthesis inputs must be non-empty")
    target_n = config.coarse_points if target_n is None else target_n
    pieces = [Tensor(part)]
    if config.plane is not None:
        pieces.append(Tensor(np.stack([geom.mirror(p, config.plane) for p in part])))
    pieces.append(coarse)
    pool = ad.concat(pieces, axis=1)
    idx = np.stack([geom.fps_indices(pool.data[b], target_n) for b in range(pool.shape[0])])
    return ad.gather_points(pool, idx)


def _refine_once(points: Tensor, code: Tensor, params: ModelParams, config: ModelConfig, factor: int) -> Tensor:
    B, N, _ = points.shape
    rep = ad.repeat(points, factor, axis=1) if factor > 1 else points
    grid = geom.grid2d(1, factor, config.grid_extent).astype(points.dtype)
    grid = np.tile(grid, (N, 1))
    layers = _layers(params, "refiner")
    w, b = layers[0]
    # first layer on concat(xyz, grid uv, codeword), applied piecewise
    h = ad.dense(rep, w[:3], b)
    h = h + ad.matmul(Tensor(grid), w[3:5])
    h = h + _expand_points(ad.matmul(code, w[5:]))
    residual = ad.shared_mlp(ad.relu(h), layers[1:])
    return rep + residual


def refine(synthetic, code, params: ModelParams, config: ModelConfig, iterations: int = 0) -> Tensor:
    """Residual refinement ``P + R(P)``; each iteration doubles the point count.

    With ``iterations == 0`` the cloud passes once through the unit at its
    own resolution.
    """
    pts = _points_tensor(synthetic, config.dtype)
    code = ad.as_tensor(code)
    if code.ndim == 1:
        code = ad.reshape(code, (1, -1))
    if code.shape != (pts.shape[0], config.code_dim):
        raise ValueError(f"codeword shape {code.shape} does not match batch {pts.shape[0]} x {config.code_dim}")
    if iterations == 0:
        return _refine_once(pts, code, params, config, 1)
    for _ in range(iterations):
        pts = _refine_once(pts, code, params, config, 2)
    return pts


def complete(partial, params: ModelParams, config: ModelConfig, target_resolution: Optional[int] = None,
             branch: str = "ae2", return_synthetic: bool = False):
    """Full pipeline; returns ``(coarse, fine)`` tensors (plus synthetic if asked).

    Without refinement (ablation) the coarse cloud doubles as the output, so
    the target resolution must equal ``coarse_points``.
    """
    target_resolution = config.coarse_points if target_resolution is None else int(target_resolution)
    m = config.iterations_for(target_resolution)
    partial_t = _points_tensor(partial, config.dtype)
    code = encode(partial_t, params, config, branch)
    coarse = decode_coarse(code, params, config)
    if not config.refine:
        if m != 0:
            raise ValueError("refinement disabled: output resolution is fixed to coarse_points")
        return (coarse, coarse, coarse) if return_synthetic else (coarse, coarse)
    synthetic = synthesize(partial_t.data, coarse, config)
    fine = refine(synthetic, code, params, config, m)
    return (coarse, fine, synthetic) if return_synthetic else (coarse, fine)


class CompletionModel:
    """Config plus parameters, with numpy-in/numpy-out inference helpers."""

    def __init__(self, config: ModelConfig, params: Optional[ModelParams] = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    @classmethod
    def from_checkpoint(cls, path):
        params, _, meta = ad.load_checkpoint(path)
        return cls(ModelConfig.from_dict(meta["model"]), params)

    def encode(self, points, branch="ae1") -> np.ndarray:
        with ad.no_grad():
            return encode(points, self.params, self.config, branch).data

    def complete(self, partial, resolution: Optional[int] = None):
        """Complete one ``(N, 3)`` cloud; returns ``(coarse, fine)`` arrays."""
        partial = geom.as_points(partial)
        with ad.no_grad():
            coarse, fine = complete(partial, self.params, self.config, resolution)
        return coarse.data[0].astype(np.float64), fine.data[0].astype(np.float64)

    def __call__(self, partial, resolution=None):
        return self.complete(partial, resolution)[1]
