"""Dual-branch disentangling network and its checkpoint container.

Layout is channels-last throughout: an STMap batch is ``(B, rois, frames, 3)``
and feature maps are ``(B, h, w, dim)``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .numerics import Tensor, ops
from .stmap import STMap


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_rois: int = 64
    n_frames: int = 256
    widths: tuple[int, ...] = (16, 32, 64)
    dim: int = 128
    head_widths: tuple[int, ...] = (64, 32, 16, 8)
    hr_bias_init: float = 75.0

    @property
    def encoder_widths(self) -> tuple[int, ...]:
        return tuple(self.widths) + (self.dim,)

    @property
    def feature_shape(self) -> tuple[int, int]:
        h, w = self.n_rois, self.n_frames
        for _ in self.encoder_widths:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return h, w

    def digest(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    dim = config.dim
    for branch in ("enc_rppg", "enc_noise"):
        cin = 3
        for i, cout in enumerate(config.encoder_widths):
            params[f"{branch}.conv{i}.w"] = _he(rng, (3, 3, cin, cout), 9 * cin)
            params[f"{branch}.conv{i}.b"] = np.zeros(cout)
            cin = cout
    params["nfel.fc1.w"] = _he(rng, (dim, dim), dim)
    params["nfel.fc1.b"] = np.zeros(dim)
    params["nfel.fc2.w"] = rng.normal(0.0, 0.01, size=(dim, 2 * dim))
    params["nfel.fc2.b"] = np.zeros(2 * dim)
    params["nol.k1"] = _he(rng, (3, 3, dim, dim), 9 * dim)
    params["nol.k2"] = _he(rng, (3, 3, dim, dim), 9 * dim)

    _, w = config.feature_shape
    n_up = int(round(np.log2(config.n_frames / w)))
    if w * 2**n_up != config.n_frames:
        raise ModelError(f"feature width {w} cannot be doubled up to {config.n_frames} frames")
    if len(config.head_widths) < n_up:
        raise ModelError(f"need {n_up} head widths, got {len(config.head_widths)}")
    cin = dim
    for i, cout in enumerate(config.head_widths[:n_up]):
        params[f"bvp_head.up{i}.w"] = _he(rng, (3, 3, cin, cout), 3 * cin)
        params[f"bvp_head.up{i}.b"] = np.zeros(cout)
        cin = cout
    params["bvp_head.out.w"] = _he(rng, (3, 3, cin, 1), 3 * cin) * 0.5
    params["bvp_head.out.b"] = np.zeros(1)
    params["hr_head.w"] = np.zeros((dim, 1))
    params["hr_head.b"] = np.full(1, config.hr_bias_init)
    return params


@dataclass
class FeatureBundle:
    z_phy: Tensor
    z_n: Tensor | None
    z_phy_pooled: Tensor
    z_n_pooled: Tensor | None
    z_phy_vec: Tensor
    z_n_vec: Tensor | None


@dataclass
class Prediction:
    bvp: Tensor
    hr: Tensor
    bundle: FeatureBundle


def adain(x: Tensor, gamma_style: Tensor, beta_style: Tensor) -> Tensor:
    """Re-style each channel of ``x`` (B, h, w, C) to scale ``gamma_style`` and shift ``beta_style`` (B, C)."""
    mu, sigma = ops.channel_instance_stats(x)
    b, c = mu.shape
    if gamma_style.shape != (b, c) or beta_style.shape != (b, c):
        raise ModelError(f"style shapes {gamma_style.shape}/{beta_style.shape} do not match ({b}, {c})")
    shape = (b, 1, 1, c)
    normed = (x - ops.reshape(mu, shape)) / ops.reshape(sigma, shape)
    return normed * ops.reshape(gamma_style, shape) + ops.reshape(beta_style, shape)


def as_batch(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, STMap):
        return Tensor(x.values[None])
    if isinstance(x, (list, tuple)):
        return Tensor(np.stack([s.values if isinstance(s, STMap) else np.asarray(s) for s in x]))
    arr = np.asarray(x, dtype=np.float64)
    return Tensor(arr[None] if arr.ndim == 3 else arr)


class GreipModel:
    """Parameters live in ``self.params`` as leaf tensors keyed by dotted names."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0,
                 params: Mapping[str, np.ndarray] | None = None):
        self.config = config or ModelConfig()
        arrays = init_params(self.config, seed)
        if params is not None:
            _check_compatible(arrays, params)
            arrays = {k: np.asarray(params[k], dtype=np.float64) for k in arrays}
        self.set_arrays(arrays)

    # -- parameter plumbing --

    def set_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.params = {name: Tensor(value, requires_grad=True, name=name) for name, value in arrays.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def branch_params(self, prefix: str) -> list[Tensor]:
        return [t for name, t in self.params.items() if name.startswith(prefix)]

    # -- forward pieces --

    def _encoder(self, branch: str, x: Tensor) -> Tensor:
        h = x
        last = len(self.config.encoder_widths) - 1
        for i in range(last + 1):
            h = ops.conv2d(h, self.params[f"{branch}.conv{i}.w"], self.params[f"{branch}.conv{i}.b"], stride=2)
            if i < last:
                h = ops.relu(h)
        return h

    def encode(self, st, with_noise: bool = True) -> FeatureBundle:
        x = as_batch(st)
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.n_rois, cfg.n_frames, 3):
            raise ModelError(f"input {x.shape} does not match configured (B, {cfg.n_rois}, {cfg.n_frames}, 3)")
        z_phy = self._encoder("enc_rppg", x)
        phy_pooled = ops.global_average_pool(z_phy)
        z_n = n_pooled = n_vec = None
        if with_noise:
            z_n = self._encoder("enc_noise", x)
            n_pooled = ops.global_average_pool(z_n)
            n_vec = ops.l2_normalize(n_pooled)
        return FeatureBundle(z_phy, z_n, phy_pooled, n_pooled, ops.l2_normalize(phy_pooled), n_vec)

    def nfel(self, z_n: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        pooled = ops.global_average_pool(z_n)
        hidden = ops.relu(ops.linear(pooled, p["nfel.fc1.w"], p["nfel.fc1.b"]))
        style = ops.linear(hidden, p["nfel.fc2.w"], p["nfel.fc2.b"])
        dim = self.config.dim
        gamma_style = 1.0 + ops.tanh(style[:, :dim])
        beta_style = style[:, dim:]
        return gamma_style, beta_style

    def nol(self, z_phy: Tensor, z_n: Tensor) -> Tensor:
        if z_phy.shape != z_n.shape:
            raise ModelError(f"z_phy {z_phy.shape} and z_n {z_n.shape} differ")
        gamma_style, beta_style = self.nfel(z_n)
        z = ops.relu(adain(ops.conv2d(z_phy, self.params["nol.k1"]), gamma_style, beta_style))
        return adain(ops.conv2d(z, self.params["nol.k2"]), gamma_style, beta_style) + z_phy

    def bvp_head(self, fused: Tensor) -> Tensor:
        # Pool the ROI axis first; on a height-1 map only the middle kernel row sees data.
        h = ops.mean(fused, axis=1, keepdims=True)
        i = 0
        while f"bvp_head.up{i}.w" in self.params:
            h = ops.repeat(h, 2, axis=2)
            h = ops.relu(ops.conv2d(h, self.params[f"bvp_head.up{i}.w"], self.params[f"bvp_head.up{i}.b"]))
            i += 1
        out = ops.conv2d(h, self.params["bvp_head.out.w"], self.params["bvp_head.out.b"])
        return ops.reshape(out, (out.shape[0], out.shape[2]))

    def hr_head(self, fused: Tensor) -> Tensor:
        pooled = ops.global_average_pool(fused)
        out = ops.linear(pooled, self.params["hr_head.w"], self.params["hr_head.b"])
        return ops.reshape(out, (out.shape[0],))

    def predict(self, st, use_fusion: bool = True, with_noise: bool | None = None) -> Prediction:
        """Heads on the fused map, or on the plain rPPG map when ``use_fusion`` is off."""
        need_noise = use_fusion if with_noise is None else (with_noise or use_fusion)
        bundle = self.encode(st, with_noise=need_noise)
        fused = self.nol(bundle.z_phy, bundle.z_n) if use_fusion else bundle.z_phy
        return Prediction(self.bvp_head(fused), self.hr_head(fused), bundle)


def _check_compatible(expected: Mapping[str, np.ndarray], given: Mapping[str, np.ndarray]) -> None:
    missing = sorted(set(expected) - set(given))
    extra = sorted(set(given) - set(expected))
    if missing or extra:
        raise ModelError(f"parameter names differ: missing={missing} unexpected={extra}")
    for name, value in expected.items():
        if np.shape(given[name]) != value.shape:
            raise ModelError(f"{name}: shape {np.shape(given[name])} != expected {value.shape}")


# -- checkpoint container ---------------------------------------------------
# "GRPK", u32 version, 64-byte ascii config digest, u32 count, then per
# parameter: u16 name length, utf-8 name, u8 ndim, u32 dims, float64 data.

CKPT_MAGIC = b"GRPK"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], config_hash: str) -> None:
    digest = config_hash.encode("ascii")
    if len(digest) != 64:
        raise ModelError("config hash must be a 64-character hex digest")
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), digest, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        value = np.ascontiguousarray(arrays[name], dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<HB", len(encoded), value.ndim) + encoded)
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], str]:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    digest = blob[8:72].decode("ascii")
    (count,) = struct.unpack_from("<I", blob, 72)
    offset = 76
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            name_len, ndim = struct.unpack_from("<HB", blob, offset)
            offset += 3
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            n = int(np.prod(shape))
            if offset + 8 * n > len(blob):
                raise ModelError(f"{path}: truncated data for {name}")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
            offset += 8 * n
    except struct.error as exc:
        raise ModelError(f"{path}: truncated checkpoint") from exc
    return arrays, digest


def load_model(path: str | Path, config: ModelConfig) -> GreipModel:
    arrays, digest = load_checkpoint(path)
    if digest != config.digest():
        raise ModelError(f"{path}: checkpoint was written for a different model config")
    return GreipModel(config, params=arrays)

