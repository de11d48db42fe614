"""Desk-scale mask-based separation network and its checkpoint format.

analysis transform -> per-frame mask estimator (tanh stack with residual
connections) -> masked features -> synthesis transform -> normalized
overlap-add.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import ConfigError, FormatError, InvalidInput, IoError
from .params import Block, ParamVector, make_layout
from .signal import Waveform

MAX_PARAMS = 100_000
MASK_ACTIVATIONS = ("sigmoid", "relu")
CHECKPOINT_FORMAT = "metasep-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_sources: int = 2
    window_len: int = 256
    hop_len: int = 128
    basis_dim: int = 96
    separator_hidden: int = 96
    separator_layers: int = 2
    mask_activation: str = "sigmoid"
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("window_len", "hop_len", "basis_dim", "separator_hidden", "separator_layers"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.num_sources not in (2, 3):
            raise ConfigError(f"num_sources must be 2 or 3, got {self.num_sources}")
        if self.hop_len > self.window_len:
            raise ConfigError("hop_len must not exceed window_len")
        if self.basis_dim < self.num_sources:
            raise ConfigError("basis_dim must be at least num_sources")
        if self.mask_activation not in MASK_ACTIVATIONS:
            raise ConfigError(f"mask_activation must be one of {MASK_ACTIVATIONS}")
        count = layout_size(model_layout(self, check=False))
        if count > MAX_PARAMS:
            raise ConfigError(f"{count} parameters exceed the desk-scale budget of {MAX_PARAMS}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass(frozen=True, eq=False)
class SeparatedOutput:
    estimates: list
    masks: np.ndarray  # (C, D, frames)


def model_layout(cfg: ModelConfig, check=True):
    if check:
        cfg.validate()
    w, d, h, c = cfg.window_len, cfg.basis_dim, cfg.separator_hidden, cfg.num_sources
    shapes = [("encoder", (w, d)), ("sep_in.weight", (d, h)), ("sep_in.bias", (h,))]
    for layer in range(1, cfg.separator_layers):
        shapes += [(f"sep_{layer}.weight", (h, h)), (f"sep_{layer}.bias", (h,))]
    shapes += [("mask.weight", (h, c * d)), ("mask.bias", (c * d,)), ("decoder", (d, w))]
    return make_layout(shapes)


def layout_size(layout) -> int:
    return layout[-1].stop if layout else 0


def init_params(cfg: ModelConfig) -> ParamVector:
    """Seeded init; every weight is drawn with variance 1/fan_in, biases start at zero."""
    layout = model_layout(cfg)
    rng = np.random.default_rng(cfg.seed)
    values = np.zeros(layout_size(layout))
    for block in layout:
        if block.name.endswith("bias"):
            continue
        fan_in = block.shape[0]
        values[block.offset:block.stop] = rng.standard_normal(block.size) / np.sqrt(fan_in)
    return ParamVector(values, layout)


def check_params(params: ParamVector, cfg: ModelConfig) -> None:
    if params.layout != model_layout(cfg):
        raise ConfigError("parameter layout does not match the model config")


def _unpack(theta: ad.Tensor, layout):
    return {
        b.name: ad.reshape(ad.take_range(theta, b.offset, b.stop), b.shape) for b in layout
    }


_count_cache = {}


def _inverse_overlap_count(length, window, hop):
    key = (length, window, hop)
    if key not in _count_cache:
        nf = kernels.num_frames(length, window, hop)
        count = kernels.overlap_add(np.ones((1, nf, window)), hop, length)[0]
        inv = 1.0 / count
        inv.setflags(write=False)
        _count_cache[key] = inv
    return _count_cache[key]


def forward(theta: ad.Tensor, mixtures: np.ndarray, cfg: ModelConfig, layout=None):
    """Differentiable forward pass over a batch of equal-length mixtures.

    Returns ``(estimates, masks)`` with estimates shaped (N, C, T) and masks
    shaped (N*F, C, D).
    """
    layout = layout or model_layout(cfg)
    mixtures = np.atleast_2d(np.asarray(mixtures, dtype=np.float64))
    n, length = mixtures.shape
    if length < cfg.window_len:
        raise InvalidInput(f"input of {length} samples is shorter than the window ({cfg.window_len})")
    c, d, w, hop = cfg.num_sources, cfg.basis_dim, cfg.window_len, cfg.hop_len
    p = _unpack(theta, layout)

    frames = kernels.frame(mixtures, w, hop)
    nf = frames.shape[1]
    feats = ad.Tensor(frames.reshape(n * nf, w)) @ p["encoder"]
    z = ad.tanh(feats @ p["sep_in.weight"] + p["sep_in.bias"])
    for layer in range(1, cfg.separator_layers):
        z = z + ad.tanh(z @ p[f"sep_{layer}.weight"] + p[f"sep_{layer}.bias"])
    logits = z @ p["mask.weight"] + p["mask.bias"]
    act = ad.sigmoid if cfg.mask_activation == "sigmoid" else ad.relu
    masks = ad.reshape(act(logits), (n * nf, c, d))
    masked = masks * ad.reshape(feats, (n * nf, 1, d))
    out = ad.reshape(masked, (n * nf * c, d)) @ p["decoder"]
    out = ad.transpose(ad.reshape(out, (n, nf, c, w)), (0, 2, 1, 3))
    out = ad.overlap_add(ad.reshape(out, (n * c, nf, w)), hop, length)
    out = out * _inverse_overlap_count(length, w, hop)
    return ad.reshape(out, (n, c, length)), masks


def separate(params: ParamVector, mixture: Waveform, cfg: ModelConfig) -> SeparatedOutput:
    check_params(params, cfg)
    with ad.no_grad():
        est, masks = forward(ad.Tensor(params.values), mixture.samples[None, :], cfg, params.layout)
    rate = mixture.sample_rate_hz
    estimates = [Waveform(est.data[0, c], rate) for c in range(cfg.num_sources)]
    return SeparatedOutput(estimates=estimates, masks=np.transpose(masks.data, (1, 2, 0)))


# -- checkpoints --------------------------------------------------------------


def _encode_floats(values) -> list:
    return [float(v).hex() for v in np.asarray(values, dtype=np.float64).reshape(-1)]


def _decode_floats(items) -> np.ndarray:
    return np.array([float.fromhex(s) for s in items], dtype=np.float64)


def params_to_dict(params: ParamVector) -> dict:
    return {
        "layout": [{"name": b.name, "shape": list(b.shape), "offset": b.offset} for b in params.layout],
        "values": _encode_floats(params.values),
    }


def params_from_dict(data) -> ParamVector:
    layout = tuple(Block(b["name"], tuple(b["shape"]), b["offset"]) for b in data["layout"])
    return ParamVector(_decode_floats(data["values"]), layout)


def save_checkpoint(path, params: ParamVector, cfg: ModelConfig, extra=None) -> None:
    """Write a JSON checkpoint; floats are stored as hex strings so reloads are bit-exact."""
    check_params(params, cfg)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "model_config": cfg.to_dict(),
        "params": params_to_dict(params),
    }
    if extra is not None:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Return ``(params, cfg, extra)``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}", path=str(path)) from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path} is not a metasep checkpoint")
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    cfg = ModelConfig.from_dict(doc["model_config"])
    params = params_from_dict(doc["params"])
    check_params(params, cfg)
    return params, cfg, doc.get("extra")
