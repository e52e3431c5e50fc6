"""GCANet: encoder, smoothed dilated resblocks, gated fusion, decoder -> haze residue."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import weights
from .layers import (
    Conv2d,
    Conv2dSpec,
    ConvTranspose2d,
    Module,
    Norm,
    ResblockSpec,
    SmoothedDilatedResblock,
)
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    broadcast_channels,
    concat_channels,
    mul,
    no_grad,
    relu,
    slice_channels,
)

LUMA = np.array([0.299, 0.587, 0.114])
SOBEL_MAX = 4.0 * np.sqrt(2.0)


class ConfigMismatchError(ValueError):
    """Checkpoint weights do not fit the model described by its config."""


@dataclass
class ModelConfig:
    base_channels: int = 16
    dilation_schedule: tuple = (2, 2, 2, 4, 4, 4, 1)
    use_smoothed_dilation: bool = True
    use_gated_fusion: bool = True
    norm_kind: str = "instance"
    use_edge_channel: bool = True
    input_image_channels: int = 3

    def __post_init__(self):
        self.dilation_schedule = tuple(int(r) for r in self.dilation_schedule)
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if not self.dilation_schedule or min(self.dilation_schedule) < 1:
            raise ValueError("dilation_schedule needs at least one positive rate")
        if self.norm_kind not in ("instance", "batch"):
            raise ValueError(f"norm_kind must be instance or batch, got {self.norm_kind!r}")

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(base_channels=64)

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls(**parse_kv_config(text, cls))


def parse_kv_config(text: str, cls) -> dict:
    """Parse ``key=value`` lines into typed kwargs for the dataclass ``cls``.

    Unknown keys are ignored so one file can hold several sections' settings.
    """
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            continue
        out[key] = _coerce(value, types[key], key)
    return out


def _coerce(value: str, typ, key: str):
    typ = str(typ)
    if "bool" in typ:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: not a boolean: {value!r}")
    if "tuple" in typ:
        return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
    if "int" in typ:
        return int(value)
    if "float" in typ:
        return float(value)
    return value


def extract_edges(image) -> Tensor:
    """Sobel gradient magnitude of the Rec.601 luma, scaled into [0, 1].

    Input n×3×h×w, output n×1×h×w.  Borders are reflect-padded.
    """
    x = as_tensor(image).data
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError("extract_edges (needs n×3×h×w)", x.shape)
    luma = np.tensordot(LUMA, x, axes=([0], [1]))
    mode = "reflect" if min(luma.shape[1:]) > 1 else "edge"
    p = np.pad(luma, ((0, 0), (1, 1), (1, 1)), mode=mode)
    dx = p[:, :, 2:] - p[:, :, :-2]
    dy = p[:, 2:, :] - p[:, :-2, :]
    gx = dx[:, :-2] + 2 * dx[:, 1:-1] + dx[:, 2:]
    gy = dy[:, :, :-2] + 2 * dy[:, :, 1:-1] + dy[:, :, 2:]
    mag = np.sqrt(gx * gx + gy * gy) / SOBEL_MAX
    return Tensor(np.clip(mag, 0.0, 1.0)[:, None])


def gated_fusion(f_low, f_mid, f_high, gates) -> Tensor:
    """Per-pixel combination ``M_l*F_l + M_m*F_m + M_h*F_h``.

    ``gates`` is the n×3×h×w output of the gate conv; channel i weights level i
    and is broadcast across feature channels.
    """
    f_low, f_mid, f_high, gates = (as_tensor(t) for t in (f_low, f_mid, f_high, gates))
    if not f_low.shape == f_mid.shape == f_high.shape:
        raise ShapeError("gated_fusion", f_low.shape, f_mid.shape, f_high.shape)
    n, c, h, w = f_low.shape
    if gates.shape != (n, 3, h, w):
        raise ShapeError("gated_fusion (gates)", gates.shape, (n, 3, h, w))
    out = None
    for i, feat in enumerate((f_low, f_mid, f_high)):
        term = mul(broadcast_channels(slice_channels(gates, i, i + 1), c), feat)
        out = term if out is None else add(out, term)
    return out


class GCANet(Module):
    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0):
        self.config = config = config or ModelConfig()
        c = config.base_channels
        nk = config.norm_kind
        cin = config.input_image_channels + (1 if config.use_edge_channel else 0)
        self.enc_convs = [
            Conv2d(Conv2dSpec(cin, c), "encoder.conv1", seed),
            Conv2d(Conv2dSpec(c, c), "encoder.conv2", seed),
            Conv2d(Conv2dSpec(c, c, stride=2), "encoder.conv3", seed),
        ]
        self.enc_norms = [Norm(nk, c, f"encoder.norm{i}") for i in (1, 2, 3)]
        self.blocks = [
            SmoothedDilatedResblock(ResblockSpec(c, r, config.use_smoothed_dilation, nk),
                                    f"block{i}", seed)
            for i, r in enumerate(config.dilation_schedule)
        ]
        self.gate = Conv2d(Conv2dSpec(3 * c, 3), "gate", seed) if config.use_gated_fusion else None
        self.deconv = ConvTranspose2d(c, c, "decoder.deconv", seed=seed)
        self.deconv_norm = Norm(nk, c, "decoder.norm0")
        self.dec_conv = Conv2d(Conv2dSpec(c, c), "decoder.conv1", seed)
        self.dec_norm = Norm(nk, c, "decoder.norm1")
        # small head init: the residue starts near zero instead of swamping sparse targets
        self.out_conv = Conv2d(Conv2dSpec(c, config.input_image_channels), "decoder.conv2", seed,
                               init_scale=0.1)

    @property
    def mid_tap(self) -> int:
        """Number of resblocks before the mid-level feature tap (3 for the default 7)."""
        return (len(self.blocks) - 1) // 2

    def features(self, image) -> tuple[Tensor, Tensor, Tensor]:
        """Return (F_l, F_m, F_h): encoder output, after ``mid_tap`` blocks, after all."""
        x = as_tensor(image)
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1] != cfg.input_image_channels:
            raise ShapeError("GCANet.forward (channels)", x.shape)
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError("GCANet.forward (needs even h, w; use dehaze() for odd sizes)", x.shape)
        if cfg.use_edge_channel:
            x = concat_channels([x, extract_edges(x)])
        for conv, norm in zip(self.enc_convs, self.enc_norms):
            x = relu(norm(conv(x)))
        f_low = f_mid = x
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i + 1 == self.mid_tap:
                f_mid = x
        return f_low, f_mid, x

    def forward(self, image) -> Tensor:
        f_low, f_mid, f_high = self.features(image)
        if self.gate is not None:
            gates = self.gate(concat_channels([f_low, f_mid, f_high]))
            x = gated_fusion(f_low, f_mid, f_high, gates)
        else:
            x = f_high
        x = relu(self.deconv_norm(self.deconv(x)))
        x = relu(self.dec_norm(self.dec_conv(x)))
        return self.out_conv(x)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict, strict: bool = True):
        own = self.named_parameters()
        missing = [n for n in own if n not in state]
        if strict and missing:
            raise ConfigMismatchError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ConfigMismatchError(
                    f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.assign(arr)


def parameter_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def _pad_even(x: np.ndarray) -> tuple[np.ndarray, int, int]:
    h, w = x.shape[2:]
    ph, pw = h % 2, w % 2
    if ph or pw:
        mode = "reflect" if min(h, w) > 1 else "edge"
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode)
    return x, h, w


def predict_residue(model: GCANet, hazy) -> np.ndarray:
    """Inference-mode residue for any input size (reflect-pad to even, crop back)."""
    x = as_tensor(hazy).data
    xp, h, w = _pad_even(x)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            res = model(Tensor(xp)).data
    finally:
        model.train(was_training)
    return res[:, :, :h, :w]


def dehaze(model: GCANet, hazy) -> np.ndarray:
    """clamp(hazy + residue, 0, 1) as an n×3×h×w array."""
    x = as_tensor(hazy).data
    return np.clip(x + predict_residue(model, x), 0.0, 1.0)


def save_checkpoint(model: GCANet, path, extra: Optional[dict] = None,
                    extra_config: str = "") -> None:
    """Write ``path`` (.gcat tensors) and ``path.cfg`` (key=value sidecar)."""
    path = Path(path)
    tensors = dict(model.state_dict())
    for name, arr in (extra or {}).items():
        tensors[name] = arr
    weights.save(path, tensors)
    sidecar(path).write_text(model.config.to_text() + extra_config, encoding="utf-8")


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".cfg")


def load_checkpoint(path) -> tuple[GCANet, dict]:
    """Rebuild the model from a checkpoint; returns (model, all stored tensors)."""
    path = Path(path)
    cfg_path = sidecar(path)
    if not path.exists() or not cfg_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path} (+ {cfg_path.name})")
    config = ModelConfig.from_text(cfg_path.read_text(encoding="utf-8"))
    tensors = weights.load(path)
    model = GCANet(config)
    model.load_state_dict(tensors)
    return model, tensors
