"""Residue-MSE training with Adam and step LR decay, plus PSNR/SSIM evaluation."""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .metrics import psnr, ssim
from .model import GCANet, ModelConfig, dehaze, load_checkpoint, save_checkpoint, sidecar
from .model import parse_kv_config
from .synth import list_pairs, read_png
from .tensor import Parameter, ShapeError, Tensor, as_tensor, backward, mean_square, sub

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "lr", "train_loss", "val_psnr", "val_ssim"]


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_good: Optional[Path]):
        self.epoch = epoch
        self.last_good = last_good
        super().__init__(f"loss became non-finite in epoch {epoch}; "
                         f"last good checkpoint: {last_good}")


@dataclass
class TrainConfig:
    epochs: int = 100
    lr0: float = 0.01
    lr_decay: float = 0.1
    decay_every: int = 40
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1
    crop_size: int = 48
    grad_clip: float = 5.0
    precision: str = "float64"

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be float64 or float32")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls(**parse_kv_config(text, cls))


def residue_loss(hazy, clean, predicted_residue) -> Tensor:
    """Mean squared error between the predicted residue and ``clean - hazy``."""
    hazy, clean, pred = as_tensor(hazy), as_tensor(clean), as_tensor(predicted_residue)
    if not hazy.shape == clean.shape == pred.shape:
        raise ShapeError("residue_loss", hazy.shape, clean.shape, pred.shape)
    target = clean.data - hazy.data
    return mean_square(sub(pred, target))


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.lr0 * config.lr_decay ** (epoch // config.decay_every)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of ``params`` in place from their ``grad``."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(p.name)
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class Metrics:
    names: list
    psnr: list
    ssim: list

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")


def score_images(names, outputs, references) -> Metrics:
    return Metrics(list(names), [psnr(o, r) for o, r in zip(outputs, references)],
                   [ssim(o, r) for o, r in zip(outputs, references)])


def restore_images(model: GCANet, images: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [dehaze(model, img[None])[0] for img in images]


def evaluate(model: Optional[GCANet], data_dir) -> tuple[Metrics, Metrics]:
    """Metrics of (corrupted vs clean) and (restored vs clean) over a pair set.

    With ``model=None`` the restored metrics equal the corrupted ones.
    """
    pairs = list_pairs(data_dir)
    clean = [read_png(p.clean_path) for p in pairs]
    bad = [read_png(p.corrupted_path) for p in pairs]
    names = [p.name for p in pairs]
    before = score_images(names, bad, clean)
    if model is None:
        return before, before
    return before, score_images(names, restore_images(model, bad), clean)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    history: list
    model: GCANet


def split_pairs(pairs, val_fraction: float = 0.1):
    """Validation = pairs whose seed (or name) hashes into the first decile."""
    buckets = int(round(1 / val_fraction))
    train, val = [], []
    for p in pairs:
        key = str(p.seed) if p.seed is not None else p.name
        (val if zlib.crc32(key.encode()) % buckets == 0 else train).append(p)
    return train, val


def _crop_batch(rng, clean, bad, idx, crop):
    cs, hs = [], []
    for i in idx:
        h, w = clean[i].shape[1:]
        ch, cw = min(crop, h) // 2 * 2, min(crop, w) // 2 * 2
        y = int(rng.integers(0, h - ch + 1))
        x = int(rng.integers(0, w - cw + 1))
        cs.append(clean[i][:, y:y + ch, x:x + cw])
        hs.append(bad[i][:, y:y + ch, x:x + cw])
    return np.stack(cs), np.stack(hs)


def _cast(model: GCANet, dtype):
    for p in model.named_parameters().values():
        p.data = p.data.astype(dtype)
        p.grad = np.zeros_like(p.data)


def _optimizer_tensors(state: AdamState) -> dict:
    out = {f"adam.m.{k}": v for k, v in state.m.items()}
    out.update({f"adam.v.{k}": v for k, v in state.v.items()})
    return out


def _restore_optimizer(tensors: dict, model: GCANet, step: int) -> AdamState:
    state = AdamState(step=step)
    for name, p in model.named_parameters().items():
        if f"adam.m.{name}" in tensors:
            state.m[name] = tensors[f"adam.m.{name}"].reshape(p.shape).astype(p.data.dtype)
            state.v[name] = tensors[f"adam.v.{name}"].reshape(p.shape).astype(p.data.dtype)
    return state


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.8f}"


def train(model_config: ModelConfig, train_config: TrainConfig, dataset_dir, out_dir,
          val_dir=None, resume_from=None, stop_after: Optional[int] = None) -> TrainResult:
    """Train on ``dataset_dir``; writes ``last.gcat``, ``best.gcat`` and ``train_log.csv``
    into ``out_dir``.

    ``val_dir`` gives a held-out set; otherwise 10% of the pairs (by seed hash)
    are held out.  ``resume_from`` continues from a ``last.gcat`` checkpoint.
    ``stop_after`` ends the run after that many epochs (used to test resuming).
    """
    tc = train_config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = list_pairs(dataset_dir)
    if val_dir is not None:
        train_pairs, val_pairs = pairs, list_pairs(val_dir)
    else:
        train_pairs, val_pairs = split_pairs(pairs)
    if not train_pairs:
        raise ValueError(f"{dataset_dir}: no training pairs")
    clean = [read_png(p.clean_path) for p in train_pairs]
    bad = [read_png(p.corrupted_path) for p in train_pairs]
    val_clean = [read_png(p.clean_path) for p in val_pairs]
    val_bad = [read_png(p.corrupted_path) for p in val_pairs]
    dtype = np.float32 if tc.precision == "float32" else np.float64

    log_path = out / "train_log.csv"
    best_path, last_path = out / "best.gcat", out / "last.gcat"
    history: list[dict] = []
    start_epoch = 0
    best_psnr = -math.inf
    if resume_from is not None:
        model, tensors = load_checkpoint(resume_from)
        state_kv = dict(line.split("=", 1) for line in
                        sidecar(resume_from).read_text().splitlines() if "=" in line)
        start_epoch = int(state_kv["train.next_epoch"])
        best_psnr = float(state_kv.get("train.best_psnr", "-inf"))
        _cast(model, dtype)
        opt = _restore_optimizer(tensors, model, int(state_kv["train.step"]))
        with open(log_path, encoding="utf-8", newline="") as fh:
            history = [r for r in csv.DictReader(fh) if int(r["epoch"]) < start_epoch]
    else:
        model = GCANet(model_config, seed=tc.seed)
        _cast(model, dtype)
        opt = AdamState()
    params = model.parameters()
    end_epoch = tc.epochs if stop_after is None else min(tc.epochs, start_epoch + stop_after)

    for epoch in range(start_epoch, end_epoch):
        lr = lr_at(epoch, tc)
        rng = np.random.default_rng([tc.seed, epoch])
        order = rng.permutation(len(train_pairs))
        model.train()
        losses = []
        for b in range(0, len(order), tc.batch_size):
            c_np, h_np = _crop_batch(rng, clean, bad, order[b:b + tc.batch_size], tc.crop_size)
            hazy = Tensor(h_np.astype(dtype))
            loss = residue_loss(hazy, Tensor(c_np.astype(dtype)), model(hazy))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, last_path if last_path.exists() else None)
            backward(loss, params)
            clip_grad_norm(params, tc.grad_clip)
            adam_step(params, opt, lr, tc.beta1, tc.beta2, tc.eps)
            losses.append(value)
        if val_pairs:
            m = score_images([p.name for p in val_pairs], restore_images(model, val_bad), val_clean)
            vp, vs = m.mean_psnr, m.mean_ssim
        else:
            vp = vs = float("nan")
        row = {"epoch": str(epoch), "lr": f"{lr:.8g}", "train_loss": _fmt(float(np.mean(losses))),
               "val_psnr": _fmt(vp), "val_ssim": _fmt(vs)}
        history.append(row)
        log.info("epoch %d lr %.2g loss %s val_psnr %s", epoch, lr, row["train_loss"], row["val_psnr"])
        score = vp if np.isfinite(vp) else -float(np.mean(losses))
        if score > best_psnr or not best_path.exists():
            best_psnr = score
            save_checkpoint(model, best_path)
        last_epoch = epoch + 1 == end_epoch
        if last_epoch or (epoch + 1) % max(tc.checkpoint_every, 1) == 0:
            extra_cfg = (f"train.next_epoch={epoch + 1}\ntrain.step={opt.step}\n"
                         f"train.best_psnr={best_psnr!r}\n")
            save_checkpoint(model, last_path, _optimizer_tensors(opt), extra_cfg)
        _write_log(log_path, history)
    return TrainResult(best_path, last_path, log_path, history, model)


def _write_log(path: Path, rows: list) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=LOG_HEADER, lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)


# ---------------------------------------------------------------------------
# ablation sweep

ABLATIONS = [
    ("baseline_bn", dict(use_smoothed_dilation=False, use_gated_fusion=False, norm_kind="batch")),
    ("smoothed_bn", dict(use_smoothed_dilation=True, use_gated_fusion=False, norm_kind="batch")),
    ("smoothed_gated_bn", dict(use_smoothed_dilation=True, use_gated_fusion=True, norm_kind="batch")),
    ("smoothed_gated_in", dict(use_smoothed_dilation=True, use_gated_fusion=True, norm_kind="instance")),
]

ABLATION_HEADER = ["config", "smoothed_dilation", "gated_fusion", "instance_norm",
                   "val_psnr", "val_ssim", "final_train_loss"]


def run_ablation(base: ModelConfig, train_config: TrainConfig, dataset_dir, out_dir,
                 val_dir=None) -> list[dict]:
    """Train the four incremental configurations and write ``ablation.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for tag, flags in ABLATIONS:
        cfg = ModelConfig(**{**asdict(base), **flags})
        res = train(cfg, train_config, dataset_dir, out / tag, val_dir=val_dir)
        last = res.history[-1]
        rows.append({
            "config": tag,
            "smoothed_dilation": int(cfg.use_smoothed_dilation),
            "gated_fusion": int(cfg.use_gated_fusion),
            "instance_norm": int(cfg.norm_kind == "instance"),
            "val_psnr": last["val_psnr"],
            "val_ssim": last["val_ssim"],
            "final_train_loss": last["train_loss"],
        })
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=ABLATION_HEADER, lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)
    return rows
