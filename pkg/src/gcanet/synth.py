"""Procedural clean/corrupted training pairs.

Haze follows the atmospheric scattering model ``I = J*t + A*(1 - t)``; rain is
an additive overlay of oriented bright streaks.  Images here are channel-first
float arrays (3×h×w) in [0, 1].
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

HAZE_MODES = ("constant_t", "depth_ramp", "perlin_t")
T_MIN = 0.05


@dataclass
class HazeScene:
    J: np.ndarray  # 3×h×w clean radiance
    t: np.ndarray  # 1×h×w transmission
    A: np.ndarray  # (3,) atmospheric light

    def validate(self):
        if self.J.ndim != 3 or self.J.shape[0] != 3:
            raise ValueError(f"J must be 3×h×w, got {self.J.shape}")
        if self.t.shape != (1,) + self.J.shape[1:]:
            raise ValueError(f"t shape {self.t.shape} does not match J {self.J.shape}")
        if np.any(self.t <= 0) or np.any(self.t > 1):
            raise ValueError("transmission must lie in (0, 1]")
        if np.asarray(self.A).shape != (3,):
            raise ValueError("A must be a 3-vector")


@dataclass
class RainSpec:
    density: float = 0.004   # streak seeds per pixel
    length: int = 9
    angle: float = 80.0      # degrees from the +x axis
    intensity: float = 0.6

    def __post_init__(self):
        if self.length < 2:
            raise ValueError("streak length must be >= 2")
        if self.density < 0:
            raise ValueError("density must be non-negative")
        if not 0 < self.intensity <= 1:
            raise ValueError("intensity must be in (0, 1]")


def apply_haze(scene: HazeScene) -> np.ndarray:
    scene.validate()
    A = np.asarray(scene.A, dtype=np.float64).reshape(3, 1, 1)
    return scene.J * scene.t + A * (1.0 - scene.t)


def invert_haze(hazy: np.ndarray, t: np.ndarray, A, t_min: float = T_MIN):
    """Recover J from I; returns ``(J, clamped)`` where ``clamped`` flags t < t_min."""
    t = np.asarray(t, dtype=np.float64)
    clamped = bool(np.any(t < t_min))
    tc = np.maximum(t, t_min)
    A = np.asarray(A, dtype=np.float64).reshape(3, 1, 1)
    return np.clip((hazy - A * (1.0 - tc)) / tc, 0.0, 1.0), clamped


def _clean_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / np.array([max(h - 1, 1), max(w - 1, 1)])[:, None, None]
    c0, c1 = rng.uniform(0.0, 0.8, 3), rng.uniform(0.0, 0.8, 3)
    ang = rng.uniform(0, 2 * np.pi)
    ramp = np.clip(0.5 + (np.cos(ang) * (xx - 0.5) + np.sin(ang) * (yy - 0.5)), 0, 1)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0.0, 1.0, 3)[:, None, None]
        cy, cx = rng.uniform(0, 1, 2)
        if rng.random() < 0.5:
            rad = rng.uniform(0.08, 0.3)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < rad ** 2
        else:
            hh, ww = rng.uniform(0.1, 0.4, 2)
            mask = (np.abs(yy - cy) < hh / 2) & (np.abs(xx - cx) < ww / 2)
        img = np.where(mask[None], color, img)
    if rng.random() < 0.5:
        freq = rng.uniform(4, 10)
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx if rng.random() < 0.5 else yy))
        img = np.clip(img * (0.75 + 0.25 * stripes[None]), 0, 1)
    return img


def _value_noise(rng: np.random.Generator, h: int, w: int, cells: int = 4) -> np.ndarray:
    grid = rng.uniform(0, 1, (cells + 1, cells + 1))
    noise = ndimage.zoom(grid, (h / (cells + 1), w / (cells + 1)), order=3, mode="nearest")
    noise = noise[:h, :w]
    lo, hi = noise.min(), noise.max()
    return (noise - lo) / (hi - lo) if hi > lo else np.zeros_like(noise)


def sample_airlight(rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.7, 0.95)
    return np.clip(base + rng.uniform(0.0, 0.05, 3), 0.7, 1.0)


def synth_scene(seed: int, h: int, w: int, mode: str = "depth_ramp",
                beta: Optional[float] = None, t0: Optional[float] = None) -> HazeScene:
    """Deterministic procedural scene.

    ``constant_t``: t ≡ t0.  ``depth_ramp``: depth rises linearly along a random
    axis direction and t = exp(-beta*depth).  ``perlin_t``: smooth value-noise
    depth, same exp law.
    """
    if h < 16 or w < 16:
        raise ValueError(f"scene must be at least 16×16, got {h}×{w}")
    if mode not in HAZE_MODES:
        raise ValueError(f"unknown haze mode {mode!r}")
    rng = np.random.default_rng(seed)
    J = _clean_image(rng, h, w)
    A = sample_airlight(rng)
    if beta is None:
        beta = rng.uniform(0.8, 2.0)
    if mode == "constant_t":
        t = np.full((1, h, w), rng.uniform(0.3, 0.9) if t0 is None else t0)
    else:
        if mode == "depth_ramp":
            axis = rng.integers(0, 4)  # left-right, right-left, top-bottom, bottom-top
            n = w if axis < 2 else h
            ramp = np.linspace(0.0, 1.0, n)
            if axis % 2:
                ramp = ramp[::-1]
            depth = np.broadcast_to(ramp[None, :] if axis < 2 else ramp[:, None], (h, w))
        else:
            depth = _value_noise(rng, h, w)
        depth = 0.1 + depth
        t = np.exp(-beta * depth)[None]
    return HazeScene(J=J, t=np.asarray(t, dtype=np.float64), A=A)


def streak_kernel(length: int, angle: float) -> np.ndarray:
    """Binary line kernel of the given pixel length and orientation."""
    theta = np.deg2rad(angle)
    half = (length - 1) / 2.0
    steps = np.linspace(-half, half, 4 * length)
    xs = np.rint(steps * np.cos(theta)).astype(int)
    ys = np.rint(-steps * np.sin(theta)).astype(int)
    r = int(np.ceil(half)) + 1
    k = np.zeros((2 * r + 1, 2 * r + 1))
    k[ys + r, xs + r] = 1.0
    return k


def rain_overlay(h: int, w: int, spec: RainSpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = rng.poisson(spec.density * h * w) if spec.density > 0 else 0
    seeds = np.zeros((h, w))
    if n:
        ys = rng.integers(0, h, n)
        xs = rng.integers(0, w, n)
        seeds[ys, xs] = spec.intensity * rng.uniform(0.6, 1.0, n)
    return ndimage.convolve(seeds, streak_kernel(spec.length, spec.angle), mode="constant")


def apply_rain(clean: np.ndarray, spec: RainSpec, seed: int) -> np.ndarray:
    """Add gray streaks to a 3×h×w image, clamped to [0, 1]."""
    overlay = rain_overlay(clean.shape[1], clean.shape[2], spec, seed)
    return np.clip(clean + overlay[None], 0.0, 1.0)


def sample_rain_spec(rng: np.random.Generator) -> RainSpec:
    return RainSpec(density=rng.uniform(0.003, 0.006), length=int(rng.integers(6, 13)),
                    angle=rng.uniform(70, 110), intensity=rng.uniform(0.4, 0.8))


# ---------------------------------------------------------------------------
# pair sets on disk

MANIFEST = "manifest.tsv"
MANIFEST_HEADER = ["index", "seed", "mode", "t_params", "A"]


def pair_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def to_uint8(img: np.ndarray) -> np.ndarray:
    """3×h×w float in [0,1] -> h×w×3 uint8 (round half up)."""
    return np.floor(np.clip(img, 0, 1).transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64).transpose(2, 0, 1) / 255.0


def write_png(path, img: np.ndarray) -> None:
    try:
        Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG", optimize=False)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return from_uint8(np.asarray(im.convert("RGB")))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def make_pair(seed: int, size: int, mode: str, beta: Optional[float] = None,
              t0: Optional[float] = None) -> tuple[np.ndarray, np.ndarray, str, str]:
    """(clean, corrupted, param string, A string) for one manifest row."""
    if mode == "rain":
        rng = np.random.default_rng(seed)
        clean = _clean_image(rng, size, size)
        spec = sample_rain_spec(rng)
        rainy = apply_rain(clean, spec, seed + 1)
        params = (f"density={spec.density:.6f};length={spec.length};"
                  f"angle={spec.angle:.4f};intensity={spec.intensity:.6f}")
        return clean, rainy, params, "-"
    scene = synth_scene(seed, size, size, mode, beta=beta, t0=t0)
    hazy = apply_haze(scene)
    params = f"tmin={scene.t.min():.6f};tmax={scene.t.max():.6f}"
    if beta is not None:
        params += f";beta={beta:g}"
    a_text = ",".join(f"{a:.6f}" for a in scene.A)
    return scene.J, hazy, params, a_text


def corrupted_prefix(mode: str) -> str:
    return "rainy" if mode == "rain" else "hazy"


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("GCANET_THREADS", "1")))
    except ValueError:
        return 1


def write_pair_set(out_dir, count: int, mode: str = "depth_ramp", seed: int = 0, size: int = 64,
                   start_index: int = 0, beta: Optional[float] = None,
                   t0: Optional[float] = None) -> list[dict]:
    """Write ``count`` PNG pairs plus ``manifest.tsv``; returns the manifest rows.

    Pair ``i`` uses seed ``pair_seed(seed, start_index + i)`` so sets written
    with different ``start_index`` never overlap.
    """
    if mode not in HAZE_MODES + ("rain",):
        raise ValueError(f"unknown mode {mode!r}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    prefix = corrupted_prefix(mode)

    def one(i: int) -> dict:
        index = start_index + i
        s = pair_seed(seed, index)
        clean, corrupted, params, a_text = make_pair(s, size, mode, beta, t0)
        write_png(out / f"clean_{index:04d}.png", clean)
        write_png(out / f"{prefix}_{index:04d}.png", corrupted)
        return {"index": f"{index:04d}", "seed": str(s), "mode": mode,
                "t_params": params, "A": a_text}

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        rows = list(pool.map(one, range(count)))
    write_manifest(out / MANIFEST, rows)
    return rows


def write_manifest(path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=MANIFEST_HEADER, delimiter="\t", lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)


def read_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    if rows and set(MANIFEST_HEADER) - set(rows[0]):
        raise ValueError(f"{path}: manifest missing columns {set(MANIFEST_HEADER) - set(rows[0])}")
    return rows


@dataclass
class Pair:
    name: str
    seed: Optional[int]
    clean_path: Path
    corrupted_path: Path


def list_pairs(data_dir) -> list[Pair]:
    """Pairs from a synthesized set (manifest.tsv) or an external
    ``clean/`` + ``corrupted/`` folder pair with matching filenames."""
    d = Path(data_dir)
    if (d / MANIFEST).exists():
        pairs = []
        for row in read_manifest(d / MANIFEST):
            idx = row["index"]
            pairs.append(Pair(idx, int(row["seed"]), d / f"clean_{idx}.png",
                              d / f"{corrupted_prefix(row['mode'])}_{idx}.png"))
        return pairs
    clean_dir, bad_dir = d / "clean", d / "corrupted"
    if clean_dir.is_dir() and bad_dir.is_dir():
        names = sorted(p.name for p in clean_dir.iterdir() if p.is_file())
        missing = [n for n in names if not (bad_dir / n).exists()]
        if missing:
            raise FileNotFoundError(f"{bad_dir}: no match for {missing[:3]}")
        return [Pair(Path(n).stem, None, clean_dir / n, bad_dir / n) for n in names]
    raise FileNotFoundError(f"{d}: neither {MANIFEST} nor clean/ + corrupted/ found")


def load_pairs(data_dir) -> tuple[list[Pair], list[np.ndarray], list[np.ndarray]]:
    """Read every pair as (pairs, clean images, corrupted images), each 3×h×w."""
    pairs = list_pairs(data_dir)
    clean = [read_png(p.clean_path) for p in pairs]
    bad = [read_png(p.corrupted_path) for p in pairs]
    for p, c, b in zip(pairs, clean, bad):
        if c.shape != b.shape:
            raise ValueError(f"pair {p.name}: size mismatch {c.shape} vs {b.shape}")
    return pairs, clean, bad
