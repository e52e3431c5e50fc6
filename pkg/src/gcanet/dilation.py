"""Which input units feed which output units through a stack of (dilated) convs.

Everything here is integer set arithmetic on tap offsets.  A dilated layer
with kernel k and rate r reads input ``stride*i + r*j`` for ``j = 0..k-1``
(valid/left-anchored indexing, padding ignored), so a chain's dependency set
is the composition of those offset sets.  2-D sets are products of the 1-D
sets since all kernels are square.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, mul, sum_all
from .layers import conv2d

KINDS = ("dilated_conv", "shared_separable")


@dataclass(frozen=True)
class ChainLayer:
    kind: str
    k: int
    r: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.k}")
        if self.r < 1 or self.stride < 1:
            raise ValueError("rate and stride must be >= 1")
        if self.kind == "shared_separable" and self.r != 1:
            raise ValueError("shared_separable layers are undilated")

    @property
    def offsets(self) -> list[int]:
        return [self.r * j for j in range(self.k)]

    def token(self) -> str:
        if self.kind == "shared_separable":
            return f"p{self.k}"
        return f"d{self.k}x{self.r}" + (f"/{self.stride}" if self.stride != 1 else "")


@dataclass(frozen=True)
class LayerChainSpec:
    layers: tuple
    dims: int = 2

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.dims not in (1, 2):
            raise ValueError("dims must be 1 or 2")
        if not self.layers:
            raise ValueError("empty layer chain")

    @classmethod
    def dilated(cls, k: int, r: int, dims: int = 1, smoothed: bool = False) -> "LayerChainSpec":
        layers = [ChainLayer("dilated_conv", k, r)]
        if smoothed:
            layers.insert(0, ChainLayer("shared_separable", 2 * r - 1))
        return cls(tuple(layers), dims)

    @property
    def total_stride(self) -> int:
        return int(np.prod([l.stride for l in self.layers]))

    def text(self) -> str:
        return ",".join(l.token() for l in self.layers)


def dilated_conv1d(f, w, r: int) -> np.ndarray:
    """Literal 1-D dilated correlation, 1-based taps: out[i] = sum_{j=1..k} f[i + r*j] w[j].

    Output covers every ``i >= 0`` with ``i + r*k < len(f)``.
    """
    f, w = np.asarray(f, dtype=np.float64), np.asarray(w, dtype=np.float64)
    k = w.size
    n = f.size - r * k
    if n < 1:
        raise ValueError(f"signal of length {f.size} too short for k={k}, r={r}")
    return np.array([sum(f[i + r * j] * w[j - 1] for j in range(1, k + 1)) for i in range(n)])


def deps_1d(chain: LayerChainSpec, index: int) -> set[int]:
    """Input indices that output ``index`` depends on (padding ignored)."""
    current = {index}
    for layer in reversed(chain.layers):
        offs = layer.offsets
        current = {layer.stride * m + o for m in current for o in offs}
    return current


def receptive_field(chain: LayerChainSpec) -> int:
    """Extent (per axis) spanned by one output's dependency set."""
    d = deps_1d(chain, 0)
    return max(d) - min(d) + 1


@dataclass
class DependencyReport:
    chain: LayerChainSpec
    input_extent: int
    sets: dict                 # output index -> sorted list of input indices
    border: list               # requested outputs whose sets leave the input
    overlaps: dict             # (a, b) adjacent pair -> intersection size
    receptive_field: int
    gridding: bool = field(default=False)

    def to_json(self) -> dict:
        key = (lambda i: str(i)) if self.chain.dims == 1 else (lambda i: f"{i[0]},{i[1]}")
        return {
            "chain": self.chain.text(),
            "dims": self.chain.dims,
            "input_extent": self.input_extent,
            "receptive_field": self.receptive_field,
            "gridding": self.gridding,
            "border_outputs": [key(i) for i in self.border],
            "dependency_sets": {key(i): [list(v) if isinstance(v, tuple) else v for v in s]
                                for i, s in self.sets.items()},
            "overlaps": [{"a": key(a), "b": key(b), "shared": n}
                         for (a, b), n in self.overlaps.items()],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")


def output_extent(chain: LayerChainSpec, input_extent: int) -> int:
    return -(-input_extent // chain.total_stride)


def default_indices(chain: LayerChainSpec, input_extent: int, count: int = 4):
    """``count`` consecutive interior outputs (per axis), starting at 0."""
    n_valid = (input_extent - receptive_field(chain)) // chain.total_stride + 1
    idx = list(range(max(0, min(count, n_valid))))
    return idx if chain.dims == 1 else list(product(idx, idx))


def dependency_sets(chain: LayerChainSpec, output_indices: Optional[Iterable] = None,
                    input_extent: int = 64) -> DependencyReport:
    """Exact dependency sets plus the adjacent-pair overlap table.

    Overlaps are taken between every requested interior output and its
    right (and in 2-D, lower) neighbour when that neighbour is interior too.
    The gridding flag is set iff one of those intersections is empty.
    """
    n_out = output_extent(chain, input_extent)
    if output_indices is None:
        output_indices = default_indices(chain, input_extent)
    indices = [int(i) if chain.dims == 1 else tuple(int(v) for v in i) for i in output_indices]
    for i in indices:
        coords = (i,) if chain.dims == 1 else i
        if len(coords) != chain.dims or any(c < 0 or c >= n_out for c in coords):
            raise IndexError(f"output index {i} out of range for {n_out} outputs per axis")

    cache: dict[int, set] = {}

    def d1(i):
        if i not in cache:
            cache[i] = deps_1d(chain, i)
        return cache[i]

    def interior1(i):
        d = d1(i)
        return min(d) >= 0 and max(d) < input_extent

    def full(i):
        if chain.dims == 1:
            return d1(i)
        return set(product(d1(i[0]), d1(i[1])))

    def interior(i):
        return interior1(i) if chain.dims == 1 else interior1(i[0]) and interior1(i[1])

    sets, border = {}, []
    for i in indices:
        s = full(i)
        if not interior(i):
            border.append(i)
            s = {v for v in s if all(0 <= c < input_extent for c in ((v,) if chain.dims == 1 else v))}
        sets[i] = sorted(s)

    overlaps = {}
    for i in indices:
        if not interior(i):
            continue
        neighbours = [i + 1] if chain.dims == 1 else [(i[0], i[1] + 1), (i[0] + 1, i[1])]
        for nb in neighbours:
            coords = (nb,) if chain.dims == 1 else nb
            if max(coords) >= n_out or not interior(nb):
                continue
            overlaps[(i, nb)] = len(full(i) & full(nb))
    return DependencyReport(chain, input_extent, sets, border, overlaps, receptive_field(chain),
                            gridding=any(n == 0 for n in overlaps.values()))


def empirical_gradient_support(chain: LayerChainSpec, input_size: int, output_pixel,
                               seed: int = 0) -> np.ndarray:
    """Boolean input mask of pixels with nonzero gradient for one output pixel.

    The chain is instantiated as single-channel valid convolutions with random
    Gaussian weights; a one-hot output gradient is back-propagated.  For a 1-D
    chain the 2-D mask is projected onto the column axis.
    """
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, 1, input_size, input_size)), requires_grad=True)
    y = x
    for layer in chain.layers:
        w = Tensor(rng.standard_normal((1, 1, layer.k, layer.k)))
        y = conv2d(y, w, dilation=layer.r, stride=layer.stride, padding=0)
    oi, oj = (0, int(output_pixel)) if chain.dims == 1 else (int(v) for v in output_pixel)
    if not (0 <= oi < y.shape[2] and 0 <= oj < y.shape[3]):
        raise IndexError(f"output pixel {output_pixel} outside valid output {y.shape[2:]}")
    onehot = np.zeros(y.shape)
    onehot[0, 0, oi, oj] = 1.0
    backward(sum_all(mul(y, onehot)))
    mask = np.abs(x.grad[0, 0]) > 0
    return mask.any(axis=0) if chain.dims == 1 else mask


def support_extent(mask: np.ndarray) -> tuple:
    """Bounding-box extent of a support mask along each axis."""
    out = []
    for axis in range(mask.ndim):
        idx = np.nonzero(mask.any(axis=tuple(a for a in range(mask.ndim) if a != axis)))[0]
        out.append(int(idx.max() - idx.min() + 1) if idx.size else 0)
    return tuple(out)


# ---------------------------------------------------------------------------
# chain mini-grammar:  d3x2  sd3x4  p5  d3x1/2   (comma separated)

class ChainSyntaxError(ValueError):
    def __init__(self, message: str, text: str, pos: int):
        self.message, self.text, self.pos = message, text, pos
        super().__init__(f"{message}\n  {text}\n  {' ' * pos}^")


_TOKEN = re.compile(r"(?P<smooth>s)?d(?P<k>\d+)x(?P<r>\d+)(?:/(?P<s>\d+))?|p(?P<pk>\d+)")


def parse_chain(text: str, dims: int = 2) -> LayerChainSpec:
    """Parse e.g. ``"sd3x2,d3x4"``; ``s`` prefixes a (2r-1) shared smoothing plane."""
    layers = []
    pos = 0
    n = len(text)
    if not text.strip():
        raise ChainSyntaxError("empty chain", text, 0)
    while True:
        while pos < n and text[pos] == " ":
            pos += 1
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ChainSyntaxError("expected a layer like d3x2, sd3x2 or p3", text, pos)
        if m.group("pk"):
            k = int(m.group("pk"))
            if k % 2 == 0 or k < 1:
                raise ChainSyntaxError("plane size must be odd", text, m.start("pk"))
            layers.append(ChainLayer("shared_separable", k))
        else:
            k, r = int(m.group("k")), int(m.group("r"))
            if k % 2 == 0 or k < 1:
                raise ChainSyntaxError("kernel size must be odd", text, m.start("k"))
            if r < 1:
                raise ChainSyntaxError("dilation rate must be >= 1", text, m.start("r"))
            stride = int(m.group("s")) if m.group("s") else 1
            if stride < 1:
                raise ChainSyntaxError("stride must be >= 1", text, m.start("s"))
            if m.group("smooth"):
                layers.append(ChainLayer("shared_separable", 2 * r - 1))
            layers.append(ChainLayer("dilated_conv", k, r, stride))
        pos = m.end()
        while pos < n and text[pos] == " ":
            pos += 1
        if pos == n:
            break
        if text[pos] != ",":
            raise ChainSyntaxError("expected ',' between layers", text, pos)
        pos += 1
    return LayerChainSpec(tuple(layers), dims)


def gcanet_chain(schedule: Sequence[int] = (2, 2, 2, 4, 4, 4, 1), smoothed: bool = True,
                 dims: int = 2) -> LayerChainSpec:
    """The resblock trunk as a chain: two (optionally smoothed) 3×3 convs per rate."""
    layers = []
    for r in schedule:
        for _ in range(2):
            if smoothed:
                layers.append(ChainLayer("shared_separable", 2 * r - 1))
            layers.append(ChainLayer("dilated_conv", 3, r))
    return LayerChainSpec(tuple(layers), dims)


# ---------------------------------------------------------------------------
# diagnostic panel

def _luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return np.tensordot(np.array([0.299, 0.587, 0.114]), img, axes=([0], [0]))
    return img


def high_pass(img: np.ndarray) -> np.ndarray:
    """4-neighbour Laplacian of the luma, scaled by 1/4 so |hp| <= 1 on [0,1] images."""
    g = _luma(img)
    p = np.pad(g, 1, mode="reflect") if min(g.shape) > 1 else np.pad(g, 1, mode="edge")
    lap = 4 * g - p[:-2, 1:-1] - p[2:, 1:-1] - p[1:-1, :-2] - p[1:-1, 2:]
    return lap / 4.0


@dataclass
class GriddingPanel:
    panel: np.ndarray       # 3×(2h+g)×(2w+g)
    hf_difference: np.ndarray
    energy: float


def gridding_render(before, after, diff_emphasis: float = 4.0, gutter: int = 4,
                    path=None) -> GriddingPanel:
    """Side-by-side panel: top row before | after, bottom row the amplified
    high-frequency difference | the amplified plain difference."""
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if before.shape != after.shape:
        raise ValueError(f"size mismatch {before.shape} vs {after.shape}")
    to_rgb = (lambda a: a) if before.ndim == 3 else (lambda a: np.repeat(a[None], 3, axis=0))
    h, w = before.shape[-2:]
    hf = np.abs(high_pass(after) - high_pass(before))
    plain = np.abs(_luma(after) - _luma(before))
    panel = np.ones((3, 2 * h + gutter, 2 * w + gutter))
    panel[:, :h, :w] = to_rgb(before)
    panel[:, :h, w + gutter:] = to_rgb(after)
    panel[:, h + gutter:, :w] = np.clip(diff_emphasis * hf, 0, 1)[None]
    panel[:, h + gutter:, w + gutter:] = np.clip(diff_emphasis * plain, 0, 1)[None]
    if path is not None:
        from .synth import write_png
        write_png(path, panel)
    return GriddingPanel(panel, hf, float(np.mean(hf * hf)))
