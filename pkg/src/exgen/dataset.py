"""Grid samples, extremeness measures, normalization, splitting and file I/O.

A :class:`Dataset` holds ``n`` grids of shape ``(h, w)`` with values in
``[-1, 1]``, their ids, origin flags and the cached extremeness of each grid
under the dataset's measure.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .evt import GpdParams, gpd_quantile
from .substrate.framing import FileFormatError, read_framed, write_framed

__all__ = [
    "REAL",
    "GENERATED",
    "Measure",
    "MEASURES",
    "PIXEL_SUM",
    "RAINFALL_TOTAL",
    "extremeness_measure",
    "extremeness_grad",
    "GridSample",
    "Dataset",
    "DatasetError",
    "CacheMismatchError",
    "EmptyTestSetWarning",
    "normalize_resize",
    "area_resize",
    "extreme_test_mask",
    "split_train_test",
    "synth_raw",
    "synth_rainfall",
    "load_dataset",
    "save_dataset",
    "sort_by_extremeness",
    "sample_latent",
    "DATASET_MAGIC",
]

REAL, GENERATED = 0, 1
_ORIGIN_NAMES = {REAL: "real", GENERATED: "generated"}
DATASET_MAGIC = "EXG1"


class DatasetError(ValueError):
    pass


class CacheMismatchError(FileFormatError):
    """Stored extremeness disagrees with recomputation on load."""


class EmptyTestSetWarning(UserWarning):
    pass


# --- extremeness measures -----------------------------------------------------------


@dataclass(frozen=True)
class Measure:
    """Total of ``pixels - floor``; gradient 1 at every pixel.

    ``floor=0`` is the plain pixel sum. ``floor=-1`` measures rainfall above the
    dry level of normalized grids, which keeps the value positive.
    """

    name: str
    floor: float = 0.0

    def __call__(self, pixels) -> np.ndarray | float:
        x = np.asarray(pixels)
        if x.ndim <= 2:
            return float(np.sum(x, dtype=np.float64) - self.floor * x.size)
        flat = x.reshape(x.shape[0], int(np.prod(x.shape[1:])))
        return flat.sum(axis=1, dtype=np.float64) - self.floor * flat.shape[1]

    def grad(self, pixels) -> np.ndarray:
        return np.ones_like(np.asarray(pixels, dtype=np.float64))

    def tensor(self, grids):
        """Differentiable per-sample measure of a (B, H, W) tensor."""
        from .substrate import tensor as T

        per = T.sum(grids, axis=(1, 2))
        if self.floor:
            per = per + (-self.floor * grids.shape[1] * grids.shape[2])
        return per


PIXEL_SUM = Measure("pixel_sum", 0.0)
RAINFALL_TOTAL = Measure("rainfall_total", -1.0)
MEASURES = {m.name: m for m in (PIXEL_SUM, RAINFALL_TOTAL)}


def extremeness_measure(pixels) -> float:
    """Sum over all pixels (total rainfall in normalized units)."""
    return PIXEL_SUM(pixels)


def extremeness_grad(pixels) -> np.ndarray:
    return PIXEL_SUM.grad(pixels)


# --- data model ---------------------------------------------------------------------


@dataclass(frozen=True)
class GridSample:
    pixels: np.ndarray
    extremeness: float
    origin: str
    id: int


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable batch of grids; operations return new datasets."""

    pixels: np.ndarray
    ids: np.ndarray
    origin: np.ndarray
    extremeness: np.ndarray
    raw_scale: tuple[float, float] = (0.0, 1.0)
    sorted_desc: bool = False
    measure: Measure = RAINFALL_TOTAL

    def __post_init__(self):
        n = self.pixels.shape[0]
        if self.pixels.ndim != 3:
            raise DatasetError(f"pixels must be (n, h, w), got {self.pixels.shape}")
        if not (self.ids.shape == self.origin.shape == self.extremeness.shape == (n,)):
            raise DatasetError("ids/origin/extremeness must have one entry per grid")
        for name in ("pixels", "ids", "origin", "extremeness"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))

    @classmethod
    def from_pixels(cls, pixels, ids=None, origin=REAL, raw_scale=(0.0, 1.0),
                    measure: Measure = RAINFALL_TOTAL) -> "Dataset":
        px = np.asarray(pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[None]
        n = px.shape[0]
        ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        org = np.full(n, origin, dtype=np.uint8) if np.ndim(origin) == 0 else np.asarray(origin, dtype=np.uint8)
        ext = np.asarray(measure(px), dtype=np.float64).reshape(n)
        return cls(px, ids, org, ext, (float(raw_scale[0]), float(raw_scale[1])), False, measure)

    @property
    def n(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[2])

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> GridSample:
        return GridSample(self.pixels[i], float(self.extremeness[i]),
                          _ORIGIN_NAMES[int(self.origin[i])], int(self.ids[i]))

    def __iter__(self) -> Iterator[GridSample]:
        return (self[i] for i in range(self.n))

    def take(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.pixels[index], self.ids[index], self.origin[index], self.extremeness[index],
                       self.raw_scale, False, self.measure)

    def concat(self, other: "Dataset") -> "Dataset":
        if other.pixels.shape[1:] != self.pixels.shape[1:]:
            raise DatasetError("cannot concatenate datasets with different grid shapes")
        if other.measure != self.measure:
            raise DatasetError("cannot concatenate datasets with different measures")
        return Dataset(np.concatenate([self.pixels, other.pixels]), np.concatenate([self.ids, other.ids]),
                       np.concatenate([self.origin, other.origin]),
                       np.concatenate([self.extremeness, other.extremeness]),
                       self.raw_scale, False, self.measure)

    def recompute_extremeness(self) -> np.ndarray:
        return np.asarray(self.measure(self.pixels), dtype=np.float64).reshape(self.n)

    def denormalized_extremeness(self) -> np.ndarray:
        """Extremeness in raw intensity units (valid for affine ``Measure``)."""
        lo, hi = self.raw_scale
        raw_sum = (self.pixels.reshape(self.n, -1).astype(np.float64) + 1.0).sum(axis=1) * (hi - lo) / 2.0
        return raw_sum + lo * self.height * self.width


def sort_by_extremeness(ds: Dataset) -> Dataset:
    """Nonincreasing extremeness, ties by ascending id."""
    order = np.lexsort((ds.ids, -ds.extremeness))
    return replace(ds.take(order), sorted_desc=True)


def sample_latent(count: int, latent_dim: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    return rng.standard_normal((count, latent_dim)).astype(dtype)


# --- normalization ------------------------------------------------------------------


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix averaging input cells by overlap with each output cell."""
    edges_in = np.arange(n_in + 1, dtype=np.float64)
    edges_out = np.linspace(0.0, n_in, n_out + 1)
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    overlap = np.clip(hi - lo, 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def area_resize(raw, size: tuple[int, int]) -> np.ndarray:
    """Area-average resampling of (n, H0, W0) or (H0, W0) grids to ``size``.

    For integer factors this is the exact block mean.
    """
    a = np.asarray(raw, dtype=np.float64)
    single = a.ndim == 2
    if single:
        a = a[None]
    if a.ndim != 3 or a.shape[0] == 0 or min(a.shape[1:]) < 1:
        raise DatasetError(f"expected non-empty (n, H, W) grids, got shape {np.shape(raw)}")
    h, w = size
    if h < 1 or w < 1:
        raise DatasetError(f"target size must be positive, got {size}")
    if (h, w) != a.shape[1:]:
        rows = _area_matrix(a.shape[1], h)
        cols = _area_matrix(a.shape[2], w)
        a = np.einsum("ij,njk,lk->nil", rows, a, cols)
    return a[0] if single else a


def normalize_resize(raw, size: tuple[int, int], scale: tuple[float, float] | None = None
                     ) -> tuple[np.ndarray, tuple[float, float]]:
    """Resize by area averaging, then map ``[min, max]`` affinely onto ``[-1, 1]``.

    ``scale`` defaults to the min/max of the resized stack.

    Returns:
        float32 pixels and the ``(min, max)`` scale that was used.
    """
    a = area_resize(raw, size)
    if np.any(~np.isfinite(a)):
        raise DatasetError("raw grids contain non-finite values")
    if np.any(a < 0):
        raise DatasetError("raw intensities must be nonnegative")
    lo, hi = (float(a.min()), float(a.max())) if scale is None else (float(scale[0]), float(scale[1]))
    if not hi > lo:
        raise DatasetError(f"degenerate intensity scale: min={lo} max={hi}")
    px = np.clip(2.0 * (a - lo) / (hi - lo) - 1.0, -1.0, 1.0).astype(np.float32)
    return px, (lo, hi)


def extreme_test_mask(train_extremeness, test_extremeness, q: float = 0.95) -> tuple[np.ndarray, float]:
    """Mask of test values strictly above the train ``q``-quantile (type-7)."""
    tr = np.asarray(train_extremeness, dtype=np.float64)
    te = np.asarray(test_extremeness, dtype=np.float64)
    thr = float(np.quantile(tr, q, method="linear"))
    return te > thr, thr


def split_train_test(train_raw, test_raw, size: tuple[int, int] | None = None, q: float = 0.95,
                     measure: Measure = RAINFALL_TOTAL) -> tuple[Dataset, Dataset]:
    """Normalize train and test on a shared scale and keep only extreme test grids.

    Test grids survive when their extremeness is strictly above the train
    ``q``-quantile. An empty result emits :class:`EmptyTestSetWarning`.
    """
    tr = np.asarray(train_raw, dtype=np.float64)
    te = np.asarray(test_raw, dtype=np.float64)
    if tr.size == 0 or te.size == 0 or tr.ndim != 3 or te.ndim != 3:
        raise DatasetError("train and test must be non-empty (n, H, W) stacks")
    size = size or tr.shape[1:]
    tr_r, te_r = area_resize(tr, size), area_resize(te, size)
    scale = (float(min(tr_r.min(), te_r.min())), float(max(tr_r.max(), te_r.max())))
    tr_px, _ = normalize_resize(tr_r, size, scale)
    te_px, _ = normalize_resize(te_r, size, scale)
    train = Dataset.from_pixels(tr_px, raw_scale=scale, measure=measure)
    test_all = Dataset.from_pixels(te_px, raw_scale=scale, measure=measure)
    mask, thr = extreme_test_mask(train.extremeness, test_all.extremeness, q)
    test = test_all.take(np.flatnonzero(mask))
    if test.n == 0:
        warnings.warn(f"no test grid exceeds the train {q:.0%} extremeness threshold {thr:.6g}",
                      EmptyTestSetWarning, stacklevel=2)
    return train, test


# --- synthetic rainfall --------------------------------------------------------------


def synth_raw(n: int, height: int, width: int, seed: int,
              tail: GpdParams = GpdParams(1.0, 0.2)) -> np.ndarray:
    """Raw nonnegative rain fields with GPD-distributed totals.

    Each field is a sum of 1-3 Gaussian rain cells with random centers, widths
    and weights, rescaled so the field total equals ``base + Y`` with
    ``Y ~ GPD(tail)``. Since GPD excesses over any threshold stay GPD with the
    same shape, the upper tail of the totals has shape ``tail.xi``.
    """
    if n < 1 or height < 1 or width < 1:
        raise DatasetError("n, height and width must be positive")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = tail.offset_u if tail.offset_u > 0 else tail.sigma
    totals = base + gpd_quantile(rng.random(n), tail)
    n_cells = rng.integers(1, 4, size=n)
    out = np.empty((n, height, width), dtype=np.float64)
    scale = min(height, width)
    for i in range(n):
        field = np.zeros((height, width))
        for _ in range(n_cells[i]):
            cy = rng.uniform(0.15, 0.85) * height
            cx = rng.uniform(0.15, 0.85) * width
            r = rng.uniform(0.08, 0.22) * scale
            wgt = rng.uniform(0.5, 1.5)
            field += wgt * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * r * r))
        out[i] = field * (totals[i] / field.sum())
    return out


def synth_rainfall(n: int, height: int, width: int, seed: int,
                   tail: GpdParams = GpdParams(1.0, 0.2), measure: Measure = RAINFALL_TOTAL) -> Dataset:
    """Normalized synthetic dataset (see :func:`synth_raw`)."""
    raw = synth_raw(n, height, width, seed, tail)
    px, scale = normalize_resize(raw, (height, width))
    return Dataset.from_pixels(px, raw_scale=scale, measure=measure)


# --- file I/O ------------------------------------------------------------------------


def save_dataset(ds: Dataset, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Write the ``EXG1`` format: JSON header line, f32le pixels, CRC-64 trailer."""
    header = {
        "magic": DATASET_MAGIC, "n": ds.n, "h": ds.height, "w": ds.width,
        "raw_min": ds.raw_scale[0], "raw_max": ds.raw_scale[1], "dtype": "f32le",
        "measure": ds.measure.name, "ids": ds.ids.tolist(), "origin": ds.origin.tolist(),
        "sorted_desc": bool(ds.sorted_desc), "extremeness": ds.extremeness.tolist(),
    }
    if extra:
        header["extra"] = extra
    write_framed(path, header, np.ascontiguousarray(ds.pixels, dtype="<f4").tobytes())


def load_dataset(path: str | os.PathLike) -> Dataset:
    header, blob = read_framed(path, DATASET_MAGIC, lambda h: 4 * int(h["n"]) * int(h["h"]) * int(h["w"]))
    n, h, w = int(header["n"]), int(header["h"]), int(header["w"])
    px = np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(n, h, w)
    measure = MEASURES[header.get("measure", RAINFALL_TOTAL.name)]
    ids = np.asarray(header.get("ids", range(n)), dtype=np.int64)
    origin = np.asarray(header.get("origin", [REAL] * n), dtype=np.uint8)
    if ids.shape != (n,) or origin.shape != (n,):
        raise FileFormatError(f"{path}: ids/origin length does not match n={n}")
    ds = Dataset(px, ids, origin, np.asarray(measure(px), dtype=np.float64).reshape(n),
                 (float(header["raw_min"]), float(header["raw_max"])), bool(header.get("sorted_desc", False)),
                 measure)
    stored = header.get("extremeness")
    if stored is not None and not np.array_equal(np.asarray(stored, dtype=np.float64), ds.extremeness):
        raise CacheMismatchError(f"{path}: stored extremeness disagrees with recomputation")
    if ds.sorted_desc and not np.all(np.diff(ds.extremeness) <= 0):
        raise CacheMismatchError(f"{path}: flagged sorted but extremeness is not nonincreasing")
    return ds
