"""Importance-aware channel selection.

A weight gradient's important elements cluster in a few input channels
(columns) and those channels stay important for many steps. Ranking columns
by their squared norm is therefore a cheap stand-in for an element-level
top-k, and the resulting channel set can be cached and refreshed rarely.

Channel sets are chosen per weight matrix.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .gradcore import (
    DegenerateGradientWarning,
    as_gradient,
    ceil_count,
    column_norms_sq,
    exact_topk_mask,
    topk_flat_indices,
)

__all__ = [
    "ChannelSelection",
    "LocalityReport",
    "NormEMA",
    "SyntheticGradients",
    "channel_energy_cdf",
    "channel_energy_fraction",
    "locality_series",
    "mask_from_channels",
    "maybe_refresh",
    "retention_rate",
    "select_channels",
    "write_locality_csv",
]

DEFAULT_K_CHANNEL_RATIO = 0.10
DEFAULT_REFRESH_INTERVAL = 4


@dataclass(frozen=True, eq=False)
class ChannelSelection:
    """Cached set of important input channels for one weight matrix."""

    channel_ids: np.ndarray
    k_channel_ratio: float
    created_at_step: int = 0
    refresh_interval: int = DEFAULT_REFRESH_INTERVAL
    num_columns: int | None = None

    def __post_init__(self):
        ids = np.array(self.channel_ids, dtype=np.intp).ravel()
        if ids.size and np.any(np.diff(ids) <= 0):
            raise ValueError("channel_ids must be strictly increasing")
        if ids.size and ids[0] < 0:
            raise ValueError("channel_ids must be non-negative")
        if self.num_columns is not None:
            if ids.size and ids[-1] >= self.num_columns:
                raise ValueError(f"channel id {ids[-1]} out of range for {self.num_columns} columns")
            expected = ceil_count(self.k_channel_ratio, self.num_columns)
            if ids.size != expected:
                raise ValueError(f"expected {expected} channels for ratio {self.k_channel_ratio}, got {ids.size}")
        if self.refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")
        ids.setflags(write=False)
        object.__setattr__(self, "channel_ids", ids)

    def __len__(self) -> int:
        return self.channel_ids.size

    def __eq__(self, other):
        if not isinstance(other, ChannelSelection):
            return NotImplemented
        return (np.array_equal(self.channel_ids, other.channel_ids)
                and self.k_channel_ratio == other.k_channel_ratio
                and self.created_at_step == other.created_at_step
                and self.refresh_interval == other.refresh_interval
                and self.num_columns == other.num_columns)

    __hash__ = None

    def same_channels(self, other: "ChannelSelection") -> bool:
        return np.array_equal(self.channel_ids, other.channel_ids)

    def as_set(self) -> set[int]:
        return set(int(i) for i in self.channel_ids)


def select_channels(norms_sq, k_channel_ratio: float = DEFAULT_K_CHANNEL_RATIO, *,
                    step: int = 0, refresh_interval: int = DEFAULT_REFRESH_INTERVAL) -> ChannelSelection:
    """Pick the ``ceil(ratio*m)`` columns with the largest squared norms.

    Ties go to the smaller column index. Only the length-``m`` norm vector
    is needed, which is what makes the selection cheap to coordinate across
    shards.
    """
    norms = np.asarray(norms_sq, dtype=np.float64).ravel()
    if norms.size == 0:
        raise ValueError("cannot select channels from an empty norm vector")
    if not (0.0 < k_channel_ratio <= 1.0):
        raise ValueError(f"k_channel_ratio must be in (0, 1], got {k_channel_ratio!r}")
    k = ceil_count(k_channel_ratio, norms.size)
    ids = topk_flat_indices(norms, k)
    return ChannelSelection(ids, k_channel_ratio, step, refresh_interval, norms.size)


def mask_from_channels(sel: ChannelSelection, shape) -> np.ndarray:
    rows, cols = shape
    if sel.num_columns is not None and sel.num_columns != cols:
        raise ValueError(f"selection built for {sel.num_columns} columns, matrix has {cols}")
    if len(sel) and sel.channel_ids[-1] >= cols:
        raise ValueError(f"channel id {sel.channel_ids[-1]} out of range for {cols} columns")
    mask = np.zeros((rows, cols), dtype=bool)
    mask[:, sel.channel_ids] = True
    return mask


def retention_rate(g, sel: ChannelSelection, element_frac: float = 0.01) -> float:
    """Fraction of the exact top-``element_frac`` elements inside ``sel``'s columns."""
    g = as_gradient(g)
    if not (0.0 < element_frac <= 1.0):
        raise ValueError(f"element_frac must be in (0, 1], got {element_frac!r}")
    if not np.any(g.data):
        warnings.warn("zero gradient matrix: retention defined as 0", DegenerateGradientWarning)
        return 0.0
    top = exact_topk_mask(g, element_frac)
    inside = top & mask_from_channels(sel, g.shape)
    return int(inside.sum()) / int(top.sum())


def channel_energy_fraction(g, sel: ChannelSelection) -> float:
    """Share of ``sum(g**2)`` that lies in the selected columns."""
    norms = column_norms_sq(g)
    total = norms.sum()
    if total == 0.0:
        warnings.warn("zero gradient matrix: channel energy defined as 0", DegenerateGradientWarning)
        return 0.0
    return float(norms[sel.channel_ids].sum() / total)


def channel_energy_cdf(g) -> np.ndarray:
    """Cumulative energy share with channels sorted by descending norm."""
    norms = np.sort(column_norms_sq(g))[::-1]
    total = norms.sum()
    if total == 0.0:
        return np.zeros_like(norms)
    return np.cumsum(norms) / total


def maybe_refresh(sel: ChannelSelection, step: int, norms_sq) -> ChannelSelection:
    """Return ``sel`` itself until ``refresh_interval`` steps have elapsed."""
    if step < sel.created_at_step:
        raise ValueError(f"step {step} precedes selection creation at {sel.created_at_step}")
    if step - sel.created_at_step < sel.refresh_interval:
        return sel
    return select_channels(norms_sq, sel.k_channel_ratio, step=step, refresh_interval=sel.refresh_interval)


class NormEMA:
    """Optional exponential smoothing of per-column norms before selection."""

    def __init__(self, decay: float = 0.9):
        if not (0.0 <= decay < 1.0):
            raise ValueError("decay must be in [0, 1)")
        self.decay = decay
        self.value: np.ndarray | None = None

    def update(self, norms_sq) -> np.ndarray:
        norms = np.asarray(norms_sq, dtype=np.float64)
        if self.value is None:
            self.value = norms.copy()
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * norms
        return self.value


@dataclass(frozen=True)
class LocalityReport:
    step: int
    retention: float
    channel_energy_topfrac: float

    def __post_init__(self):
        for name in ("retention", "channel_energy_topfrac"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")


def write_locality_csv(reports: Iterable[LocalityReport], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "retention", "channel_energy_topfrac"])
        for r in reports:
            w.writerow([r.step, repr(r.retention), repr(r.channel_energy_topfrac)])
    return path


@dataclass
class SyntheticGradients:
    """Seeded stream of gradient matrices with controllable column structure.

    ``mode``:

    * ``"lognormal"`` -- each column carries a lognormal(0, ``sigma``) scale
      that persists across steps; each step every column redraws its scale
      with probability ``redraw_prob``. Mimics fine-tuning gradients whose
      hot channels are few and stable.
    * ``"concentrated"`` -- a fixed ``hot_frac`` of columns carries
      ``hot_energy`` of the expected energy.
    * ``"uniform"`` -- i.i.d. standard normal entries, no locality at all.
    """

    rows: int
    cols: int
    mode: str = "lognormal"
    sigma: float = 2.0
    redraw_prob: float = 0.01
    hot_frac: float = 0.10
    hot_energy: float = 0.90
    seed: int = 0
    scales: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.mode not in ("lognormal", "concentrated", "uniform"):
            raise ValueError(f"unknown generator mode {self.mode!r}")
        self._rng = np.random.default_rng(self.seed)
        if self.mode == "lognormal":
            self.scales = self._rng.lognormal(0.0, self.sigma, self.cols)
        elif self.mode == "concentrated":
            n_hot = ceil_count(self.hot_frac, self.cols)
            hot = self._rng.choice(self.cols, n_hot, replace=False)
            cold = self.cols - n_hot
            # per-column variance so hot columns jointly hold hot_energy
            var = np.full(self.cols, (1.0 - self.hot_energy) / max(cold, 1))
            var[hot] = self.hot_energy / n_hot
            self.scales = np.sqrt(var)
            self.hot_columns = np.sort(hot)
        else:
            self.scales = np.ones(self.cols)

    def next(self) -> np.ndarray:
        if self.mode == "lognormal" and self.redraw_prob > 0:
            redraw = self._rng.random(self.cols) < self.redraw_prob
            if redraw.any():
                self.scales = self.scales.copy()
                self.scales[redraw] = self._rng.lognormal(0.0, self.sigma, int(redraw.sum()))
        z = self._rng.standard_normal((self.rows, self.cols))
        return (z * self.scales[None, :]).astype(np.float32)

    def stream(self, n_steps: int) -> Iterator[np.ndarray]:
        for _ in range(n_steps):
            yield self.next()


def locality_series(grads: Sequence, k_channel_ratio: float = DEFAULT_K_CHANNEL_RATIO,
                    element_frac: float = 0.01, refresh_interval: int = DEFAULT_REFRESH_INTERVAL,
                    start_step: int = 0) -> list[LocalityReport]:
    """Retention and channel-energy share per step under a cached selection.

    Step ``t`` is scored against channels chosen from gradients of earlier
    steps only; its own norms feed :func:`maybe_refresh` afterwards. The
    very first step has no history and is scored against itself.
    """
    out: list[LocalityReport] = []
    sel = None
    for i, g in enumerate(grads):
        step = start_step + i
        g = as_gradient(g)
        norms = column_norms_sq(g)
        if sel is None:
            sel = select_channels(norms, k_channel_ratio, step=step, refresh_interval=refresh_interval)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateGradientWarning)
            out.append(LocalityReport(step, retention_rate(g, sel, element_frac),
                                      channel_energy_fraction(g, sel)))
        sel = maybe_refresh(sel, step + 1, norms)
    return out
