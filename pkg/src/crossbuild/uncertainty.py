"""Monte Carlo dropout intervals and their calibration."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from . import tensor as T
from .data import WindowBatch
from .errors import ContractError


@dataclass(frozen=True)
class MCDropoutConfig:
    n_passes: int = 50
    lower: float = 2.5
    upper: float = 97.5
    base_seed: int = 0

    def __post_init__(self):
        if self.n_passes < 2:
            raise ContractError(f"MC dropout needs at least 2 passes, got {self.n_passes}")
        if not 0.0 < self.lower < self.upper < 100.0:
            raise ContractError(f"interval percentiles must satisfy 0 < lower < upper < 100, got {self.lower}, {self.upper}")

    @property
    def nominal(self) -> float:
        return (self.upper - self.lower) / 100.0


@dataclass
class IntervalForecast:
    """Per-step MC summary, arrays shaped (windows, horizon), normalised units."""

    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    std: np.ndarray
    model_id: str = "model"
    n_passes: int = 0
    base_seed: int = 0

    def __post_init__(self):
        shapes = {a.shape for a in (self.mean, self.lower, self.upper, self.std)}
        if len(shapes) != 1:
            raise ContractError(f"interval arrays disagree in shape: {sorted(shapes)}")
        if np.any(self.lower > self.upper):
            raise ContractError("interval lower bound exceeds upper bound")

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def mc_samples(model, batch: WindowBatch, config: MCDropoutConfig, chunk: int = 256) -> np.ndarray:
    """Median-quantile forecasts of every pass, shape (N, windows, horizon).

    Pass ``i`` draws its dropout masks from ``base_seed + i`` only, so a pass
    does not depend on which other passes run.
    """
    med = model.config.median_index
    out = np.empty((config.n_passes, len(batch), model.config.horizon))
    with T.no_tape():
        for i in range(config.n_passes):
            rng = np.random.default_rng(config.base_seed + i)
            for lo in range(0, len(batch), chunk):
                pred = model.forward(batch[lo : lo + chunk], mc_dropout=True, rng=rng).data
                out[i, lo : lo + chunk] = pred[..., med]
    return out


def summarize(samples: np.ndarray, config: MCDropoutConfig, model_id: str = "model") -> IntervalForecast:
    """Reduce pass samples (N, ...) to mean, percentiles and sample std.

    Samples are sorted along the pass axis first, which makes the result
    independent of pass order. The mean is taken around the first sorted
    sample so identical passes give that value exactly.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise ContractError(f"need at least 2 passes, got {samples.shape[0]}")
    s = np.sort(samples, axis=0)
    dev = s - s[0]
    mean = s[0] + dev.mean(axis=0)
    std = np.sqrt(np.sum((s - mean) ** 2, axis=0) / (s.shape[0] - 1))
    std = np.where(np.all(dev == 0, axis=0), 0.0, std)
    lower, upper = np.percentile(s, [config.lower, config.upper], axis=0)
    return IntervalForecast(mean, lower, upper, std, model_id, s.shape[0], config.base_seed)


def mc_dropout_predict(model, batch: WindowBatch, config: MCDropoutConfig = MCDropoutConfig(), model_id: str = "model") -> IntervalForecast:
    """MC dropout interval forecast for every window in ``batch``."""
    return summarize(mc_samples(model, batch, config), config, model_id)


def _flatten(intervals) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(intervals, IntervalForecast):
        intervals = [intervals]
    intervals = list(intervals)
    if not intervals:
        raise ContractError("no intervals given")
    lower = np.concatenate([np.ravel(i.lower) for i in intervals])
    upper = np.concatenate([np.ravel(i.upper) for i in intervals])
    return lower, upper


def picp(intervals: IntervalForecast | Sequence[IntervalForecast], truth, mask=None) -> float:
    """Share of valid truths inside their interval, bounds inclusive."""
    lower, upper = _flatten(intervals)
    y = np.ravel(np.asarray(truth, dtype=np.float64))
    if y.shape != lower.shape:
        raise ContractError(f"truth has {y.size} values for {lower.size} intervals")
    keep = np.ones(y.shape, bool) if mask is None else np.ravel(np.asarray(mask, dtype=bool))
    if not keep.any():
        raise ContractError("every point is masked; coverage undefined")
    inside = (lower <= y) & (y <= upper)
    return float(inside[keep].mean())


def miw(intervals: IntervalForecast | Sequence[IntervalForecast], mask=None) -> float:
    lower, upper = _flatten(intervals)
    keep = np.ones(lower.shape, bool) if mask is None else np.ravel(np.asarray(mask, dtype=bool))
    if not keep.any():
        raise ContractError("every point is masked; width undefined")
    return float((upper - lower)[keep].mean())


def hourly_rows(forecast: IntervalForecast, windows: WindowBatch) -> list[list[str]]:
    """One row per test hour from non-overlapping windows (stride == horizon)."""
    stamps = windows.forecast_timestamps()
    rows = [["timestamp", "truth", "mean", "lower", "upper", "std"]]
    seen = set()
    for idx in np.ndindex(forecast.mean.shape):
        ts = pd.Timestamp(stamps[idx]).strftime("%Y-%m-%dT%H:%M:%SZ")
        if ts in seen:
            continue
        seen.add(ts)
        truth = repr(float(windows.target[idx])) if windows.loss_mask[idx] else ""
        rows.append(
            [ts, truth]
            + [repr(float(a[idx])) for a in (forecast.mean, forecast.lower, forecast.upper, forecast.std)]
        )
    return rows


def write_intervals(forecast: IntervalForecast, windows: WindowBatch, path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(hourly_rows(forecast, windows))
