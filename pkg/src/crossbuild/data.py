"""Hourly frames, preprocessing, channel alignment, windowing and synthetic data.

Preprocessing follows this order: hourly resampling, short-gap interpolation,
finite differencing of cumulative meters, removal of sparse channels, and
per-building min-max scaling fitted on training rows only.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import ContractError, IngestionError, LeakageError

KINDS = ("target", "target_component", "unknown_covariate", "known_covariate")
UNKNOWN_KINDS = ("target", "target_component", "unknown_covariate")
TARGET = "target"
MAX_FILL_GAP = 4
SPARSE_THRESHOLD = 0.30
CALENDAR_CHANNELS = (
    "cal_hour_sin",
    "cal_hour_cos",
    "cal_dow_sin",
    "cal_dow_cos",
    "cal_month_sin",
    "cal_month_cos",
)


def _utc(ts) -> pd.Timestamp:
    ts = pd.Timestamp(ts)
    return ts.tz_localize("UTC") if ts.tzinfo is None else ts.tz_convert("UTC")


@dataclass(frozen=True)
class TimeSeriesFrame:
    """Hourly multichannel series.

    ``values`` is (T, C); ``mask`` is True where a value was observed.
    Unobserved cells hold a 0.0 placeholder. Rows from ``holdout_start`` on
    are test data that scalers may never be fitted on.
    """

    start: pd.Timestamp
    channels: tuple[str, ...]
    values: np.ndarray
    mask: np.ndarray
    kinds: dict[str, str]
    cumulative: frozenset[str] = frozenset()
    domain: str = "unknown"
    holdout_start: int | None = None
    history: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "start", _utc(self.start))
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "cumulative", frozenset(self.cumulative))
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 2 or values.shape != mask.shape or values.shape[1] != len(self.channels):
            raise ContractError(
                f"frame values {values.shape} / mask {mask.shape} do not match {len(self.channels)} channels"
            )
        if len(set(self.channels)) != len(self.channels):
            raise ContractError("frame channel names must be unique")
        missing = [c for c in self.channels if self.kinds.get(c) not in KINDS]
        if missing:
            raise ContractError(f"channels without a valid kind: {missing}")
        if not np.isfinite(values).all():
            raise ContractError("frame values must be finite; mark gaps with the mask")
        object.__setattr__(self, "values", np.where(mask, values, 0.0))
        object.__setattr__(self, "mask", mask)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def timestamps(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start, periods=self.n_steps, freq="h")

    def index(self, channel: str) -> int:
        try:
            return self.channels.index(channel)
        except ValueError:
            raise ContractError(f"{self.domain}: no channel {channel!r}") from None

    def column(self, channel: str) -> np.ndarray:
        return self.values[:, self.index(channel)]

    def observed(self, channel: str) -> np.ndarray:
        return self.mask[:, self.index(channel)]

    def with_data(self, values, mask, note: str | None = None, **changes) -> "TimeSeriesFrame":
        history = self.history + ((note,) if note else ())
        return replace(self, values=values, mask=mask, history=history, **changes)

    def select(self, channels: Sequence[str]) -> "TimeSeriesFrame":
        idx = [self.index(c) for c in channels]
        return replace(
            self,
            channels=tuple(channels),
            values=self.values[:, idx],
            mask=self.mask[:, idx],
            kinds={c: self.kinds[c] for c in channels},
            cumulative=self.cumulative & set(channels),
        )

    def rows(self, start: int, stop: int | None = None) -> "TimeSeriesFrame":
        stop = self.n_steps if stop is None else stop
        holdout = None if self.holdout_start is None else max(self.holdout_start - start, 0)
        return replace(
            self,
            start=self.start + pd.Timedelta(hours=start),
            values=self.values[start:stop],
            mask=self.mask[start:stop],
            holdout_start=holdout,
        )

    def equals(self, other: "TimeSeriesFrame") -> bool:
        return (
            self.start == other.start
            and self.channels == other.channels
            and self.kinds == other.kinds
            and self.cumulative == other.cumulative
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values, other.values)
        )


# -- (1) resampling ---------------------------------------------------------


def resample_hourly(
    raw: pd.DataFrame,
    kinds: dict[str, str],
    cumulative: Iterable[str] = (),
    domain: str = "unknown",
    holdout_start=None,
) -> TimeSeriesFrame:
    """Average irregular samples into hourly buckets.

    ``raw`` is indexed by timestamp (naive stamps are read as UTC) with one
    column per channel; NaN marks a missing sample. Empty buckets are masked.
    ``holdout_start`` may be a timestamp; it is converted to a row index.
    """
    if raw.empty:
        raise IngestionError("no samples to resample")
    stamps = pd.DatetimeIndex(raw.index)
    stamps = stamps.tz_localize("UTC") if stamps.tz is None else stamps.tz_convert("UTC")
    ns = stamps.asi8
    bad = np.flatnonzero(np.diff(ns) < 0)
    if bad.size:
        raise IngestionError(f"timestamps are not ordered; first offending index {int(bad[0]) + 1}")
    df = raw.set_axis(stamps.floor("h"))
    hourly = df.groupby(level=0).mean()
    grid = pd.date_range(hourly.index[0], hourly.index[-1], freq="h")
    hourly = hourly.reindex(grid)
    arr = hourly.to_numpy(dtype=np.float64)
    mask = np.isfinite(arr)
    hold = None
    if holdout_start is not None:
        hold = int((_utc(holdout_start) - grid[0]) / pd.Timedelta(hours=1))
    return TimeSeriesFrame(
        start=grid[0],
        channels=tuple(str(c) for c in hourly.columns),
        values=np.where(mask, arr, 0.0),
        mask=mask,
        kinds=dict(kinds),
        cumulative=frozenset(cumulative),
        domain=domain,
        holdout_start=hold,
    )


# -- (2) short-gap interpolation -------------------------------------------


def _gap_runs(observed: np.ndarray):
    """Yield (start, stop) of each run of unobserved cells."""
    padded = np.concatenate([[True], observed, [True]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return zip(edges[::2], edges[1::2])


def fill_short_gaps(frame: TimeSeriesFrame, max_gap: int = MAX_FILL_GAP) -> TimeSeriesFrame:
    """Linearly interpolate interior gaps of at most ``max_gap`` hours."""
    values = frame.values.copy()
    mask = frame.mask.copy()
    n = frame.n_steps
    filled = 0
    for j in range(values.shape[1]):
        for lo, hi in _gap_runs(mask[:, j]):
            if lo == 0 or hi == n or hi - lo > max_gap:
                continue
            left, right = values[lo - 1, j], values[hi, j]
            frac = np.arange(1, hi - lo + 1) / (hi - lo + 1)
            values[lo:hi, j] = left + frac * (right - left)
            mask[lo:hi, j] = True
            filled += hi - lo
    return frame.with_data(values, mask, f"fill_short_gaps: {filled} cells" if filled else None)


# -- (3) cumulative meters --------------------------------------------------


def diff_cumulative(frame: TimeSeriesFrame, channels: Iterable[str] | None = None) -> TimeSeriesFrame:
    """Turn cumulative meter readings into per-hour consumption.

    The first step, steps next to a missing reading, and negative
    differences (meter resets) are masked. Processed channels lose their
    cumulative flag, so a second call is a no-op.
    """
    channels = frame.cumulative if channels is None else frozenset(channels)
    if not channels:
        return frame
    values = frame.values.copy()
    mask = frame.mask.copy()
    for name in sorted(channels):
        j = frame.index(name)
        r, ok = frame.values[:, j], frame.mask[:, j]
        d = np.zeros_like(r)
        d[1:] = r[1:] - r[:-1]
        valid = np.zeros_like(ok)
        valid[1:] = ok[1:] & ok[:-1]
        valid &= d >= 0
        values[:, j] = np.where(valid, d, 0.0)
        mask[:, j] = valid
    return frame.with_data(
        values, mask, f"diff_cumulative: {sorted(channels)}", cumulative=frame.cumulative - channels
    )


# -- (4) sparse channels ----------------------------------------------------


def drop_sparse_channels(
    frame: TimeSeriesFrame, threshold: float = SPARSE_THRESHOLD
) -> tuple[TimeSeriesFrame, list[str]]:
    """Drop channels whose missing fraction strictly exceeds ``threshold``."""
    missing = 1.0 - frame.mask.mean(axis=0)
    dropped = [c for c, m in zip(frame.channels, missing) if m > threshold + 1e-12]
    if not dropped:
        return frame, []
    kept = [c for c in frame.channels if c not in dropped]
    out = frame.select(kept)
    return replace(out, history=out.history + (f"drop_sparse_channels: {dropped}",)), dropped


def build_target(frame: TimeSeriesFrame) -> TimeSeriesFrame:
    """(Re)compute the ``target`` channel as the sum of electricity sub-meters.

    A target hour is observed only if every component is observed.
    """
    comps = [c for c in frame.channels if frame.kinds[c] == "target_component"]
    if not comps:
        if TARGET in frame.channels:
            return frame
        raise ContractError(f"{frame.domain}: no target_component channels to aggregate")
    idx = [frame.index(c) for c in comps]
    total = frame.values[:, idx].sum(axis=1)
    ok = frame.mask[:, idx].all(axis=1)
    if TARGET in frame.channels:
        j = frame.index(TARGET)
        values, mask = frame.values.copy(), frame.mask.copy()
        values[:, j], mask[:, j] = total, ok
        return frame.with_data(values, mask)
    return replace(
        frame,
        channels=frame.channels + (TARGET,),
        values=np.column_stack([frame.values, total]),
        mask=np.column_stack([frame.mask, ok]),
        kinds={**frame.kinds, TARGET: "target"},
    )


def preprocess(frame: TimeSeriesFrame, max_gap: int = MAX_FILL_GAP, threshold: float = SPARSE_THRESHOLD) -> TimeSeriesFrame:
    """Gap fill, meter differencing, sparse-channel removal and target build.

    Interpolation runs again after differencing so that single-hour holes left
    by meter resets are treated like any other short outage. The chain is
    idempotent.
    """
    frame = fill_short_gaps(frame, max_gap)
    frame = diff_cumulative(frame)
    frame = fill_short_gaps(frame, max_gap)
    frame, _ = drop_sparse_channels(frame, threshold)
    return build_target(frame)


# -- (5) scaling ------------------------------------------------------------


@dataclass(frozen=True)
class ScalerParams:
    minimum: dict[str, float]
    maximum: dict[str, float]
    domain: str
    fitted_on_training: bool = True
    fit_range: tuple[int, int] = (0, 0)

    def to_json(self) -> str:
        body = {c: {"min": self.minimum[c], "max": self.maximum[c]} for c in self.minimum}
        return json.dumps(body, indent=2, sort_keys=True)

    def save(self, path, extra: bool = True) -> None:
        Path(path).write_text(self.to_json() + "\n")
        if extra:
            Path(str(path) + ".meta").write_text(
                json.dumps({"domain": self.domain, "fit_range": list(self.fit_range)}, sort_keys=True) + "\n"
            )

    @classmethod
    def load(cls, path) -> "ScalerParams":
        body = json.loads(Path(path).read_text())
        meta_path = Path(str(path) + ".meta")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"domain": "unknown", "fit_range": [0, 0]}
        return cls(
            {c: float(v["min"]) for c, v in body.items()},
            {c: float(v["max"]) for c, v in body.items()},
            meta["domain"],
            True,
            tuple(meta["fit_range"]),
        )


def fit_scaler(
    frame: TimeSeriesFrame, train_range: tuple[int, int], channels: Sequence[str] | None = None
) -> ScalerParams:
    """Per-channel min and max over observed training rows ``[lo, hi)``.

    Calendar features are skipped by default; they are already bounded.
    """
    lo, hi = train_range
    if not 0 <= lo < hi <= frame.n_steps:
        raise ContractError(f"fit range {train_range} outside frame of {frame.n_steps} rows")
    if frame.holdout_start is not None and hi > frame.holdout_start:
        raise LeakageError(
            f"{frame.domain}: fit range {train_range} intersects held-out rows from {frame.holdout_start}"
        )
    if channels is None:
        channels = [c for c in frame.channels if c not in CALENDAR_CHANNELS]
    mins, maxs = {}, {}
    for c in channels:
        j = frame.index(c)
        obs = frame.values[lo:hi, j][frame.mask[lo:hi, j]]
        mins[c] = float(obs.min()) if obs.size else 0.0
        maxs[c] = float(obs.max()) if obs.size else 0.0
    return ScalerParams(mins, maxs, frame.domain, True, (lo, hi))


def apply_scaler(
    frame: TimeSeriesFrame, scaler: ScalerParams, allow_cross_domain: bool = False
) -> TimeSeriesFrame:
    """Map each scaled channel to ``(x - min) / (max - min)`` without clipping.

    Constant channels map to 0. The scaler is never modified.
    """
    if scaler.domain != frame.domain and not allow_cross_domain:
        raise LeakageError(
            f"scaler fitted on {scaler.domain!r} applied to {frame.domain!r}; "
            "pass allow_cross_domain=True to do this deliberately"
        )
    values = frame.values.copy()
    for c in scaler.minimum:
        if c not in frame.channels:
            continue
        j = frame.index(c)
        span = scaler.maximum[c] - scaler.minimum[c]
        if span > 0:
            values[:, j] = (values[:, j] - scaler.minimum[c]) / span
        else:
            values[:, j] = 0.0
    return frame.with_data(values, frame.mask, f"apply_scaler: {scaler.domain}")


def add_calendar_features(frame: TimeSeriesFrame) -> TimeSeriesFrame:
    """Append sin/cos encodings of hour-of-day, day-of-week and month."""
    ts = frame.timestamps
    feats = {}
    for name, value, period in (
        ("hour", ts.hour.to_numpy(), 24.0),
        ("dow", ts.dayofweek.to_numpy(), 7.0),
        ("month", ts.month.to_numpy() - 1, 12.0),
    ):
        angle = 2 * math.pi * value / period
        feats[f"cal_{name}_sin"] = np.sin(angle)
        feats[f"cal_{name}_cos"] = np.cos(angle)
    keep = [c for c in frame.channels if c not in feats]
    base = frame.select(keep)
    cols = list(CALENDAR_CHANNELS)
    return replace(
        base,
        channels=base.channels + tuple(cols),
        values=np.column_stack([base.values] + [feats[c] for c in cols]),
        mask=np.column_stack([base.mask, np.ones((frame.n_steps, len(cols)), dtype=bool)]),
        kinds={**base.kinds, **{c: "known_covariate" for c in cols}},
    )


# -- channel alignment ------------------------------------------------------


@dataclass(frozen=True)
class ChannelLayout:
    """Canonical channel order shared by source and target models."""

    channels: tuple[str, ...]
    kinds: dict[str, str]
    domains: tuple[str, ...]

    @property
    def unknown(self) -> tuple[str, ...]:
        return tuple(c for c in self.channels if self.kinds[c] in UNKNOWN_KINDS)

    @property
    def known(self) -> tuple[str, ...]:
        return tuple(c for c in self.channels if self.kinds[c] == "known_covariate")

    def static_vector(self, domain: str) -> np.ndarray:
        v = np.zeros(len(self.domains))
        if domain in self.domains:
            v[self.domains.index(domain)] = 1.0
        return v

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "kinds": dict(self.kinds), "domains": list(self.domains)}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelLayout":
        return cls(tuple(d["channels"]), dict(d["kinds"]), tuple(d["domains"]))


def canonical_layout(*frames: TimeSeriesFrame) -> ChannelLayout:
    """Union of channel names, in first-seen order across ``frames``."""
    channels: list[str] = []
    kinds: dict[str, str] = {}
    for f in frames:
        for c in f.channels:
            if c not in kinds:
                channels.append(c)
                kinds[c] = f.kinds[c]
    if TARGET not in kinds:
        raise ContractError("layout has no target channel; run build_target first")
    return ChannelLayout(tuple(channels), kinds, tuple(f.domain for f in frames))


def align_channels(frame: TimeSeriesFrame, layout: ChannelLayout | Sequence[str]) -> TimeSeriesFrame:
    """Reorder onto the canonical channels, zero-padding absent ones.

    Padded columns are structural zeros and count as observed. Channels
    outside the canonical list are dropped with a warning.
    """
    if isinstance(layout, ChannelLayout):
        canonical, kinds = layout.channels, layout.kinds
    else:
        canonical, kinds = tuple(layout), dict(frame.kinds)
    extra = [c for c in frame.channels if c not in canonical]
    if extra:
        warnings.warn(f"{frame.domain}: dropping non-canonical channels {extra}", stacklevel=2)
    values = np.zeros((frame.n_steps, len(canonical)))
    mask = np.ones((frame.n_steps, len(canonical)), dtype=bool)
    padded = []
    for j, c in enumerate(canonical):
        if c in frame.channels:
            k = frame.index(c)
            values[:, j] = frame.values[:, k]
            mask[:, j] = frame.mask[:, k]
        else:
            padded.append(c)
            if c not in kinds:
                raise ContractError(f"no kind known for padded channel {c!r}")
    notes = []
    if padded:
        notes.append(f"align_channels: zero-padded {padded}")
    if extra:
        notes.append(f"align_channels: dropped {extra}")
    return replace(
        frame,
        channels=tuple(canonical),
        values=values,
        mask=mask,
        kinds={c: kinds.get(c, frame.kinds.get(c)) for c in canonical},
        cumulative=frame.cumulative & set(canonical),
        history=frame.history + tuple(notes),
    )


# -- windowing --------------------------------------------------------------


@dataclass
class WindowBatch:
    """Stacked forecast windows; every array has a leading window axis.

    Slicing returns views; integer-array indexing gathers copies.
    """

    encoder_unknown: np.ndarray  # (N, L, C)
    encoder_known: np.ndarray  # (N, L, K)
    decoder_known: np.ndarray  # (N, H, K)
    static: np.ndarray  # (N, S)
    target: np.ndarray  # (N, H)
    loss_mask: np.ndarray  # (N, H)
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    origin: pd.Timestamp | None = None

    def __len__(self) -> int:
        return self.target.shape[0]

    def __getitem__(self, idx) -> "WindowBatch":
        if isinstance(idx, (int, np.integer)):
            idx = slice(idx, idx + 1) if idx != -1 else slice(-1, None)
        return WindowBatch(
            self.encoder_unknown[idx],
            self.encoder_known[idx],
            self.decoder_known[idx],
            self.static[idx],
            self.target[idx],
            self.loss_mask[idx],
            self.starts[idx],
            self.origin,
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def forecast_timestamps(self) -> np.ndarray:
        """(N, H) timestamps of every forecast step."""
        if self.origin is None:
            raise ContractError("windows carry no origin timestamp")
        h = self.target.shape[1]
        hours = self.starts[:, None] + np.arange(h)[None, :]
        return (self.origin + pd.to_timedelta(hours.reshape(-1), unit="h")).to_numpy().reshape(hours.shape)


def make_windows(
    frame: TimeSeriesFrame,
    layout: ChannelLayout,
    lookback: int = 168,
    horizon: int = 24,
    stride: int = 1,
    forecast_range: tuple[int, int] | None = None,
) -> WindowBatch:
    """Slide (lookback, horizon) windows over an aligned frame.

    ``forecast_range`` restricts the forecast steps to rows ``[lo, hi)``;
    encoder history may reach back before ``lo``. Without it every start
    with a full history is used, giving ``T - L - H + 1`` windows at stride 1.
    """
    if frame.channels != layout.channels:
        raise ContractError(f"{frame.domain}: frame is not aligned to the layout; call align_channels")
    if stride < 1:
        raise ContractError("stride must be >= 1")
    n = frame.n_steps
    lo, hi = (0, n) if forecast_range is None else forecast_range
    first = max(lookback, lo)
    last = min(n, hi) - horizon  # inclusive
    span = lookback + horizon
    u_idx = [frame.index(c) for c in layout.unknown]
    k_idx = [frame.index(c) for c in layout.known]
    t_idx = frame.index(TARGET)
    if last < first:
        empty = np.zeros((0,))
        return WindowBatch(
            np.zeros((0, lookback, len(u_idx))),
            np.zeros((0, lookback, len(k_idx))),
            np.zeros((0, horizon, len(k_idx))),
            np.zeros((0, len(layout.domains))),
            np.zeros((0, horizon)),
            np.zeros((0, horizon), dtype=bool),
            empty.astype(int),
            frame.start,
        )
    sel = slice(first - lookback, last - lookback + 1, stride)
    win = np.lib.stride_tricks.sliding_window_view
    unknown = win(frame.values[:, u_idx], span, axis=0).transpose(0, 2, 1)[sel]
    known = win(frame.values[:, k_idx], span, axis=0).transpose(0, 2, 1)[sel]
    target = win(frame.values[:, t_idx], span)[sel]
    tmask = win(frame.mask[:, t_idx], span)[sel]
    starts = np.arange(first, last + 1, stride)
    static = np.broadcast_to(layout.static_vector(frame.domain), (starts.size, len(layout.domains)))
    return WindowBatch(
        unknown[:, :lookback],
        known[:, :lookback],
        known[:, lookback:],
        static,
        target[:, lookback:],
        tmask[:, lookback:],
        starts,
        frame.start,
    )


def split_windows(windows: WindowBatch, val_fraction: float = 0.1) -> tuple[WindowBatch, WindowBatch]:
    """Chronological split: the last ``val_fraction`` of windows (at least one)."""
    n = len(windows)
    if n < 2:
        raise ContractError(f"need at least two windows to split, got {n}")
    n_val = max(1, int(round(n * val_fraction)))
    return windows[: n - n_val], windows[n - n_val :]


# -- file interfaces --------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_frame(frame: TimeSeriesFrame, csv_path, manifest_path=None) -> None:
    """CSV (timestamp + one column per channel, blank = missing) plus JSON manifest."""
    csv_path = Path(csv_path)
    manifest_path = Path(manifest_path) if manifest_path else csv_path.with_suffix(".manifest.json")
    stamps = frame.timestamps.strftime("%Y-%m-%dT%H:%M:%SZ")
    lines = [",".join(("timestamp",) + frame.channels)]
    for i, ts in enumerate(stamps):
        cells = [(_fmt(v) if m else "") for v, m in zip(frame.values[i], frame.mask[i])]
        lines.append(",".join([ts] + cells))
    csv_path.write_text("\n".join(lines) + "\n")
    manifest = {
        "domain": frame.domain,
        "holdout_start": frame.holdout_start,
        "channels": {
            c: {"kind": frame.kinds[c], "cumulative": c in frame.cumulative} for c in frame.channels
        },
        "history": list(frame.history),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")


def read_frame(csv_path, manifest_path=None) -> TimeSeriesFrame:
    """Read a CSV + manifest pair and resample it onto an hourly grid."""
    csv_path = Path(csv_path)
    manifest_path = Path(manifest_path) if manifest_path else csv_path.with_suffix(".manifest.json")
    if not csv_path.exists():
        raise IngestionError(f"{csv_path}: file not found")
    manifest = json.loads(Path(manifest_path).read_text())
    try:
        raw = pd.read_csv(csv_path, dtype={"timestamp": str}, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise IngestionError(f"{csv_path}: empty file") from None
    if "timestamp" not in raw.columns or raw.columns[0] != "timestamp":
        raise IngestionError(f"{csv_path}: first column must be 'timestamp'")
    if raw.empty:
        raise IngestionError(f"{csv_path}: no rows")
    stamps = pd.to_datetime(raw.pop("timestamp"), utc=True)
    raw.index = pd.DatetimeIndex(stamps)
    spec = manifest["channels"]
    unknown = [c for c in raw.columns if c not in spec]
    if unknown:
        raise IngestionError(f"{csv_path}: channels missing from manifest: {unknown}")
    raw = raw.astype(np.float64)
    frame = resample_hourly(
        raw,
        {c: spec[c]["kind"] for c in raw.columns},
        [c for c in raw.columns if spec[c].get("cumulative")],
        manifest.get("domain", "unknown"),
    )
    history = tuple(manifest.get("history", ()))
    return replace(frame, holdout_start=manifest.get("holdout_start"), history=history)


# -- synthetic two-building generator --------------------------------------


@dataclass(frozen=True)
class _BuildingProfile:
    domain: str
    start: str
    temp_mean: float
    temp_amp: float
    occupancy: str  # "office" or "residential"
    submeters: dict[str, tuple[float, float]]  # name -> (base load, occupancy gain)
    hvac_temp_slope: float  # +: cooling driven, -: heat-pump driven
    trend: float  # relative load growth over the series
    heating: tuple[str, ...]
    dhw: tuple[str, ...]
    sparse: str
    day_sd: float = 0.08  # day-to-day occupancy variation
    spike_rate: float = 1.0 / 72.0  # onsets per hour of short extra-load events


SOURCE_PROFILE = _BuildingProfile(
    domain="source",
    start="2022-05-01",
    temp_mean=9.0,
    temp_amp=8.0,
    occupancy="office",
    submeters={
        "elec_lighting": (20.0, 60.0),
        "elec_plugs": (30.0, 80.0),
        "elec_hvac": (25.0, 40.0),
        "elec_server": (40.0, 0.0),
        "elec_lab": (10.0, 50.0),
        "elec_kitchen": (5.0, 30.0),
    },
    hvac_temp_slope=3.0,
    trend=0.0,
    heating=("heat_zone_1", "heat_zone_2", "heat_zone_3"),
    dhw=("dhw_meter_1", "dhw_meter_2"),
    sparse="heat_aux",
)

TARGET_PROFILE = _BuildingProfile(
    domain="target",
    start="2024-01-08",
    temp_mean=4.0,
    temp_amp=9.0,
    occupancy="residential",
    submeters={
        "elec_lighting": (4.0, 14.0),
        "elec_plugs": (6.0, 18.0),
        "elec_hvac": (5.0, 4.0),
        "elec_unit_dfab": (3.0, 12.0),
        "elec_unit_hilo": (2.0, 8.0),
        "elec_unit_sprint": (5.0, 6.0),
        "elec_unit_umar": (3.0, 10.0),
    },
    hvac_temp_slope=-2.5,
    trend=0.05,
    heating=("heat_zone_1", "heat_nest_floor"),
    dhw=("dhw_meter_1", "dhw_nest"),
    sparse="heat_nest_aux",
)


def _occupancy(profile: _BuildingProfile, hod: np.ndarray, dow: np.ndarray) -> np.ndarray:
    weekend = dow >= 5
    if profile.occupancy == "office":
        day = np.exp(-(((hod - 13.0) / 3.2) ** 2))
        return np.where(weekend, 0.12 * day, day)
    morning = 0.55 * np.exp(-(((hod - 7.5) / 1.3) ** 2))
    evening = np.exp(-(((hod - 19.5) / 2.2) ** 2))
    midday = np.where(weekend, 0.5, 0.1) * np.exp(-(((hod - 13.0) / 3.0) ** 2))
    return morning + evening + midday


def _ar1(rng: np.random.Generator, n: int, phi: float, sigma: float) -> np.ndarray:
    eps = rng.normal(0.0, sigma, n)
    out = np.empty(n)
    acc = 0.0
    for i in range(n):
        acc = phi * acc + eps[i]
        out[i] = acc
    return out


def _simulate_building(profile: _BuildingProfile, hours: int, rng: np.random.Generator, noise_std: float, gaps: bool):
    """Clean sub-meter loads plus noisy covariates for one building."""
    stamps = pd.date_range(_utc(profile.start), periods=hours, freq="h")
    t = np.arange(hours, dtype=np.float64)
    hod = stamps.hour.to_numpy().astype(np.float64)
    dow = stamps.dayofweek.to_numpy()
    doy = stamps.dayofyear.to_numpy().astype(np.float64)

    temp = (
        profile.temp_mean
        + profile.temp_amp * np.sin(2 * math.pi * (doy - 110.0) / 365.25)
        + 3.0 * np.sin(2 * math.pi * (hod - 9.0) / 24.0)
        + _ar1(rng, hours, 0.95, 0.4)
    )
    cloud = np.clip(0.6 + _ar1(rng, hours, 0.9, 0.1), 0.0, 1.0)
    solar = np.clip(np.sin(math.pi * (hod - 6.0) / 12.0), 0.0, None) * cloud
    occ = _occupancy(profile, hod, dow)
    days = (t // 24).astype(int)
    daily_scale = 1.0 + profile.day_sd * rng.standard_normal(days.max() + 1)[days]
    growth = 1.0 + profile.trend * t / max(hours - 1, 1)

    # Occupancy-driven spikes: a few hours of extra load at random onsets.
    spikes = np.zeros(hours)
    for onset in np.flatnonzero(rng.random(hours) < profile.spike_rate):
        width = int(rng.integers(1, 4))
        spikes[onset : onset + width] += rng.uniform(0.2, 0.5)

    clean: dict[str, np.ndarray] = {}
    for name, (base, gain) in profile.submeters.items():
        load = base + gain * occ * daily_scale * (1.0 + spikes)
        if name == "elec_lighting":
            load = load - 0.3 * gain * occ * solar
        if name == "elec_hvac":
            load = load + abs(profile.hvac_temp_slope) * np.clip(
                np.sign(profile.hvac_temp_slope) * (temp - (18.0 if profile.hvac_temp_slope > 0 else 12.0)),
                0.0,
                None,
            )
        load = load + 0.02 * base * _ar1(rng, hours, 0.8, 1.0)
        clean[name] = np.clip(load * growth, 0.0, None)

    covariates: dict[str, np.ndarray] = {}
    for k, name in enumerate(profile.heating):
        covariates[name] = np.clip(16.0 - temp, 0.0, None) * (3.0 + 2.0 * occ) * (1.0 + 0.3 * k)
    for k, name in enumerate(profile.dhw):
        flow = (2.0 + 6.0 * occ) * (1.0 + 0.5 * k)
        covariates[name] = np.cumsum(flow)
    covariates[profile.sparse] = 5.0 + 2.0 * occ
    covariates["weather_temp"] = temp
    covariates["weather_solar"] = solar

    measured = {}
    for name, series in {**clean, **covariates}.items():
        if name in profile.dhw:
            measured[name] = series  # cumulative meters are exact
            continue
        scale = max(float(np.std(series)), 1e-3)
        measured[name] = series + noise_std * scale * rng.standard_normal(hours)

    masks = {name: np.ones(hours, dtype=bool) for name in measured}
    if gaps:
        # Short outages that interpolation repairs and one long outage it must not.
        for name in profile.heating:
            for onset in rng.integers(0, hours - 8, size=max(1, hours // 500)):
                masks[name][onset : onset + int(rng.integers(1, MAX_FILL_GAP + 1))] = False
        long_onset = int(rng.integers(hours // 4, hours // 2))
        masks[profile.heating[0]][long_onset : long_onset + 8] = False
        # Whole-day outages: too long to interpolate, so the channel stays sparse.
        n_days = -(-hours // 24)
        masks[profile.sparse] &= np.repeat(rng.random(n_days) >= 0.45, 24)[:hours]
        # One meter reset on the first DHW meter.
        reset = int(rng.integers(hours // 3, 2 * hours // 3))
        measured[profile.dhw[0]] = measured[profile.dhw[0]].copy()
        measured[profile.dhw[0]][reset:] -= measured[profile.dhw[0]][reset - 1]
    return stamps, clean, measured, masks


def synth_two_buildings(
    seed: int,
    source_hours: int = 13244,
    target_ft_hours: int = 4965,
    target_test_hours: int = 1437,
    noise_std: float = 0.05,
    gaps: bool = True,
    return_clean: bool = False,
):
    """Deterministic raw frames for a source and a shifted target building.

    Electricity sub-meters (``target_component``) sum to the building load;
    the target building has a residential occupancy pattern, a heat-pump
    rather than cooling HVAC response, lower load, a growth trend and its own
    sub-meters. The target frame's held-out test rows start after
    ``target_ft_hours``. With ``return_clean`` the noise-free sub-meter sums
    are returned as a third element ``{domain: aggregate}``.
    """
    root = np.random.SeedSequence(seed)
    s_rng, t_rng = (np.random.default_rng(s) for s in root.spawn(2))
    frames, aggregates = [], {}
    for profile, hours, rng, hold in (
        (SOURCE_PROFILE, source_hours, s_rng, None),
        (TARGET_PROFILE, target_ft_hours + target_test_hours, t_rng, target_ft_hours),
    ):
        stamps, clean, measured, masks = _simulate_building(profile, hours, rng, noise_std, gaps)
        names = list(measured)
        kinds = {}
        for n in names:
            if n in profile.submeters:
                kinds[n] = "target_component"
            elif n.startswith("weather_"):
                kinds[n] = "known_covariate"
            else:
                kinds[n] = "unknown_covariate"
        values = np.column_stack([measured[n] for n in names])
        mask = np.column_stack([masks[n] for n in names])
        frames.append(
            TimeSeriesFrame(
                start=stamps[0],
                channels=tuple(names),
                values=values,
                mask=mask,
                kinds=kinds,
                cumulative=frozenset(profile.dhw),
                domain=profile.domain,
                holdout_start=hold,
            )
        )
        aggregates[profile.domain] = np.sum([clean[n] for n in profile.submeters], axis=0)
    if return_clean:
        return frames[0], frames[1], aggregates
    return frames[0], frames[1]
