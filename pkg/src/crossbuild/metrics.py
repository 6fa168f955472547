"""Point metrics, the Transfer Robustness Index and table assembly."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError

TRI_EPS = 1e-8

TABLE1_HEADER = ("model", "MAE", "RMSE", "R2", "TRI")
TABLE2_HEADER = ("window", "hours", "MAE", "TRI")
BASELINE_MODELS = ("Persistence", "LSTM")
TABLE1_ORDER = ("Persistence", "LSTM", "DirectTransfer", "FF", "PF", "PO", "PU")


def _masked(pred, truth, mask=None) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    keep = np.ones(truth.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not keep.any():
        raise ContractError("every point is masked; nothing to score")
    return pred[keep], truth[keep]


def mae(pred, truth, mask=None) -> float:
    p, y = _masked(pred, truth, mask)
    return float(np.mean(np.abs(y - p)))


def rmse(pred, truth, mask=None) -> float:
    p, y = _masked(pred, truth, mask)
    return float(np.sqrt(np.mean((y - p) ** 2)))


def r_squared(pred, truth, mask=None) -> float:
    """Coefficient of determination; NaN when the truth has zero variance."""
    p, y = _masked(pred, truth, mask)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return math.nan
    return 1.0 - float(np.sum((y - p) ** 2)) / ss_tot


def compute_tri(mae_source_val: float, mae_target_test: float) -> float:
    """Source-validation MAE over target-test MAE, each in its own normalised scale."""
    if mae_source_val < 0 or mae_target_test < 0:
        raise ContractError(
            f"TRI needs non-negative MAEs, got source={mae_source_val}, target={mae_target_test}"
        )
    return mae_source_val / (mae_target_test + TRI_EPS)


@dataclass
class MetricsReport:
    model_id: str
    mae: float
    rmse: float
    r_squared: float
    n_points: int
    source_domain: str = "source"
    target_domain: str = "target"
    r_squared_defined: bool = True
    tri: float | None = None
    picp: float | None = None
    miw: float | None = None

    def __post_init__(self):
        if self.n_points <= 0:
            raise ContractError("MetricsReport needs at least one point")

    def to_dict(self) -> dict:
        d = asdict(self)
        if not self.r_squared_defined:
            d["r_squared"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        if d.get("r_squared") is None:
            d["r_squared"] = math.nan
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def point_report(
    model_id: str,
    pred,
    truth,
    mask=None,
    mae_source_val: float | None = None,
    source_domain: str = "source",
    target_domain: str = "target",
) -> MetricsReport:
    p, y = _masked(pred, truth, mask)
    r2 = r_squared(p, y)
    m = mae(p, y)
    return MetricsReport(
        model_id=model_id,
        mae=m,
        rmse=rmse(p, y),
        r_squared=r2,
        n_points=int(p.size),
        source_domain=source_domain,
        target_domain=target_domain,
        r_squared_defined=not math.isnan(r2),
        tri=None if mae_source_val is None else compute_tri(mae_source_val, m),
    )


def _num(x: float | None) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "--"
    return f"{x:.6g}"


def build_table(reports: Iterable[MetricsReport], mae_source_val: float) -> list[list[str]]:
    """Table-1 shaped rows: header, then one row per model.

    Baselines trained without transfer (Persistence, LSTM) carry no TRI.
    Rows follow the canonical model order, unknown models last.
    """
    reports = list(reports)
    rank = {m: i for i, m in enumerate(TABLE1_ORDER)}
    reports.sort(key=lambda r: (rank.get(r.model_id, len(rank)), r.model_id))
    rows = [list(TABLE1_HEADER)]
    for r in reports:
        tri = None if r.model_id in BASELINE_MODELS else compute_tri(mae_source_val, r.mae)
        r2 = r.r_squared if r.r_squared_defined else None
        rows.append([r.model_id, _num(r.mae), _num(r.rmse), _num(r2), _num(tri)])
    return rows


def build_scarcity_table(sweep: Sequence[tuple[str, int, float]], mae_source_val: float) -> list[list[str]]:
    """Table-2 shaped rows from ``(label, hours, mae)`` triples."""
    rows = [list(TABLE2_HEADER)]
    for label, hours, m in sweep:
        rows.append([label, str(int(hours)), _num(m), _num(compute_tri(mae_source_val, m))])
    return rows


def rows_to_csv(rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def write_csv(rows: Sequence[Sequence[str]], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(rows_to_csv(rows))
