"""Source training, layer-freezing fine-tuning, baselines and the data-scarcity sweep."""

from __future__ import annotations

import json
import logging
import time
import warnings
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import data as D
from . import tensor as T
from .errors import ContractError
from .freeze import STRATEGIES, FreezePlan, make_plan
from .metrics import MetricsReport, compute_tri, mae, point_report
from .model import LSTMBaseline, TFTConfig, TFTLite, count_trainable, quantile_loss

log = logging.getLogger(__name__)

SCARCITY_WINDOWS = (336, 720, 2160, "all")
SCARCITY_LABELS = {336: "2 weeks", 720: "1 month", 2160: "3 months", "all": "All data"}


def derive_seed(root: int, *labels) -> int:
    """Child seed for a labelled component, e.g. ``derive_seed(7, "finetune", "PO", 0)``."""
    key = tuple(zlib.crc32(str(label).encode()) for label in labels)
    return int(np.random.SeedSequence(int(root), spawn_key=key).generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    max_epochs: int = 50
    patience: int = 5
    clip_norm: float = 0.1
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        # lr == 0 is accepted and means "no optimizer updates".
        if self.lr < 0 or self.max_epochs <= 0 or self.patience <= 0:
            raise ContractError(f"invalid TrainConfig {self}")
        if self.clip_norm <= 0 or self.batch_size <= 0:
            raise ContractError(f"invalid TrainConfig {self}")
        if self.patience > self.max_epochs:
            raise ContractError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")


SOURCE_TRAINING = TrainConfig(lr=1e-3, max_epochs=50)
FINE_TUNING = TrainConfig(lr=1e-4, max_epochs=20)
SCARCITY_TUNING = TrainConfig(lr=1e-4, max_epochs=15)


@dataclass
class RunRecord:
    strategy: str
    seed: int
    epochs_run: int
    best_val_loss: float
    val_history: list[float] = field(default_factory=list)
    n_trainable: int = 0
    checkpoint: str | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- data preparation -------------------------------------------------------


@dataclass
class DomainData:
    frame: D.TimeSeriesFrame  # preprocessed, scaled, calendar features, aligned
    scaler: D.ScalerParams
    train_range: tuple[int, int]
    eval_range: tuple[int, int]  # source: validation rows, target: test rows


@dataclass
class PreparedData:
    source: DomainData
    target: DomainData
    layout: D.ChannelLayout
    dropped: dict[str, list[str]] = field(default_factory=dict)

    def model_config(self, **overrides) -> TFTConfig:
        return TFTConfig(
            n_unknown_channels=len(self.layout.unknown),
            n_known_channels=len(self.layout.known),
            n_static=len(self.layout.domains),
            **overrides,
        )

    def source_windows(self, lookback: int, horizon: int, stride: int = 1):
        f = self.source.frame
        train = D.make_windows(f, self.layout, lookback, horizon, stride, self.source.train_range)
        val = D.make_windows(f, self.layout, lookback, horizon, stride, self.source.eval_range)
        return train, val

    def target_pool_windows(self, lookback: int, horizon: int, stride: int = 1, hours: int | None = None):
        lo, hi = self.target.train_range
        if hours is not None:
            hi = min(hi, lo + hours)
        return D.make_windows(self.target.frame, self.layout, lookback, horizon, stride, (lo, hi))

    def target_test_windows(self, lookback: int, horizon: int, stride: int = 1):
        return D.make_windows(self.target.frame, self.layout, lookback, horizon, stride, self.target.eval_range)


def _scaled(frame: D.TimeSeriesFrame, fit_range: tuple[int, int]):
    scaler = D.fit_scaler(frame, fit_range)
    return D.add_calendar_features(D.apply_scaler(frame, scaler)), scaler


def prepare_domains(
    source_raw: D.TimeSeriesFrame,
    target_raw: D.TimeSeriesFrame,
    source_val_fraction: float = 0.1,
) -> PreparedData:
    """Preprocess both buildings, scale each on its own training rows, align channels.

    Source rows split chronologically into train and validation. Target rows
    before ``holdout_start`` form the fine-tuning pool; the rest is the test set.
    """
    src, tgt = D.preprocess(source_raw), D.preprocess(target_raw)
    src_dropped = [c for c in source_raw.channels if c not in src.channels]
    tgt_dropped = [c for c in target_raw.channels if c not in tgt.channels]
    n_src = src.n_steps
    split = int(round(n_src * (1.0 - source_val_fraction)))
    if not 0 < split < n_src:
        raise ContractError(f"source validation split {split} of {n_src} rows is empty")
    if tgt.holdout_start is None or not 0 < tgt.holdout_start < tgt.n_steps:
        raise ContractError("target frame needs a holdout_start separating pool and test rows")
    src, src_scaler = _scaled(src, (0, split))
    tgt, tgt_scaler = _scaled(tgt, (0, tgt.holdout_start))
    layout = D.canonical_layout(src, tgt)
    return PreparedData(
        source=DomainData(D.align_channels(src, layout), src_scaler, (0, split), (split, n_src)),
        target=DomainData(
            D.align_channels(tgt, layout),
            tgt_scaler,
            (0, tgt.holdout_start),
            (tgt.holdout_start, tgt.n_steps),
        ),
        layout=layout,
        dropped={"source": src_dropped, "target": tgt_dropped},
    )


# -- training ---------------------------------------------------------------


def _batch_loss(model, batch: D.WindowBatch, rng) -> T.Tensor:
    out = model.forward(batch, training=True, rng=rng)
    if isinstance(model, TFTLite):
        return quantile_loss(out, batch.target, model.config.quantiles, batch.loss_mask)
    err = T.abs_(T.sub(out, np.asarray(batch.target)))
    w = np.asarray(batch.loss_mask, dtype=np.float64)
    return T.sum_(T.mul(err, w / w.sum()))


def validation_loss(model, windows: D.WindowBatch) -> float:
    """Quantile loss (TFT) or MAE (LSTM) in eval mode."""
    pred = model.predict(windows)
    if isinstance(model, TFTLite):
        return float(quantile_loss(pred, windows.target, model.config.quantiles, windows.loss_mask).data)
    return mae(pred, windows.target, windows.loss_mask)


def fit(
    model,
    train: D.WindowBatch,
    val: D.WindowBatch,
    config: TrainConfig,
    trainable_groups=None,
    label: str = "train",
) -> RunRecord:
    """Minibatch Adam with global clipping and early stopping on ``val``.

    Only ``trainable_groups`` (default: all) get gradients and updates. The
    model ends at its best validation epoch; the untrained state counts as
    epoch 0.
    """
    if len(train) == 0 or len(val) == 0:
        raise ContractError(f"{label}: empty window set (train={len(train)}, val={len(val)})")
    t0 = time.perf_counter()
    groups = list(model.groups) if trainable_groups is None else list(trainable_groups)
    model.set_trainable(groups)
    params = model.parameters(groups)
    state = T.AdamState()
    shuffle_seq, dropout_seq = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)

    best = validation_loss(model, val)
    best_state = model.state()
    history = [best]
    stale = 0
    epochs = 0
    valid_rows = np.asarray(train.loss_mask).any(axis=1)
    for epoch in range(1, config.max_epochs + 1):
        epochs = epoch
        order = shuffle_rng.permutation(len(train))
        order = order[valid_rows[order]]
        for lo in range(0, order.size, config.batch_size):
            batch = train[np.sort(order[lo : lo + config.batch_size])]
            with T.Tape() as tape:
                loss = _batch_loss(model, batch, dropout_rng)
            tape.backward(loss)
            T.grad_clip_global(params.values(), config.clip_norm)
            if config.lr > 0:
                T.adam_step(params, {k: p.grad for k, p in params.items()}, state, config.lr)
            model.zero_grad()
        current = validation_loss(model, val)
        history.append(current)
        log.debug("%s epoch %d val %.6f", label, epoch, current)
        if current < best:
            best, best_state, stale = current, model.state(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state(best_state)
    model.set_trainable(model.groups)
    return RunRecord(
        strategy=label,
        seed=config.seed,
        epochs_run=epochs,
        best_val_loss=best,
        val_history=history,
        n_trainable=sum(p.size for p in params.values()),
        wall_time=time.perf_counter() - t0,
    )


def median_forecast(model, windows: D.WindowBatch) -> np.ndarray:
    pred = model.predict(windows)
    return pred[..., model.config.median_index] if pred.ndim == 3 else pred


def train_source(
    model: TFTLite, source_windows: D.WindowBatch, val_windows: D.WindowBatch, config: TrainConfig = SOURCE_TRAINING
) -> tuple[TFTLite, float, RunRecord]:
    """Train on the source building; returns the model, its validation MAE and the run record."""
    record = fit(model, source_windows, val_windows, config, label="source")
    mae_val = mae(median_forecast(model, val_windows), val_windows.target, val_windows.loss_mask)
    return model, mae_val, record


def train_lstm_baseline(
    config: TFTConfig, source_windows, val_windows, train_config: TrainConfig
) -> tuple[LSTMBaseline, RunRecord]:
    model = LSTMBaseline(config, seed=train_config.seed)
    record = fit(model, source_windows, val_windows, train_config, label="LSTM")
    return model, record


def fine_tune(
    model: TFTLite,
    plan: FreezePlan,
    target_ft_windows: D.WindowBatch,
    config: TrainConfig = FINE_TUNING,
    val_fraction: float = 0.1,
) -> tuple[TFTLite, RunRecord]:
    """Adapt a copy of ``model`` to the target with the plan's groups trainable.

    Frozen groups are never updated; the optimizer starts fresh. Early
    stopping uses the last ``val_fraction`` of the windows.
    """
    plan.validate(model.groups)
    tuned = model.clone()
    train, val = D.split_windows(target_ft_windows, val_fraction)
    record = fit(tuned, train, val, config, sorted(plan.trainable_groups), label=plan.short_name)
    record.n_trainable = count_trainable(tuned, plan)
    return tuned, record


def evaluate(model, windows: D.WindowBatch, model_id: str, mae_source_val: float | None = None) -> MetricsReport:
    return point_report(model_id, median_forecast(model, windows), windows.target, windows.loss_mask, mae_source_val)


def direct_transfer_eval(model: TFTLite, target_test_windows: D.WindowBatch, mae_source_val: float | None = None) -> MetricsReport:
    """Score the source model on target windows without any parameter update."""
    return evaluate(model, target_test_windows, "DirectTransfer", mae_source_val)


def persistence_forecast(series, t: int, horizon: int = 24, season: int = 24) -> np.ndarray:
    """Seasonal-naive forecast for steps ``t .. t+horizon-1``: ``value(s - season)``."""
    series = np.asarray(series, dtype=np.float64)
    if t < season:
        raise ContractError(f"persistence needs {season} h of history, got t={t}")
    if horizon > season:
        raise ContractError("persistence horizon may not exceed the season length")
    return series[t - season : t - season + horizon].copy()


def persistence_windows(windows: D.WindowBatch, layout: D.ChannelLayout, season: int = 24) -> np.ndarray:
    """Persistence forecast for every window, read from the encoder history."""
    j = layout.unknown.index(D.TARGET)
    enc = np.asarray(windows.encoder_unknown[:, :, j])
    horizon = windows.target.shape[1]
    lookback = enc.shape[1]
    if lookback < season or horizon > season:
        raise ContractError("persistence needs lookback >= season >= horizon")
    return enc[:, lookback - season : lookback - season + horizon].copy()


# -- scarcity ---------------------------------------------------------------


@dataclass
class ScarcityRow:
    label: str
    hours: int
    mae: float
    tri: float
    record: RunRecord


def scarcity_sweep(
    model: TFTLite,
    prepared: PreparedData,
    windows_hours=SCARCITY_WINDOWS,
    config: TrainConfig = SCARCITY_TUNING,
    mae_source_val: float = 1.0,
    root_seed: int = 0,
    stride: int = 1,
) -> list[ScarcityRow]:
    """Full fine-tuning on chronological prefixes of the target pool.

    Each prefix gets its own seed and is scored on the same test windows.
    Prefixes longer than the pool are clamped to the whole pool.
    """
    cfg = model.config
    lo, hi = prepared.target.train_range
    pool = hi - lo
    test = prepared.target_test_windows(cfg.lookback, cfg.horizon)
    plan = make_plan("FullFinetune", model.groups)
    rows = []
    for spec in windows_hours:
        if spec == "all":
            hours = pool
        else:
            hours = int(spec)
            if hours > pool:
                warnings.warn(f"scarcity window {hours} h exceeds the {pool} h pool; using all data", stacklevel=2)
                hours = pool
        label = SCARCITY_LABELS.get(spec, f"{hours} h")
        windows = prepared.target_pool_windows(cfg.lookback, cfg.horizon, stride, hours)
        run_cfg = replace(config, seed=derive_seed(root_seed, "scarcity", spec))
        tuned, record = fine_tune(model, plan, windows, run_cfg)
        record.strategy = f"scarcity:{label}"
        m = mae(median_forecast(tuned, test), test.target, test.loss_mask)
        rows.append(ScarcityRow(label, hours, m, compute_tri(mae_source_val, m), record))
    return rows


# -- the experiment matrix --------------------------------------------------


@dataclass
class TransferResult:
    seed: int
    mae_source_val: float
    source_model: TFTLite
    reports: dict[str, MetricsReport]
    records: dict[str, RunRecord]
    tuned: dict[str, TFTLite]
    lstm: LSTMBaseline | None = None


def run_transfer_matrix(
    prepared: PreparedData,
    model_config: TFTConfig,
    seed: int,
    strategies=STRATEGIES,
    source_config: TrainConfig = SOURCE_TRAINING,
    finetune_config: TrainConfig = FINE_TUNING,
    lstm_config: TrainConfig | None = None,
    stride: int = 1,
    source_model: TFTLite | None = None,
) -> TransferResult:
    """Source training, every freezing strategy, and the three baselines for one seed."""
    L, H = model_config.lookback, model_config.horizon
    src_train, src_val = prepared.source_windows(L, H, stride)
    pool = prepared.target_pool_windows(L, H, stride)
    test = prepared.target_test_windows(L, H)
    records: dict[str, RunRecord] = {}
    if source_model is None:
        source_model = TFTLite(model_config, seed=derive_seed(seed, "init", "tft"))
        _, mae_src, records["source"] = train_source(
            source_model, src_train, src_val, replace(source_config, seed=derive_seed(seed, "train", "source"))
        )
    else:
        mae_src = mae(median_forecast(source_model, src_val), src_val.target, src_val.loss_mask)

    reports = {
        "Persistence": point_report("Persistence", persistence_windows(test, prepared.layout), test.target, test.loss_mask),
        "DirectTransfer": direct_transfer_eval(source_model, test, mae_src),
    }
    lstm = None
    if lstm_config is not None:
        lstm, records["LSTM"] = train_lstm_baseline(
            model_config, src_train, src_val, replace(lstm_config, seed=derive_seed(seed, "train", "lstm"))
        )
        reports["LSTM"] = evaluate(lstm, test, "LSTM")
    tuned = {}
    for strategy in strategies:
        plan = make_plan(strategy, source_model.groups)
        cfg = replace(finetune_config, seed=derive_seed(seed, "finetune", plan.short_name))
        tuned[plan.short_name], records[plan.short_name] = fine_tune(source_model, plan, pool, cfg)
        reports[plan.short_name] = evaluate(tuned[plan.short_name], test, plan.short_name, mae_src)
    return TransferResult(seed, mae_src, source_model, reports, records, tuned, lstm)
