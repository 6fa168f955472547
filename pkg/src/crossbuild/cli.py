"""Command-line entry point: ``crossbuild <command> [--config ...] [--seed ...] [--jobs ...] [--out ...]``.

Each stage reads the previous stage's files under ``--out``::

    data/     raw frames (synth) or copies of the configured CSVs
    prep/     preprocessed, scaled, aligned frames + scalers + layout
    models/   checkpoints
    runs/     run records
    metrics/  per-model metric reports, scarcity rows, MC intervals
    report/   table1.csv, table2.csv, intervals.csv
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from . import transfer as X
from . import uncertainty as U
from .errors import ContractError, CrossbuildError
from .freeze import STRATEGIES, STRATEGY_ALIASES, make_plan
from .model import LSTMBaseline, TFTConfig, TFTLite, load_checkpoint, save_checkpoint

log = logging.getLogger("crossbuild")

ENV_PREFIX = "CROSSBUILD_"

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "n_runs": 1,
    "data": {
        "mode": "synthetic",
        "source_hours": 13244,
        "target_ft_hours": 4965,
        "target_test_hours": 1437,
        "source_csv": None,
        "target_csv": None,
    },
    "model": {"hidden_size": 64, "attention_heads": 4, "dropout_rate": 0.1, "lookback": 168, "horizon": 24},
    "stride": 1,
    "source_training": {"lr": 1e-3, "max_epochs": 50, "patience": 5, "batch_size": 64},
    "lstm_training": {"lr": 1e-3, "max_epochs": 30, "patience": 5, "batch_size": 64},
    "finetune": {"lr": 1e-4, "max_epochs": 20, "patience": 5, "batch_size": 64},
    "strategies": ["FF", "PF", "PO", "PU"],
    "scarcity": {"windows": [336, 720, 2160, "all"], "lr": 1e-4, "max_epochs": 15, "patience": 5, "batch_size": 64},
    "mc": {"n_passes": 50, "lower": 2.5, "upper": 97.5, "model": "FF"},
}


# -- configuration ----------------------------------------------------------


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, seed=None, out=None, jobs=None, environ=None) -> dict:
    """Defaults <- config file <- ``CROSSBUILD_*`` environment <- explicit flags."""
    environ = os.environ if environ is None else environ
    path = path or environ.get(ENV_PREFIX + "CONFIG")
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        p = Path(path)
        if not p.exists():
            raise ContractError(f"config file {p} does not exist")
        try:
            cfg = _merge(cfg, json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ContractError(f"config file {p} is not valid JSON: {exc}") from None
    for key, cast in (("seed", int), ("out", str), ("jobs", int)):
        if ENV_PREFIX + key.upper() in environ:
            cfg[key] = cast(environ[ENV_PREFIX + key.upper()])
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    if jobs is not None:
        cfg["jobs"] = jobs
    cfg.setdefault("out", "out")
    cfg.setdefault("jobs", 1)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    data = cfg["data"]
    if data["mode"] == "synthetic":
        pass
    elif data["mode"] == "files":
        for key in ("source_csv", "target_csv"):
            if not data.get(key) or not Path(data[key]).exists():
                raise ContractError(f"data.{key} must name an existing file, got {data.get(key)!r}")
    else:
        raise ContractError(f"data.mode must be 'synthetic' or 'files', got {data['mode']!r}")
    for s in cfg["strategies"]:
        if STRATEGY_ALIASES.get(s, s) not in STRATEGIES:
            raise ContractError(f"unknown strategy {s!r}")
    if int(cfg["n_runs"]) < 1 or int(cfg["jobs"]) < 1:
        raise ContractError("n_runs and jobs must be >= 1")
    U.MCDropoutConfig(**{k: v for k, v in cfg["mc"].items() if k != "model"})
    TFTConfig(**cfg["model"])


def _train_config(section: dict, seed: int) -> X.TrainConfig:
    keys = ("lr", "max_epochs", "patience", "clip_norm", "batch_size")
    return X.TrainConfig(seed=seed, **{k: section[k] for k in keys if k in section})


def run_seed(cfg: dict, i: int) -> int:
    return X.derive_seed(cfg["seed"], "run", i)


def _short(strategy: str) -> str:
    return make_plan(strategy).short_name


class Workspace:
    def __init__(self, out):
        self.root = Path(out)

    def dir(self, name: str) -> Path:
        p = self.root / name
        p.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise ContractError(f"{path} not found; run `crossbuild {stage}` first")
        return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _pmap(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*items)))


# -- stages -----------------------------------------------------------------


def cmd_synth(cfg: dict) -> None:
    ws = Workspace(cfg["out"])
    d = cfg["data"]
    src, tgt = D.synth_two_buildings(
        X.derive_seed(cfg["seed"], "data"), d["source_hours"], d["target_ft_hours"], d["target_test_hours"]
    )
    out = ws.dir("data")
    D.write_frame(src, out / "source.csv")
    D.write_frame(tgt, out / "target.csv")


def _raw_frames(cfg: dict, ws: Workspace):
    d = cfg["data"]
    if d["mode"] == "files":
        return D.read_frame(d["source_csv"], d.get("source_manifest")), D.read_frame(d["target_csv"], d.get("target_manifest"))
    data = ws.root / "data"
    if not (data / "source.csv").exists():
        cmd_synth(cfg)
    return D.read_frame(data / "source.csv"), D.read_frame(data / "target.csv")


def cmd_preprocess(cfg: dict) -> None:
    ws = Workspace(cfg["out"])
    src, tgt = _raw_frames(cfg, ws)
    prepared = X.prepare_domains(src, tgt)
    out = ws.dir("prep")
    meta = {"layout": prepared.layout.to_dict(), "dropped": prepared.dropped}
    for name, dd in (("source", prepared.source), ("target", prepared.target)):
        D.write_frame(dd.frame, out / f"{name}.csv")
        dd.scaler.save(out / f"{name}.scaler.json")
        meta[name] = {"train_range": list(dd.train_range), "eval_range": list(dd.eval_range)}
    _write_json(out / "prep.json", meta)


def load_prepared(ws: Workspace) -> X.PreparedData:
    prep = ws.root / "prep"
    meta = json.loads(ws.need(prep / "prep.json", "preprocess").read_text())
    layout = D.ChannelLayout.from_dict(meta["layout"])
    parts = {}
    for name in ("source", "target"):
        frame = D.read_frame(prep / f"{name}.csv")
        scaler = D.ScalerParams.load(prep / f"{name}.scaler.json")
        parts[name] = X.DomainData(frame, scaler, tuple(meta[name]["train_range"]), tuple(meta[name]["eval_range"]))
    return X.PreparedData(parts["source"], parts["target"], layout, meta["dropped"])


def _model_config(cfg: dict, prepared: X.PreparedData) -> TFTConfig:
    return prepared.model_config(**cfg["model"])


def _train_one(cfg: dict, i: int) -> None:
    ws = Workspace(cfg["out"])
    prepared = load_prepared(ws)
    mcfg = _model_config(cfg, prepared)
    seed = run_seed(cfg, i)
    train, val = prepared.source_windows(mcfg.lookback, mcfg.horizon, cfg["stride"])
    model = TFTLite(mcfg, seed=X.derive_seed(seed, "init", "tft"))
    _, mae_src, record = X.train_source(model, train, val, _train_config(cfg["source_training"], X.derive_seed(seed, "train", "source")))
    ckpt = ws.dir("models") / f"source_r{i}.ckpt"
    record.checkpoint = str(ckpt.name)
    save_checkpoint(model, ckpt, {"mae_source_val": mae_src, "run": i})
    _write_json(ws.dir("runs") / f"source_r{i}.json", {**record.to_dict(), "mae_source_val": mae_src})
    lstm, lrec = X.train_lstm_baseline(mcfg, train, val, _train_config(cfg["lstm_training"], X.derive_seed(seed, "train", "lstm")))
    save_checkpoint(lstm, ws.dir("models") / f"lstm_r{i}.ckpt", {"run": i})
    lrec.checkpoint = f"lstm_r{i}.ckpt"
    _write_json(ws.dir("runs") / f"lstm_r{i}.json", lrec.to_dict())


def cmd_train(cfg: dict) -> None:
    _pmap(_train_one, [(cfg, i) for i in range(cfg["n_runs"])], cfg["jobs"])


def _source_model(ws: Workspace, i: int):
    model, meta = load_checkpoint(ws.need(ws.root / "models" / f"source_r{i}.ckpt", "train"))
    return model, float(meta["mae_source_val"])


def _finetune_one(cfg: dict, i: int, strategy: str) -> None:
    ws = Workspace(cfg["out"])
    prepared = load_prepared(ws)
    model, _ = _source_model(ws, i)
    plan = make_plan(strategy, model.groups)
    c = model.config
    pool = prepared.target_pool_windows(c.lookback, c.horizon, cfg["stride"])
    tcfg = _train_config(cfg["finetune"], X.derive_seed(run_seed(cfg, i), "finetune", plan.short_name))
    tuned, record = X.fine_tune(model, plan, pool, tcfg)
    name = f"{plan.short_name}_r{i}"
    record.checkpoint = f"{name}.ckpt"
    save_checkpoint(tuned, ws.dir("models") / record.checkpoint, {"strategy": plan.strategy, "run": i})
    _write_json(ws.dir("runs") / f"{name}.json", record.to_dict())


def cmd_finetune(cfg: dict) -> None:
    jobs = [(cfg, i, s) for i in range(cfg["n_runs"]) for s in cfg["strategies"]]
    _pmap(_finetune_one, jobs, cfg["jobs"])


def cmd_eval(cfg: dict) -> None:
    ws = Workspace(cfg["out"])
    prepared = load_prepared(ws)
    reports = {}
    for i in range(cfg["n_runs"]):
        source, mae_src = _source_model(ws, i)
        c = source.config
        test = prepared.target_test_windows(c.lookback, c.horizon)
        if len(test) == 0 or not np.asarray(test.loss_mask).any():
            raise ContractError("target test set is empty; nothing to evaluate")
        runs = {
            "Persistence": M.point_report("Persistence", X.persistence_windows(test, prepared.layout), test.target, test.loss_mask),
            "DirectTransfer": X.direct_transfer_eval(source, test, mae_src),
        }
        lstm_path = ws.root / "models" / f"lstm_r{i}.ckpt"
        if lstm_path.exists():
            runs["LSTM"] = X.evaluate(load_checkpoint(lstm_path)[0], test, "LSTM")
        for s in cfg["strategies"]:
            short = _short(s)
            tuned, _ = load_checkpoint(ws.need(ws.root / "models" / f"{short}_r{i}.ckpt", "finetune"))
            runs[short] = X.evaluate(tuned, test, short, mae_src)
        reports[i] = (runs, mae_src)
    # Write only after every run evaluated, so a failure leaves no partial report.
    out = ws.dir("metrics")
    for i, (runs, mae_src) in reports.items():
        for name, rep in runs.items():
            rep.save(out / f"{name}_r{i}.json")
        _write_json(out / f"source_r{i}.json", {"mae_source_val": mae_src})


def cmd_mc(cfg: dict) -> None:
    ws = Workspace(cfg["out"])
    prepared = load_prepared(ws)
    mc = cfg["mc"]
    short = _short(mc.get("model", "FF"))
    for i in range(cfg["n_runs"]):
        model, _ = load_checkpoint(ws.need(ws.root / "models" / f"{short}_r{i}.ckpt", "finetune"))
        c = model.config
        test = prepared.target_test_windows(c.lookback, c.horizon, stride=c.horizon)
        mcfg = U.MCDropoutConfig(mc["n_passes"], mc["lower"], mc["upper"], X.derive_seed(run_seed(cfg, i), "mc"))
        forecast = U.mc_dropout_predict(model, test, mcfg, short)
        out = ws.dir("metrics")
        U.write_intervals(forecast, test, out / f"intervals_r{i}.csv")
        summary = {
            "model": short,
            "n_passes": mcfg.n_passes,
            "picp": U.picp(forecast, test.target, test.loss_mask),
            "miw": U.miw(forecast, test.loss_mask),
            "mae_mean": M.mae(forecast.mean, test.target, test.loss_mask),
        }
        _write_json(out / f"mc_r{i}.json", summary)


def _scarcity_one(cfg: dict, i: int) -> None:
    ws = Workspace(cfg["out"])
    prepared = load_prepared(ws)
    model, mae_src = _source_model(ws, i)
    sc = cfg["scarcity"]
    out = ws.dir("metrics") / f"scarcity_r{i}.json"
    rows = []
    for w in sc["windows"]:
        # One window at a time so an interrupted sweep keeps finished rows.
        (row,) = X.scarcity_sweep(
            model, prepared, [w], _train_config(sc, 0), mae_src, root_seed=run_seed(cfg, i), stride=cfg["stride"]
        )
        rows.append({"label": row.label, "hours": row.hours, "mae": row.mae, "tri": row.tri})
        _write_json(out, {"mae_source_val": mae_src, "rows": rows})


def cmd_scarcity(cfg: dict) -> None:
    _pmap(_scarcity_one, [(cfg, i) for i in range(cfg["n_runs"])], cfg["jobs"])


def _median(xs):
    xs = [x for x in xs if x is not None and not (isinstance(x, float) and np.isnan(x))]
    return statistics.median(xs) if xs else float("nan")


def cmd_report(cfg: dict) -> None:
    """Aggregate per-run metrics (median over runs) into the report CSVs."""
    ws = Workspace(cfg["out"])
    metrics = ws.root / "metrics"
    n = cfg["n_runs"]
    mae_src = _median(
        [json.loads(ws.need(metrics / f"source_r{i}.json", "eval").read_text())["mae_source_val"] for i in range(n)]
    )
    names = ["Persistence", "LSTM", "DirectTransfer"] + [_short(s) for s in cfg["strategies"]]
    reports = []
    for name in names:
        runs = [metrics / f"{name}_r{i}.json" for i in range(n)]
        if not all(p.exists() for p in runs):
            continue
        loaded = [M.MetricsReport.load(p) for p in runs]
        r2 = _median([r.r_squared for r in loaded if r.r_squared_defined])
        reports.append(
            M.MetricsReport(
                model_id=name,
                mae=_median([r.mae for r in loaded]),
                rmse=_median([r.rmse for r in loaded]),
                r_squared=r2,
                n_points=loaded[0].n_points,
                r_squared_defined=not np.isnan(r2),
            )
        )
    out = ws.dir("report")
    M.write_csv(M.build_table(reports, mae_src), out / "table1.csv")
    sweeps = [metrics / f"scarcity_r{i}.json" for i in range(n)]
    if all(p.exists() for p in sweeps):
        rows = [json.loads(p.read_text())["rows"] for p in sweeps]
        table = []
        for k, first in enumerate(rows[0]):
            table.append((first["label"], first["hours"], _median([r[k]["mae"] for r in rows if k < len(r)])))
        M.write_csv(M.build_scarcity_table(table, mae_src), out / "table2.csv")
    intervals = metrics / "intervals_r0.csv"
    if intervals.exists():
        (out / "intervals.csv").write_bytes(intervals.read_bytes())


def cmd_run(cfg: dict) -> None:
    """Every stage in order."""
    if cfg["data"]["mode"] == "synthetic":
        cmd_synth(cfg)
    for stage in (cmd_preprocess, cmd_train, cmd_finetune, cmd_eval, cmd_mc, cmd_scarcity, cmd_report):
        log.info("stage %s", stage.__name__)
        stage(cfg)


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "mc": cmd_mc,
    "scarcity": cmd_scarcity,
    "report": cmd_report,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossbuild", description="Cross-building transfer forecasting experiments.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--seed", type=int, help="root seed (overrides config)")
    parser.add_argument("--jobs", type=int, help="parallel worker processes")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out, args.jobs)
        COMMANDS[args.command](cfg)
    except CrossbuildError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
