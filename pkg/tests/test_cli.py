import json
from pathlib import Path

import pytest

from crossbuild import cli
from crossbuild.errors import ContractError

SMOKE = Path(__file__).resolve().parent.parent / "configs" / "smoke.json"


def _digest(root: Path, sub: str) -> dict:
    return {p.name: p.read_bytes() for p in sorted((root / sub).iterdir())}


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert cli.main(["run", "--config", str(SMOKE), "--out", str(out)]) == 0
    return out


class TestConfig:
    def test_precedence(self, tmp_path):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"seed": 1, "stride": 3}))
        env = {"CROSSBUILD_SEED": "2", "CROSSBUILD_JOBS": "2"}
        cfg = cli.load_config(str(cfg_file), environ=env)
        assert (cfg["seed"], cfg["stride"], cfg["jobs"]) == (2, 3, 2)
        assert cli.load_config(str(cfg_file), seed=5, environ=env)["seed"] == 5
        assert cli.load_config(environ={"CROSSBUILD_CONFIG": str(cfg_file)})["stride"] == 3

    def test_nested_merge_keeps_defaults(self, tmp_path):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"model": {"hidden_size": 4}}))
        cfg = cli.load_config(str(cfg_file), environ={})
        assert cfg["model"]["hidden_size"] == 4 and cfg["model"]["lookback"] == 168

    @pytest.mark.parametrize(
        "bad",
        [
            {"strategies": ["FF", "Everything"]},
            {"data": {"mode": "ftp"}},
            {"data": {"mode": "files", "source_csv": "/nope.csv"}},
            {"n_runs": 0},
            {"mc": {"n_passes": 1}},
        ],
    )
    def test_invalid(self, tmp_path, bad):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps(bad))
        with pytest.raises(ContractError):
            cli.load_config(str(cfg_file), environ={})

    def test_run_seeds_distinct(self):
        cfg = cli.load_config(environ={})
        assert len({cli.run_seed(cfg, i) for i in range(5)}) == 5


class TestMain:
    def test_error_is_json_with_exit_code(self, tmp_path, capsys):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"strategies": ["Everything"]}))
        code = cli.main(["report", "--config", str(cfg_file), "--out", str(tmp_path)])
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert code == 2 == err["exit_code"]
        assert err["error"] == "ContractError" and "Everything" in err["message"]

    def test_missing_stage_output(self, tmp_path, capsys):
        code = cli.main(["train", "--config", str(SMOKE), "--out", str(tmp_path)])
        assert code != 0
        assert "error" in json.loads(capsys.readouterr().err.strip().splitlines()[-1])

    def test_synth_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert cli.main(["synth", "--config", str(SMOKE), "--out", str(tmp_path / name)]) == 0
        assert _digest(tmp_path / "a", "data") == _digest(tmp_path / "b", "data")

    def test_empty_test_set_leaves_no_report(self, tmp_path, capsys):
        cfg = json.loads(SMOKE.read_text())
        cfg["data"]["target_test_hours"] = 12
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps(cfg))
        args = ["--config", str(cfg_file), "--out", str(tmp_path / "o")]
        for stage in ("synth", "preprocess", "train", "finetune"):
            assert cli.main([stage] + args) == 0
        assert cli.main(["eval"] + args) == 2
        assert "empty" in capsys.readouterr().err
        metrics = tmp_path / "o" / "metrics"
        assert not metrics.exists() or not any(metrics.iterdir())


class TestSmokeRun:
    def test_table1_rows(self, smoke_run):
        lines = (smoke_run / "report" / "table1.csv").read_text().splitlines()
        names = [line.split(",")[0] for line in lines[1:]]
        assert names == ["Persistence", "LSTM", "DirectTransfer", "FF", "PF", "PO", "PU"]

    def test_table2_and_intervals(self, smoke_run):
        assert len((smoke_run / "report" / "table2.csv").read_text().splitlines()) == 3
        header = (smoke_run / "report" / "intervals.csv").read_text().splitlines()[0]
        assert header == "timestamp,truth,mean,lower,upper,std"

    def test_rerun_is_byte_identical(self, smoke_run, tmp_path):
        assert cli.main(["run", "--config", str(SMOKE), "--out", str(tmp_path)]) == 0
        assert _digest(smoke_run, "report") == _digest(tmp_path, "report")

    def test_other_seed_differs(self, smoke_run, tmp_path):
        assert cli.main(["run", "--config", str(SMOKE), "--out", str(tmp_path), "--seed", "1"]) == 0
        assert _digest(smoke_run, "report") != _digest(tmp_path, "report")

    def test_parallel_jobs_match_serial(self, smoke_run, tmp_path):
        assert cli.main(["run", "--config", str(SMOKE), "--out", str(tmp_path), "--jobs", "2"]) == 0
        assert _digest(smoke_run, "report") == _digest(tmp_path, "report")
