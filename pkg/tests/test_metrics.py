import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from crossbuild import metrics as M
from crossbuild.errors import ContractError

MAE_SOURCE = 15.745

# Reference (MAE, TRI) pairs for the transfer and scarcity rows.
RESULT_ROWS = {
    "DirectTransfer": (15.037, 1.05),
    "FF": (0.0068, 2323.0),
    "PF": (0.0145, 1085.0),
    "PO": (0.0051, 3097.0),
    "PU": (0.0170, 928.0),
}
SCARCITY_ROWS = {336: (0.404, 38.9), 720: (0.399, 39.4), 2160: (0.163, 96.8), 4965: (0.053, 299.0)}

vec = st.lists(st.floats(-100, 100), min_size=2, max_size=30)


class TestPointMetrics:
    def test_perfect(self):
        y = np.array([1.0, 2.0, 4.0])
        assert M.mae(y, y) == 0 and M.rmse(y, y) == 0 and M.r_squared(y, y) == 1.0

    def test_mean_prediction_r2_zero(self):
        y = np.array([1.0, 2.0, 6.0])
        assert M.r_squared(np.full(3, y.mean()), y) == pytest.approx(0.0)

    def test_hand_oracle(self):
        truth, pred = np.array([0.0, 1.0]), np.array([1.0, 0.0])
        assert (M.mae(pred, truth), M.rmse(pred, truth), M.r_squared(pred, truth)) == (1.0, 1.0, -3.0)

    def test_mask(self):
        truth = np.array([0.0, 10.0, 2.0])
        pred = np.array([1.0, 0.0, 2.0])
        assert M.mae(pred, truth, [True, False, True]) == 0.5

    def test_all_masked(self):
        with pytest.raises(ContractError):
            M.mae([1.0], [1.0], [False])

    def test_zero_variance_sentinel(self):
        rep = M.point_report("x", [1.0, 2.0], [3.0, 3.0])
        assert math.isnan(rep.r_squared) and not rep.r_squared_defined
        assert rep.to_dict()["r_squared"] is None

    @given(vec, vec)
    def test_rmse_at_least_mae(self, a, b):
        n = min(len(a), len(b))
        p, y = np.array(a[:n]), np.array(b[:n])
        assert M.rmse(p, y) >= M.mae(p, y) - 1e-12


class TestTRI:
    @pytest.mark.parametrize("model", sorted(RESULT_ROWS))
    def test_result_table(self, model):
        mae, expected = RESULT_ROWS[model]
        assert M.compute_tri(MAE_SOURCE, mae) == pytest.approx(expected, rel=0.01)

    @pytest.mark.parametrize("hours", sorted(SCARCITY_ROWS))
    def test_scarcity_table(self, hours):
        mae, expected = SCARCITY_ROWS[hours]
        assert M.compute_tri(MAE_SOURCE, mae) == pytest.approx(expected, rel=0.01)

    def test_identity_and_floor(self):
        assert M.compute_tri(1.0, 1.0) == pytest.approx(1.0)
        assert M.compute_tri(3.0, 0.0) == pytest.approx(3.0e8)

    def test_negative(self):
        with pytest.raises(ContractError):
            M.compute_tri(-1.0, 1.0)

    @given(st.floats(1e-3, 100), st.floats(1e-3, 100), st.floats(1e-3, 100))
    def test_monotone(self, src, a, b):
        assume(abs(a - b) > 1e-9 * max(a, b))
        lo, hi = sorted((a, b))
        assert M.compute_tri(src, lo) > M.compute_tri(src, hi)
        assert M.compute_tri(hi, src) > M.compute_tri(lo, src)


def report(name, mae):
    return M.MetricsReport(name, mae, mae * 1.5, 0.1, 24)


class TestTables:
    def test_layout_and_baseline_tri(self):
        reports = [report(n, m) for n, (m, _) in RESULT_ROWS.items()]
        reports += [report("LSTM", 0.006), report("Persistence", 0.0044)]
        rows = M.build_table(reports[::-1], MAE_SOURCE)
        assert rows[0] == list(M.TABLE1_HEADER)
        assert [r[0] for r in rows[1:]] == list(M.TABLE1_ORDER)
        assert rows[1][4] == "--" and rows[2][4] == "--"
        po = next(r for r in rows if r[0] == "PO")
        assert float(po[4]) == pytest.approx(3087.25, rel=1e-5)

    def test_empty(self):
        assert M.build_table([], MAE_SOURCE) == [list(M.TABLE1_HEADER)]

    def test_scarcity_rows(self):
        rows = M.build_scarcity_table([("All data", 4965, 0.053)], MAE_SOURCE)
        assert rows[1][:2] == ["All data", "4965"]
        assert float(rows[1][3]) == pytest.approx(297.08, rel=1e-4)

    def test_csv_text(self):
        text = M.rows_to_csv([["a", "b"], ["1", "2"]])
        assert text == "a,b\n1,2\n"

    def test_report_json_round_trip(self, tmp_path):
        rep = M.point_report("FF", [0.1, 0.4, 0.2], [0.0, 0.5, 0.3], mae_source_val=0.2)
        rep.save(tmp_path / "r.json")
        assert M.MetricsReport.load(tmp_path / "r.json") == rep

    def test_report_invariants(self):
        rep = M.point_report("x", [0.0, 2.0, 1.0], [1.0, 1.0, 1.5])
        assert rep.rmse >= rep.mae >= 0 and rep.r_squared <= 1 and rep.n_points == 3
        with pytest.raises(ContractError):
            M.MetricsReport("x", 0.0, 0.0, 0.0, 0)
