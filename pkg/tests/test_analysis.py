import numpy as np
import pytest

from hbridge.analysis import DriftReport, drift_profile, emit_report, micro_model, nmse
from hbridge.config import task_config, tiny_config
from hbridge.data import sample_dataset
from hbridge.errors import InputError, UndefinedReferenceError
from hbridge.model import HBridgeModel


def test_nmse_cases():
    b = np.array([[1.0, -2.0], [0.5, 3.0]])
    assert nmse(b, b) == 0.0
    assert nmse(np.zeros_like(b), b) == 1.0
    assert nmse(2 * b, b) == 1.0
    assert nmse(b + np.array([[1.0, 0.0], [0.0, 0.0]]), b) == pytest.approx(1 / 14.25)
    with pytest.raises(UndefinedReferenceError):
        nmse(b, np.zeros_like(b))
    with pytest.raises(InputError):
        nmse(b, b[:1])


@pytest.fixture(scope="module")
def evalset():
    return sample_dataset(48, 3)


def test_non_bridged_rows_are_exactly_zero(evalset):
    m = HBridgeModel(tiny_config())
    r = drift_profile(m, evalset.tokens, evalset.patterns, batch_size=16)
    assert [row.bridged for row in r.rows] == [False, True, True, False]
    for row in r.rows:
        if not row.bridged:
            assert row.nmse == 0.0 and row.loss_delta == 0.0
        else:
            assert row.nmse > 0.0


def test_decoupled_model_reports_all_zero(evalset):
    m = HBridgeModel(tiny_config(bridge=dict(skip_front=4, skip_back=0, decoupled=True)))
    r = drift_profile(m, evalset.tokens, evalset.patterns)
    assert all(row.nmse == 0.0 and row.loss_delta == 0.0 for row in r.rows)


def test_micro_model_informative_bridge():
    m = micro_model()
    ds = sample_dataset(256, 5)
    r = drift_profile(m, ds.tokens, ds.patterns)
    off, on = r.rows
    assert (off.nmse, off.loss_delta) == (0.0, 0.0)
    assert on.bridged and on.nmse > 0 and on.loss_delta > 0


def test_report_emission(tmp_path, evalset):
    cfg = task_config(train=dict(steps=1))
    cfg = cfg.replace(und=dict(d_model=16, n_heads=2, d_ff=16), gen=dict(d_model=16, n_heads=2, d_ff=16), d_feat=8)
    r = drift_profile(HBridgeModel(cfg), evalset.tokens[:8], evalset.patterns[:8])
    emit_report(r, tmp_path / "a")
    emit_report(r, tmp_path / "b")
    csv = (tmp_path / "a.csv").read_text()
    assert len(csv.splitlines()) == 1 + cfg.und.n_layers
    assert csv == (tmp_path / "b.csv").read_text()
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    assert (tmp_path / "a.svg").read_text().startswith("<svg")


def test_empty_inputs_refused(tmp_path):
    m = HBridgeModel(tiny_config())
    with pytest.raises(InputError):
        drift_profile(m, np.zeros((0, 6), dtype=np.int64), np.zeros((0, 16, 16, 3)))
    with pytest.raises(InputError):
        emit_report(DriftReport([], 0, 0.0), tmp_path / "x")
