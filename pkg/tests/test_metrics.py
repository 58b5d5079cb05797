import json

import numpy as np
import pytest

from qsparse import metrics
from qsparse.errors import QsparseError
from qsparse.metrics import StepRecord, bit_cost, bits_to_target, emit_csv, index_bits, level_bits, read_csv
from qsparse.operators import (
    Composed, Identity, Payload, Piecewise, Qsgd, RandK, RotatedLevels, Sign, SignComp,
    StochasticLevels, TopK, compress,
)


def test_bit_widths():
    assert index_bits(7850) == 13
    assert index_bits(1) == 1 and index_bits(2) == 1 and index_bits(1024) == 10 and index_bits(1025) == 11
    assert level_bits(15) == 4 and level_bits(16) == 5 and level_bits(1) == 1


def test_reference_costs():
    d = 7850
    assert bit_cost(Identity(), Payload(d, d), d) == 251200
    assert bit_cost(SignComp(TopK(40)), Payload(40, d), d) == 592
    assert bit_cost(TopK(40), Payload(40, d), d) == 1800


def test_composed_counts_only_surviving_levels():
    d = 7850
    spec = Composed(Qsgd(15), TopK(40))
    assert bit_cost(spec, Payload(30, d), d) == 32 + 30 * (13 + 4 + 1)
    assert bit_cost(spec, Payload(0, d), d) == 0


def test_dense_quantizer_costs():
    d = 100
    assert bit_cost(Qsgd(3), Payload(100, d), d) == 32 + 100 * 3
    assert bit_cost(StochasticLevels(3), Payload(100, d), d) == 64 + 100 * 2
    assert bit_cost(RotatedLevels(3), Payload(100, d, padded=128), d) == 64 + 128 * 2
    assert bit_cost(Sign(), Payload(d, d), d) == 100
    assert bit_cost(RandK(5), Payload(5, d), d) == 5 * (7 + 32)


def test_piecewise_additive():
    spec = Piecewise((((0, 64), TopK(4)), ((64, 100), SignComp(TopK(3)))))
    x = np.random.default_rng(0).standard_normal(100)
    _, payload = compress(spec, x, np.random.default_rng(0))
    whole = bit_cost(spec, payload, 100)
    assert whole == 4 * (6 + 32) + 3 * (6 + 1) + 32


@pytest.mark.parametrize("d", [3, 10, 7850])
def test_cost_ordering(d):
    nnz = 2
    sign = bit_cost(SignComp(TopK(nnz)), Payload(nnz, d), d)
    raw = bit_cost(TopK(nnz), Payload(nnz, d), d)
    dense = bit_cost(Identity(), Payload(d, d), d)
    assert sign < raw < dense


def _rec(t, loss, bits):
    return StepRecord(t, loss, None, bits, [0.1, 0.3], 0.5, None)


def test_csv_header_only(tmp_path):
    emit_csv([], tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text() == ",".join(metrics.CSV_FIELDS) + "\n"


def test_csv_round_trip_lossless(tmp_path):
    rng = np.random.default_rng(0)
    recs = [StepRecord(t, float(rng.standard_normal()) / 3, float(rng.random()), 10 * t,
                       list(rng.random(3)), float(rng.random()) * 1e-17, float(rng.random()) if t % 2 else None)
            for t in range(20)]
    emit_csv(recs, tmp_path / "r.csv")
    rows = read_csv(tmp_path / "r.csv")
    assert len(rows) == len(recs)
    for rec, row in zip(recs, rows):
        want = rec.row()
        for k in metrics.CSV_FIELDS:
            assert row[k] == want[k]


def test_csv_bad_path(tmp_path):
    with pytest.raises(QsparseError, match="nope"):
        emit_csv([], tmp_path / "nope" / "x.csv")


def test_bits_to_target():
    recs = [_rec(0, 2.0, 0), _rec(1, 1.0, 40), _rec(2, 0.5, 80)]
    assert bits_to_target(recs, 3.0) == 0
    assert bits_to_target(recs, 0.9) == 80
    assert bits_to_target(recs, 0.1) is None


class _Result:
    def __init__(self, recs):
        self.records = recs
        self.uplink_bits = recs[-1].bits
        self.downlink_bits = 7
        self.diagnostics = {"max_mem_ratio": 0.25, "x": float("inf")}


def test_summary_json(tmp_path):
    res = _Result([_rec(0, 2.0, 0), _rec(1, 1.0, 40), _rec(2, 0.5, 80)])
    doc = metrics.emit_summary_json(res, tmp_path / "s.json", config={"run": {"T": 2}})
    back = json.loads((tmp_path / "s.json").read_text())
    assert back == doc
    assert back["final_loss"] == 0.5 and back["best_loss"] == 0.5
    assert back["total_uplink_bits"] == 80 and back["total_downlink_bits"] == 7
    assert back["config"] == {"run": {"T": 2}}
    assert back["diagnostics"]["x"] is None
    assert back["bits_to_target"][0]["bits"] == 40
