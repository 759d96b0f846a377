import json

import numpy as np
import pytest

from mlattn.bench import (FIELDS, UNRELIABLE, BenchReport, BenchRow, SweepSpec, config_id, decode_batch,
                          load_sweep_spec, read_report, run_sweep, synthetic_workload, write_report)
from mlattn.attention import Mechanism, ReweightLengths, similarity_attention_oracle
from mlattn.numerics import ConfigError, Rng, max_rel_error

GOLDEN_HEADER = "config,n1,n2,mean_s,std_s,throughput_itr_s,flops"


def tiny_spec(**kw):
    base = dict(lengths=(4, 8), d_kh=4, d_vh=3, samples=2, repetitions=3)
    base.update(kw)
    return SweepSpec(**base)


def test_report_schema_is_stable():
    assert ",".join(FIELDS) == GOLDEN_HEADER


def test_one_row_report_is_two_csv_lines(tmp_path):
    report = BenchReport([BenchRow("self/relu/reuse/b1", 8, 8, 0.25, 0.01, 32.0, 1234)])
    write_report(report, "csv", tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines == [GOLDEN_HEADER, "self/relu/reuse/b1,8,8,0.25,0.01,32.0,1234"]


def test_sweep_rows_and_throughput(tmp_path):
    report = run_sweep(tiny_spec(), Rng(1))
    ids = {r.config for r in report.rows}
    assert ids == {"self/softmax/b1", "self/relu/reuse/b1", "self/relu/naive/b1",
                   "self/cosformer/reuse/b1", "self/cosformer/naive/b1"}
    for r in report.rows:
        assert r.calls == 2 * r.n1
        assert abs(r.throughput_itr_s - r.calls / r.mean_s) <= 1e-9 * r.throughput_itr_s
        assert r.std_s >= 0 and r.flops > 0


def test_csv_json_round_trip_is_exact(tmp_path):
    report = run_sweep(tiny_spec(role="cross", target_len=5, batch=2), Rng(2))
    report.rows[0].reliable = False
    write_report(report, "csv", tmp_path / "a.csv")
    from_csv = read_report(tmp_path / "a.csv")
    write_report(from_csv, "json", tmp_path / "b.json")
    from_json = read_report(tmp_path / "b.json")
    assert [r.record() for r in from_json.rows] == [r.record() for r in report.rows]
    assert from_json.rows[0].config.endswith(UNRELIABLE) and not from_json.rows[0].reliable
    assert list(json.loads((tmp_path / "b.json").read_text())[0]) == list(FIELDS)
    assert from_json.find("cross/relu/reuse/b2", 8).n1 == 5


def test_write_report_errors(tmp_path):
    with pytest.raises(ValueError):
        write_report(BenchReport(), "csv", tmp_path / "x.csv")
    row = BenchReport([BenchRow("c", 1, 1, 1.0, 0.0, 1.0, 1)])
    with pytest.raises(OSError):
        write_report(row, "csv", tmp_path / "missing" / "x.csv")
    with pytest.raises(ValueError):
        write_report(row, "xml", tmp_path / "x.xml")


@pytest.mark.parametrize("bad", [dict(lengths=(8, 4)), dict(repetitions=2), dict(role="both"),
                                 dict(variants=("fast",)), dict(d_kh=0), dict(lengths=())])
def test_spec_validation(bad):
    with pytest.raises(ConfigError):
        tiny_spec(**bad)


def test_spec_file(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"mechanisms": ["relu"], "lengths": [4, 8], "repetitions": 3}))
    spec = load_sweep_spec(tmp_path / "s.json")
    assert spec.mechanisms == (Mechanism.RELU,) and spec.lengths == (4, 8)
    (tmp_path / "s.json").write_text(json.dumps({"lenghts": [4]}))
    with pytest.raises(ConfigError):
        load_sweep_spec(tmp_path / "s.json")
    (tmp_path / "s.json").write_text("{")
    with pytest.raises(ConfigError):
        load_sweep_spec(tmp_path / "s.json")


def test_workload_is_deterministic():
    spec = tiny_spec()
    a = synthetic_workload(Rng(9), spec, 1, 8)
    b = synthetic_workload(Rng(9), spec, 1, 8)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@pytest.mark.parametrize("mech", list(Mechanism))
@pytest.mark.parametrize("variant", ["reuse", "naive"])
@pytest.mark.parametrize("role", ["self", "cross"])
def test_decode_paths_compute_attention(mech, variant, role):
    spec = tiny_spec(role=role, target_len=6)
    q, k, v = synthetic_workload(Rng(3), spec, 0, 8)
    out = decode_batch(mech, variant, role, q, k, v)
    for b in range(q.shape[0]):
        if role == "self":
            want = similarity_attention_oracle(q[b], k[b], v[b], mech, ReweightLengths(8, 8), causal=True)
        else:
            want = similarity_attention_oracle(q[b], k[b], v[b], mech, ReweightLengths(6, 8))
        assert max_rel_error(out[b], want) <= 1e-9


def test_config_ids():
    assert config_id("self", Mechanism.SOFTMAX, "reuse", 1) == "self/softmax/b1"
    assert config_id("cross", Mechanism.COSFORMER, "naive", 4) == "cross/cosformer/naive/b4"
