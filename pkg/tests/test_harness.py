import json
import math

import numpy as np
import pytest

from aelink import autoenc, baselines, harness
from aelink.errors import ContractError

QUICK = harness.StopRule(min_errors=100, max_bits=10**6, chunk_bits=4096)


def _sweep(kind, grid, channel="awgn", seed=0, workers=1, stop=QUICK, **kw):
    link = harness.LinkUnderTest(kind, channel, **kw)
    return harness.SweepResult(link, harness.run_sweep(harness.SweepSpec(link, grid, stop, seed, workers)), seed, stop)


def test_csv_header_exact():
    assert ",".join(harness.CSV_HEADER) == "link,channel,ebn0_db,bits,errors,ber,stderr,censored,seed"


def test_bpsk_awgn_point_matches_theory():
    p = harness.monte_carlo_ber(harness.LinkUnderTest("conv-siso-uncoded", "awgn"), 4.0, QUICK, seed=3)
    assert abs(p.ber - 0.0125008) < 3 * p.standard_error
    assert not p.censored and p.errors >= 100


def test_bpsk_rayleigh_point_matches_theory():
    p = harness.monte_carlo_ber(harness.LinkUnderTest("conv-siso-uncoded", "rayleigh"), 10.0, QUICK, seed=3)
    assert abs(p.ber - 0.5 * (1 - math.sqrt(10 / 11))) < 3 * p.standard_error


def test_theory_sweep_and_monotone():
    res = _sweep("conv-siso-uncoded", [0, 2, 4, 6, 8], seed=1)
    for p in res.points:
        assert abs(p.ber - baselines.theory_ber_bpsk_awgn(p.ebn0_db)) < 3 * p.standard_error
    for a, b in zip(res.points, res.points[1:]):
        assert b.ber <= a.ber + 3 * math.hypot(a.standard_error, b.standard_error)


def test_noiseless_identity_links_are_error_free():
    for kind in ("conv-siso-uncoded", "conv-siso-hamming", "conv-mimo-ml", "conv-mimo-zf"):
        p = harness.monte_carlo_ber(harness.LinkUnderTest(kind, "awgn"), 200.0,
                                    harness.StopRule(1, 20000, 4096), seed=0)
        assert p.errors == 0 and p.censored


def test_random_guess_link():
    p = harness.monte_carlo_ber(harness.LinkUnderTest("random-guess"), 0.0,
                                harness.StopRule(100, 10**5, 10**5), seed=0)
    assert abs(p.ber - 0.5) < 0.01


def test_worker_count_does_not_change_points():
    link = harness.LinkUnderTest("conv-siso-hamming", "rayleigh")
    stop = harness.StopRule(200, 10**6, 2048)
    a = harness.monte_carlo_ber(link, 6.0, stop, seed=9, workers=1)
    b = harness.monte_carlo_ber(link, 6.0, stop, seed=9, workers=8)
    assert a == b


def test_empty_sweep():
    assert harness.run_sweep(harness.SweepSpec(harness.LinkUnderTest("conv-siso-uncoded"), [])) == []


def test_stop_rule_honoured():
    res = _sweep("conv-siso-uncoded", [0, 10], channel="rayleigh",
                 stop=harness.StopRule(150, 30000, 1000))
    for p in res.points:
        assert p.censored == (p.errors < 150)
        if not p.censored:
            assert p.errors >= 150
        assert p.bits <= 30000 + 1000


def test_write_read_roundtrip(tmp_path):
    res = _sweep("conv-siso-hamming", [0.0, 2.5], decode="soft")
    path = harness.write_results([res], tmp_path / "out.csv", plot_script=True)
    rows = harness.read_results(path)
    assert [r["ebn0_db"] for r in rows] == [0.0, 2.5]
    for r, p in zip(rows, res.points):
        assert r["link"] == "conv-siso-hamming-soft" and r["channel"] == "awgn-only"
        assert (r["bits"], r["errors"], r["ber"], r["censored"]) == (p.bits, p.errors, p.ber, p.censored)
        assert r["stderr"] == math.sqrt(r["ber"] * (1 - r["ber"]) / r["bits"])
    meta = json.loads((tmp_path / "out.csv.meta.json").read_text())
    assert meta["links"][0]["decode"] == "soft"
    assert (tmp_path / "out.plot.py").exists()
    assert path.read_text().splitlines()[0] == ",".join(harness.CSV_HEADER)


def test_identical_runs_identical_bytes(tmp_path):
    paths = []
    for i, workers in enumerate((1, 8)):
        res = _sweep("conv-mimo-ml", [0, 6, 12], channel="rayleigh", seed=4, workers=workers)
        paths.append(harness.write_results([res], tmp_path / f"r{i}.csv"))
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_ml_never_worse_than_zf():
    ml = _sweep("conv-mimo-ml", [0, 5, 10, 15, 20], channel="rayleigh", seed=2)
    zf = _sweep("conv-mimo-zf", [0, 5, 10, 15, 20], channel="rayleigh", seed=2)
    for a, b in zip(ml.points, zf.points):
        assert a.ber <= b.ber + 3 * math.hypot(a.standard_error, b.standard_error)


def test_link_validation():
    with pytest.raises(ContractError):
        harness.LinkUnderTest("ae-siso")
    with pytest.raises(ContractError):
        harness.LinkUnderTest("qam-64")
    with pytest.raises(ContractError):
        harness.LinkUnderTest("conv-siso-uncoded", channel="rician")
    mimo = autoenc.build_mimo_autoencoder(autoenc.SystemConfig(1, 2, 2, 2))
    with pytest.raises(ContractError):
        harness.LinkUnderTest("ae-siso", model=mimo)


def test_sweep_abort_keeps_finished_points(monkeypatch):
    real = harness.run_trials

    def flaky(link, ebn0_db, rng, count):
        if ebn0_db > 5:
            raise RuntimeError("boom")
        return real(link, ebn0_db, rng, count)

    monkeypatch.setattr(harness, "run_trials", flaky)
    spec = harness.SweepSpec(harness.LinkUnderTest("conv-siso-uncoded"), [0, 2, 8], QUICK)
    with pytest.raises(harness.SweepAborted) as info:
        harness.run_sweep(spec)
    assert [p.ebn0_db for p in info.value.points] == [0.0, 2.0]


@pytest.mark.slow
def test_trained_ae_at_high_snr(siso_rayleigh_model):
    link = harness.LinkUnderTest("ae-siso", "rayleigh", model=siso_rayleigh_model)
    p = harness.monte_carlo_ber(link, 12.0, harness.StopRule(10**5, 10**5), seed=0)
    assert p.bits >= 10**5 and p.ber < 0.01


def test_ber_point_stderr():
    p = harness.BerPoint(0.0, 1000, 10)
    assert p.standard_error == math.sqrt(0.01 * 0.99 / 1000)
    with pytest.raises(ContractError):
        harness.BerPoint(0.0, 10, 11)
    assert np.isnan(p.bler)
