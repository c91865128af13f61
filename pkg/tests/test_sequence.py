import numpy as np
import pytest

from cavload import sequence as sq
from cavload.readout import transmittance

SMALL = sq.SimConfig().replace(cloud__n_atoms=40, schedule__end_time=20e-3)


def test_empty_cloud_gives_unit_transmittance():
    tr = sq.run_sequence(SMALL.replace(cloud__n_atoms=0), seed=1)
    assert len(tr) == 201
    assert np.all(tr.transmittance == 1.0)
    assert np.all(tr.n_eff_true == 0.0)


def test_trace_columns_and_determinism():
    a = sq.run_sequence(SMALL, seed=5)
    b = sq.run_sequence(SMALL, seed=5)
    assert a.to_csv() == b.to_csv()
    assert len({len(c) for c in a.columns()}) == 1
    assert a.to_csv().splitlines()[0].split(",") == list(sq.TRACE_COLUMNS)
    c = sq.run_sequence(SMALL, seed=6)
    assert a.to_csv() != c.to_csv()


def test_trace_consistent_with_readout():
    cfg = SMALL
    tr = sq.run_sequence(cfg, seed=2)
    on = tr.times >= cfg.schedule.probe_on_at
    det, cav = cfg.detunings, cfg.cavity
    assert np.allclose(tr.transmittance[on],
                       transmittance(tr.n_eff_true[on], det, cav.g0, cav.kappa), rtol=1e-14)
    assert np.all(tr.transmittance[~on] == 1.0)
    assert np.all(tr.n_F1 + tr.n_F2 + tr.n_escaped == cfg.cloud.n_atoms)


def test_detector_noise_bounds():
    sig = 0.05
    cfg = SMALL.replace(schedule__detector_noise_sigma=sig)
    tr = sq.run_sequence(cfg, seed=3)
    assert np.all(tr.transmittance >= 0) and np.all(tr.transmittance <= 1 + 3 * sig)
    assert np.std(tr.transmittance[:60]) > 0.5 * sig


def test_atom_weight_scales_counts():
    a = sq.run_sequence(SMALL, seed=4)
    b = sq.run_sequence(SMALL.replace(cloud__atom_weight=3.0), seed=4)
    assert np.allclose(b.n_eff_true, 3 * a.n_eff_true, rtol=1e-14)
    assert np.array_equal(b.n_captured, 3 * a.n_captured)


def test_branch_equals_direct_run():
    d, search = 12e-3, 5e-3
    cfg = SMALL.replace(analysis__dip_search=search, schedule__end_time=d)
    res = sq.stroboscopic_scan(cfg, [d], runs_per_delay=1, seed=9)
    direct = sq.run_sequence(cfg.replace(schedule__end_time=d + search),
                             seed=sq.run_seed(9, 0), repumper_on_at=d)
    branch = res.traces[0]
    n = len(branch)
    assert np.array_equal(branch.times, direct.times[:n])
    assert np.array_equal(branch.transmittance, direct.transmittance[:n])
    assert np.array_equal(branch.n_F2, direct.n_F2[:n])


def test_schedule_rules():
    with pytest.raises(ValueError):
        sq.Schedule(rampdown_duration=5e-3, probe_on_at=5e-3)
    with pytest.raises(ValueError):
        sq.Schedule(probe_on_at=3e-3)
    with pytest.raises(ValueError):
        sq.stroboscopic_scan(SMALL, [12.5e-6 * 3], runs_per_delay=1)


def _synthetic_trace(cfg, n_dip, t_dip):
    t = np.round(np.arange(0, 0.08, cfg.schedule.sample_period), 10)
    det, cav = cfg.detunings, cfg.cavity
    n = n_dip * np.exp(-((t - t_dip) / 2e-3) ** 2)
    T = transmittance(n, det, cav.g0, cav.kappa)
    z = np.zeros_like(t)
    return sq.Trace(t, T, n, z, z, z, z, z)


def test_locate_dip_on_synthetic_trace():
    cfg = sq.SimConfig()
    tr = _synthetic_trace(cfg, 800.0, 0.05)
    dip = sq.locate_dip(tr, cfg, 0.045)
    assert dip.found
    assert dip.t_dip == pytest.approx(0.05, abs=2e-4)
    ma = sq.moving_average(tr.transmittance, 20)
    assert dip.transmittance == pytest.approx(ma.min(), rel=1e-12)
    assert dip.n_eff < 800 and dip.n_eff > 500
    empty = sq.locate_dip(_synthetic_trace(cfg, 0.0, 0.05), cfg, 0.045)
    assert not empty.found and empty.n_eff == 0.0


def test_moving_average():
    y = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    assert np.allclose(sq.moving_average(y, 3), [1.5, 2.0, 3.0, 4.0, 4.5])
    assert np.array_equal(sq.moving_average(y, 1), y)


def test_rise_time_of_exponential():
    t = np.arange(0, 0.05, 1e-5)
    T = 1 - 0.8 * np.exp(-t / 2e-3)
    z = np.zeros_like(t)
    tr = sq.Trace(t, T, z, z, z, z, z, z)
    assert sq.rise_time(tr, 0.0, 0.04) == pytest.approx(2e-3, rel=1e-3)


def test_direct_trapping_time_on_exact_decay():
    t = np.arange(0, 0.3, 1e-3)
    n = 1000 * np.exp(-t / 0.1)
    z = np.zeros_like(t)
    tr = sq.Trace(t, z, z, z, z, n, z, z)
    assert sq.direct_trapping_time(tr, 0.04).value("tau") == pytest.approx(0.1, rel=1e-6)


def test_magnetic_field_assembly():
    fs, t0 = sq.field_system(SMALL)
    assert t0 == 0.0
    assert fs.quiet_after() == pytest.approx(SMALL.schedule.rampdown_duration)
    from cavload.magnetics import field_jacobian, zero_locus
    z0 = zero_locus(fs, 0.0, sq.trap_center(SMALL) + 1e-5)
    assert np.allclose(z0, sq.trap_center(SMALL), atol=1e-9)
    assert field_jacobian(fs, 0.0, z0)[2, 2] == pytest.approx(0.66, rel=1e-9)


def test_manifest_omits_thread_count():
    m = sq.manifest(SMALL, 3)
    assert "threads" not in m["config"]["integration"]
    assert m["seed"] == 3
