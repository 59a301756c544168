import numpy as np
import pytest

from voltreg.carpms import ControlConfig
from voltreg.loadflow import OperatingPoint
from voltreg.montecarlo import (CampaignSpec, compare_backends, histogram_csv, randomize,
                                run_campaign)
from voltreg.optimizer import PsoConfig

FAST = ControlConfig(pso=PsoConfig(population=15, iterations=20))


def test_randomize_is_seeded(lotus):
    spec = CampaignSpec.preset("11:00", n_runs=3)
    a, b, c = randomize(lotus, spec, 5), randomize(lotus, spec, 5), randomize(lotus, spec, 6)
    assert a == b and a != c
    s = np.array([inv.rated_apparent for inv in a.inverters])
    assert s.min() >= 2 and s.max() <= 7
    assert a.n_customers == lotus.n_customers and a.n_inverters == lotus.n_inverters


def test_phase_bias_overloads_one_phase(lotus):
    spec = CampaignSpec("x", 0.5, 0.5, phase_bias=1.0)
    assert {inv.phase for inv in randomize(lotus, spec, 0).inverters} == {"c"}


def test_load_jitter_bounds(lotus):
    m = randomize(lotus, CampaignSpec("x", 0.5, 0.5), 2)
    ratio = np.array([a.peak_active / b.peak_active for a, b in zip(m.loads, lotus.loads)])
    assert ratio.min() >= 0.8 and ratio.max() <= 1.2


def test_night_campaign_has_no_upper_control(lotus):
    res = run_campaign(lotus, CampaignSpec.preset("21:00", n_runs=10, seed=7), FAST)
    assert res.counts["apc"] == 0 and res.counts["rpc_qabs"] == 0
    assert res.counts["rpc_qinj"] + res.counts["none"] == 10


def test_single_run_campaign(lotus):
    res = run_campaign(lotus, CampaignSpec.preset("11:00", n_runs=1, seed=3), FAST)
    rows = res.rows_csv().splitlines()
    assert len(rows) == 2
    r = res.reports[0]
    assert res.counts[r.label] == 1
    if r.label in ("rpc_qabs", "apc"):
        assert res.max_voltage.tolist() == [r.v_max_after]


def test_campaign_determinism(lotus):
    spec = CampaignSpec.preset("10:00", n_runs=3, seed=11)
    a = run_campaign(lotus, spec, FAST)
    b = run_campaign(lotus, spec, FAST)
    assert a.rows_csv() == b.rows_csv() and a.summary_yaml() == b.summary_yaml()


def test_parallel_matches_serial(lotus):
    spec = CampaignSpec.preset("11:00", n_runs=3, seed=21)
    assert (run_campaign(lotus, spec, FAST, jobs=2).rows_csv()
            == run_campaign(lotus, spec, FAST).rows_csv())


def test_compare_needs_violations(lotus):
    with pytest.raises(ValueError):
        compare_backends(lotus, OperatingPoint(0.5, 0.3), FAST)


def test_histogram_csv():
    text = histogram_csv([0.95, 0.96, 0.96], bins=2)
    rows = text.splitlines()
    assert rows[0] == "bin_lo,bin_hi,count" and len(rows) == 3
    assert sum(int(r.split(",")[2]) for r in rows[1:]) == 3


def test_spec_validation():
    with pytest.raises(ValueError):
        CampaignSpec("x", 1.5, 0.5)
    with pytest.raises(ValueError):
        CampaignSpec("x", 0.5, 0.5, n_runs=0)
    spec = CampaignSpec.from_dict({"label": "y", "pv_scale": 0.2, "load_scale": 0.4,
                                   "randomize": {"loads": False}})
    assert not spec.randomize_loads and spec.randomize_positions
