import json

import numpy as np
import pytest

from conftest import blob_volume
from vspfreg.bench import PhantomSpec, make_phantom_pair, tre
from vspfreg.optimizer import OptimizerConfig
from vspfreg.registration import (
    SAMPLER_KINDS,
    RegistrationConfig,
    default_beta,
    final_histogram,
    level_fields,
    register,
)
from vspfreg.sampling import sample_selection
from vspfreg.transform import RigidParams

GOLD = RigidParams((4.0, -3.0, 2.0), (0.05, -0.03, 0.02))


@pytest.fixture(scope="module")
def pair():
    return make_phantom_pair(PhantomSpec(), seed=0, gold=GOLD)


def test_self_registration():
    # without sample jitter the identity sits exactly on the shared lattice
    vol = blob_volume(32, seed=5)
    res = register(vol, vol, RegistrationConfig(sampling_rate=0.05, seed=1, sample_jitter=0.0))
    D = np.array([1, 1, 1, *[vol.bounding_radius()] * 3])
    assert np.linalg.norm(res.theta.as_array() * D) <= 1e-2


def test_phantom_pair_recovered(pair):
    res = register(pair.ref, pair.mov, RegistrationConfig(sampling_rate=0.01, seed=3))
    assert tre(pair.gold, res.theta, pair.voi_points, pair.center).max() < 1.0
    assert res.levels_run == [2, 1]


def test_end_to_end_determinism(pair):
    cfg = RegistrationConfig(sampling_rate=0.003, seed=8)
    a = json.dumps(register(pair.ref, pair.mov, cfg).to_dict(cfg), sort_keys=True)
    b = json.dumps(register(pair.ref, pair.mov, cfg).to_dict(cfg), sort_keys=True)
    assert a == b


@pytest.mark.parametrize("kind", ["vspf_heuristic", "vspf_thresholded", "urs", "gms", "gms_urs", "gm", "furs"])
def test_every_sampler_runs(pair, kind):
    cfg = RegistrationConfig(
        sampler_kind=kind, sampling_rate=0.003, seed=2,
        optimizer={2: OptimizerConfig(max_iters=3), 1: OptimizerConfig(max_iters=2)},
    )
    res = register(pair.ref, pair.mov, cfg)
    assert len(res.per_scale) == 2
    assert all(r.iterations_run <= 3 for r in res.per_scale)


@pytest.mark.parametrize("level", [2, 1])
def test_vspf_field_constraint(pair, level):
    cfg = RegistrationConfig(sampling_rate=0.003, seed=4)
    fld, ref_k = level_fields(pair.ref, pair.mov, cfg, level, GOLD)
    M = min(0.003 * pair.ref.size, ref_k.size)
    assert abs(fld.p.sum() - M) <= 1e-6 * M
    assert fld.p.min() >= 0 and fld.p.max() <= fld.p_high + 1e-15
    sizes = [len(sample_selection(fld, s)) for s in range(100)]
    assert abs(np.mean(sizes) - M) <= 0.05 * M


def test_field_computed_once_per_level(pair):
    cfg = RegistrationConfig(sampling_rate=0.003, seed=6, keep_fields=True,
                             optimizer={2: OptimizerConfig(max_iters=4), 1: OptimizerConfig(max_iters=4)})
    res = register(pair.ref, pair.mov, cfg)
    assert sorted(res.vspf_snapshots) == [1, 2]
    M = 0.003 * pair.ref.size
    assert res.expected_samples == pytest.approx([M, M], rel=1e-6)


def test_stop_level_and_initial_theta(pair):
    cfg = RegistrationConfig(sampling_rate=0.003, seed=1,
                             optimizer={2: OptimizerConfig(max_iters=2)})
    res = register(pair.ref, pair.mov, cfg, stop_level=2, theta0=GOLD)
    assert res.levels_run == [2]
    with pytest.raises(ValueError):
        register(pair.ref, pair.mov, cfg, stop_level=3)


def test_learned_kind_needs_values(pair):
    cfg = RegistrationConfig(sampler_kind="vspf_learned", sampling_rate=0.003)
    with pytest.raises(ValueError, match="p_high_per_level"):
        level_fields(pair.ref, pair.mov, cfg, 2)
    fld, _ = level_fields(pair.ref, pair.mov, cfg.with_updates(p_high_per_level={2: 0.1}), 2)
    assert fld.p_high == 0.1


def test_config_round_trip():
    cfg = RegistrationConfig(sampler_kind="gms_urs", sampling_rate=0.03, beta_per_level={2: 0.9},
                             optimizer={1: OptimizerConfig(max_iters=7)}, seed=12)
    d = json.loads(json.dumps(cfg.to_dict()))
    back = RegistrationConfig.from_dict(d)
    assert back.to_dict() == cfg.to_dict()
    assert back.optimizer_for(1).max_iters == 7
    assert back.beta_per_level == {2: 0.9}


def test_config_validation():
    with pytest.raises(ValueError, match="unknown"):
        RegistrationConfig.from_dict({"rate": 0.1})
    with pytest.raises(ValueError):
        RegistrationConfig(sampler_kind="nope")
    with pytest.raises(ValueError):
        RegistrationConfig(sampling_rate=0)
    assert "vspf_heuristic" in SAMPLER_KINDS


def test_default_optimizer_schedule():
    cfg = RegistrationConfig()
    assert cfg.optimizer_for(2).max_iters == 50
    assert cfg.optimizer_for(1).max_iters == 20


def test_default_beta_uses_nearest_rate():
    assert default_beta(2, 0.001) == default_beta(2, 0.0011)
    assert 0 <= default_beta(1, 0.5) <= 1


def test_timing_only_when_requested(blob16):
    cfg = RegistrationConfig(levels=1, sampling_rate=0.2, optimizer={1: OptimizerConfig(max_iters=2)})
    assert "wall_time_s" not in register(blob16, blob16, cfg).to_dict()
    res = register(blob16, blob16, cfg.with_updates(record_timing=True))
    assert res.wall_time > 0


def test_final_histogram(blob16):
    h = final_histogram(blob16, blob16, RegistrationConfig(bins=16), RigidParams())
    assert h.total_weight == pytest.approx(blob16.size)
