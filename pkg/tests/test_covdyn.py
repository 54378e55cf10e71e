from __future__ import annotations

import json

import numpy as np
import pytest

from percov import maps
from percov.covdyn import (CoverageField, RobotModel, apply_actions, compute_rho, coverage_error, metrics,
                           normalized_error, objective_means, quadratic_error, uniform_disk, write_metrics_jsonl)
from percov.environment import Environment


def _field(env, z=None, phi=1.0, d=0.9995, zstar=80.0):
    return CoverageField(env, zstar, phi, d, z)


ROBOT = RobotModel(coverage_radius=0.2, rho_max=1.0)


def test_footprint_is_bounded_disk():
    env = maps.empty(20, 20, 0.1)
    p = np.array([1.0, 1.0])
    ii, jj, a = ROBOT.footprint(env, p)
    d = np.linalg.norm(env.centers[ii, jj] - p, axis=1)
    assert np.all(d <= 0.2 + 1e-12) and np.all(a == 1.0)
    # brute force: every free cell center within the radius
    all_d = np.linalg.norm(env.centers - p, axis=-1)
    assert ii.size == int((all_d <= 0.2 + 1e-12).sum())
    assert np.all(uniform_disk(0.2)(np.array([0.0, 0.2, 0.2001])) == [1, 1, 0])


def test_footprint_excludes_obstacles():
    free = np.ones((10, 10), bool)
    free[:, 5:] = False
    env = Environment(free, 0.1)
    ii, jj, _ = ROBOT.footprint(env, (0.45, 0.5))
    assert np.all(jj < 5)


def test_rho_uniform_steady_state():
    env = maps.empty(20, 20, 0.1)
    fld = _field(env, z=80.0)
    assert compute_rho(ROBOT, (1.0, 1.0), fld) == pytest.approx(0.04)


def test_rho_zero_when_decayed_field_meets_objective():
    env = maps.empty(20, 20, 0.1)
    fld = _field(env, z=80.0 / 0.9995)
    assert compute_rho(ROBOT, (1.0, 1.0), fld) == pytest.approx(0.0, abs=1e-12)


def test_rho_clamped():
    env = maps.empty(20, 20, 0.1)
    assert compute_rho(ROBOT, (1.0, 1.0), _field(env)) == 1.0
    assert compute_rho(RobotModel(rho_max=20.0), (1.0, 1.0), _field(env)) == 20.0
    # overshoot -> negative optimum -> clamp at 0
    assert compute_rho(ROBOT, (1.0, 1.0), _field(env, z=200.0)) == 0.0


def test_rho_matches_least_squares_optimum():
    env = maps.empty(20, 20, 0.1)
    rng = np.random.default_rng(2)
    z = rng.uniform(0, 100, env.free.shape)
    phi = rng.uniform(0.3, 1.0, env.free.shape)
    robot = RobotModel(coverage_radius=0.3, rho_max=1e9, production=lambda d: 1.0 - d)
    fld = _field(env, z=z, phi=phi)
    p = (1.03, 0.98)
    rho = compute_rho(robot, p, fld)
    ii, jj, a = robot.footprint(env, p)

    def cost(r):
        return float(np.sum(phi[ii, jj] * (80.0 - (0.9995 * z[ii, jj] + r * a)) ** 2))

    grid = np.linspace(rho - 1, rho + 1, 2001)
    assert grid[np.argmin([cost(r) for r in grid])] == pytest.approx(rho, abs=1e-3)


def test_rho_off_map_is_zero():
    env = maps.empty(10, 10, 0.1)
    assert compute_rho(ROBOT, (5.0, 5.0), _field(env)) == 0.0


def test_pure_decay():
    env = maps.empty(10, 10, 0.1)
    rng = np.random.default_rng(0)
    z0 = rng.uniform(0, 50, env.free.shape)
    fld = _field(env, z=z0)
    for _ in range(100):
        apply_actions(fld, [])
    assert np.allclose(fld.z, 0.9995**100 * z0, rtol=1e-12)
    assert fld.k == 100


def test_single_action_disk():
    env = maps.empty(20, 20, 0.1)
    fld = _field(env)
    apply_actions(fld, [(ROBOT, (1.0, 1.0), 1.0)])
    d = np.linalg.norm(env.centers - (1.0, 1.0), axis=-1)
    assert np.array_equal(fld.z, np.where(d <= 0.2 + 1e-12, 1.0, 0.0))
    assert np.array_equal(fld.visits, (fld.z > 0).astype(int))


def test_overlapping_actions_superpose():
    env = maps.empty(20, 20, 0.1)
    fld = _field(env)
    apply_actions(fld, [(ROBOT, (1.0, 1.0), 1.0), (ROBOT, (1.1, 1.0), 1.0)])
    assert fld.z.max() == 2.0
    assert fld.z[env.cell_of((1.05, 1.0))] == 2.0
    with pytest.raises(ValueError):
        apply_actions(fld, [(ROBOT, (1.0, 1.0), -0.1)])


def test_error_values():
    env = maps.empty(10, 10, 0.1)
    assert np.allclose(coverage_error(_field(env, z=80.0))[env.free], 0.0)
    assert np.allclose(coverage_error(_field(env, phi=0.7))[env.free], 56.0)
    assert np.allclose(coverage_error(_field(env, z=160.0, phi=0.5))[env.free], -40.0)


def test_quadratic_error_constant():
    env = maps.empty(10, 20, 0.1)
    fld = _field(env, z=78.0)  # e = 2
    f, _ = quadratic_error(fld)
    assert f == pytest.approx(4 * env.n_free * env.cell_area)


def test_quadratic_error_additive_over_partitions():
    env = maps.builtin("rooms")
    rng = np.random.default_rng(4)
    fld = _field(env, z=rng.uniform(0, 120, env.free.shape), phi=rng.uniform(0.1, 1, env.free.shape))
    labels = rng.integers(0, 3, env.free.shape)
    f, parts = quadratic_error(fld, labels, 3)
    assert abs(f - sum(parts)) <= 1e-9 * f


def test_normalized_error_forms():
    env = maps.empty(10, 10, 0.1)
    fld = _field(env, phi=0.7, zstar=100.0)
    assert np.allclose(normalized_error(fld, "squared")[env.free], 0.007)
    assert np.allclose(normalized_error(fld, "objective")[env.free], 0.7)
    m = metrics(fld, normalization="squared")
    assert m.mean_err == pytest.approx(0.007) and m.std_err == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        normalized_error(fld, "bogus")


def test_metrics_at_objective():
    env = maps.builtin("two_rooms")
    fld = _field(env, z=80.0)
    m = metrics(fld)
    assert m.mean_err == pytest.approx(0.0) and m.std_err == pytest.approx(0.0)
    assert m.mean_cov == pytest.approx(80.0)


def test_metrics_per_partition_and_jsonl(tmp_path):
    env = maps.empty(10, 10, 0.1)
    z = np.zeros(env.free.shape)
    z[:, 5:] = 80.0
    labels = np.zeros(env.free.shape, int)
    labels[:, 5:] = 1
    m = metrics(_field(env, z=z), labels, 2)
    assert m.per_partition == pytest.approx([1.0, 0.0])
    assert m.mean_err == pytest.approx(0.5)
    write_metrics_jsonl(tmp_path / "m.jsonl", [m, m])
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["mean_err"] == pytest.approx(0.5)


def test_objective_means():
    env = maps.empty(10, 10, 0.1)
    phi = np.full(env.free.shape, 0.5)
    phi[:5] = 1.0
    assert objective_means(_field(env, phi=phi)) == pytest.approx((80.0, 60.0))


def test_field_validation():
    env = maps.empty(4, 4, 0.1)
    with pytest.raises(ValueError):
        _field(env, d=1.0)
    with pytest.raises(ValueError):
        _field(env, phi=0.0)
    with pytest.raises(ValueError):
        _field(env, zstar=0.0)
    with pytest.raises(ValueError):
        RobotModel(coverage_radius=0.0)


def test_coverage_stays_nonnegative_under_controller():
    env = maps.empty(20, 20, 0.1)
    fld = _field(env)
    rng = np.random.default_rng(0)
    for _ in range(300):
        p = rng.uniform(0, 2, 2)
        apply_actions(fld, [(ROBOT, p, compute_rho(ROBOT, p, fld))])
        assert fld.z.min() >= 0
