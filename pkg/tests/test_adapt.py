import numpy as np
import pytest

from adaptive_mpc import Linear, ProblemSpec, Qoi, SpaceMesh, SpaceTimeGrid, TimeGrid
from adaptive_mpc.adapt import AdaptConfig, adapt_loop, mark, write_history_csv


def test_mark_examples():
    assert mark([1.0, 5.0, 2.0, 2.0], 0.5) == [1]
    assert mark([1.0, 1.0, 1.0, 1.0], 1.0) == [0, 1, 2, 3]
    assert mark([0.0, 0.0], 0.5) == []
    assert mark([], 0.5) == []
    assert mark([3.0, 1.0, 4.0, 1.0, 5.0], 0.6) == [2, 4]
    with pytest.raises(ValueError):
        mark([1.0, -1.0], 0.5)


def test_mark_is_minimal(rng):
    for _ in range(50):
        v = rng.exponential(size=rng.integers(1, 30))
        theta = rng.uniform(0.05, 1.0)
        sel = mark(v, theta)
        assert v[sel].sum() >= theta * v.sum() * (1 - 1e-12)
        # dropping the smallest marked entry falls short
        rest = sorted(sel, key=lambda i: v[i])[1:]
        assert v[rest].sum() < theta * v.sum()


def test_config_validation():
    with pytest.raises(ValueError):
        AdaptConfig(theta=0.0)
    with pytest.raises(ValueError):
        AdaptConfig(max_rounds=0)
    assert AdaptConfig(theta=0.4).time_fraction == 0.4 == AdaptConfig(theta=0.4).space_fraction


def _setup(M=4):
    spec = ProblemSpec(T=2.0, dynamics=Linear(0.1, 0.4), alpha=1e-1)
    grid = SpaceTimeGrid.uniform(TimeGrid.uniform(2.0, M, (0.5,)), SpaceMesh.uniform(3.0, 6))
    return spec, grid


def test_budget_equal_to_initial_size_does_nothing():
    spec, grid = _setup()
    out = adapt_loop(spec, Qoi.full(), AdaptConfig(mode="time", max_time_points=grid.M + 1), grid)
    assert out.grid is grid and len(out.history) == 1
    out = adapt_loop(spec, Qoi.full(), AdaptConfig(mode="space", max_space_dofs_total=grid.space_dofs), grid)
    assert out.grid is grid
    with pytest.raises(ValueError):
        adapt_loop(spec, Qoi.full(), AdaptConfig(max_time_points=2), grid)


@pytest.mark.parametrize("mode,key,budget", [("time", "time_points", 9), ("space", "space_dofs_total", 50),
                                             ("space_time", "space_dofs_total", 60)])
def test_budgets_respected_and_sizes_monotone(mode, key, budget):
    spec, grid = _setup()
    cfg = AdaptConfig(mode=mode, max_time_points=budget if key == "time_points" else None,
                      max_space_dofs_total=budget if key == "space_dofs_total" else None, max_rounds=30)
    out = adapt_loop(spec, Qoi.truncated(0.5), cfg, grid)
    sizes = [h[key] for h in out.history]
    assert max(sizes) <= budget
    assert all(b >= a for a, b in zip(sizes, sizes[1:]))
    dofs = [h["space_dofs_total"] for h in out.history]
    assert all(b >= a for a, b in zip(dofs, dofs[1:]))
    assert len(out.history) > 1


def test_deterministic(tmp_path):
    spec, grid = _setup()
    cfg = AdaptConfig(mode="space_time", max_space_dofs_total=70)
    a = adapt_loop(spec, Qoi.full(), cfg, grid)
    b = adapt_loop(spec, Qoi.full(), cfg, grid)
    write_history_csv(tmp_path / "a.csv", a.history)
    write_history_csv(tmp_path / "b.csv", b.history)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert np.array_equal(a.grid.time.points, b.grid.time.points)
    head = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert head == "round,time_points,space_dofs_total,qoi_value,eta_k,eta_h"


def test_truncation_time_required():
    spec, _ = _setup()
    grid = SpaceTimeGrid.uniform(TimeGrid.uniform(2.0, 3), SpaceMesh.uniform(3.0, 4))
    with pytest.raises(ValueError):
        adapt_loop(spec, Qoi.truncated(0.5), AdaptConfig(), grid)
