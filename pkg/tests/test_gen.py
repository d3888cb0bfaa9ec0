import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scoredistill.errors import ConfigError, DimensionError
from scoredistill.gen import (
    ParticleGenerator,
    WarpedLatentGenerator,
    init_particles,
    make_warped,
    pullback,
    read_particles_csv,
    render,
    write_particles_csv,
)
from scoredistill.oracle import Condition, GaussianMixture


def test_particle_render_is_identity():
    pts = np.arange(12.0).reshape(6, 2)
    g = ParticleGenerator(pts)
    np.testing.assert_array_equal(render(g, 0, [0]), pts[[0]])
    np.testing.assert_array_equal(render(g, 0, [4, 1]), pts[[4, 1]])


def test_particle_render_returns_copy():
    g = ParticleGenerator(np.zeros((3, 2)))
    out = render(g, 0, [1])
    out[0, 0] = 5.0
    assert g.points[1, 0] == 0.0


def test_particle_pullback_scatter():
    g = ParticleGenerator(np.zeros((5, 2)))
    grad = pullback(g, 0, [3], np.array([[1.0, 0.0]]))
    expected = np.zeros((5, 2))
    expected[3] = [1.0, 0.0]
    np.testing.assert_array_equal(grad, expected)


def test_particle_pullback_repeated_rows_accumulate():
    g = ParticleGenerator(np.zeros((3, 1)))
    grad = pullback(g, 0, [1, 1], np.array([[2.0], [3.0]]))
    np.testing.assert_array_equal(grad[:, 0], [0.0, 5.0, 0.0])


def test_pullback_zero_dirs():
    for g in (ParticleGenerator(np.ones((4, 3))), make_warped(3, seed=1)):
        assert np.all(pullback(g, 0, [0, 1], np.zeros((2, 3))) == 0)


def test_pullback_shape_mismatch():
    g = ParticleGenerator(np.ones((4, 2)))
    with pytest.raises(DimensionError):
        pullback(g, 0, [0, 1], np.zeros((3, 2)))
    with pytest.raises(DimensionError):
        pullback(make_warped(2), 0, [0], np.zeros((1, 3)))


def test_bad_indices():
    g = ParticleGenerator(np.ones((4, 2)))
    with pytest.raises(IndexError):
        render(g, 0, [4])
    with pytest.raises(IndexError):
        render(g, 0, [])
    w = make_warped(2, num_views=2)
    with pytest.raises(IndexError):
        render(w, 2, [0])
    with pytest.raises(IndexError):
        pullback(w, -1, [0], np.zeros((1, 2)))


def test_particle_independence():
    rng = np.random.default_rng(0)
    g = ParticleGenerator(rng.normal(size=(6, 2)))
    before = g.snapshot()
    g.theta = g.theta - 0.1 * pullback(g, 0, [2], rng.normal(size=(1, 2)))
    changed = np.any(g.snapshot() != before, axis=1)
    assert changed.tolist() == [False, False, True, False, False, False]


def test_warped_zero_latent_renders_zero():
    base = make_warped(3, seed=2)
    g = WarpedLatentGenerator(np.zeros(4), base.views, base.U, np.zeros(base.b.shape))
    assert np.all(render(g, 1, [0, 1]) == 0)


def test_warped_render_formula_and_replication():
    g = make_warped(2, latent_dim=3, hidden=5, num_views=3, seed=4)
    x = render(g, 2, [0, 1, 2])
    expected = g.views[2] @ np.tanh(g.U @ g.latent + g.b)
    np.testing.assert_allclose(x, np.tile(expected, (3, 1)), atol=0)


def test_warped_maps_immutable():
    g = make_warped(2)
    with pytest.raises(ValueError):
        g.U[0, 0] = 1.0
    with pytest.raises(ValueError):
        g.views[0][0, 0] = 1.0


def test_warped_shape_validation():
    with pytest.raises(DimensionError):
        WarpedLatentGenerator(np.zeros(3), [np.zeros((2, 5))], np.zeros((5, 4)), np.zeros(5))
    with pytest.raises(DimensionError):
        WarpedLatentGenerator(np.zeros(4), [np.zeros((2, 5)), np.zeros((2, 6))], np.zeros((5, 4)), np.zeros(5))


def test_make_warped_deterministic():
    a, b = make_warped(3, seed=9), make_warped(3, seed=9)
    np.testing.assert_array_equal(a.U, b.U)
    np.testing.assert_array_equal(a.views[3], b.views[3])
    assert not np.array_equal(a.U, make_warped(3, seed=10).U)


def test_warped_lipschitz():
    rng = np.random.default_rng(5)
    g = make_warped(3, seed=5)
    for _ in range(20):
        delta = rng.normal(size=g.latent.shape)
        h = 1e-3
        base = render(g, 0, [0])[0]
        moved = WarpedLatentGenerator(g.latent + h * delta, g.views, g.U, g.b)
        gap = np.linalg.norm(render(moved, 0, [0])[0] - base)
        bound = h * np.linalg.norm(g.views[0], 2) * np.linalg.norm(g.U, 2) * np.linalg.norm(delta)
        assert gap <= bound


def test_warped_adjoint_matches_fd_hundred_cases():
    rng = np.random.default_rng(6)
    h = 1e-4
    for _ in range(100):
        dim = int(rng.integers(1, 6))
        g = make_warped(dim, latent_dim=int(rng.integers(1, 6)), hidden=int(rng.integers(2, 10)),
                        num_views=3, seed=int(rng.integers(1 << 30)))
        view = int(rng.integers(3))
        rows = np.arange(int(rng.integers(1, 5)))
        dirs = rng.normal(size=(rows.size, dim))
        delta = rng.normal(size=g.latent.shape)
        lhs = pullback(g, view, rows, dirs) @ delta

        def inner(s):
            moved = WarpedLatentGenerator(g.latent + s * delta, g.views, g.U, g.b)
            return np.sum(dirs * render(moved, view, rows))

        fd = (inner(h) - inner(-h)) / (2 * h)
        assert abs(lhs - fd) <= 1e-4 * max(abs(lhs), abs(fd)) + 1e-10


# initialisation


def test_gauss_init_clt():
    g = init_particles({"n": 100_000, "dim": 2, "init": "gauss", "mean": 0.0, "std": 1.0}, 3)
    assert np.all(np.abs(g.points.mean(axis=0)) <= 4 / np.sqrt(100_000))


def test_gauss_init_deterministic():
    spec = {"n": 10, "dim": 3, "init": "gauss"}
    np.testing.assert_array_equal(init_particles(spec, 1).points, init_particles(spec, 1).points)


def test_at_condition_mode_single_component():
    mu = np.array([2.0, -1.0])
    gmm = GaussianMixture([1.0], [mu], [[1.0, 1.0]])
    g = init_particles({"n": 500, "init": "at_condition_mode"}, 0, gmm, Condition.unconditional())
    assert np.max(np.linalg.norm(g.points - mu, axis=1)) < 0.6  # about 6 jitter standard deviations
    assert g.points.std(axis=0) == pytest.approx([0.1, 0.1], rel=0.1)


def test_at_condition_mode_respects_subset(two_modes):
    g = init_particles({"n": 200, "init": "at_condition_mode"}, 0, two_modes, Condition.subset(two_modes, [1]))
    assert np.all(g.points[:, 0] < -2)


def test_init_errors(tmp_path, two_modes):
    with pytest.raises(ConfigError):
        init_particles({"n": 0, "dim": 2, "init": "gauss"}, 0)
    with pytest.raises(ConfigError):
        init_particles({"n": 5, "init": "at_condition_mode"}, 0)
    with pytest.raises(ConfigError):
        init_particles({"n": 5, "dim": 2, "init": "sobol"}, 0)
    with pytest.raises(ConfigError):
        init_particles({"init": "from_file", "path": tmp_path / "missing.csv"}, 0)


def test_csv_round_trip_and_from_file(tmp_path):
    pts = np.random.default_rng(0).normal(size=(7, 3)) * 1e3
    path = write_particles_csv(pts, tmp_path / "p.csv")
    assert path.read_text().splitlines()[0] == "x0,x1,x2"
    np.testing.assert_array_equal(read_particles_csv(path), pts)
    g = init_particles({"init": "from_file", "path": str(path), "n": 7}, 0)
    np.testing.assert_array_equal(g.points, pts)
    with pytest.raises(ConfigError):
        init_particles({"init": "from_file", "path": str(path), "n": 8}, 0)


@pytest.mark.parametrize("text", ["", "a,b\n1,2\n", "x0,x1\n", "x0,x1\n1,2\n3\n", "x0,x1\n1,zz\n"])
def test_corrupt_csv(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(ConfigError):
        read_particles_csv(p)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_particle_adjoint_property(n, d, seed):
    rng = np.random.default_rng(seed)
    g = ParticleGenerator(rng.normal(size=(n, d)))
    rows = rng.integers(0, n, size=int(rng.integers(1, n + 1)))
    dirs = rng.normal(size=(rows.size, d))
    delta = rng.normal(size=(n, d))
    # <pullback(dirs), delta> = <dirs, render(delta)>
    lhs = np.sum(pullback(g, 0, rows, dirs) * delta)
    rhs = np.sum(dirs * delta[rows])
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)
