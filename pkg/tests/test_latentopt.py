import math

import numpy as np
import pytest

from allsmiles import gradcheck, latentopt, vae
from allsmiles import tensor as T
from allsmiles.errors import ConfigError, DegenerateDirections
from allsmiles.latentopt import OptConfig


def single_layer_model(seed=0):
    config = gradcheck.micro_config(hierarchy_layers=1, latent_width=4)
    return vae.AllSmilesVae(config, gradcheck.micro_vocabulary(), seed)


def random_angles(rng, n):
    theta = rng.uniform(0.05, math.pi - 0.05, size=n - 1)
    theta[-1] = rng.uniform(0.05, 2 * math.pi - 0.05)
    return theta


def test_angles_to_point_examples() -> None:
    assert np.allclose(latentopt.angles_to_point([0.0], 2), [1.0, 0.0])
    assert np.allclose(latentopt.angles_to_point([math.pi / 2] * 2, 3), [0.0, 0.0, math.sqrt(2)], atol=1e-12)


def test_sphere_round_trip() -> None:
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 12))
        theta = random_angles(rng, n)
        x = latentopt.angles_to_point(theta, n)
        assert np.linalg.norm(x) == pytest.approx(math.sqrt(n - 1), rel=1e-12)
        assert np.allclose(latentopt.point_to_angles(x), theta, atol=1e-9)


def test_point_to_angles_at_pole() -> None:
    x = np.array([2.0, 0.0, 0.0, 0.0])
    theta = latentopt.point_to_angles(x)
    assert np.allclose(theta, 0.0)
    assert np.allclose(latentopt.angles_to_point(theta, 4), [math.sqrt(3), 0, 0, 0])


def test_sphere_point_requires_two_dims() -> None:
    with pytest.raises(ConfigError):
        latentopt.sphere_point(T.as_tensor([0.0]), 1)


def test_objective_without_prior_term_is_the_head() -> None:
    model = single_layer_model()
    head = model.heads[0]
    with T.precision(np.float64):
        eps = T.as_tensor(np.array([0.5, -1.0, 0.25, 1.5]))
        cfg = OptConfig(lam=0.0, radius_constraint=False)
        value = latentopt.whitened_objective(model, [eps], cfg).item()
        expected = float(eps.data @ head.linear.W.data[:, 0] + head.linear.b.data[0])
        assert value == pytest.approx(expected, rel=1e-6)

        cfg_reg = OptConfig(lam=0.1, radius_constraint=False)
        with_prior = latentopt.whitened_objective(model, [eps], cfg_reg).item()
        log_density = -0.5 * (float(eps.data @ eps.data) + 4 * math.log(2 * math.pi))
        assert with_prior - value == pytest.approx(0.1 * log_density, rel=1e-6)

        minimize = OptConfig(lam=0.0, radius_constraint=False, maximize=False)
        assert latentopt.whitened_objective(model, [eps], minimize).item() == pytest.approx(-value)


def test_first_layer_prior_flag(micro_model) -> None:
    widths = micro_model.config.latent_widths
    with T.precision(np.float64):
        eps = [T.as_tensor(np.full(w, 0.3)) for w in widths]
        base = OptConfig(lam=0.0, radius_constraint=False)
        full = OptConfig(lam=1.0, radius_constraint=False)
        rest = OptConfig(lam=1.0, radius_constraint=False, include_first_layer_prior=False)
        value = latentopt.whitened_objective(micro_model, eps, base).item()
        first = -0.5 * (0.09 * widths[0] + widths[0] * math.log(2 * math.pi))
        diff = latentopt.whitened_objective(micro_model, eps, full).item() - \
            latentopt.whitened_objective(micro_model, eps, rest).item()
        assert diff == pytest.approx(first, rel=1e-6)
        assert value != latentopt.whitened_objective(micro_model, eps, full).item()


def test_objective_gradient_in_angles(micro_model) -> None:
    rng = np.random.default_rng(2)
    cfg = OptConfig(lam=0.01)
    for trial in range(3):
        with T.precision(np.float64):
            params = [T.parameter(random_angles(rng, w)) for w in micro_model.config.latent_widths]
        with micro_model.frozen():
            report = T.grad_check(lambda: latentopt.whitened_objective(micro_model, params, cfg), params,
                                  tolerance=1e-4, atol=1e-8, name=f'angles[{trial}]')
        assert report.passed, report.summary()


def test_zero_steps_returns_initialization(micro_model) -> None:
    eps0 = latentopt.initial_eps(micro_model, seed=3)
    trajectory = latentopt.optimize_latent(micro_model, eps0, OptConfig(steps=0, lam=0.0))
    assert len(trajectory.points) == 1
    assert trajectory.points[0].step == 0
    assert trajectory.accepted is None


def test_radius_is_kept_along_the_trajectory() -> None:
    model = single_layer_model()
    eps0 = latentopt.initial_eps(model, seed=1)
    assert np.linalg.norm(eps0[0]) == pytest.approx(math.sqrt(3))
    trajectory = latentopt.optimize_latent(model, eps0, OptConfig(steps=50, eval_interval=10, lam=0.01))
    assert [p.step for p in trajectory.points] == [0, 10, 20, 30, 40, 50]
    for point in trajectory.points:
        # one layer with a standard normal prior: z is eps itself
        assert np.linalg.norm(point.z) ** 2 == pytest.approx(3.0, rel=1e-9)


def test_linear_head_reaches_the_sphere_optimum() -> None:
    model = single_layer_model()
    w = np.array([0.4, -0.2, 0.1, 0.3])
    model.heads[0].linear.W.data[:, 0] = w
    cfg = OptConfig(steps=2000, learning_rate=0.01, lam=0.0, eval_interval=0)
    trajectory = latentopt.optimize_latent(model, latentopt.initial_eps(model, seed=0), cfg)
    optimum = math.sqrt(3) * np.linalg.norm(w)
    assert trajectory.points[-1].predicted == pytest.approx(optimum, rel=0.01)
    assert trajectory.points[-1].predicted <= optimum + 1e-5


def test_optimization_is_deterministic(micro_model) -> None:
    cfg = OptConfig(steps=20, eval_interval=5)
    a = latentopt.optimize_latent(micro_model, latentopt.initial_eps(micro_model, 9), cfg)
    b = latentopt.optimize_latent(micro_model, latentopt.initial_eps(micro_model, 9), cfg)
    assert all(np.array_equal(p.z, q.z) for p, q in zip(a.points, b.points))


def test_parameters_stay_trainable_after_optimizing(micro_model) -> None:
    latentopt.optimize_latent(micro_model, latentopt.initial_eps(micro_model, 0), OptConfig(steps=2))
    assert all(p.requires_grad for p in micro_model.parameters())


def test_protocol_with_no_trajectories(micro_model) -> None:
    report = latentopt.optimize_protocol(micro_model, OptConfig(trajectories=0))
    assert report.rows.empty
    assert list(report.rows.columns) == latentopt.REPORT_COLUMNS
    assert report.top_true() == []


def test_protocol_rejects_unknown_oracle(micro_model) -> None:
    with pytest.raises(ConfigError):
        latentopt.optimize_protocol(micro_model, OptConfig(trajectories=1), oracle='logp')


def test_opt_config_validation() -> None:
    with pytest.raises(ConfigError):
        OptConfig.from_dict({'steps': -1})
    with pytest.raises(ConfigError):
        OptConfig.from_dict({'lr': 0.1})
    assert OptConfig.from_dict({'maximize': False}).sign == -1.0


def test_slice_needs_independent_directions(micro_model) -> None:
    z = np.zeros(micro_model.config.latent_size)
    d = np.ones_like(z)
    with pytest.raises(DegenerateDirections):
        latentopt.latent_slice(micro_model, z, d, 2 * d, steps=(3, 3))


def test_regressor_direction(micro_model) -> None:
    direction = latentopt.regressor_direction(micro_model, 'mw')
    assert direction.shape == (micro_model.config.latent_size,)
    with pytest.raises(ConfigError):
        latentopt.regressor_direction(micro_model, 'logp')


def test_annulus_concentration() -> None:
    stats = latentopt.annulus_check(128, 10_000, seed=0)
    assert stats.within >= 0.99
    assert stats.mean_norm == pytest.approx(math.sqrt(128), rel=0.01)
    assert latentopt.annulus_check(128, 500, seed=3) == latentopt.annulus_check(128, 500, seed=3)
    latentopt.annulus_check(2, 100, seed=0)
