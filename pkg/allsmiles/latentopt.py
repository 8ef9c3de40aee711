#!/usr/bin/env python3
"""
Latent-space property optimization
The prior is whitened layer by layer (z_i = mu_i(z_<i) + sigma_i(z_<i) * eps_i),
and each eps_i is held on the sphere of radius sqrt(n_i - 1) where a standard
normal in n_i dimensions concentrates. ADAM then climbs a property head in
the angles of those spheres.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from allsmiles import nn, settings, smiles
from allsmiles import tensor as T
from allsmiles.corpus import PROPERTY_ORACLES
from allsmiles.errors import (ConfigError, DegenerateDirections, MaxLengthExceeded, NoValidDecode)
from allsmiles.log import get_logger
from allsmiles.seeding import child_seeds, generator
from allsmiles.settings import from_mapping
from allsmiles.tensor import Tensor
from allsmiles.vae import AllSmilesVae, beam_decode, parses_ok, prior_params, property_outputs

logger = get_logger(__name__)

POLE = 1e-12
LOG_2PI = math.log(2 * math.pi)
REPORT_COLUMNS = ['seed', 'steps', 'predicted', 'true', 'smiles']
SLICE_COLUMNS = ['u', 'v', 'smiles', 'predicted', 'true']


@dataclass
class OptConfig:
    learning_rate: float = 0.01
    lam: float = 0.01
    steps: int = 500
    head: str = 'mw'
    maximize: bool = True
    radius_constraint: bool = True
    include_first_layer_prior: bool = True
    eval_interval: int = 25
    trajectories: int = 1000
    top_k: int = 100
    report_top: int = 3
    beam_width: int = 5
    grammar_mask: bool = False

    @classmethod
    def from_dict(cls, data) -> 'OptConfig':
        return from_mapping(cls, data)

    def validate(self) -> None:
        if self.steps < 0 or self.trajectories < 0 or self.eval_interval < 0:
            raise ConfigError('steps, trajectories and eval_interval must be >= 0', key='opt')
        if self.learning_rate <= 0 or self.lam < 0:
            raise ConfigError('learning_rate must be > 0 and lam >= 0', key='opt')

    @property
    def sign(self) -> float:
        return 1.0 if self.maximize else -1.0


# Sphere coordinates

def sphere_radius(n: int) -> float:
    return math.sqrt(n - 1)


def sphere_point(theta: Tensor, n: int) -> Tensor:
    """Hyperspherical coordinates: x_j = r (prod_{i<j} sin t_i) cos t_j, x_n = r prod sin t_i"""
    if n < 2:
        raise ConfigError('sphere needs n >= 2', key='n')
    prefix = None
    coords = []
    for j in range(n - 1):
        angle = theta[j]
        cos = T.cos(angle)
        coords.append(cos if prefix is None else prefix * cos)
        sin = T.sin(angle)
        prefix = sin if prefix is None else prefix * sin
    coords.append(prefix)
    return T.stack(coords, axis=0) * sphere_radius(n)


def angles_to_point(theta: Sequence[float], n: int) -> np.ndarray:
    with T.no_grad(), T.precision(np.float64):
        return sphere_point(T.as_tensor(np.asarray(theta, dtype=np.float64)), n).data


def point_to_angles(x: Sequence[float]) -> np.ndarray:
    """Inverse of angles_to_point up to the radius; angles past a pole are 0"""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    theta = np.zeros(n - 1)
    tails = np.sqrt(np.cumsum((x ** 2)[::-1])[::-1])
    scale = max(tails[0], 1.0)
    for j in range(n - 2):
        if tails[j] < POLE * scale:
            break
        theta[j] = math.acos(max(-1.0, min(1.0, x[j] / tails[j])))
    else:
        if tails[n - 2] >= POLE * scale:
            theta[n - 2] = math.atan2(x[n - 1], x[n - 2]) % (2 * math.pi)
    return theta


def project_to_sphere(eps: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(eps)
    radius = sphere_radius(eps.size)
    if norm < POLE:
        out = np.zeros_like(eps)
        out[-1] = radius
        return out
    return eps * (radius / norm)


# Objective

def whitened_latent(model: AllSmilesVae, eps: Sequence[Tensor]) -> Tuple[Tensor, Tensor]:
    """(z of shape (1, Z), per-layer log prior densities summed) from whitened eps"""
    z: List[Tensor] = []
    log_prior: List[Tensor] = []
    for e in eps:
        e = e.reshape((1, e.shape[-1]))
        mu, logvar = prior_params(model, z)
        z_i = mu + T.exp(logvar * 0.5) * e
        density = ((logvar + T.square(z_i - mu) / T.exp(logvar) + LOG_2PI) * -0.5).sum()
        z.append(z_i)
        log_prior.append(density)
    return (T.concat(z, axis=-1) if len(z) > 1 else z[0]), log_prior


def whitened_objective(model: AllSmilesVae, params: Sequence[Tensor], cfg: OptConfig) -> Tensor:
    """sign * head(z) + lam * sum_i log N(z_i; prior_i)

    params are per-layer angles under the radius constraint, raw eps otherwise.
    """
    widths = model.config.latent_widths
    if cfg.radius_constraint:
        eps = [sphere_point(theta, n) for theta, n in zip(params, widths)]
    else:
        eps = list(params)
    z, log_prior = whitened_latent(model, eps)
    value = property_outputs(model, z)[cfg.head].sum() * cfg.sign
    if cfg.lam:
        terms = log_prior if cfg.include_first_layer_prior else log_prior[1:]
        if terms:
            total = terms[0]
            for term in terms[1:]:
                total = total + term
            value = value + total * cfg.lam
    return value


def _latent(model: AllSmilesVae, params: Sequence[Tensor], cfg: OptConfig) -> np.ndarray:
    with T.no_grad():
        eps = ([sphere_point(theta, n) for theta, n in zip(params, model.config.latent_widths)]
               if cfg.radius_constraint else list(params))
        return whitened_latent(model, eps)[0].data.reshape(-1).astype(np.float64)


# Trajectories

@dataclass
class TrajectoryPoint:
    step: int
    z: np.ndarray
    predicted: float
    smiles: Optional[str] = None


@dataclass
class Trajectory:
    seed: int
    points: List[TrajectoryPoint] = field(default_factory=list)

    @property
    def accepted(self) -> Optional[TrajectoryPoint]:
        """Last point that decoded to a parseable molecule"""
        for point in reversed(self.points):
            if point.smiles is not None:
                return point
        return None


def initial_eps(model: AllSmilesVae, seed: int, radius_constraint: bool = True) -> List[np.ndarray]:
    rng = generator(seed, 6)
    eps = [rng.standard_normal(n) for n in model.config.latent_widths]
    return [project_to_sphere(e) for e in eps] if radius_constraint else eps


def optimize_latent(model: AllSmilesVae, eps0: Sequence[np.ndarray], cfg: OptConfig,
                    decode: Optional[Callable[[np.ndarray], Optional[str]]] = None,
                    seed: int = 0) -> Trajectory:
    """ADAM ascent from eps0; points recorded every eval_interval steps and at the end"""
    trajectory = Trajectory(seed)
    with T.precision(np.float64), model.frozen():
        if cfg.radius_constraint:
            params = [T.parameter(point_to_angles(e)) for e in eps0]
        else:
            params = [T.parameter(np.asarray(e, dtype=np.float64)) for e in eps0]
        adam = nn.AdamState.create(params, lr=cfg.learning_rate)

        for step in range(cfg.steps + 1):
            last = step == cfg.steps
            if last or (cfg.eval_interval and step % cfg.eval_interval == 0):
                z = _latent(model, params, cfg)
                with T.no_grad():
                    predicted = float(property_outputs(model, T.as_tensor(z[None, :]))[cfg.head].data[0])
                trajectory.points.append(TrajectoryPoint(step, z, predicted, decode(z) if decode else None))
            if last:
                break
            for p in params:
                p.grad = None
            grads = T.backward(whitened_objective(model, params, cfg), wrt=params)
            nn.adam_step(params, [-g for g in grads], adam)
    return trajectory


def _decoder(model: AllSmilesVae, cfg: OptConfig) -> Callable[[np.ndarray], Optional[str]]:
    def decode(z: np.ndarray) -> Optional[str]:
        try:
            s = beam_decode(model, z, cfg.beam_width, cfg.grammar_mask)
        except MaxLengthExceeded:
            return None
        return s if s and parses_ok(s) else None
    return decode


def optimize_one(model: AllSmilesVae, seed: int, cfg: OptConfig) -> Trajectory:
    trajectory = optimize_latent(model, initial_eps(model, seed, cfg.radius_constraint), cfg,
                                 _decoder(model, cfg), seed)
    if trajectory.accepted is None:
        raise NoValidDecode(seed)
    return trajectory


def true_property(name: str, s: str) -> float:
    return float(PROPERTY_ORACLES[name](smiles.parse(s).graph))


@dataclass
class ProtocolReport:
    rows: pd.DataFrame
    attempted: int = 0
    failed: int = 0

    @property
    def top(self) -> List[float]:
        if self.rows.empty:
            return []
        return self.rows['true'].dropna().tolist()

    def top_true(self, count: int = 3, maximize: bool = True) -> List[float]:
        values = sorted(self.top, reverse=maximize)
        return values[:count]


def optimize_protocol(model: AllSmilesVae, cfg: OptConfig, seed: int = 0,
                      oracle: Optional[str] = None) -> ProtocolReport:
    """Run cfg.trajectories prior draws, rank the valid ones by prediction,
    and score the top_k with the true property oracle"""
    oracle = oracle or cfg.head
    if oracle not in PROPERTY_ORACLES:
        raise ConfigError(f'no oracle for {oracle!r}', key='oracle')
    if cfg.trajectories == 0:
        return ProtocolReport(pd.DataFrame(columns=REPORT_COLUMNS))

    seeds = child_seeds(seed, cfg.trajectories)
    workers = min(settings.thread_count(), cfg.trajectories)
    logger.info(f"🎯 Optimizing {cfg.trajectories} trajectories on {workers} workers "
                f"(radius_constraint={cfg.radius_constraint})")

    def run(s: int) -> Optional[Trajectory]:
        try:
            return optimize_one(model, s, cfg)
        except NoValidDecode:
            return None

    with model.frozen(), ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, seeds))

    rows = []
    for s, trajectory in zip(seeds, results):
        if trajectory is None:
            continue
        point = trajectory.accepted
        rows.append({'seed': s, 'steps': point.step, 'predicted': point.predicted,
                     'true': np.nan, 'smiles': point.smiles})
    failed = sum(r is None for r in results)
    if failed:
        logger.warning(f"⚠️ {failed} trajectories never decoded to a valid molecule")

    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    frame = frame.sort_values('predicted', ascending=not cfg.maximize, kind='stable').head(cfg.top_k).copy()
    frame['true'] = [true_property(oracle, s) for s in frame['smiles']]
    return ProtocolReport(frame.reset_index(drop=True), cfg.trajectories, failed)


def ablation_compare(model: AllSmilesVae, cfg: OptConfig, seed: int = 0) -> Dict[str, float]:
    """Top-k true-value means with and without the radius constraint"""
    out = {}
    for constrained in (True, False):
        variant = OptConfig(**{**cfg.__dict__, 'radius_constraint': constrained})
        top = optimize_protocol(model, variant, seed).top_true(cfg.report_top, cfg.maximize)
        out['constrained' if constrained else 'unconstrained'] = float(np.mean(top)) if top else float('nan')
    return out


# Slices and diagnostics

def regressor_direction(model: AllSmilesVae, head: str) -> np.ndarray:
    for h in model.heads:
        if h.name == head:
            return h.linear.W.data.reshape(-1).astype(np.float64)
    raise ConfigError(f'model has no head {head!r}', key='head')


def latent_slice(model: AllSmilesVae, center: Sequence[float], u_dir: Sequence[float],
                 v_dir: Sequence[float], steps: Tuple[int, int] = (21, 21), extent: float = 1.0,
                 head: str = 'mw', oracle: Optional[str] = None, width: Optional[int] = None) -> pd.DataFrame:
    """Decode a grid center + u*u_dir + v*v_dir; rows only for parseable points"""
    center = np.asarray(center, dtype=np.float64)
    u_dir = np.asarray(u_dir, dtype=np.float64)
    v_dir = np.asarray(v_dir, dtype=np.float64)
    if np.linalg.matrix_rank(np.stack([u_dir, v_dir])) < 2:
        raise DegenerateDirections('slice directions must be linearly independent')
    oracle = oracle or head

    def axis(count: int) -> np.ndarray:
        return np.zeros(1) if count <= 1 else np.linspace(-extent, extent, count)

    rows = []
    for u in axis(steps[0]):
        for v in axis(steps[1]):
            z = center + u * u_dir + v * v_dir
            try:
                s = beam_decode(model, z, width)
            except MaxLengthExceeded:
                continue
            if not parses_ok(s):
                continue
            predicted = _predict(model, z, head)
            rows.append({'u': float(u), 'v': float(v), 'smiles': s,
                         'predicted': predicted, 'true': true_property(oracle, s)})
    return pd.DataFrame(rows, columns=SLICE_COLUMNS)


def _predict(model: AllSmilesVae, z: np.ndarray, head: str) -> float:
    with T.no_grad():
        return float(property_outputs(model, T.as_tensor(z[None, :]))[head].data[0])


@dataclass
class AnnulusStats:
    n: int
    samples: int
    mean_norm: float
    std_norm: float
    within: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def annulus_check(n: int, samples: int, seed: int, band: float = 3.0) -> AnnulusStats:
    """Share of standard normal draws whose norm lies in [sqrt(n) - band, sqrt(n) + band]"""
    if n < 2:
        raise ConfigError('annulus check needs n >= 2', key='n')
    norms = np.linalg.norm(generator(seed, 7).standard_normal((samples, n)), axis=1)
    center = math.sqrt(n)
    within = float(np.mean(np.abs(norms - center) <= band)) if samples else 0.0
    return AnnulusStats(n, samples, float(norms.mean()) if samples else 0.0,
                        float(norms.std()) if samples else 0.0, within)
