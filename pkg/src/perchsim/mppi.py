"""Stochastic shooting optimizer for the perch approach.

Samples elevator-rate sequences around a nominal, rolls them out through the
coupled dynamics, and reweights by exponentiated negative terminal cost.
Failed rollouts (blow-ups) carry infinite cost and zero weight.  The current
mean is always evaluated alongside the samples so an update never abandons a
good incumbent for a batch of bad draws.
"""

from __future__ import annotations

import numpy as np

from .config import MppiConfig
from .rollout import Engine, RolloutRequest
from .vpm import FluidState


def terminal_cost(x_final, cfg: MppiConfig) -> float:
    """Quadratic terminal cost about the perch state."""
    x_final = np.asarray(x_final, dtype=float)
    if not np.all(np.isfinite(x_final)):
        return float("inf")
    d = x_final - np.asarray(cfg.x_perch)
    return float(d @ (np.asarray(cfg.q_terminal) * d))


def terminal_cost_batch(finals, status, cfg: MppiConfig) -> np.ndarray:
    q = np.asarray(cfg.q_terminal)
    d = finals - np.asarray(cfg.x_perch)[None, :]
    costs = np.einsum("bi,i,bi->b", d, q, d)
    costs[status != 0] = np.inf
    costs[~np.isfinite(costs)] = np.inf
    return costs


def sample_controls(mean, stdev: float, batch: int, rng: np.random.Generator,
                    u_limit: float) -> np.ndarray:
    """Independent normal perturbations of the mean sequence, clamped to the
    actuator range.  Deterministic for a given generator state."""
    mean = np.asarray(mean, dtype=float)
    noise = rng.normal(0.0, 1.0, (batch, len(mean))) * stdev
    return np.clip(mean[None, :] + noise, -u_limit, u_limit)


def mppi_update(controls, costs, temperature: float) -> np.ndarray:
    """Exponentially weighted average of the sampled sequences.

    Weights are exp(-(J - J_min) / temperature), normalized; infinite-cost
    samples get zero weight.  The minimum subtraction makes the update
    invariant to adding a constant to every cost.
    """
    costs = np.asarray(costs, dtype=float)
    finite = np.isfinite(costs)
    if not np.any(finite):
        raise ValueError("all sampled rollouts failed (infinite cost)")
    j_min = np.min(costs[finite])
    weights = np.where(finite, np.exp(-(costs - j_min) / temperature), 0.0)
    return (weights[:, None] * controls).sum(axis=0) / weights.sum()


def optimize(x0, fluid: FluidState, warm_start, cfg: MppiConfig,
             engine: Engine, rng: np.random.Generator,
             iterations: int | None = None) -> np.ndarray:
    """Iterated sample / rollout / reweight from a warm-start sequence.

    The horizon is the warm start's length (it shrinks as the maneuver
    progresses).  Every iteration evaluates the batch plus the incumbent
    mean; the returned sequence is the final reweighted mean.
    """
    u_star = np.clip(np.asarray(warm_start, dtype=float).copy(),
                     -engine.params.u_limit, engine.params.u_limit)
    iters = cfg.iterations if iterations is None else iterations
    if len(u_star) == 0 or iters == 0 or cfg.batch == 0:
        return u_star
    for _ in range(iters):
        samples = sample_controls(u_star, cfg.input_stdev, cfg.batch, rng,
                                  engine.params.u_limit)
        candidates = np.vstack([u_star[None, :], samples])
        res = engine.batch(RolloutRequest(x0=np.asarray(x0, dtype=float),
                                          fluid=fluid, controls=candidates))
        costs = terminal_cost_batch(res.finals, res.status, cfg)
        u_star = mppi_update(candidates, costs, cfg.temperature)
    return u_star
