"""Batched open-loop rollouts through the coupled glider + wake dynamics.

This is the hot path of the planner: every control-sequence candidate is
rolled out against a private fork of the fluid state.  The compiled backend
evaluates batches across OpenMP threads; each rollout owns its scratch, so
results are bit-identical to sequential evaluation.  A rollout whose state
leaves the flight envelope (or whose boundary solve fails) is flagged failed
and does not poison the rest of the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel
from .config import ExperimentConfig, GliderParams, VpmConfig, pack_params
from .vpm import FluidState


@dataclass
class RolloutRequest:
    x0: np.ndarray                  # (7,)
    fluid: FluidState               # snapshot; forked per rollout, never mutated
    controls: np.ndarray            # (B, T) elevator rates
    record: bool = False
    workers: int = 0


@dataclass
class RolloutResult:
    status: np.ndarray              # (B,) 0 = ok, >0 = failed at step-1
    finals: np.ndarray              # (B, 7)
    trajectories: np.ndarray | None  # (B, T+1, 7) when recorded

    @property
    def ok(self) -> np.ndarray:
        return self.status == 0


class Engine:
    """Parameter-bound facade over the active stepping backend."""

    def __init__(self, vpm_cfg: VpmConfig, glider_params: GliderParams,
                 workers: int = 0):
        self.cfg = vpm_cfg
        self.params = glider_params
        self.workers = workers
        self.iparams, self.fparams = pack_params(vpm_cfg, glider_params)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "Engine":
        return cls(cfg.vpm, cfg.glider, cfg.workers)

    def _backend(self):
        return _accel.backend_module()

    def _flat(self, fluid: FluidState):
        return (fluid.wake_pos, fluid.wake_gamma, fluid.wake_age, fluid.n_wake,
                fluid.ring_a, fluid.ring_b, fluid.prev_pos, fluid.prev_gamma,
                fluid.n_prev, fluid.prev_lev_gamma, fluid.unsteady_ema)

    def _rebuild(self, flat) -> FluidState:
        f = FluidState.empty(self.cfg)
        (wake_pos, wake_gamma, wake_age, n_wake, ring_a, ring_b,
         prev_pos, prev_gamma, n_prev, prev_lev, ema) = flat
        f.wake_pos[:n_wake] = wake_pos[:n_wake]
        f.wake_gamma[:n_wake] = wake_gamma[:n_wake]
        f.wake_age[:n_wake] = wake_age[:n_wake]
        f.n_wake = int(n_wake)
        f.ring_a = int(ring_a)
        f.ring_b = int(ring_b)
        f.prev_pos[:n_prev] = prev_pos[:n_prev]
        f.prev_gamma[:n_prev] = prev_gamma[:n_prev]
        f.n_prev = int(n_prev)
        f.prev_lev_gamma = float(prev_lev)
        f.unsteady_ema[:] = ema
        return f

    def step(self, x, u: float, fluid: FluidState):
        """One coupled plant step.  Returns (ok, x_new, fluid_new, f_wing)."""
        rc, x_new, fw, _, flat = self._backend().step(
            np.ascontiguousarray(x, dtype=float), float(u), *self._flat(fluid),
            self.iparams, self.fparams, True)
        return rc == 0, x_new, self._rebuild(flat), fw

    def fluid_step(self, x, fluid: FluidState):
        """Wake update around a prescribed rigid-body state (loads discarded).

        This is how the control loop's observed wake instance is advanced.
        """
        rc, _, fw, mw, flat = self._backend().step(
            np.ascontiguousarray(x, dtype=float), 0.0, *self._flat(fluid),
            self.iparams, self.fparams, False)
        if rc != 0:
            raise RuntimeError("observed-wake update failed (singular boundary solve)")
        return self._rebuild(flat), fw, mw

    def rollout(self, x0, controls, fluid: FluidState, record: bool = False):
        """Single open-loop rollout.  Returns (status, trajectory-or-final, fluid)."""
        rc, traj, flat = self._backend().rollout(
            np.ascontiguousarray(x0, dtype=float),
            np.ascontiguousarray(controls, dtype=float), *self._flat(fluid),
            self.iparams, self.fparams, record, True)
        return rc, traj, self._rebuild(flat)

    def batch(self, req: RolloutRequest) -> RolloutResult:
        controls = np.ascontiguousarray(req.controls, dtype=float)
        workers = req.workers if req.workers else self.workers
        status, finals, trajs = self._backend().batch_rollout(
            np.ascontiguousarray(req.x0, dtype=float), controls,
            *self._flat(req.fluid), self.iparams, self.fparams,
            req.record, workers)
        return RolloutResult(status=status, finals=finals, trajectories=trajs)
