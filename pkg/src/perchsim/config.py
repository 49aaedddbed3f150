"""Configuration dataclasses, JSON config files, and parameter packing.

Every tunable in the simulator lives in one of the blocks below.  The
top-level :class:`ExperimentConfig` mirrors the JSON config file consumed
by the CLI; unknown keys are rejected with their full path so typos never
silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

MODES = ("no_disturbance", "uncompensated", "compensated")


class ConfigError(ValueError):
    """Invalid or unknown configuration entry (message carries the field path)."""


@dataclass
class VpmConfig:
    """Vortex-wake model parameters.

    ``l_chord``/``l_w`` mirror the same fields of :class:`GliderParams` so the
    wake model is self-contained; :meth:`ExperimentConfig.validate` enforces
    that the two blocks agree.
    """

    n_bound: int = 10
    r_core: float = 0.02            # regularized-kernel core radius [m]
    k_dissipation: float = 0.999    # per-step wake circulation decay
    shed_offset: float | None = None  # [m]; default 0.2 * panel length
    critical_aoa: float = math.radians(9.0)
    particle_cap: int = 60
    rho: float = 1.2                # air density [kg/m^3]
    dt: float = 0.01
    l_chord: float = 0.20
    l_w: float = 0.12               # wing reference point offset aft of the nose
    lev_shed_gain: float = 0.2      # upstream-edge vortex feed per unit front-panel change
    unsteady_smoothing: float = 0.25  # low-pass factor for circulation-rate loads

    def __post_init__(self):
        if self.shed_offset is None:
            self.shed_offset = 0.2 * self.l_chord / self.n_bound

    @property
    def panel_length(self) -> float:
        return self.l_chord / self.n_bound

    def validate(self, path: str = "vpm") -> None:
        if self.n_bound < 2:
            raise ConfigError(f"{path}.n_bound: must be >= 2")
        if not (0.0 < self.k_dissipation <= 1.0):
            raise ConfigError(f"{path}.k_dissipation: must be in (0, 1]")
        if self.particle_cap < 4:
            raise ConfigError(f"{path}.particle_cap: must be >= 4")
        if self.dt <= 0.0:
            raise ConfigError(f"{path}.dt: must be > 0")
        if self.r_core <= 0.0:
            raise ConfigError(f"{path}.r_core: must be > 0")
        if self.l_chord <= 0.0:
            raise ConfigError(f"{path}.l_chord: must be > 0")
        if not (0.0 < self.unsteady_smoothing <= 1.0):
            raise ConfigError(f"{path}.unsteady_smoothing: must be in (0, 1]")
        if self.lev_shed_gain < 0.0:
            raise ConfigError(f"{path}.lev_shed_gain: must be >= 0")


@dataclass
class GliderParams:
    """Flat-plate glider rigid-body and elevator parameters.

    The mass/inertia/length defaults are desk-scale values for a small foam
    glider; they are not taken from any published vehicle and every one of
    them is config-file overridable.
    """

    m: float = 0.082                # [kg]
    inertia: float = 0.002         # [kg m^2]
    g: float = 9.81
    l: float = 0.35                 # body length [m]
    l_w: float = 0.12               # wing point offset [m]
    l_e: float = 0.22               # elevator arm [m]
    l_chord: float = 0.20
    s_e: float = 0.05               # elevator area per unit span [m^2]
    rho: float = 1.2
    phi_limit: float = math.radians(50.0)
    u_limit: float = 15.0           # elevator rate limit [rad/s]

    def validate(self, path: str = "glider") -> None:
        for name in ("m", "inertia", "g", "l", "l_e", "l_chord", "s_e", "rho"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{path}.{name}: must be > 0")
        if self.phi_limit <= 0.0 or self.u_limit <= 0.0:
            raise ConfigError(f"{path}: actuator limits must be > 0")


@dataclass
class MppiConfig:
    """Sampling-based trajectory optimizer parameters."""

    batch: int = 256
    iterations: int = 3
    temperature: float = 0.05
    input_stdev: float = 2.0        # per-step elevator-rate stdev [rad/s]
    horizon: int = 77
    q_terminal: list[float] = field(
        default_factory=lambda: [10.0, 10.0, 1.0, 0.0, 0.2, 0.2, 0.2]
    )
    x_perch: list[float] = field(
        default_factory=lambda: [3.5, 0.0, math.pi / 4.0, 0.0, 0.5, -0.5, 0.0]
    )

    def validate(self, path: str = "mppi") -> None:
        if self.batch < 1:
            raise ConfigError(f"{path}.batch: must be >= 1")
        if self.temperature <= 0.0:
            raise ConfigError(f"{path}.temperature: must be > 0")
        if self.input_stdev < 0.0:
            raise ConfigError(f"{path}.input_stdev: must be >= 0")
        if len(self.q_terminal) != 7 or any(q < 0 for q in self.q_terminal):
            raise ConfigError(f"{path}.q_terminal: need 7 nonnegative weights")
        if len(self.x_perch) != 7:
            raise ConfigError(f"{path}.x_perch: need 7 entries")


@dataclass
class SynthesisConfig:
    """Feedback-policy synthesis: perturbed rollouts, regression, TVLQR."""

    n_samples: int = 64             # perturbed rollouts per policy build
    state_stdev: list[float] = field(
        default_factory=lambda: [1e-3, 1e-3, 5e-3, 5e-3, 0.05, 0.05, 0.05]
    )
    input_stdev: float = 0.5        # [rad/s]
    q_final: list[float] = field(
        default_factory=lambda: [400.0, 400.0, 10.0, 1.0, 1.0, 1.0, 1.0]
    )
    q_running: list[float] = field(
        default_factory=lambda: [0.1, 0.1, 5.0, 0.1, 0.1, 0.1, 5.0]
    )
    r_running: float = 0.01
    finite_difference: bool = False  # diagnostic alternative to the regression

    def validate(self, path: str = "synthesis") -> None:
        if self.n_samples < 9:
            raise ConfigError(f"{path}.n_samples: must be >= 9")
        if len(self.state_stdev) != 7:
            raise ConfigError(f"{path}.state_stdev: need 7 entries")
        if self.r_running <= 0.0:
            raise ConfigError(f"{path}.r_running: must be > 0")
        for name in ("q_final", "q_running"):
            vals = getattr(self, name)
            if len(vals) != 7 or any(v < 0 for v in vals):
                raise ConfigError(f"{path}.{name}: need 7 nonnegative weights")


@dataclass
class ScenarioConfig:
    """Closed-loop trial scenario: initial state, gust ring, sensing, timing."""

    mode: str = "no_disturbance"
    x0: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0, 7.0, 0.0, 0.0])
    t_proj_steps: int = 10          # replanning budget, 10 Hz at dt = 0.01 s
    max_steps: int = 100
    bootstrap_iterations: int = 12  # MPPI iterations for the initial plan
    loop_mode: str = "simulated"    # "simulated" (lockstep) or "threaded"
    fire_step: int = 25             # tick at which the true ring enters the flow
    ring_center: list[float] = field(default_factory=lambda: [3.6, -0.1])
    ring_speed: float = 7.5         # characterized gust translation speed [m/s]
    ring_direction: float = -1.0    # travel sign along +x
    ring_separation: float = 0.28   # core separation [m]
    sensor_pos: list[float] = field(default_factory=lambda: [3.4, -0.35])
    trigger_threshold_pa: float = 15.0
    est_circulation_scale: float = 1.0   # estimated-vs-true ring perturbation knobs
    est_separation_scale: float = 1.0
    est_height_offset: float = 0.0
    policy_tolerance: float = 0.05  # projection-consistency tolerance [m]

    def validate(self, path: str = "scenario") -> None:
        if self.mode not in MODES:
            raise ConfigError(f"{path}.mode: must be one of {MODES}")
        if len(self.x0) != 7:
            raise ConfigError(f"{path}.x0: need 7 entries")
        if self.t_proj_steps < 0:
            raise ConfigError(f"{path}.t_proj_steps: must be >= 0")
        if self.loop_mode not in ("simulated", "threaded"):
            raise ConfigError(f"{path}.loop_mode: 'simulated' or 'threaded'")
        if self.ring_speed <= 0.0 or self.ring_separation <= 0.0:
            raise ConfigError(f"{path}: ring speed and separation must be > 0")
        if self.ring_direction not in (-1.0, 1.0):
            raise ConfigError(f"{path}.ring_direction: must be -1 or 1")


@dataclass
class ExperimentConfig:
    """Everything the CLI needs for a run; mirrors the JSON config file."""

    vpm: VpmConfig = field(default_factory=VpmConfig)
    glider: GliderParams = field(default_factory=GliderParams)
    mppi: MppiConfig = field(default_factory=MppiConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    trials: int = 10
    seed_base: int = 0
    workers: int = 0                # 0 = one per hardware thread
    out_dir: str = "out"

    def validate(self) -> None:
        self.vpm.validate()
        self.glider.validate()
        self.mppi.validate()
        self.synthesis.validate()
        self.scenario.validate()
        if self.trials < 1:
            raise ConfigError("trials: must be >= 1")
        if self.workers < 0:
            raise ConfigError("workers: must be >= 0")
        if self.vpm.l_chord != self.glider.l_chord:
            raise ConfigError("vpm.l_chord and glider.l_chord must agree")
        if self.vpm.l_w != self.glider.l_w:
            raise ConfigError("vpm.l_w and glider.l_w must agree")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return sha256_of_config(self.to_dict())


def _from_dict(cls, data: dict, path: str):
    """Build ``cls`` from ``data``, rejecting unknown keys with their path."""
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown configuration key")
        sub = known[key].type
        if isinstance(value, dict) and key in _NESTED:
            kwargs[key] = _from_dict(_NESTED[key], value, f"{path}.{key}")
        else:
            kwargs[key] = value
    return cls(**kwargs)


_NESTED = {
    "vpm": VpmConfig,
    "glider": GliderParams,
    "mppi": MppiConfig,
    "synthesis": SynthesisConfig,
    "scenario": ScenarioConfig,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _from_dict(ExperimentConfig, data, "config")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a JSON object")
    return config_from_dict(data)


def sha256_of_config(data: dict) -> str:
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


# Flat parameter packing shared by the numpy and compiled stepping backends.
# Order is frozen; the .pyx mirrors these offsets.
IP_N_BOUND, IP_CAP = 0, 1
(FP_R_CORE, FP_K_DISS, FP_SHED_OFF, FP_CRIT_AOA, FP_RHO, FP_DT, FP_M, FP_I,
 FP_G, FP_L, FP_L_W, FP_L_E, FP_L_CHORD, FP_S_E, FP_PHI_LIM, FP_U_LIM,
 FP_LEV_GAIN, FP_ETA) = range(18)


def pack_params(vpm: VpmConfig, glider: GliderParams) -> tuple[np.ndarray, np.ndarray]:
    iparams = np.array([vpm.n_bound, vpm.particle_cap], dtype=np.int64)
    fparams = np.array(
        [
            vpm.r_core, vpm.k_dissipation, vpm.shed_offset, vpm.critical_aoa,
            vpm.rho, vpm.dt, glider.m, glider.inertia, glider.g, glider.l,
            glider.l_w, glider.l_e, glider.l_chord, glider.s_e,
            glider.phi_limit, glider.u_limit, vpm.lev_shed_gain,
            vpm.unsteady_smoothing,
        ],
        dtype=np.float64,
    )
    return iparams, fparams
