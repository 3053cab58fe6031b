"""Run configuration schema for the command line front end.

One JSON document per run. Every block rejects unknown keys. Frequencies are
angular (rad/s) unless the field name ends in ``_hz``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .constants import DT_AWG, OMEGA_R, RAMAN_1_TO_0, RAMAN_1_TO_2, RAMAN_2_TO_0, SIGMA_DELTA, SIGMA_OMEGA_FRAC
from .constants import TAU_RISE, TAU_RYD_BRIGHT, TAU_RYD_DARK, NU0_SR88

COMMANDS = ("optimize-pulse", "simulate-ghz", "run-clock", "cascade", "recapture")


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PulseBlock(_Block):
    n_max: int = Field(ge=2, le=16)
    rabi: float = Field(gt=0, description="Rydberg Rabi frequency in rad/s")
    dt: float = Field(DT_AWG, gt=0)
    tau_rise: float = Field(TAU_RISE, ge=0)
    gamma: float = Field(0.0, ge=0, description="Rydberg decay rate used during optimization, 1/s")
    num_steps: Optional[int] = Field(None, ge=2)
    search_duration: bool = False
    f_target: float = Field(0.999, gt=0, lt=1)
    restarts: int = Field(8, ge=1)
    maxiter: int = Field(2000, ge=1)

    @model_validator(mode="after")
    def _steps(self):
        if self.num_steps is None and not self.search_duration:
            raise ValueError("set num_steps or enable search_duration")
        return self


class GeometryBlock(_Block):
    preset: Optional[str] = None
    positions: Optional[list[tuple[int, int]]] = None
    file: Optional[str] = None

    @model_validator(mode="after")
    def _one_source(self):
        if sum(x is not None for x in (self.preset, self.positions, self.file)) > 1:
            raise ValueError("give at most one of preset, positions, file")
        return self


class NoiseBlock(_Block):
    preset: Literal["default", "ideal", "decay_only", "blockade_only"] = "default"
    sigma_omega_frac: float = Field(SIGMA_OMEGA_FRAC, ge=0, le=1)
    sigma_delta: float = Field(SIGMA_DELTA, ge=0)
    gamma_dark: float = Field(1 / TAU_RYD_DARK, ge=0)
    gamma_bright: float = Field(1 / TAU_RYD_BRIGHT, ge=0)
    raman_rates_hz: tuple[float, float, float] = (RAMAN_1_TO_0, RAMAN_1_TO_2, RAMAN_2_TO_0)
    raman_time: float = Field(5e-3, ge=0)
    recoil_loss: bool = True
    lattice_depth_er: float = Field(50.0, gt=0)
    lattice_off: Optional[float] = Field(None, ge=0)
    per_atom_detuning: bool = False
    per_atom_rabi: bool = False


class GhzBlock(_Block):
    num_atoms: int = Field(ge=1, le=10)
    shots: int = Field(200, ge=1)
    num_phases: int = Field(16, ge=4)
    pulse_file: Optional[str] = None
    max_rydberg: Optional[int] = Field(2, ge=1)
    finite_blockade_check: bool = True


class ClockBlock(_Block):
    num_ensembles: int = Field(9, ge=1)
    num_atoms: int = Field(4, ge=1)
    dark_time: float = Field(3e-3, gt=0)
    t_cycle: float = Field(1.26, gt=0)
    cycles: int = Field(10000, ge=2)
    gain: float = Field(1e-3, gt=0, le=1)
    nu0_hz: float = Field(NU0_SR88, gt=0)
    fill: float = Field(1.0, gt=0, le=1)
    contrast_mode: Literal["max", "per_size"] = "max"
    contrast: Union[float, dict[int, float]] = 1.0
    projection_noise: bool = True
    white_fm_adev_1s: float = Field(1e-16, ge=0)
    random_walk_rate: float = Field(0.0, ge=0)
    flicker_level: float = Field(0.0, ge=0)
    line_amplitude: float = Field(0.0, ge=0)
    line_frequency_hz: float = Field(60.0, gt=0)
    compare_css: bool = True
    taus: Optional[list[float]] = None

    @model_validator(mode="after")
    def _timing(self):
        if self.dark_time >= self.t_cycle:
            raise ValueError("dark_time must be shorter than t_cycle")
        return self


class CascadeBlock(_Block):
    num_sizes: int = Field(4, ge=1, le=8)
    last_copies: int = Field(2, ge=1)
    slope: int = Field(8, ge=0)
    sizes: Optional[list[int]] = None
    copies: Optional[list[int]] = None
    contrasts: Optional[list[float]] = None
    sigma: float = Field(math.pi / 6, gt=0)
    degraded: bool = False
    readout: float = Field(0.99, gt=0, le=1)
    phase_points: int = Field(201, ge=1)
    draws: int = Field(100_000, ge=100)
    mc_check: bool = True

    @model_validator(mode="after")
    def _lengths(self):
        if (self.sizes is None) != (self.copies is None):
            raise ValueError("sizes and copies must be given together")
        if self.sizes is not None and len(self.sizes) != len(self.copies):
            raise ValueError("sizes and copies differ in length")
        return self


class LatticeBlock(_Block):
    depth_er: float = Field(50.0, gt=0)
    t_max_us: float = Field(40.0, gt=0)
    points: int = Field(81, ge=3)
    with_recoil: bool = True
    depth_sweep_er: list[float] = [25.0, 50.0, 100.0]
    q_points: int = Field(64, ge=8)
    m_cutoff: int = Field(12, ge=5)


class RunConfig(_Block):
    seed: int = Field(0, ge=0, lt=2**64)
    out: Optional[str] = None
    format: Literal["csv", "json"] = "csv"
    pulse: Optional[PulseBlock] = None
    geometry: Optional[GeometryBlock] = None
    noise: Optional[NoiseBlock] = None
    ghz: Optional[GhzBlock] = None
    clock: Optional[ClockBlock] = None
    cascade: Optional[CascadeBlock] = None
    lattice: Optional[LatticeBlock] = None


_REQUIRED = {
    "optimize-pulse": ("pulse",),
    "simulate-ghz": ("ghz",),
    "run-clock": ("clock",),
    "cascade": ("cascade",),
    "recapture": ("lattice",),
}


def default_config(command: str) -> dict:
    """Plain-dict default document for ``command``."""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    doc: dict = {"seed": 0, "format": "csv"}
    if command == "optimize-pulse":
        doc["pulse"] = {"n_max": 2, "rabi": OMEGA_R, "num_steps": 49}
    elif command == "simulate-ghz":
        doc["ghz"] = {"num_atoms": 4}
        doc["noise"] = {"preset": "default"}
    elif command == "run-clock":
        doc["clock"] = {}
    elif command == "cascade":
        doc["cascade"] = {}
    else:
        doc["lattice"] = {}
    return doc


def validate(doc: dict, command: str) -> RunConfig:
    cfg = RunConfig.model_validate(doc)
    for block in _REQUIRED[command]:
        if getattr(cfg, block) is None:
            raise ValueError(f"command {command} needs a '{block}' block")
    return cfg


def load_config(path: str | Path, command: str) -> RunConfig:
    return validate(json.loads(Path(path).read_text()), command)
