"""Run configuration (a single JSON document, unknown keys rejected)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..problems import CircuitParams, DesignVector, ElectrodeProblem, SlitProblem
from ..problems.base import ProblemDefinition


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SlitConfig(_Strict):
    kind: Literal["slit"] = "slit"
    variant: Literal["linear", "nonlinear", "lq"] = "linear"
    alpha: float = Field(1e-4, gt=0)
    sigma: float = Field(1.72, gt=0)
    q0: float = 1.0
    n0: int = Field(2, ge=2)
    source_scale: float = 1.0

    def build(self) -> SlitProblem:
        return SlitProblem(
            self.variant,
            alpha=self.alpha,
            sigma=self.sigma,
            q0=self.q0,
            n0=self.n0,
            source_scale=self.source_scale,
        )


class ElectrodeConfig(_Strict):
    kind: Literal["electrode"] = "electrode"
    sigma: float = Field(1.72, gt=0)
    theta: float = 22.0
    d: float = 0.5
    s0: float = 1.5
    I_bar: float = 50.0
    beta: int = 2
    y_tip: float = 0.0
    y_up: float = 30.0
    m: list[float] = [10.0, 20.0]
    s: list[float] = [1.0, 2.0]
    free_m: list[bool] | None = None
    free_s: list[bool] | None = None
    u_hat: float = 5.0
    alpha: float = Field(1e-8, gt=0)
    max_control_step: float | None = 2.0

    @model_validator(mode="after")
    def _lengths(self):
        if len(self.m) != len(self.s):
            raise ValueError("m and s need the same length")
        for name in ("free_m", "free_s"):
            v = getattr(self, name)
            if v is not None and len(v) != len(self.m):
                raise ValueError(f"{name} needs one entry per hole")
        return self

    def params(self) -> CircuitParams:
        return CircuitParams(
            sigma=self.sigma, theta=self.theta, d=self.d, s0=self.s0, I_bar=self.I_bar,
            beta=self.beta, y_tip=self.y_tip, y_up=self.y_up,
        )

    def design(self) -> DesignVector:
        return DesignVector(
            m=tuple(self.m), s=tuple(self.s),
            free_m=None if self.free_m is None else tuple(self.free_m),
            free_s=None if self.free_s is None else tuple(self.free_s),
        )

    def build(self) -> ElectrodeProblem:
        return ElectrodeProblem(
            self.params(), self.design(), u_hat=self.u_hat, alpha=self.alpha,
            max_control_step=self.max_control_step,
        )


ProblemConfig = Annotated[Union[SlitConfig, ElectrodeConfig], Field(discriminator="kind")]

ALGORITHMS = ("global", "mesh_adaptive", "fully_adaptive")
_ALIASES = {"mesh": "mesh_adaptive", "full": "fully_adaptive"}


class ReferenceConfig(_Strict):
    """How the reference goal value is obtained when it is not given.

    ``method="global"``: the converged optimum on the global levels
    ``level - 2 .. level``.  ``method="adaptive"``: a fully adaptive run up
    to ``max_dofs``; the finest level and the levels closest to 1/2 and 1/4
    of its dofs are used.  With ``extrapolate`` the three values are
    combined by Aitken extrapolation.
    """

    method: Literal["global", "adaptive"] = "global"
    level: int | None = Field(None, ge=2, description="default: 6 (slit), 3 (electrode)")
    max_dofs: int = Field(200_000, ge=1000, description="size of the adaptive reference run")
    extrapolate: bool = True
    cache_dir: str | None = None


class RunConfig(_Strict):
    problem: ProblemConfig = SlitConfig()
    algorithm: Literal["global", "mesh_adaptive", "fully_adaptive"] = "fully_adaptive"
    n_ref: int = Field(6, ge=1, description="number of mesh levels (upper bound when adaptive)")
    tol: float | None = Field(None, gt=0, description="goal tolerance; default 1e-4 |eta| on level 0")
    tol_kkt: float = Field(1e-10, gt=0)
    alpha_N: float = Field(1.0, gt=0, le=1)
    c_b: float = Field(0.1, gt=0, le=1)
    theta_mark: float = Field(0.3, gt=0, le=1)
    max_newton_steps: int = Field(50, ge=1)
    max_dofs: int | None = Field(None, ge=1)
    ordering: Literal["colamd", "rcm"] = "colamd"
    consistent_start: bool | None = None
    reference_goal: float | Literal["compute"] | None = None
    reference: ReferenceConfig = ReferenceConfig()
    design_level: int = Field(1, ge=0, description="global refinements of the coarse mesh for design runs")
    design_rtol: float = Field(1e-4, gt=0, description="stop alternating when J drops by less")
    design_max_rounds: int = Field(20, ge=1)
    out_dir: str | None = None
    write_vtk: bool = True

    @field_validator("algorithm", mode="before")
    @classmethod
    def _alias(cls, v):
        return _ALIASES.get(v, v)

    def build_problem(self) -> ProblemDefinition:
        return self.problem.build()

    def with_updates(self, **kw) -> "RunConfig":
        data = self.model_dump()
        data.update(kw)
        return RunConfig.model_validate(data)

    def digest(self, *fields: str) -> str:
        """Stable hash of the selected fields (all fields if none given)."""
        data = self.model_dump(mode="json")
        if fields:
            data = {k: data[k] for k in fields}
        blob = json.dumps(data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path) -> RunConfig:
    return RunConfig.model_validate_json(Path(path).read_text())
