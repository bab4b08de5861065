"""Benchmark scenarios: reference paths, speed profiles, adhesion fields.

Two courses are bundled:

  sine -- y_ref(x) = A sin(2 pi x / lambda) with A = 8 m, lambda = 200 m,
          tracked at 20 m/s on uniform mu = 0.5.
  dlc  -- ISO 3888-1 shaped double lane change (section table below) at
          15 m/s over a seeded random-patch mu field.

Both launch nearly from rest (0.6 m/s -- the lowest speed clear of the
sideslip singularity at vx = 0) and ramp to the course speed under a
constant-acceleration-in-distance target profile. The vehicle enters
pointing along the road axis. For the lane change that matches the straight
approach leg; for the sine it leaves a ~14 degree mismatch to the path
tangent at the origin, so the launch doubles as a low-speed
disturbance-rejection test -- the regime where aggressive crosstrack
steering on a slick surface generates the largest sideslip.

The sine course also offers launch="cruise": a straight approach leg entered
at course speed, aligned with the entry tangent, for studies that want the
at-speed regime in isolation rather than the launch transient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

from .errors import PathDomain, ScenarioDomain
from .plant import MuField

# ISO 3888-1 severe lane-change geometry. Section lengths are from the
# standard; lane widths scale with the vehicle width b (factor * b + pad) and
# the side lane is offset from the entry lane by half of each width plus a
# 1 m lateral clearance. The bundled truck has a 4.147 m track; with tire
# allowance the effective vehicle width used for the scaling is 4.5 m.
ISO_3888_1_SECTIONS = (15.0, 30.0, 25.0, 25.0, 15.0)
ISO_3888_1_WIDTHS = {
    "entry": (1.1, 0.25),
    "side": (1.2, 0.25),
    "exit": (1.3, 0.25),
}
VEHICLE_WIDTH = 4.5
LANE_CLEARANCE = 1.0

SCENARIO_KINDS = ("sine", "dlc")


def iso_lane_offset(vehicle_width: float = VEHICLE_WIDTH) -> float:
    """Lateral offset between entry-lane and side-lane centerlines."""
    f_e, p_e = ISO_3888_1_WIDTHS["entry"]
    f_s, p_s = ISO_3888_1_WIDTHS["side"]
    w_entry = f_e * vehicle_width + p_e
    w_side = f_s * vehicle_width + p_s
    return 0.5 * (w_entry + w_side) + LANE_CLEARANCE


class PathPoint(NamedTuple):
    e_y: float        # signed lateral error, > 0 when the vehicle is left of path
    psi_ref: float    # path heading, rad
    v_target: float   # speed setpoint at this station, m/s
    kappa: float = 0.0  # signed path curvature, 1/m (left turn positive)


@dataclass(frozen=True)
class ReferencePath:
    """Analytic reference line y_ref(x) plus a distance-based speed profile.

    kind "sine": geom = (amplitude, wavenumber, course_end); the run-up and
    the post-course extension continue the entry/exit tangents. kind "dlc":
    geom = (offset,) with the ISO section breakpoints; cosine-blend ramps
    make the centerline C1-continuous.
    """

    kind: str
    x_start: float
    ramp_end: float
    v_launch: float
    v_course: float
    geom: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in ("sine", "dlc"):
            raise PathDomain(f"unknown path kind {self.kind!r}")
        if self.ramp_end <= self.x_start:
            raise PathDomain("empty path: speed ramp ends before the path starts")
        if self.v_launch <= 0.0 or self.v_course <= 0.0:
            raise PathDomain("speeds must stay positive over the whole course")

    # -- geometry ------------------------------------------------------------

    def y_ref(self, x: float) -> float:
        if self.kind == "sine":
            amp, k, x_end = self.geom
            if x < 0.0:
                return amp * k * x
            if x > x_end:
                return amp * math.sin(k * x_end) + amp * k * math.cos(k * x_end) * (x - x_end)
            return amp * math.sin(k * x)
        off = self.geom[0]
        s1, s2, s3, s4, _ = ISO_3888_1_SECTIONS
        x1, x2, x3, x4 = s1, s1 + s2, s1 + s2 + s3, s1 + s2 + s3 + s4
        if x <= x1 or x >= x4:
            return 0.0
        if x < x2:
            return off * 0.5 * (1.0 - math.cos(math.pi * (x - x1) / s2))
        if x <= x3:
            return off
        return off * 0.5 * (1.0 + math.cos(math.pi * (x - x3) / s4))

    def slope(self, x: float) -> float:
        if self.kind == "sine":
            amp, k, x_end = self.geom
            if x < 0.0:
                return amp * k
            if x > x_end:
                return amp * k * math.cos(k * x_end)
            return amp * k * math.cos(k * x)
        off = self.geom[0]
        s1, s2, s3, s4, _ = ISO_3888_1_SECTIONS
        x1, x2, x3, x4 = s1, s1 + s2, s1 + s2 + s3, s1 + s2 + s3 + s4
        if x1 < x < x2:
            return off * 0.5 * math.pi / s2 * math.sin(math.pi * (x - x1) / s2)
        if x3 < x < x4:
            return -off * 0.5 * math.pi / s4 * math.sin(math.pi * (x - x3) / s4)
        return 0.0

    def heading(self, x: float) -> float:
        return math.atan(self.slope(x))

    def curvature(self, x: float) -> float:
        """Signed curvature of the reference line (left turn positive)."""
        if self.kind == "sine":
            amp, k, x_end = self.geom
            if x < 0.0 or x > x_end:
                return 0.0
            d1 = amp * k * math.cos(k * x)
            d2 = -amp * k * k * math.sin(k * x)
            return d2 / (1.0 + d1 * d1) ** 1.5
        off = self.geom[0]
        s1, s2, s3, s4, _ = ISO_3888_1_SECTIONS
        x1, x2, x3, x4 = s1, s1 + s2, s1 + s2 + s3, s1 + s2 + s3 + s4
        if x1 < x < x2:
            d1 = off * 0.5 * math.pi / s2 * math.sin(math.pi * (x - x1) / s2)
            d2 = off * 0.5 * (math.pi / s2) ** 2 * math.cos(math.pi * (x - x1) / s2)
        elif x3 < x < x4:
            d1 = -off * 0.5 * math.pi / s4 * math.sin(math.pi * (x - x3) / s4)
            d2 = -off * 0.5 * (math.pi / s4) ** 2 * math.cos(math.pi * (x - x3) / s4)
        else:
            return 0.0
        return d2 / (1.0 + d1 * d1) ** 1.5

    def v_target_at(self, x: float) -> float:
        """Constant-acceleration (in distance) ramp, then the course speed."""
        if x >= self.ramp_end:
            return self.v_course
        if x <= self.x_start:
            return self.v_launch
        frac = (x - self.x_start) / (self.ramp_end - self.x_start)
        return math.sqrt(self.v_launch**2 + (self.v_course**2 - self.v_launch**2) * frac)

    def query(self, x: float, y: float) -> PathPoint:
        psi_ref = self.heading(x)
        e_y = (y - self.y_ref(x)) * math.cos(psi_ref)
        return PathPoint(
            e_y=e_y, psi_ref=psi_ref,
            v_target=self.v_target_at(x), kappa=self.curvature(x),
        )


@dataclass(frozen=True)
class Scenario:
    """A closed-loop benchmark: path + speed profile + mu field + horizon."""

    name: str
    path: ReferencePath
    duration: float                    # s
    mu_kind: str                       # MuField kind
    mu_lo: float
    mu_hi: float
    mu_patch_len: float = 5.0
    seed: int = 0                      # base seed; runs mix in their own
    aligned_launch: bool = False       # start heading along the path tangent

    def mu_field(self, seed: int | None = None) -> MuField:
        seed = self.seed if seed is None else seed
        if self.mu_kind == "uniform":
            return MuField.uniform(self.mu_lo)
        if self.mu_kind == "seeded-random-patch":
            return MuField.seeded_patches(self.mu_lo, self.mu_hi, seed, self.mu_patch_len)
        return MuField(self.mu_kind, self.mu_lo, self.mu_hi, seed)

    def initial_pose(self) -> tuple[float, float, float, float]:
        """(x, y, psi, vx) at launch: on the path, heading down the road axis
        (or along the path tangent for aligned launches)."""
        x0 = self.path.x_start
        psi0 = self.path.heading(x0) if self.aligned_launch else 0.0
        return x0, self.path.y_ref(x0), psi0, self.path.v_launch


_RUNUP = 150.0         # m of straight launch leg before the lane-change course
_RAMP_MARGIN = 10.0    # m between end of speed ramp and course entry
_SINE_RAMP = 320.0     # m of in-course speed ramp for the sine launch
_V_LAUNCH = 0.6        # m/s; near rest but clear of the vx ~ 0 singularity


def build_scenario(kind: str, **overrides) -> Scenario:
    """Construct a benchmark scenario; unknown kinds/ranges -> ScenarioDomain.

    Recognized overrides: amplitude, wavelength (sine geometry), v_target,
    duration, mu (uniform level), mu_lo/mu_hi (patch band), seed.
    """
    if kind not in SCENARIO_KINDS:
        raise ScenarioDomain(f"unknown scenario kind {kind!r}, expected one of {SCENARIO_KINDS}")
    unknown = set(overrides) - {
        "amplitude", "wavelength", "v_target", "duration", "mu", "mu_lo", "mu_hi",
        "seed", "launch",
    }
    if unknown:
        raise ScenarioDomain(f"unknown scenario overrides: {sorted(unknown)}")
    seed = int(overrides.get("seed", 0))

    if kind == "sine":
        amp = float(overrides.get("amplitude", 8.0))
        lam = float(overrides.get("wavelength", 200.0))
        v_course = float(overrides.get("v_target", 20.0))
        launch = str(overrides.get("launch", "rest"))
        if launch not in ("rest", "cruise"):
            raise ScenarioDomain(f"launch must be 'rest' or 'cruise', got {launch!r}")
        cruise = launch == "cruise"
        duration = float(overrides.get("duration", 34.0 if cruise else 36.0))
        mu = float(overrides.get("mu", 0.5))
        if amp < 0.0 or lam <= 0.0:
            raise ScenarioDomain(f"need amplitude >= 0 and wavelength > 0, got {amp}, {lam}")
        _check_speed_duration(v_course, duration)
        _check_mu(mu, mu)
        if cruise:
            # Enter the course already at speed, aligned with the approach
            # tangent -- the regime the published study holds throughout.
            path = ReferencePath(
                kind="sine",
                x_start=-_RUNUP,
                ramp_end=-_RAMP_MARGIN,
                v_launch=v_course,
                v_course=v_course,
                geom=(amp, 2.0 * math.pi / lam, 2.0 * lam),
            )
            return Scenario(
                name="sine-cruise", path=path, duration=duration,
                mu_kind="uniform", mu_lo=mu, mu_hi=mu, seed=seed,
                aligned_launch=True,
            )
        path = ReferencePath(
            kind="sine",
            x_start=0.0,
            ramp_end=_SINE_RAMP,
            v_launch=_V_LAUNCH,
            v_course=v_course,
            geom=(amp, 2.0 * math.pi / lam, 2.0 * lam),
        )
        return Scenario(
            name="sine", path=path, duration=duration,
            mu_kind="uniform", mu_lo=mu, mu_hi=mu, seed=seed,
        )

    v_course = float(overrides.get("v_target", 15.0))
    duration = float(overrides.get("duration", 28.0))
    mu_lo = float(overrides.get("mu_lo", 0.3))
    mu_hi = float(overrides.get("mu_hi", 0.8))
    _check_speed_duration(v_course, duration)
    _check_mu(mu_lo, mu_hi)
    path = ReferencePath(
        kind="dlc",
        x_start=-_RUNUP,
        ramp_end=-_RAMP_MARGIN,
        v_launch=_V_LAUNCH,
        v_course=v_course,
        geom=(iso_lane_offset(),),
    )
    return Scenario(
        name="dlc", path=path, duration=duration,
        mu_kind="seeded-random-patch", mu_lo=mu_lo, mu_hi=mu_hi, seed=seed,
    )


def _check_speed_duration(v: float, duration: float) -> None:
    if not (0.0 < v <= 40.0):
        raise ScenarioDomain(f"target speed must lie in (0, 40] m/s, got {v}")
    if duration <= 0.0:
        raise ScenarioDomain(f"duration must be positive, got {duration}")


def _check_mu(mu_lo: float, mu_hi: float) -> None:
    if not (0.05 <= mu_lo <= mu_hi <= 1.5):
        raise ScenarioDomain(f"adhesion band must satisfy 0.05 <= lo <= hi <= 1.5, got [{mu_lo}, {mu_hi}]")
