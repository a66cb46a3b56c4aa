"""Hybrid near/far-field multipath channel synthesis.

The channel between the base station and a single user is a superposition of
L paths: one line-of-sight (LoS) path plus L-1 scatterer/reflector paths.
Each path contributes a steering vector (spherical-wavefront response when
the source distance is under the Rayleigh distance, planar otherwise), an
attenuation built from free-space spreading, molecular absorption, and
reflection loss, and a delay phase. The summed vector is normalized so its
squared norm equals the element count S*S_bar.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateChannelError
from .geometry import SPEED_OF_LIGHT, ArrayConfig, element_positions

if TYPE_CHECKING:  # pragma: no cover
    from .scenario import ScenarioConfig


# ---------------------------------------------------------------------------
# Materials / absorption
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaterialModel:
    """Reflector material plus molecular-absorption lookup.

    Absorption is either a flat coefficient (`k_abs`, valid at any frequency)
    or a table of (frequency_hz, k_abs_per_m) nodes with piecewise-linear
    interpolation between them. Table mode rejects frequencies outside the
    node range. Users can supply measured spectroscopic tables via
    `load_absorption_csv`.
    """

    refractive_index: complex = 2.24 - 0.025j   # n_t
    roughness_m: float = 8.8e-5                 # sigma_rough
    k_abs: float = 0.0033                       # 1/m, used when no table
    absorption_freq_hz: Optional[tuple] = None  # ascending table nodes
    absorption_k: Optional[tuple] = None

    def __post_init__(self):
        if self.k_abs < 0:
            raise ConfigError("k_abs must be >= 0")
        if self.roughness_m < 0:
            raise ConfigError("roughness_m must be >= 0")
        if (self.absorption_freq_hz is None) != (self.absorption_k is None):
            raise ConfigError("absorption table needs both frequency and k columns")
        if self.absorption_freq_hz is not None:
            f = np.asarray(self.absorption_freq_hz, dtype=float)
            k = np.asarray(self.absorption_k, dtype=float)
            if f.size < 2 or f.size != k.size:
                raise ConfigError("absorption table needs >= 2 matching rows")
            if np.any(np.diff(f) <= 0):
                raise ConfigError("absorption table frequencies must be ascending")
            if np.any(k < 0):
                raise ConfigError("absorption coefficients must be >= 0")

    def k_abs_at(self, f_hz: float) -> float:
        """Absorption coefficient at frequency f_hz (1/m)."""
        if self.absorption_freq_hz is None:
            return self.k_abs
        lo, hi = self.absorption_freq_hz[0], self.absorption_freq_hz[-1]
        if not lo <= f_hz <= hi:
            raise ConfigError(
                f"frequency {f_hz:g} Hz outside absorption table range "
                f"[{lo:g}, {hi:g}] Hz"
            )
        return float(np.interp(f_hz, self.absorption_freq_hz, self.absorption_k))


def load_absorption_csv(path) -> tuple[tuple, tuple]:
    """Read an absorption table CSV with header `frequency_hz,k_abs_per_m`."""
    freqs, ks = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["frequency_hz", "k_abs_per_m"]:
            raise ConfigError(
                f"absorption CSV must have header 'frequency_hz,k_abs_per_m', "
                f"got {reader.fieldnames}"
            )
        for row in reader:
            freqs.append(float(row["frequency_hz"]))
            ks.append(float(row["k_abs_per_m"]))
    return tuple(freqs), tuple(ks)


# ---------------------------------------------------------------------------
# Path parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathParams:
    """Parameters of a single propagation path (angles in radians, SI units)."""

    azimuth: float            # phi_l
    elevation: float          # theta_l
    distance_m: float         # r_l, distance to the RF source
    delay_s: float            # tau_l
    incidence: float = float("nan")  # phi_in,l, NLoS only
    is_los: bool = False

    def __post_init__(self):
        if not self.distance_m > 0:
            raise ConfigError("path distance must be positive")


@dataclass
class PathSet:
    """An ordered multipath realization.

    Path 1 is the LoS path by convention. `gains` holds the per-path
    attenuations evaluated at the carrier frequency; `gamma` is filled by the
    first narrowband synthesis against these gains.
    """

    paths: tuple
    gains: np.ndarray = field(default=None)  # alpha_l at the carrier
    gamma: Optional[float] = None

    def __post_init__(self):
        if len(self.paths) < 1:
            raise ConfigError("PathSet needs at least one path")
        if not self.paths[0].is_los or any(p.is_los for p in self.paths[1:]):
            raise ConfigError("exactly the first path must be LoS")

    def __len__(self) -> int:
        return len(self.paths)

    def distances(self) -> np.ndarray:
        return np.array([p.distance_m for p in self.paths])

    def near_field_mask(self, rayleigh_m: float) -> np.ndarray:
        """Which paths synthesize with the spherical-wavefront response."""
        return self.distances() < rayleigh_m


@dataclass(frozen=True)
class ChannelRealization:
    """Wideband channel: per-subcarrier rows plus the subcarrier grid."""

    values: np.ndarray          # (K, S*S_bar) complex
    subcarrier_hz: np.ndarray   # (K,)


# ---------------------------------------------------------------------------
# Responses and gains
# ---------------------------------------------------------------------------

def direction_vector(elevation: float, azimuth: float) -> np.ndarray:
    """Unit arrival-direction vector [sin(th)cos(ph), sin(th)sin(ph), cos(th)]."""
    st = np.sin(elevation)
    return np.array([st * np.cos(azimuth), st * np.sin(azimuth), np.cos(elevation)])


def near_field_response(azimuth, elevation, distance_m, cfg: ArrayConfig,
                        f_hz: Optional[float] = None) -> np.ndarray:
    """Spherical-wavefront response, complex vector of length S*S_bar.

    Element (s, s_bar) carries the phase of the exact propagation distance
    from the source at range `distance_m` to that AE. Defaults to the carrier
    frequency.
    """
    if not distance_m > 0:
        raise ValueError(f"source distance must be positive, got {distance_m}")
    f = cfg.carrier_hz if f_hz is None else f_hz
    pos = element_positions(cfg)
    t = direction_vector(elevation, azimuth)
    dist = np.linalg.norm(pos - distance_m * t, axis=1)
    return np.exp(-2j * np.pi * (f / SPEED_OF_LIGHT) * dist)


def far_field_response(azimuth, elevation, distance_m, cfg: ArrayConfig,
                       f_hz: Optional[float] = None) -> np.ndarray:
    """Planar-wavefront response.

    Uses the first-order expansion of the propagation distance,
    ||p - r*t|| ~ r - p.t, so the near-field response converges to this one
    element-wise as r grows.
    """
    f = cfg.carrier_hz if f_hz is None else f_hz
    pos = element_positions(cfg)
    t = direction_vector(elevation, azimuth)
    return np.exp(-2j * np.pi * (f / SPEED_OF_LIGHT) * (distance_m - pos @ t))


def select_response(azimuth, elevation, distance_m, rayleigh_m, cfg: ArrayConfig,
                    f_hz: Optional[float] = None) -> np.ndarray:
    """Near-field response iff distance < rayleigh_m, far-field otherwise."""
    if not rayleigh_m > 0:
        raise ValueError(f"Rayleigh distance must be positive, got {rayleigh_m}")
    if distance_m < rayleigh_m:
        return near_field_response(azimuth, elevation, distance_m, cfg, f_hz)
    return far_field_response(azimuth, elevation, distance_m, cfg, f_hz)


def los_path_gain(r1_m: float, f_hz: float, k_abs: float) -> float:
    """LoS attenuation: free-space spreading times molecular absorption."""
    if not (r1_m > 0 and f_hz > 0):
        raise ValueError("r1 and f must be positive")
    return SPEED_OF_LIGHT / (4.0 * np.pi * f_hz * r1_m) * np.exp(-0.5 * k_abs * r1_m)


def reflection_coefficient(incidence: float, n_t: complex, roughness_m: float,
                           f_hz: float) -> complex:
    """Smooth-surface Fresnel reflection times a Rayleigh roughness factor.

    The refraction angle arcsin(sin(incidence)/n_t) is evaluated in complex
    arithmetic on principal branches, so lossy refractive indices are fine.
    """
    if not 0 <= incidence < np.pi / 2:
        raise ValueError(f"incidence angle must lie in [0, pi/2), got {incidence}")
    n_t = complex(n_t)
    cos_in = np.cos(incidence)
    sin_ref = np.sin(incidence) / n_t
    cos_ref = np.sqrt(1.0 - sin_ref * sin_ref)  # cos(arcsin), principal branch
    fresnel = (cos_in - n_t * cos_ref) / (cos_in + n_t * cos_ref)
    rough = np.exp(-(8.0 * np.pi**2 * f_hz**2 * roughness_m**2 * cos_in**2)
                   / SPEED_OF_LIGHT**2)
    return complex(fresnel * rough)


def nlos_path_gain(reflection: complex, los_gain: float) -> float:
    """NLoS attenuation |Gamma_l| * alpha_1."""
    if los_gain < 0:
        raise ValueError("LoS gain must be >= 0")
    return abs(reflection) * los_gain


def path_gains(paths: PathSet, f_hz: float, material: MaterialModel) -> np.ndarray:
    """Per-path attenuations alpha_l at frequency f_hz.

    The LoS distance anchors the free-space term for every path; NLoS paths
    are additionally scaled by their reflection coefficient.
    """
    k_abs = material.k_abs_at(f_hz)
    alpha1 = los_path_gain(paths.paths[0].distance_m, f_hz, k_abs)
    gains = np.empty(len(paths))
    gains[0] = alpha1
    for i, p in enumerate(paths.paths[1:], start=1):
        refl = reflection_coefficient(p.incidence, material.refractive_index,
                                      material.roughness_m, f_hz)
        gains[i] = nlos_path_gain(refl, alpha1)
    return gains


# ---------------------------------------------------------------------------
# Sampling and synthesis
# ---------------------------------------------------------------------------

def sample_paths(scenario: "ScenarioConfig", rng: np.random.Generator) -> PathSet:
    """Draw one multipath realization from the scenario's distributions.

    Path 1 is LoS at the fixed distance/delay; the remaining L-1 paths draw
    distance, delay, and incidence angle uniformly from the configured
    ranges. Azimuth ~ U(-pi, pi) and elevation ~ U(-pi/2, pi/2) for all
    paths. Gains are evaluated at the carrier frequency.
    """
    lo, hi = scenario.num_paths_range
    if hi < lo or lo < 1:
        raise ConfigError(f"invalid path-count range [{lo}, {hi}]")
    n_paths = int(lo if lo == hi else rng.integers(lo, hi + 1))
    n_nlos = n_paths - 1

    if n_nlos > 0 and not scenario.scatter_min_m < scenario.scatter_max_m:
        raise ConfigError(
            f"empty scatterer distance range [{scenario.scatter_min_m}, "
            f"{scenario.scatter_max_m}]"
        )

    azim = rng.uniform(-np.pi, np.pi, size=n_paths)
    elev = rng.uniform(-np.pi / 2, np.pi / 2, size=n_paths)
    dist = rng.uniform(scenario.scatter_min_m, scenario.scatter_max_m, size=n_paths)
    delay = rng.uniform(scenario.delay_min_s, scenario.delay_max_s, size=n_paths)
    incid = rng.uniform(0.0, np.pi / 2, size=n_paths)

    paths = [PathParams(azim[0], elev[0], scenario.los_distance_m,
                        scenario.los_delay_s, is_los=True)]
    for i in range(1, n_paths):
        paths.append(PathParams(azim[i], elev[i], dist[i], delay[i],
                                incidence=incid[i]))
    pset = PathSet(tuple(paths))
    pset.gains = path_gains(pset, scenario.array.carrier_hz, scenario.material)
    return pset


def synthesize_channel(paths: PathSet, f_hz: float, cfg: ArrayConfig,
                       rayleigh_m: float,
                       material: Optional[MaterialModel] = None) -> np.ndarray:
    """Superpose the paths at frequency f_hz and normalize.

    With `material` given, gains are re-evaluated at f_hz (wideband use);
    otherwise the PathSet's stored carrier-frequency gains apply. The result
    satisfies ||h||^2 = S*S_bar. An exactly cancelling superposition raises
    DegenerateChannelError instead of dividing by zero.
    """
    gains = path_gains(paths, f_hz, material) if material is not None else paths.gains
    if gains is None:
        raise ConfigError("PathSet has no gains; pass a MaterialModel")

    raw = np.zeros(cfg.num_elements, dtype=complex)
    for p, g in zip(paths.paths, gains):
        resp = select_response(p.azimuth, p.elevation, p.distance_m, rayleigh_m,
                               cfg, f_hz)
        raw += g * np.exp(-2j * np.pi * f_hz * p.delay_s) * resp

    norm = np.linalg.norm(raw)
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateChannelError(
            "channel superposition has zero norm; cannot normalize"
        )
    gamma = np.sqrt(cfg.num_elements) / norm
    if material is None and paths.gamma is None:
        paths.gamma = float(gamma)
    return gamma * raw


def subcarrier_frequencies(f_c: float, n_subcarriers: int, bandwidth_hz: float) -> np.ndarray:
    """Subcarrier grid f_k = f_c + (k - 1 - (K-1)/2) * B/K for k = 1..K."""
    k = np.arange(1, n_subcarriers + 1)
    return f_c + (k - 1 - (n_subcarriers - 1) / 2.0) * (bandwidth_hz / n_subcarriers)


def wideband_channel(paths: PathSet, scenario: "ScenarioConfig",
                     n_subcarriers: int, bandwidth_hz: float) -> ChannelRealization:
    """Per-subcarrier channel matrix, one normalized row per subcarrier.

    Every row re-evaluates the path gains at its own subcarrier frequency,
    including the absorption lookup, and reuses the carrier-frequency
    Rayleigh distance for the near/far split (Z varies negligibly over the
    bands of interest).
    """
    if n_subcarriers < 1:
        raise ConfigError("need at least one subcarrier")
    if not bandwidth_hz > 0:
        raise ConfigError("bandwidth must be positive")
    cfg = scenario.array
    z = scenario.rayleigh_m()
    freqs = subcarrier_frequencies(cfg.carrier_hz, n_subcarriers, bandwidth_hz)
    rows = np.stack([
        synthesize_channel(paths, f, cfg, z, material=scenario.material)
        for f in freqs
    ])
    return ChannelRealization(values=rows, subcarrier_hz=freqs)
