"""Array-of-subarrays (AoSA) geometry.

A planar base-station array in the x-y plane: a sqrt(S) x sqrt(S) grid of
subarrays (SAs), each a sqrt(S_bar) x sqrt(S_bar) grid of antenna elements
(AEs). All quantities are SI (meters, Hz, seconds).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError

SPEED_OF_LIGHT = 299_792_458.0  # m/s


def _isqrt_exact(n: int, label: str) -> int:
    r = math.isqrt(n)
    if r * r != n:
        raise ConfigError(f"{label} must be a perfect square, got {n}")
    return r


@dataclass(frozen=True)
class ArrayConfig:
    """Geometry of the AoSA panel.

    num_subarrays (S) and elems_per_subarray (S_bar) must be perfect squares.
    sa_spacing is the distance between neighbouring SAs and must exceed the
    span of one SA, (sqrt(S_bar)-1)*ae_spacing, so subarrays never overlap.
    """

    num_subarrays: int        # S
    elems_per_subarray: int   # S_bar
    sa_spacing: float         # d_sub, m
    ae_spacing: float         # d_a, m
    carrier_hz: float         # f_c

    def __post_init__(self):
        if self.num_subarrays < 1 or self.elems_per_subarray < 1:
            raise ConfigError("array sizes must be positive")
        _isqrt_exact(self.num_subarrays, "num_subarrays")
        sbar_side = _isqrt_exact(self.elems_per_subarray, "elems_per_subarray")
        if self.ae_spacing < 0:
            raise ConfigError("ae_spacing must be >= 0")
        if not self.sa_spacing > (sbar_side - 1) * self.ae_spacing:
            raise ConfigError(
                "sa_spacing must exceed the subarray span "
                f"({(sbar_side - 1) * self.ae_spacing:g} m)"
            )
        if not self.carrier_hz > 0:
            raise ConfigError("carrier_hz must be positive")

    @property
    def sa_side(self) -> int:
        return math.isqrt(self.num_subarrays)

    @property
    def ae_side(self) -> int:
        return math.isqrt(self.elems_per_subarray)

    @property
    def num_elements(self) -> int:
        """Total AE count S * S_bar."""
        return self.num_subarrays * self.elems_per_subarray

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    @property
    def sa_pitch(self) -> float:
        """Center-to-center step between SA grid origins."""
        return (self.ae_side - 1) * self.ae_spacing + self.sa_spacing


@dataclass(frozen=True)
class ElementIndex:
    """1-based (SA, AE) index pair with row/column decoding.

    s = (m-1)*sqrt(S) + n and s_bar = (m_bar-1)*sqrt(S_bar) + n_bar; both
    mappings are invertible.
    """

    sa_index: int   # s, 1..S
    ae_index: int   # s_bar, 1..S_bar

    def rows_cols(self, cfg: ArrayConfig) -> tuple[int, int, int, int]:
        """Return (m, n, m_bar, n_bar), all 1-based."""
        if not 1 <= self.sa_index <= cfg.num_subarrays:
            raise IndexError(f"sa_index {self.sa_index} outside 1..{cfg.num_subarrays}")
        if not 1 <= self.ae_index <= cfg.elems_per_subarray:
            raise IndexError(f"ae_index {self.ae_index} outside 1..{cfg.elems_per_subarray}")
        m, n = divmod(self.sa_index - 1, cfg.sa_side)
        mb, nb = divmod(self.ae_index - 1, cfg.ae_side)
        return m + 1, n + 1, mb + 1, nb + 1

    @classmethod
    def from_grid(cls, m: int, n: int, m_bar: int, n_bar: int, cfg: ArrayConfig) -> "ElementIndex":
        if not (1 <= m <= cfg.sa_side and 1 <= n <= cfg.sa_side):
            raise IndexError(f"SA row/col ({m},{n}) outside 1..{cfg.sa_side}")
        if not (1 <= m_bar <= cfg.ae_side and 1 <= n_bar <= cfg.ae_side):
            raise IndexError(f"AE row/col ({m_bar},{n_bar}) outside 1..{cfg.ae_side}")
        return cls((m - 1) * cfg.sa_side + n, (m_bar - 1) * cfg.ae_side + n_bar)


def ae_position(idx: ElementIndex, cfg: ArrayConfig) -> np.ndarray:
    """Position of one AE in meters, 3-vector with z = 0.

    The origin sits at the first AE of the first SA; rows (m, m_bar) advance
    along x and columns (n, n_bar) along y.
    """
    m, n, mb, nb = idx.rows_cols(cfg)
    pitch = cfg.sa_pitch
    return np.array([
        (m - 1) * pitch + (mb - 1) * cfg.ae_spacing,
        (n - 1) * pitch + (nb - 1) * cfg.ae_spacing,
        0.0,
    ])


@lru_cache(maxsize=32)
def element_positions(cfg: ArrayConfig) -> np.ndarray:
    """All AE positions, shape (S*S_bar, 3).

    Row order fixes the vectorization convention used everywhere downstream:
    SA index s is the outer loop, AE index s_bar the inner one, i.e. row
    (s-1)*S_bar + (s_bar-1) holds element (s, s_bar).
    """
    pitch = cfg.sa_pitch
    m, n = np.divmod(np.arange(cfg.num_subarrays), cfg.sa_side)
    mb, nb = np.divmod(np.arange(cfg.elems_per_subarray), cfg.ae_side)
    x = (m[:, None] * pitch + mb[None, :] * cfg.ae_spacing).ravel()
    y = (n[:, None] * pitch + nb[None, :] * cfg.ae_spacing).ravel()
    pos = np.column_stack([x, y, np.zeros_like(x)])
    pos.setflags(write=False)
    return pos


def aperture(cfg: ArrayConfig) -> float:
    """Aperture D in meters: the maximum pairwise AE distance.

    For the square AoSA this is the diagonal of the bounding box of all AE
    positions, sqrt(2) times the side length.
    """
    pos = element_positions(cfg)
    span = pos.max(axis=0) - pos.min(axis=0)
    return float(np.hypot(span[0], span[1]))


def rayleigh_distance(aperture_m: float, wavelength_m: float) -> float:
    """Near/far-field boundary Z = 2 D^2 / lambda, meters."""
    if aperture_m < 0:
        raise ValueError(f"aperture must be >= 0, got {aperture_m}")
    if not wavelength_m > 0:
        raise ValueError(f"wavelength must be positive, got {wavelength_m}")
    return 2.0 * aperture_m * aperture_m / wavelength_m
