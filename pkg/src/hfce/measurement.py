"""Hybrid-combining pilot measurements.

Each subarray feeds one RF chain through single-bit phase shifters, so one
pilot slot observes S combined outputs of the S*S_bar element signals. The
per-pilot analog combiner is block-diagonal with entries +-1/sqrt(S_bar);
stacking N_p pilots gives the (S*N_p) x (S*S_bar) operator applied to the
channel. Everything downstream of the receiver works on the stacked-real
form [Re, Im].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .channel import ChannelRealization
from .errors import ShapeError
from .geometry import ArrayConfig


# ---------------------------------------------------------------------------
# real <-> complex plumbing
# ---------------------------------------------------------------------------

def complex_to_real(v: np.ndarray) -> np.ndarray:
    """Stack [Re(v), Im(v)] along the last axis."""
    v = np.asarray(v)
    return np.concatenate([v.real, v.imag], axis=-1)


def real_to_complex(v: np.ndarray) -> np.ndarray:
    """Inverse of complex_to_real."""
    v = np.asarray(v)
    n = v.shape[-1]
    if n % 2:
        raise ShapeError(f"stacked-real vector must have even length, got {n}")
    h = n // 2
    return v[..., :h] + 1j * v[..., h:]


def real_expand(m: np.ndarray) -> np.ndarray:
    """Real block form [[Re, -Im], [Im, Re]] of a complex matrix."""
    m = np.asarray(m)
    return np.block([[m.real, -m.imag], [m.imag, m.real]])


# ---------------------------------------------------------------------------
# Measurement operator
# ---------------------------------------------------------------------------

@dataclass
class MeasurementOperator:
    """Stacked analog combiner for N_p pilot slots.

    `combiners[p]` is the p-th per-pilot combiner in its receive form
    (S x S*S_bar): row s is nonzero only on the s-th block of S_bar columns.
    `stacked` is the (S*N_p) x (S*S_bar) complex operator, `real` its
    [[Re,-Im],[Im,Re]] expansion. The seed that generated the draw is kept
    for dataset sidecars.
    """

    cfg: ArrayConfig
    n_pilots: int
    combiners: np.ndarray   # (N_p, S, S*S_bar) complex
    stacked: np.ndarray     # (S*N_p, S*S_bar) complex
    real: np.ndarray        # (2*S*N_p, 2*S*S_bar) float
    seed: Optional[int] = None
    _initializer_cache: object = field(default=None, repr=False, compare=False)

    @property
    def n_outputs_real(self) -> int:
        return 2 * self.cfg.num_subarrays * self.n_pilots

    @property
    def n_inputs_real(self) -> int:
        return 2 * self.cfg.num_elements


def generate_combiner(cfg: ArrayConfig, n_pilots: int,
                      rng: np.random.Generator,
                      seed: Optional[int] = None) -> MeasurementOperator:
    """Draw the per-pilot single-bit combiners.

    Entries are i.i.d. uniform over {-1, +1}/sqrt(S_bar) inside each SA
    block and exactly zero elsewhere, so every combiner column has unit
    l2 norm (the phase-shifter power constraint).
    """
    if n_pilots < 1:
        raise ValueError("n_pilots must be >= 1")
    s, sbar = cfg.num_subarrays, cfg.elems_per_subarray
    signs = rng.integers(0, 2, size=(n_pilots, s, sbar)) * 2 - 1
    blocks = signs / np.sqrt(sbar)
    combiners = np.zeros((n_pilots, s, s * sbar), dtype=complex)
    for si in range(s):
        combiners[:, si, si * sbar:(si + 1) * sbar] = blocks[:, si, :]
    stacked = combiners.reshape(n_pilots * s, s * sbar)
    return MeasurementOperator(cfg=cfg, n_pilots=n_pilots, combiners=combiners,
                               stacked=stacked, real=real_expand(stacked),
                               seed=seed)


# ---------------------------------------------------------------------------
# Observation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    """Stacked-real received pilots.

    y has length 2*S*N_p (narrowband) or shape (K, 2*S*N_p) (wideband, one
    row per subcarrier). noise_var is sigma_n^2 = 10^(-snr_db/10): unit pilot
    symbol and unit average per-element channel power make SNR a single
    pre-combining scalar.
    """

    y: np.ndarray
    snr_db: float
    noise_var: float


def noise_variance(snr_db: float) -> float:
    return 10.0 ** (-snr_db / 10.0)


def complex_awgn(rng: np.random.Generator, shape, variance: float) -> np.ndarray:
    """Circularly-symmetric complex Gaussian, variance split over Re/Im."""
    scale = np.sqrt(variance / 2.0)
    return rng.normal(scale=scale, size=shape) + 1j * rng.normal(scale=scale, size=shape)


def _observe_rows(h_rows: np.ndarray, op: MeasurementOperator, noise_var: float,
                  rng: Optional[np.random.Generator]) -> np.ndarray:
    """Apply the stacked combiner to each channel row with fresh per-pilot noise."""
    n_rows = h_rows.shape[0]
    y = h_rows @ op.stacked.T  # (rows, S*N_p)
    if noise_var > 0:
        if rng is None:
            raise ValueError("noisy observation needs an rng")
        noise = complex_awgn(rng, (n_rows, op.n_pilots, op.cfg.num_elements), noise_var)
        combined = np.einsum("psk,rpk->rps", op.combiners, noise)
        y = y + combined.reshape(n_rows, -1)
    return complex_to_real(y)


def observe(h: Union[np.ndarray, ChannelRealization], op: MeasurementOperator,
            snr_db: float, rng: Optional[np.random.Generator] = None) -> Observation:
    """Simulate pilot reception: y = W_RF^H (h + n), stacked-real output.

    Noise is drawn in the element domain and then combined, preserving the
    colored statistics the combiner induces. A wideband realization reuses
    the same operator on every subcarrier row with independent noise.
    """
    var = noise_variance(snr_db)
    if isinstance(h, ChannelRealization):
        rows = np.asarray(h.values)
        if rows.shape[-1] != op.cfg.num_elements:
            raise ShapeError(f"channel rows have length {rows.shape[-1]}, "
                             f"operator expects {op.cfg.num_elements}")
        y = _observe_rows(rows, op, var, rng)
    else:
        h = np.asarray(h)
        if h.ndim != 1 or h.shape[0] != op.cfg.num_elements:
            raise ShapeError(f"channel vector has shape {h.shape}, "
                             f"operator expects ({op.cfg.num_elements},)")
        y = _observe_rows(h[None, :], op, var, rng)[0]
    return Observation(y=y, snr_db=snr_db, noise_var=var)
