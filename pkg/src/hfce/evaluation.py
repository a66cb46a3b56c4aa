"""Benchmark harness: NMSE sweeps, generalization studies, the near-field
path PMF, per-subcarrier surfaces, hyperparameter sweeps, and inference
timing.

CSV is the canonical output of every sweep; plotting elsewhere consumes it.
External baseline curves (published results of other algorithms) are only
ingested from CSV for overlay, never recomputed here.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, replace
from fractions import Fraction
from math import comb
from typing import Callable, Optional, Sequence

import numpy as np

from .brt import BRTEstimator, BRTHyperParams, init_params
from .errors import ConfigError
from .estimators import LinearInitializer, ls_estimate, nmse_db, nmse_per_sample
from .measurement import MeasurementOperator
from .scenario import ScenarioConfig
from .training import (TrainConfig, generate_batch, rng_stream, setup_operator,
                       train)

_TAG_EVAL = 100


@dataclass
class LSEstimator:
    """Linear-initializer-only estimator, for baseline sweeps."""

    init: LinearInitializer

    def estimate_batch(self, y: np.ndarray) -> np.ndarray:
        return ls_estimate(np.asarray(y), self.init)


def _flatten_samples(h: np.ndarray) -> np.ndarray:
    """Collapse any leading axes so rows are vectors (subcarriers count as
    separate samples for aggregate NMSE)."""
    return h.reshape(-1, h.shape[-1])


def _point_nmse(estimator, scenario, op, snr_db: float, n_samples: int,
                rng) -> np.ndarray:
    y, h, _ = generate_batch(scenario, op, n_samples, rng, (snr_db, snr_db))
    est = estimator.estimate_batch(y)
    return nmse_per_sample(_flatten_samples(h), _flatten_samples(est))


def nmse_sweep(estimator, scenario: ScenarioConfig, op: MeasurementOperator,
               snr_grid: Sequence[float], n_samples: int = 2000,
               seed: int = 0) -> list:
    """Mean NMSE (dB) with standard error at each SNR point.

    Fresh evaluation samples per point; deterministic under the seed. The
    stderr column is the delta-method dB image of the linear-domain standard
    error.
    """
    rows = []
    for i, snr in enumerate(snr_grid):
        rng = rng_stream(seed, _TAG_EVAL, i)
        vals = _point_nmse(estimator, scenario, op, snr, n_samples, rng)
        mean = float(np.mean(vals))
        stderr = float(np.std(vals, ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
        stderr_db = (10.0 / np.log(10.0)) * stderr / mean if mean > 0 else 0.0
        rows.append({"snr_db": snr, "nmse_db": nmse_db(mean),
                     "stderr_db": stderr_db})
    return rows


# ---------------------------------------------------------------------------
# near-field path PMF
# ---------------------------------------------------------------------------

def near_field_pmf(scenario: ScenarioConfig) -> list:
    """Exact PMF of the near-field path count, as Fractions summing to 1.

    The LoS path is deterministically near-field iff r_1 < Z. Each NLoS path
    is independently near-field with p = clamp((Z - r_min)/(r_max - r_min)),
    so the NLoS count is binomial. Requires a fixed path count.
    """
    lo, hi = scenario.num_paths_range
    if lo != hi:
        raise ConfigError("PMF needs a fixed path count scenario")
    n_paths = lo
    z = Fraction(scenario.rayleigh_m())
    r_min, r_max = Fraction(scenario.scatter_min_m), Fraction(scenario.scatter_max_m)
    if r_max <= r_min:
        raise ConfigError("empty scatterer distance range")
    p = (z - r_min) / (r_max - r_min)
    p = min(max(p, Fraction(0)), Fraction(1))
    los_near = 1 if scenario.los_distance_m < scenario.rayleigh_m() else 0
    n_nlos = n_paths - 1
    pmf = [Fraction(0)] * (n_paths + 1)
    for k in range(n_nlos + 1):
        prob = comb(n_nlos, k) * p**k * (1 - p)**(n_nlos - k)
        pmf[k + los_near] += prob
    return pmf


def near_field_counts_mc(scenario: ScenarioConfig, n_draws: int,
                         seed: int = 0) -> np.ndarray:
    """Monte-Carlo histogram of near-field path counts over sampled PathSets."""
    from .channel import sample_paths
    lo, hi = scenario.num_paths_range
    if lo != hi:
        raise ConfigError("PMF needs a fixed path count scenario")
    rng = rng_stream(seed, _TAG_EVAL, 999)
    z = scenario.rayleigh_m()
    counts = np.zeros(lo + 1, dtype=np.int64)
    for _ in range(n_draws):
        paths = sample_paths(scenario, rng)
        counts[int(paths.near_field_mask(z).sum())] += 1
    return counts


# ---------------------------------------------------------------------------
# generalization and wideband studies
# ---------------------------------------------------------------------------

def generalization_sweep(estimator, base_scenario: ScenarioConfig,
                         variants: Sequence[tuple], op: MeasurementOperator,
                         snr_db: float = 15.0, n_samples: int = 2000,
                         seed: int = 0) -> list:
    """Evaluate one FIXED trained model across scenario variants.

    `variants` is a list of (label, scenario). Output rows carry absolute
    NMSE plus the difference against the model's own training scenario.
    """
    base_rng = rng_stream(seed, _TAG_EVAL, 0)
    base_vals = _point_nmse(estimator, base_scenario, op, snr_db, n_samples, base_rng)
    base_db = nmse_db(float(np.mean(base_vals)))
    rows = [{"label": "baseline", "nmse_db": base_db, "delta_db": 0.0}]
    for i, (label, variant) in enumerate(variants, start=1):
        rng = rng_stream(seed, _TAG_EVAL, i)
        vals = _point_nmse(estimator, variant, op, snr_db, n_samples, rng)
        v_db = nmse_db(float(np.mean(vals)))
        rows.append({"label": label, "nmse_db": v_db, "delta_db": v_db - base_db})
    return rows


def scatter_range_variants(base: ScenarioConfig,
                           ranges: Sequence[tuple]) -> list:
    return [(f"r{lo:g}-{hi:g}", replace(base, scatter_min_m=lo, scatter_max_m=hi))
            for lo, hi in ranges]


def path_count_variants(base: ScenarioConfig, counts: Sequence[int]) -> list:
    return [(f"L{c}", replace(base, num_paths_min=c, num_paths_max=c))
            for c in counts]


def bandwidth_variants(base: ScenarioConfig, bandwidths_hz: Sequence[float]) -> list:
    return [(f"B{b / 1e9:g}GHz", replace(base, bandwidth_hz=b))
            for b in bandwidths_hz]


def wideband_surface(estimator, scenario: ScenarioConfig, op: MeasurementOperator,
                     snr_grid: Sequence[float], n_samples: int = 500,
                     seed: int = 0) -> dict:
    """Per-subcarrier NMSE (dB) matrix of shape (K, len(snr_grid))."""
    if not scenario.wideband:
        raise ConfigError("wideband_surface needs a wideband scenario")
    k = scenario.subcarriers
    surface = np.zeros((k, len(snr_grid)))
    for j, snr in enumerate(snr_grid):
        rng = rng_stream(seed, _TAG_EVAL, j)
        y, h, _ = generate_batch(scenario, op, n_samples, rng, (snr, snr))
        est = estimator.estimate_batch(y)
        per = nmse_per_sample(h, est)  # (n, K)
        for ki in range(k):
            surface[ki, j] = nmse_db(float(np.mean(per[:, ki])))
    spread = {"max_minus_min_db": float(surface.max(axis=0).max()
                                        - surface.min(axis=0).min()),
              "mean_std_db": float(np.mean(np.std(surface, axis=0)))}
    return {"snr_grid": list(snr_grid), "surface_db": surface, "spread": spread}


# ---------------------------------------------------------------------------
# hyperparameter sweeps
# ---------------------------------------------------------------------------

def hyper_sweep(axis: str, values: Sequence[int], cfg: TrainConfig,
                base_hyper: BRTHyperParams, snr_db: float = 15.0,
                n_samples: int = 2000, seed: int = 0) -> dict:
    """Train one (desk-scale) model per value of `axis`; NMSE at a fixed SNR.

    For the iteration axis, the per-iteration NMSE trace of the largest
    trained model is reported as well.
    """
    if axis not in ("iters", "heads", "depth"):
        raise ConfigError(f"unknown sweep axis '{axis}'")
    rows = []
    trace_rows = None
    largest = None
    for v in values:
        if axis == "iters":
            hyper = replace(base_hyper, iters=int(v))
        elif axis == "heads":
            if base_hyper.attn_dim % int(v):
                raise ConfigError(f"attention width {base_hyper.attn_dim} not "
                                  f"divisible by {v} heads")
            hyper = replace(base_hyper, heads=int(v),
                            head_dim=base_hyper.attn_dim // int(v))
        else:
            hyper = replace(base_hyper, depth=int(v))
        store = init_params(hyper, rng_stream(cfg.seed, 3))
        result = train(store, hyper, cfg)
        model = BRTEstimator(store=result.store, hyper=result.hyper,
                             init=result.init)
        rng = rng_stream(seed, _TAG_EVAL, int(v))
        vals = _point_nmse(model, cfg.scenario, result.op, snr_db, n_samples, rng)
        rows.append({"value": int(v), "nmse_db": nmse_db(float(np.mean(vals)))})
        if largest is None or int(v) >= largest[0]:
            largest = (int(v), model, result.op)

    if axis == "iters" and largest is not None:
        _, model, op = largest
        rng = rng_stream(seed, _TAG_EVAL, 10_000)
        y, h, _ = generate_batch(cfg.scenario, op, n_samples, rng,
                                 (snr_db, snr_db))
        traces = model.trace_batch(y)
        trace_rows = []
        for t, est in enumerate(traces):
            est2 = est
            if model.hyper.tokens == 1:
                est2 = np.squeeze(est2, axis=-2)
            vals = nmse_per_sample(_flatten_samples(h), _flatten_samples(est2))
            trace_rows.append({"iteration": t,
                               "nmse_db": nmse_db(float(np.mean(vals)))})
    return {"axis": axis, "rows": rows, "trace": trace_rows}


# ---------------------------------------------------------------------------
# inference timing
# ---------------------------------------------------------------------------

def bench_inference(estimators_by_k: dict, batch_sizes: Sequence[int],
                    repeats: int = 5, warmup: int = 2, seed: int = 0) -> list:
    """Forward-pass wall time in float32, median over repeats, warmup excluded.

    `estimators_by_k` maps a subcarrier count to the estimator sized for it
    (narrowband and wideband are distinct models). Schema per row:
    subcarriers, batch, per_batch_ms, per_sample_ms.
    """
    rows = []
    rng = np.random.default_rng(seed)
    for k in sorted(estimators_by_k):
        est32 = estimators_by_k[k].as_float32()
        if k != est32.hyper.tokens:
            raise ConfigError(f"estimator was built for {est32.hyper.tokens} "
                              f"subcarrier tokens, not {k}")
        n_inputs = est32.init.matrix.shape[1]
        for batch in batch_sizes:
            shape = (batch, k, n_inputs) if k > 1 else (batch, n_inputs)
            y = rng.normal(size=shape).astype(np.float32)
            for _ in range(warmup):
                est32.estimate_batch(y)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                est32.estimate_batch(y)
                times.append(time.perf_counter() - t0)
            per_batch_ms = float(np.median(times) * 1e3)
            rows.append({"subcarriers": k, "batch": batch,
                         "per_batch_ms": per_batch_ms,
                         "per_sample_ms": per_batch_ms / batch})
    return rows


# ---------------------------------------------------------------------------
# CSV plumbing
# ---------------------------------------------------------------------------

def rows_to_csv(rows: Sequence[dict]) -> str:
    """Deterministic CSV text for a list of dict rows."""
    if not rows:
        return ""
    buf = io.StringIO()
    fields = list(rows[0].keys())
    buf.write(",".join(fields) + "\n")
    for row in rows:
        cells = []
        for f in fields:
            v = row[f]
            cells.append(f"{v:.10g}" if isinstance(v, float) else str(v))
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def load_baseline_csv(path) -> list:
    """External baseline curves: columns snr_db, nmse_db, label."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if set(reader.fieldnames or []) != {"snr_db", "nmse_db", "label"}:
            raise ConfigError("baseline CSV must have columns snr_db,nmse_db,label")
        for row in reader:
            rows.append({"snr_db": float(row["snr_db"]),
                         "nmse_db": float(row["nmse_db"]),
                         "label": row["label"]})
    return rows
