"""Binary (y, h) record files with a JSON sidecar.

Layout (all little-endian):
    magic  b"HFCE"
    u16    version (1)
    u16    reserved
    u32    K            subcarriers per record (1 = narrowband)
    u32    y_len        stacked-real observation length per subcarrier
    u32    h_len        stacked-real channel length per subcarrier
    u64    n_records
    16B    scenario hash (first 16 bytes of the config SHA-256)
    then n_records * (K*y_len + K*h_len) float32 values, y before h,
    subcarrier-major.

The sidecar `<path>.json` carries the full scenario dict, the combiner seed,
the SNR sampling policy, and the record count.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .scenario import ScenarioConfig, from_dict

_MAGIC = b"HFCE"
_HEADER = struct.Struct("<4sHHIIIQ16s")


@dataclass(frozen=True)
class DatasetHeader:
    subcarriers: int
    y_len: int
    h_len: int
    n_records: int
    scenario_hash: bytes


def write_dataset(path, scenario: ScenarioConfig, ys: np.ndarray, hs: np.ndarray,
                  combiner_seed, snr_policy: dict) -> None:
    ys = np.asarray(ys)
    hs = np.asarray(hs)
    if ys.shape[0] != hs.shape[0]:
        raise ConfigError("y and h record counts differ")
    n = ys.shape[0]
    k = scenario.subcarriers
    if k > 1 and (ys.ndim != 3 or ys.shape[1] != k):
        raise ConfigError(f"wideband records need shape (n, {k}, y_len), got {ys.shape}")
    y_len = ys.shape[-1]
    h_len = hs.shape[-1]
    hash_hex = scenario.hash_hex()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, 0, k, y_len, h_len, n,
                              bytes.fromhex(hash_hex)[:16]))
        for i in range(n):
            fh.write(np.ascontiguousarray(ys[i], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(hs[i], dtype="<f4").tobytes())
    sidecar = {
        "scenario": scenario.to_dict(),
        "scenario_hash": hash_hex,
        "combiner_seed": combiner_seed,
        "snr_policy": snr_policy,
        "n_records": n,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def read_dataset(path):
    """Return (header, Y, H, sidecar). Arrays are float32."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        magic, version, _, k, y_len, h_len, n, shash = _HEADER.unpack(raw)
        if magic != _MAGIC:
            raise ConfigError(f"{path} is not a dataset file")
        if version != 1:
            raise ConfigError(f"unsupported dataset version {version}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    per = k * (y_len + h_len) if k > 1 else (y_len + h_len)
    if data.size != n * per:
        raise ConfigError(f"dataset payload truncated: {data.size} != {n * per}")
    recs = data.reshape(n, per)
    if k > 1:
        ys = recs[:, :k * y_len].reshape(n, k, y_len)
        hs = recs[:, k * y_len:].reshape(n, k, h_len)
    else:
        ys = recs[:, :y_len]
        hs = recs[:, y_len:]
    header = DatasetHeader(k, y_len, h_len, n, shash)
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    return header, ys, hs, sidecar


def scenario_from_sidecar(sidecar: dict) -> ScenarioConfig:
    return from_dict(sidecar["scenario"])
