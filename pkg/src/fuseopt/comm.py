"""AllReduce time prediction: fitted linear model plus the analytic
ring formula. The fitted model (time = C * bytes + D) is what the
simulator consumes; the ring formula documents why a linear model is
adequate at fixed device count and bandwidth."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import BadTopology, DegenerateSamples, GraphFormatError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CommModelParams:
    """C: microseconds per byte (inverse effective bandwidth).
    D: fixed per-AllReduce overhead in microseconds."""

    C: float
    D: float

    def __post_init__(self) -> None:
        if self.C < 0 or self.D < 0:
            raise ValueError("C and D must be non-negative")


@dataclass(frozen=True)
class CommSample:
    bytes: int
    measured_us: float

    def __post_init__(self) -> None:
        if self.bytes <= 0:
            raise ValueError("sample bytes must be > 0")
        if self.measured_us <= 0:
            raise ValueError("sample time must be > 0")


def predict(params: CommModelParams, nbytes: float) -> float:
    """Predicted AllReduce time for a (fused) tensor of ``nbytes``."""
    if nbytes < 0:
        raise ValueError("bytes must be >= 0")
    return params.C * nbytes + params.D


def fit(samples: Sequence[CommSample]) -> CommModelParams:
    """Ordinary least squares of measured time against tensor size.
    A negative slope only arises from noise and is clamped to zero."""
    if len(samples) < 2:
        raise DegenerateSamples("need at least 2 samples")
    x = np.array([s.bytes for s in samples], dtype=np.float64)
    y = np.array([s.measured_us for s in samples], dtype=np.float64)
    if np.unique(x).size < 2:
        raise DegenerateSamples("need at least 2 distinct byte values")
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    sxy = float(((x - xm) * (y - ym)).sum())
    c = sxy / sxx
    d = ym - c * xm
    if c < 0:
        log.warning("fitted negative slope C=%.6g, clamping to 0", c)
        c = 0.0
        d = ym
    if d < 0:
        # Tiny negative intercepts can appear on noisy data; the model
        # requires D >= 0.
        log.warning("fitted negative intercept D=%.6g, clamping to 0", d)
        d = 0.0
    return CommModelParams(C=float(c), D=float(d))


def ring_allreduce_time(nbytes: float, devices: int, bandwidth_bytes_per_us: float) -> float:
    """Analytic full-duplex ring time: 2*(N-1)*x / (B*N)."""
    if devices < 2:
        raise BadTopology("ring needs at least 2 devices")
    if bandwidth_bytes_per_us <= 0:
        raise BadTopology("bandwidth must be > 0")
    if nbytes < 0:
        raise ValueError("bytes must be >= 0")
    return (2 * (devices - 1) * nbytes) / (bandwidth_bytes_per_us * devices)


# ---------------------------------------------------------------------------
# File formats: sample lines "bytes measured_us", params as {"C","D"}.


def save_samples(path, samples: Iterable[CommSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(f"{s.bytes} {s.measured_us!r}\n")


def load_samples(path) -> list[CommSample]:
    out: list[CommSample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected 'bytes measured_us'")
            try:
                out.append(CommSample(int(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise GraphFormatError(f"{path}:{lineno}: {exc}") from exc
    return out


def save_params(path, params: CommModelParams) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"C": params.C, "D": params.D}, fh, sort_keys=True)
        fh.write("\n")


def load_params(path) -> CommModelParams:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or set(doc) != {"C", "D"}:
        raise GraphFormatError(f"{path}: expected a two-field document {{'C','D'}}")
    return CommModelParams(C=float(doc["C"]), D=float(doc["D"]))
