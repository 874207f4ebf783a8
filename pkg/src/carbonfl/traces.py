"""Carbon-intensity trace loading and synthesis.

Traces travel as long-format CSV with header slot,center,intensity_kg_per_kwh
and exactly one row per (slot, center) pair. Synthetic profiles stand in for
real grid data: constant levels, a 24-slot diurnal sinusoid, or a clipped
random walk.
"""

from __future__ import annotations

import csv
import math

import numpy as np

from .fleet import CarbonTrace

TRACE_HEADER = ["slot", "center", "intensity_kg_per_kwh"]

# Plausible grid-intensity band, kg CO2 per kWh.
_LEVEL_LOW = 0.05
_LEVEL_HIGH = 0.80


class TraceFormatError(ValueError):
    """A trace file violated the CSV contract; the message names the row."""


def load_trace(path: str) -> CarbonTrace:
    """Parse and validate a long-format trace CSV."""
    cells: dict[tuple[int, int], float] = {}
    max_slot = -1
    max_center = -1
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceFormatError(f"{path}: empty file") from None
        if [h.strip() for h in header] != TRACE_HEADER:
            raise TraceFormatError(
                f"{path}: row 1: expected header {','.join(TRACE_HEADER)}, "
                f"got {','.join(header)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise TraceFormatError(
                    f"{path}: row {lineno}: expected 3 fields, got {len(row)}"
                )
            try:
                slot, center = int(row[0]), int(row[1])
                intensity = float(row[2])
            except ValueError:
                raise TraceFormatError(
                    f"{path}: row {lineno}: malformed row {row!r}"
                ) from None
            if slot < 0 or center < 0:
                raise TraceFormatError(
                    f"{path}: row {lineno}: negative slot or center index"
                )
            if not math.isfinite(intensity) or intensity < 0:
                raise TraceFormatError(
                    f"{path}: row {lineno}: negative or non-finite intensity {row[2]}"
                )
            if (slot, center) in cells:
                raise TraceFormatError(
                    f"{path}: row {lineno}: duplicate pair (slot={slot}, center={center})"
                )
            cells[(slot, center)] = intensity
            max_slot = max(max_slot, slot)
            max_center = max(max_center, center)
    if not cells:
        raise TraceFormatError(f"{path}: no data rows")
    horizon = max_slot + 1
    n_centers = max_center + 1
    missing = [
        (t, i)
        for t in range(horizon)
        for i in range(n_centers)
        if (t, i) not in cells
    ]
    if missing:
        t, i = missing[0]
        raise TraceFormatError(
            f"{path}: missing pair (slot={t}, center={i}); "
            f"{len(missing)} pairs absent in a {horizon}x{n_centers} grid"
        )
    arr = np.empty((horizon, n_centers))
    for (t, i), v in cells.items():
        arr[t, i] = v
    return CarbonTrace(intensities=arr)


def save_trace(trace: CarbonTrace, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for t in range(trace.horizon):
            for i in range(trace.n_centers):
                writer.writerow([t, i, repr(float(trace.intensities[t, i]))])


def synth_trace(
    n_centers: int, horizon: int, profile: str = "diurnal", seed: int = 0
) -> CarbonTrace:
    """Deterministic synthetic intensity matrix.

    constant: one level per center. diurnal: per-center level, amplitude and
    integer phase on a 24-slot period, so values repeat exactly every 24
    slots. random_walk: Gaussian steps clipped at zero.
    """
    if n_centers < 1 or horizon < 1:
        raise ValueError("n_centers and horizon must be positive")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 21)))
    levels = rng.uniform(_LEVEL_LOW, _LEVEL_HIGH, size=n_centers)
    if profile == "constant":
        arr = np.tile(levels, (horizon, 1))
    elif profile == "diurnal":
        amps = rng.uniform(0.2, 0.7, size=n_centers)
        phases = rng.integers(0, 24, size=n_centers)
        # Reduce the slot index mod 24 before the trig call so periodicity is
        # exact in floating point.
        hours = (np.arange(horizon)[:, None] + phases[None, :]) % 24
        arr = levels[None, :] * (1.0 + amps[None, :] * np.sin(2.0 * np.pi * hours / 24.0))
    elif profile == "random_walk":
        steps = rng.normal(0.0, 0.05, size=(horizon - 1, n_centers)) * levels[None, :]
        arr = np.empty((horizon, n_centers))
        arr[0] = levels
        for t in range(1, horizon):
            arr[t] = np.maximum(0.0, arr[t - 1] + steps[t - 1])
    else:
        raise ValueError(
            f"unknown profile {profile!r}; choose constant, diurnal, or random_walk"
        )
    return CarbonTrace(intensities=np.maximum(arr, 0.0))
