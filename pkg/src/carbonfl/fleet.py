"""Physical model of the data-center fleet: per-slot energy and carbon accounting.

Energy is expressed in kWh per one-hour slot, carbon intensity in kg CO2 per
kWh, so a slot's footprint is a plain product with no duration factor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

# Per-center defaults for a large training site: 2000 accelerators at 400 W
# under load and 20 W idle give 800 kWh per 1 h slot, of which 40 kWh is the
# always-on static draw.
DEFAULT_STATIC_KWH = 40.0
DEFAULT_ACTIVE_KWH = 760.0


@dataclass(frozen=True)
class FleetConfig:
    """Fleet shape: number of centers and their display labels."""

    n_centers: int
    slot_duration_hours: float = 1.0
    center_labels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n_centers < 1:
            raise ValueError(f"n_centers must be >= 1, got {self.n_centers}")
        if self.slot_duration_hours != 1.0:
            raise ValueError("slot duration is fixed at 1 hour")
        labels = self.center_labels or tuple(f"dc{i}" for i in range(self.n_centers))
        if len(labels) != self.n_centers:
            raise ValueError(
                f"expected {self.n_centers} labels, got {len(labels)}"
            )
        object.__setattr__(self, "center_labels", tuple(labels))


@dataclass(frozen=True)
class EnergyModel:
    """Per-center static (always-on) and active (when selected) kWh per slot."""

    static_kwh: tuple[float, ...]
    active_kwh: tuple[float, ...]

    def __post_init__(self):
        static = tuple(float(x) for x in self.static_kwh)
        active = tuple(float(x) for x in self.active_kwh)
        if len(static) != len(active):
            raise ValueError("static_kwh and active_kwh must have equal length")
        if any(x < 0 for x in static) or any(x < 0 for x in active):
            raise ValueError("energy entries must be non-negative")
        object.__setattr__(self, "static_kwh", static)
        object.__setattr__(self, "active_kwh", active)

    @property
    def n_centers(self) -> int:
        return len(self.static_kwh)

    @classmethod
    def homogeneous(
        cls,
        n_centers: int,
        static_kwh: float = DEFAULT_STATIC_KWH,
        active_kwh: float = DEFAULT_ACTIVE_KWH,
    ) -> "EnergyModel":
        return cls((static_kwh,) * n_centers, (active_kwh,) * n_centers)

    def static_array(self) -> np.ndarray:
        return np.asarray(self.static_kwh, dtype=float)

    def active_array(self) -> np.ndarray:
        return np.asarray(self.active_kwh, dtype=float)


@dataclass(frozen=True)
class CarbonTrace:
    """Carbon intensity per (slot, center), kg CO2 per kWh; shape T x N."""

    intensities: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.intensities, dtype=float)
        if arr.ndim != 2:
            raise ValueError(f"intensities must be 2-D (T x N), got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("trace must cover at least one slot and one center")
        if not np.all(np.isfinite(arr)):
            raise ValueError("intensities must be finite")
        if np.any(arr < 0):
            raise ValueError("intensities must be non-negative")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "intensities", arr)

    @property
    def horizon(self) -> int:
        return self.intensities.shape[0]

    @property
    def n_centers(self) -> int:
        return self.intensities.shape[1]

    def at(self, t: int) -> np.ndarray:
        if not 0 <= t < self.horizon:
            raise IndexError(f"slot {t} out of range [0, {self.horizon})")
        return self.intensities[t]


@dataclass(frozen=True)
class Selection:
    """Binary per-center participation decision for one slot."""

    bits: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))

    @classmethod
    def from_indices(cls, n_centers: int, members: Iterable[int]) -> "Selection":
        bits = [False] * n_centers
        for i in members:
            if not 0 <= i < n_centers:
                raise IndexError(f"center {i} out of range [0, {n_centers})")
            bits[i] = True
        return cls(tuple(bits))

    @classmethod
    def empty(cls, n_centers: int) -> "Selection":
        return cls((False,) * n_centers)

    @classmethod
    def full(cls, n_centers: int) -> "Selection":
        return cls((True,) * n_centers)

    @property
    def n_centers(self) -> int:
        return len(self.bits)

    @property
    def members(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b)

    @property
    def count(self) -> int:
        return sum(self.bits)

    def with_bit(self, center: int, value: bool) -> "Selection":
        bits = list(self.bits)
        bits[center] = bool(value)
        return Selection(tuple(bits))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=bool)

    def bitstring(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)

    @classmethod
    def from_bitstring(cls, s: str) -> "Selection":
        if set(s) - {"0", "1"}:
            raise ValueError(f"bitstring may only contain 0/1, got {s!r}")
        return cls(tuple(c == "1" for c in s))


def energy_per_slot(model: EnergyModel, center: int, selected: bool) -> float:
    """kWh drawn by one center in one slot: static draw plus active draw if selected."""
    if not 0 <= center < model.n_centers:
        raise IndexError(f"center {center} out of range [0, {model.n_centers})")
    return model.static_kwh[center] + (model.active_kwh[center] if selected else 0.0)


def carbon_per_center(
    model: EnergyModel, trace: CarbonTrace, t: int, center: int, selected: bool
) -> float:
    """kg CO2 emitted by one center in slot t."""
    beta = trace.at(t)
    if not 0 <= center < trace.n_centers:
        raise IndexError(f"center {center} out of range [0, {trace.n_centers})")
    return float(beta[center]) * energy_per_slot(model, center, selected)


def carbon_total(
    model: EnergyModel, trace: CarbonTrace, t: int, selection: Selection
) -> float:
    """kg CO2 emitted by the whole fleet in slot t under the given selection."""
    beta = trace.at(t)
    if selection.n_centers != trace.n_centers:
        raise ValueError(
            f"selection covers {selection.n_centers} centers, trace has {trace.n_centers}"
        )
    energy = model.static_array() + selection.as_array() * model.active_array()
    return float(beta @ energy)


def static_floor(model: EnergyModel, trace: CarbonTrace, t: int) -> float:
    """kg CO2 emitted in slot t even if no center is selected."""
    return float(trace.at(t) @ model.static_array())


def kg_to_tons(kg: float) -> float:
    return kg / 1000.0


def tons_to_kg(tons: float) -> float:
    return tons * 1000.0
