"""Rotary position embedding: frequency tables, wavelength bands and remappings.

Angles are always computed in float64. Wavelengths of a 64-dim head span
roughly five orders of magnitude, and float32 loses the low-frequency pairs.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace
from typing import IO, Iterator, NamedTuple, Sequence

import numpy as np

__all__ = [
    "AxisMode",
    "Band",
    "Stage",
    "RopeConfig",
    "FrequencyTable",
    "PairRecord",
    "StageSchedule",
    "Identity",
    "NoPE",
    "PI",
    "NTK",
    "YaRN",
    "StageAware",
    "build_frequency_table",
    "build_frequency_tables",
    "assign_bands",
    "band_mask",
    "band_counts",
    "remap_pi",
    "remap_ntk",
    "ntk_factor",
    "yarn_mix",
    "yarn_thresholds",
    "yarn_coefficients",
    "remap_yarn",
    "stage_weight",
    "stage_remap",
    "rotation_angles",
    "apply_rope",
    "write_frequency_csv",
]


class AxisMode(str, enum.Enum):
    ONE_D = "one_d"
    TWO_D_AXIAL = "two_d_axial"


class Band(str, enum.Enum):
    HIGH = "High"
    MID = "Mid"
    LOW = "Low"
    VERYLOW = "VeryLow"

    @classmethod
    def parse(cls, text: str) -> "Band":
        key = text.strip().lower().replace("_", "").replace("-", "")
        for band in cls:
            if band.value.lower() == key:
                return band
        raise ValueError(f"unknown band {text!r}")


class Stage(str, enum.Enum):
    LAYOUT = "layout"
    LOCAL = "local"
    DETAIL = "detail"


@dataclass(frozen=True)
class RopeConfig:
    """Rotary embedding geometry for one attention head.

    ``train_side`` and ``target_side`` are token-map side lengths (L and L').
    In ``two_d_axial`` mode the first half of the head is rotated by the
    height coordinate and the second half by the width coordinate.
    """

    head_dim: int
    base: float = 10000.0
    train_side: int = 16
    target_side: int = 16
    high_band_size: int = 3
    axis_mode: AxisMode = AxisMode.TWO_D_AXIAL

    def __post_init__(self):
        object.__setattr__(self, "axis_mode", AxisMode(self.axis_mode))
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if self.axis_mode is AxisMode.TWO_D_AXIAL and self.head_dim % 4:
            raise ValueError(f"two_d_axial mode needs head_dim divisible by 4, got {self.head_dim}")
        if not self.base > 0:
            raise ValueError(f"base must be positive, got {self.base}")
        if self.train_side < 1:
            raise ValueError(f"train_side must be >= 1, got {self.train_side}")
        if self.target_side < self.train_side:
            raise ValueError(
                f"target_side ({self.target_side}) must be >= train_side ({self.train_side})"
            )
        if not 1 <= self.high_band_size <= self.pairs_per_axis:
            raise ValueError(
                f"high_band_size must lie in [1, {self.pairs_per_axis}], got {self.high_band_size}"
            )

    @property
    def axes(self) -> tuple[str, ...]:
        if self.axis_mode is AxisMode.TWO_D_AXIAL:
            return ("height", "width")
        return ("one_d",)

    @property
    def pairs_per_axis(self) -> int:
        return self.head_dim // (2 * len(self.axes))

    @property
    def exponent_dim(self) -> int:
        """Denominator used in the frequency exponent: d, or d/2 per axis."""
        return self.head_dim // len(self.axes)

    @property
    def scale(self) -> float:
        return self.target_side / self.train_side


class PairRecord(NamedTuple):
    j: int
    theta: float
    wavelength: float
    band: Band | None


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FrequencyTable:
    """Per-pair angular frequencies for one axis; bands are ``None`` until assigned."""

    axis: str
    theta: np.ndarray
    exponent_dim: int
    bands: tuple[Band, ...] | None = None
    train_side: int | None = None
    high_band_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "theta", _frozen(self.theta))
        if self.bands is not None and len(self.bands) != len(self.theta):
            raise ValueError("one band label per pair is required")

    def __len__(self) -> int:
        return len(self.theta)

    @property
    def wavelength(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 2.0 * np.pi / self.theta

    @property
    def index(self) -> np.ndarray:
        return np.arange(1, len(self.theta) + 1)

    def records(self) -> Iterator[PairRecord]:
        bands = self.bands or (None,) * len(self)
        for j, (th, wl, band) in enumerate(zip(self.theta, self.wavelength, bands), start=1):
            yield PairRecord(j, float(th), float(wl), band)

    def pairs_in(self, band: Band) -> np.ndarray:
        """1-based indices of the pairs carrying ``band``."""
        return self.index[band_mask(self, band)]


def build_frequency_table(cfg: RopeConfig, axis: str | None = None) -> FrequencyTable:
    """theta_j = b^(-2(j-1)/D), D = d in one_d mode and d/2 per axis in axial mode."""
    if axis is None:
        axis = cfg.axes[0]
    if axis not in cfg.axes:
        raise ValueError(f"axis {axis!r} not available in {cfg.axis_mode.value} mode {cfg.axes}")
    D = cfg.exponent_dim
    j = np.arange(1, cfg.pairs_per_axis + 1, dtype=np.float64)
    theta = float(cfg.base) ** (-2.0 * (j - 1.0) / D)
    return FrequencyTable(axis=axis, theta=theta, exponent_dim=D)


def build_frequency_tables(cfg: RopeConfig) -> tuple[FrequencyTable, ...]:
    """Band-labelled tables for every axis of ``cfg``, in feature order."""
    return tuple(
        assign_bands(build_frequency_table(cfg, ax), cfg.train_side, cfg.high_band_size)
        for ax in cfg.axes
    )


def assign_bands(table: FrequencyTable, L: float, m: int) -> FrequencyTable:
    """Label the ``m`` shortest wavelengths High, then split the rest at L and 4L.

    High takes precedence: a pair among the m shortest is High whatever its
    wavelength. Passing ``L=math.inf`` makes every other pair Mid.
    """
    n = len(table)
    if not 0 <= m <= n:
        raise ValueError(f"high band size {m} exceeds the {n} pairs on axis {table.axis!r}")
    wl = table.wavelength
    order = np.argsort(wl, kind="stable")
    high = np.zeros(n, dtype=bool)
    high[order[:m]] = True
    bands = []
    for is_high, t in zip(high, wl):
        if is_high:
            bands.append(Band.HIGH)
        elif t < L:
            bands.append(Band.MID)
        elif t <= 4 * L:
            bands.append(Band.LOW)
        else:
            bands.append(Band.VERYLOW)
    return replace(table, bands=tuple(bands), train_side=L, high_band_size=m)


def band_mask(table: FrequencyTable, band: Band) -> np.ndarray:
    if table.bands is None:
        raise ValueError(f"table for axis {table.axis!r} has no band labels; call assign_bands first")
    band = Band(band)
    return np.array([b is band for b in table.bands], dtype=bool)


def _ret(x):
    x = np.asarray(x, dtype=np.float64)
    return float(x) if x.ndim == 0 else x


def _check_ratio(s: float) -> None:
    if not s >= 1.0:
        raise ValueError(f"extrapolation ratio must be >= 1, got {s}")


def _blend(a, b, w):
    """(1-w)*a + w*b, exact at w in {0, 1} and where a == b, clipped to [a, b]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    mixed = (1.0 - w) * a + w * b
    mixed = np.clip(mixed, np.minimum(a, b), np.maximum(a, b))
    return np.where(a == b, a, mixed)


def remap_pi(theta, s: float):
    """Position interpolation: every frequency divided by ``s``."""
    _check_ratio(s)
    return _ret(np.asarray(theta, dtype=np.float64) / s)


def ntk_factor(s: float, d: int) -> float:
    return float(s) ** (d / (d - 2.0))


def remap_ntk(theta, j, d: int, s: float):
    """NTK-aware base rescaling, lambda^(-2(j-1)/d) * theta with lambda = s^(d/(d-2))."""
    _check_ratio(s)
    if d <= 2:
        raise ValueError(f"NTK scaling needs d > 2, got {d}")
    j = np.asarray(j, dtype=np.float64)
    return _ret(ntk_factor(s, d) ** (-2.0 * (j - 1.0) / d) * np.asarray(theta, dtype=np.float64))


def yarn_mix(wavelength, lambda_lo: float, lambda_hi: float):
    """Mixing coefficient: 1 below ``lambda_lo``, 0 above ``lambda_hi``, linear in between."""
    if not lambda_lo < lambda_hi:
        raise ValueError(f"need lambda_lo < lambda_hi, got {lambda_lo} and {lambda_hi}")
    t = np.asarray(wavelength, dtype=np.float64)
    rho = (lambda_hi - t) / (lambda_hi - lambda_lo)
    return _ret(np.clip(rho, 0.0, 1.0))


def remap_yarn(theta, rho, s: float):
    """rho*theta + (1-rho)*theta/s, always within [theta/s, theta]."""
    _check_ratio(s)
    rho = np.asarray(rho, dtype=np.float64)
    if np.any((rho < 0) | (rho > 1)):
        raise ValueError("mixing coefficient must lie in [0, 1]")
    theta = np.asarray(theta, dtype=np.float64)
    return _ret(_blend(theta / s, theta, rho))


def yarn_thresholds(table: FrequencyTable) -> tuple[float, float]:
    """Default ramp bounds: longest High wavelength and the training side L."""
    if table.bands is None:
        raise ValueError("YaRN thresholds need band labels")
    high = band_mask(table, Band.HIGH)
    lo = float(table.wavelength[high].max()) if high.any() else 0.0
    return lo, float(table.train_side)


def yarn_coefficients(
    table: FrequencyTable, lambda_lo: float | None = None, lambda_hi: float | None = None
) -> np.ndarray:
    """Per-pair mixing coefficients for a labelled table.

    With explicit thresholds the plain ramp is used. With the band-derived
    defaults, High pairs get 1, Low/VeryLow get 0 and only Mid pairs ramp;
    this also covers tables where the High band reaches past L and the ramp
    would be empty.
    """
    if lambda_lo is not None or lambda_hi is not None:
        d_lo, d_hi = yarn_thresholds(table)
        lo = d_lo if lambda_lo is None else lambda_lo
        hi = d_hi if lambda_hi is None else lambda_hi
        return np.asarray(yarn_mix(table.wavelength, lo, hi), dtype=np.float64).reshape(-1)
    lo, hi = yarn_thresholds(table)
    rho = band_mask(table, Band.HIGH).astype(np.float64)
    mid = band_mask(table, Band.MID)
    if mid.any():
        rho[mid] = yarn_mix(table.wavelength[mid], lo, hi)
    return rho


@dataclass(frozen=True)
class StageSchedule:
    total_steps: int = 13
    layout_end: int = 6
    local_end: int = 9

    def __post_init__(self):
        if not 1 <= self.layout_end <= self.local_end <= self.total_steps:
            raise ValueError(
                "need 1 <= layout_end <= local_end <= total_steps, got "
                f"{self.layout_end}, {self.local_end}, {self.total_steps}"
            )

    def check(self, k: int) -> None:
        if not 1 <= k <= self.total_steps:
            raise ValueError(f"scale step {k} outside [1, {self.total_steps}]")

    def stage(self, k: int) -> Stage:
        self.check(k)
        if k < self.layout_end:
            return Stage.LAYOUT
        if k <= self.local_end:
            return Stage.LOCAL
        return Stage.DETAIL

    def weight(self, k: int) -> float:
        return stage_weight(k, self)


def stage_weight(k: int, schedule: StageSchedule) -> float:
    """PI-to-YaRN weight: 0 up to layout_end, 1 from local_end on, linear between."""
    schedule.check(k)
    k_l, k_h = schedule.layout_end, schedule.local_end
    if k >= k_h:
        return 1.0
    if k <= k_l:
        return 0.0
    return (k - k_l) / (k_h - k_l)


def stage_remap(
    table: FrequencyTable,
    k: int,
    schedule: StageSchedule,
    s: float,
    *,
    verylow_nope: bool = True,
    lambda_lo: float | None = None,
    lambda_hi: float | None = None,
) -> np.ndarray:
    """Step-dependent frequencies: VeryLow pairs get 0, the rest blend PI into YaRN."""
    if table.bands is None:
        raise ValueError("stage_remap needs band labels; call assign_bands first")
    _check_ratio(s)
    w = stage_weight(k, schedule)
    theta = table.theta
    rho = yarn_coefficients(table, lambda_lo, lambda_hi)
    pi = theta / s
    yarn = _blend(pi, theta, rho)
    out = _blend(pi, yarn, w)
    if verylow_nope:
        out = np.where(band_mask(table, Band.VERYLOW), 0.0, out)
    return out


# Remap rules. Each maps a labelled table and a scale step to frequencies.


@dataclass(frozen=True)
class Identity:
    name: str = field(default="none", init=False)

    def frequencies(self, table: FrequencyTable, k: int) -> np.ndarray:
        return np.array(table.theta)


@dataclass(frozen=True)
class NoPE:
    name: str = field(default="nope", init=False)

    def frequencies(self, table: FrequencyTable, k: int) -> np.ndarray:
        return np.zeros(len(table))


@dataclass(frozen=True)
class PI:
    s: float
    name: str = field(default="pi", init=False)

    def frequencies(self, table: FrequencyTable, k: int) -> np.ndarray:
        return np.asarray(remap_pi(table.theta, self.s)).reshape(-1)


@dataclass(frozen=True)
class NTK:
    s: float
    name: str = field(default="ntk", init=False)

    def frequencies(self, table: FrequencyTable, k: int) -> np.ndarray:
        out = remap_ntk(table.theta, table.index, table.exponent_dim, self.s)
        return np.asarray(out).reshape(-1)


@dataclass(frozen=True)
class YaRN:
    s: float
    lambda_lo: float | None = None
    lambda_hi: float | None = None
    name: str = field(default="yarn", init=False)

    def frequencies(self, table: FrequencyTable, k: int) -> np.ndarray:
        rho = yarn_coefficients(table, self.lambda_lo, self.lambda_hi)
        return np.asarray(remap_yarn(table.theta, rho, self.s)).reshape(-1)


@dataclass(frozen=True)
class StageAware:
    s: float
    schedule: StageSchedule = StageSchedule()
    lambda_lo: float | None = None
    lambda_hi: float | None = None
    verylow_nope: bool = True
    name: str = field(default="stage-aware", init=False)

    def frequencies(self, table: FrequencyTable, k: int) -> np.ndarray:
        return stage_remap(
            table,
            k,
            self.schedule,
            self.s,
            verylow_nope=self.verylow_nope,
            lambda_lo=self.lambda_lo,
            lambda_hi=self.lambda_hi,
        )


RemapRule = Identity | NoPE | PI | NTK | YaRN | StageAware


def rotation_angles(freqs, positions) -> np.ndarray:
    """Angles n * theta for every pair.

    ``freqs`` is one frequency array (1D positions) or a ``(height, width)``
    pair of arrays, in which case ``positions`` has a trailing axis of 2
    holding (row, column) and the height pairs come first.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if isinstance(freqs, (tuple, list)) and len(freqs) == 2 and np.ndim(freqs[0]) == 1:
        if pos.shape[-1:] != (2,):
            raise ValueError("axial frequencies need (row, column) coordinates")
        th_h = np.asarray(freqs[0], dtype=np.float64)
        th_w = np.asarray(freqs[1], dtype=np.float64)
        return np.concatenate([pos[..., 0:1] * th_h, pos[..., 1:2] * th_w], axis=-1)
    if isinstance(freqs, (tuple, list)) and len(freqs) == 1:
        freqs = freqs[0]
    theta = np.asarray(freqs, dtype=np.float64)
    return pos[..., None] * theta


def apply_rope(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate consecutive feature pairs (x[2p], x[2p+1]) by ``angles[..., p]``."""
    x = np.asarray(x, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    if x.shape[-1] % 2 or x.shape[-1] // 2 != angles.shape[-1]:
        raise ValueError(
            f"feature width {x.shape[-1]} does not match {angles.shape[-1]} rotation angles"
        )
    cos, sin = np.cos(angles), np.sin(angles)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x0.shape, cos.shape)[:-1] + x.shape[-1:])
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def write_frequency_csv(tables: Sequence[FrequencyTable], fh: IO[str]) -> int:
    """Write (axis, j, theta, wavelength, band) rows; returns the row count."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["axis", "j", "theta", "wavelength", "band"])
    rows = 0
    for table in tables:
        for rec in table.records():
            band = rec.band.value if rec.band is not None else ""
            writer.writerow([table.axis, rec.j, repr(rec.theta), repr(rec.wavelength), band])
            rows += 1
    return rows


def band_counts(table: FrequencyTable) -> dict[Band, int]:
    return {band: int(band_mask(table, band).sum()) for band in Band}
