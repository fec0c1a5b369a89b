"""Band interventions and diagnostics: NoPE substitution, wavelength forcing,
Q/K feature zeroing, band-wise query norms and attention-map export."""

from __future__ import annotations

import csv
import enum
import math
import re
from dataclasses import dataclass, replace
from typing import IO, Sequence

import numpy as np

from .matfile import write_matrix
from .rope import Band, FrequencyTable, band_mask

__all__ = [
    "InterventionKind",
    "Intervention",
    "parse_intervention",
    "apply_intervention",
    "band_query_norms",
    "export_attention_map",
    "write_norms_csv",
]


class InterventionKind(str, enum.Enum):
    NOPE = "nope_substitute"
    FORCE = "force_wavelength"
    ZERO = "zero_qk_features"


_KIND_ALIASES = {
    "nope": InterventionKind.NOPE,
    "nope_substitute": InterventionKind.NOPE,
    "force": InterventionKind.FORCE,
    "force_wavelength": InterventionKind.FORCE,
    "zero": InterventionKind.ZERO,
    "zero_qk": InterventionKind.ZERO,
    "zero_qk_features": InterventionKind.ZERO,
}


@dataclass(frozen=True)
class Intervention:
    """One band perturbation over an inclusive range of scale steps.

    NoPE substitution and wavelength forcing rewrite the band's frequencies
    before rotation; feature zeroing clears the band's rotated Q/K features.
    """

    kind: InterventionKind
    band: Band
    steps: tuple[int, int]
    wavelength: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", InterventionKind(self.kind))
        object.__setattr__(self, "band", Band(self.band))
        lo, hi = self.steps
        if not 1 <= lo <= hi:
            raise ValueError(f"step range {lo}-{hi} must satisfy 1 <= start <= end")
        if self.kind is InterventionKind.FORCE:
            if self.wavelength is None or not self.wavelength > 0:
                raise ValueError("force_wavelength needs a positive target wavelength")

    def active(self, k: int) -> bool:
        return self.steps[0] <= k <= self.steps[1]

    def adjust_frequencies(self, table: FrequencyTable, k: int, theta: np.ndarray) -> np.ndarray:
        if self.kind is InterventionKind.ZERO or not self.active(k):
            return theta
        theta = np.array(theta, dtype=np.float64)
        sel = band_mask(table, self.band)
        theta[sel] = 0.0 if self.kind is InterventionKind.NOPE else 2.0 * math.pi / self.wavelength
        return theta

    def zeroed_pairs(self, table: FrequencyTable, k: int) -> np.ndarray:
        if self.kind is not InterventionKind.ZERO or not self.active(k):
            return np.zeros(len(table), dtype=bool)
        return band_mask(table, self.band)


_SPEC = re.compile(
    r"^(?P<kind>[a-z_]+):(?P<band>[a-z_-]+):(?P<lo>\d+)-(?P<hi>\d+)(?::(?P<t>.+))?$", re.IGNORECASE
)


def _parse_wavelength(text: str, L: int) -> float:
    expr = text.strip().replace(" ", "").upper()
    if expr.startswith("T="):
        expr = expr[2:]
    m = re.fullmatch(r"(?:(?P<num>[0-9.eE+-]+)\*?)?L(?:/(?P<den>[0-9.eE+-]+))?", expr)
    if m:
        num = float(m["num"]) if m["num"] else 1.0
        den = float(m["den"]) if m["den"] else 1.0
        return num * L / den
    return float(expr)


def parse_intervention(spec: str, L: int, K: int) -> Intervention:
    """Parse ``kind:band:k_start-k_end[:T]``, e.g. ``force:mid:6-9:T=L/6``."""
    m = _SPEC.match(spec.strip())
    if not m:
        raise ValueError(f"malformed intervention {spec!r}; expected kind:band:start-end[:T]")
    kind = _KIND_ALIASES.get(m["kind"].lower())
    if kind is None:
        raise ValueError(f"unknown intervention kind {m['kind']!r}")
    lo, hi = int(m["lo"]), int(m["hi"])
    if not 1 <= lo <= hi <= K:
        raise ValueError(f"step range {lo}-{hi} outside [1, {K}]")
    wavelength = None
    if m["t"] is not None:
        try:
            wavelength = _parse_wavelength(m["t"], L)
        except ValueError:
            raise ValueError(f"cannot parse wavelength {m['t']!r}") from None
    elif kind is InterventionKind.FORCE:
        raise ValueError("force interventions need a wavelength, e.g. force:mid:6-9:T=L/6")
    return Intervention(kind, Band.parse(m["band"]), (lo, hi), wavelength)


def apply_intervention(plan, iv: Intervention, tables: Sequence[FrequencyTable], total_steps: int):
    """Return ``plan`` with ``iv`` appended; the band must be non-empty on some axis."""
    if iv.steps[1] > total_steps:
        raise ValueError(f"step range {iv.steps[0]}-{iv.steps[1]} outside [1, {total_steps}]")
    if not any(band_mask(t, iv.band).any() for t in tables):
        raise ValueError(f"band {iv.band.value} has no rotary pairs under this configuration")
    return replace(plan, interventions=tuple(plan.interventions) + (iv,))


def band_query_norms(q: np.ndarray, tables: Sequence[FrequencyTable] | FrequencyTable) -> dict[Band, float]:
    """Mean rotary-pair 2-norm per band.

    Each pair's norm is taken first, then averaged over the band's pairs in a
    row, then over rows. Bands without pairs map to NaN.
    """
    if isinstance(tables, FrequencyTable):
        tables = (tables,)
    q = np.asarray(q, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    n_pairs = sum(len(t) for t in tables)
    if q.shape[1] != 2 * n_pairs:
        raise ValueError(f"query width {q.shape[1]} != 2 x {n_pairs} pairs")
    norms = np.hypot(q[:, 0::2], q[:, 1::2])
    out = {}
    for band in Band:
        sel = np.concatenate([band_mask(t, band) for t in tables])
        if not sel.any():
            out[band] = math.nan
        else:
            out[band] = float(norms[:, sel].mean(axis=1).mean())
    return out


def export_attention_map(trace, layer: int, head: int, step: int, path):
    """Write the retained step map over the full run sequence; future tokens are 0."""
    rec = trace.step(step)
    if rec.maps is None:
        raise ValueError("attention maps were not retained; generate with retain_maps=True")
    P = rec.maps[layer][head]
    full = np.zeros((P.shape[0], trace.total_tokens))
    full[:, : P.shape[1]] = P
    return write_matrix(path, full)


def write_norms_csv(rows, fh: IO[str]) -> None:
    """Rows of (step, band, mean_norm)."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["step", "band", "mean_norm"])
    for step, band, value in rows:
        writer.writerow([step, Band(band).value, repr(float(value))])
