"""Training-resolution reference entropies, keyed by (layer, head, scale step).

File format (text, one item per line)::

    format_version=1
    config_hash=<16 hex>
    train_side=16
    seed=7
    samples=1
    records=104
    layer,head,step,entropy
    0,0,1,1
    ...

Entropies are written with 17 significant digits, which round-trips float64
exactly.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1
_COLUMNS = "layer,head,step,entropy"
_META_KEYS = ("config_hash", "train_side", "seed", "samples", "records")

Key = tuple[int, int, int]


class ReferenceFormatError(ValueError):
    pass


class ReferenceMismatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ReferenceMetadata:
    config_hash: str
    train_side: int
    seed: int
    samples: int = 1


@dataclass(frozen=True)
class ReferenceEntropyStore:
    entries: Mapping[Key, float]
    metadata: ReferenceMetadata
    _warned: set = field(default_factory=set, compare=False, repr=False)

    def __post_init__(self):
        entries = {}
        for key, value in self.entries.items():
            layer, head, step = (int(x) for x in key)
            value = float(value)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"entropy {value} for {key} outside [0, 1]")
            entries[(layer, head, step)] = value
        object.__setattr__(self, "entries", MappingProxyType(dict(sorted(entries.items()))))

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, layer: int, head: int, step: int) -> float | None:
        """Stored entropy, or None; callers treat None as "use alpha = 1"."""
        return self.entries.get((layer, head, step))

    def check_config(self, config_hash: str) -> bool:
        """Warn (once per foreign hash) when the store came from another model config."""
        if config_hash == self.metadata.config_hash:
            return True
        if config_hash not in self._warned:
            self._warned.add(config_hash)
            warnings.warn(
                f"reference entropies were captured for config {self.metadata.config_hash} "
                f"(train_side={self.metadata.train_side}), queried under config {config_hash}",
                ReferenceMismatchWarning,
                stacklevel=2,
            )
        return False

    def dumps(self) -> str:
        meta = self.metadata
        lines = [
            f"format_version={FORMAT_VERSION}",
            f"config_hash={meta.config_hash}",
            f"train_side={meta.train_side}",
            f"seed={meta.seed}",
            f"samples={meta.samples}",
            f"records={len(self.entries)}",
            _COLUMNS,
        ]
        lines += [f"{l},{h},{k},{v:.17g}" for (l, h, k), v in self.entries.items()]
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


def lookup(store: ReferenceEntropyStore | None, layer: int, head: int, step: int, config_hash: str | None = None):
    if store is None:
        return None
    if config_hash is not None:
        store.check_config(config_hash)
    return store.lookup(layer, head, step)


def save(store: ReferenceEntropyStore, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(store.dumps())
    return path


def loads(text: str, source: str = "<string>") -> ReferenceEntropyStore:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    def fail(lineno: int, msg: str):
        raise ReferenceFormatError(f"{source}:{lineno}: {msg}")

    if not lines:
        fail(1, "empty file")
    if lines[0] != f"format_version={FORMAT_VERSION}":
        fail(1, f"unsupported format version line {lines[0]!r} (expected {FORMAT_VERSION})")
    meta = {}
    i = 1
    while i < len(lines) and lines[i] != _COLUMNS:
        key, sep, value = lines[i].partition("=")
        if not sep or key not in _META_KEYS:
            fail(i + 1, f"unexpected header line {lines[i]!r}")
        meta[key] = value
        i += 1
    if i == len(lines):
        fail(i, "missing column header; file truncated")
    missing = [k for k in _META_KEYS if k not in meta]
    if missing:
        fail(i + 1, f"missing header keys {missing}")
    try:
        declared = int(meta["records"])
        metadata = ReferenceMetadata(
            config_hash=meta["config_hash"],
            train_side=int(meta["train_side"]),
            seed=int(meta["seed"]),
            samples=int(meta["samples"]),
        )
    except ValueError as exc:
        fail(i, f"bad header value: {exc}")
    entries = {}
    for lineno, line in enumerate(lines[i + 1 :], start=i + 2):
        parts = line.split(",")
        try:
            if len(parts) != 4:
                raise ValueError(f"expected 4 fields, found {len(parts)}")
            layer, head, step = int(parts[0]), int(parts[1]), int(parts[2])
            value = float(parts[3])
        except ValueError as exc:
            fail(lineno, f"malformed record {line!r}: {exc}")
        if not 0.0 <= value <= 1.0:
            fail(lineno, f"entropy {value} outside [0, 1]")
        if (layer, head, step) in entries:
            fail(lineno, f"duplicate key {(layer, head, step)}")
        entries[(layer, head, step)] = value
    if len(entries) != declared:
        fail(len(lines) + 1, f"header declares {declared} records but file ends after {len(entries)}")
    return ReferenceEntropyStore(entries, metadata)


def load(path) -> ReferenceEntropyStore:
    path = Path(path)
    return loads(path.read_text(), str(path))


def default_path(config_hash: str, root=".") -> Path:
    return Path(root) / "refs" / f"{config_hash}.entropy"


def capture_reference(cfg, *, samples: int = 1, target_side: int | None = None) -> ReferenceEntropyStore:
    """Record alpha = 1 entropies of every (layer, head, step) at the training side.

    With ``samples > 1`` the runs differ in their start embedding and the
    entropies are averaged.
    """
    from .model import ToyVAR, make_plan

    if target_side is not None and target_side != cfg.train_side:
        raise ValueError(
            f"reference capture runs at the training side {cfg.train_side}, not {target_side}"
        )
    if samples < 1:
        raise ValueError("samples must be >= 1")
    model = ToyVAR(cfg)
    total = None
    for sample in range(samples):
        trace = model.generate(make_plan(cfg, cfg.train_side, "none", sample=sample))
        ent = np.stack([rec.entropy for rec in trace.steps])  # (K, layers, heads)
        total = ent if total is None else total + ent
    mean = total / samples
    entries = {
        (li, h, k + 1): float(min(max(mean[k, li, h], 0.0), 1.0))
        for k in range(mean.shape[0])
        for li in range(mean.shape[1])
        for h in range(mean.shape[2])
    }
    return ReferenceEntropyStore(
        entries, ReferenceMetadata(cfg.config_hash(), cfg.train_side, cfg.seed, samples)
    )
