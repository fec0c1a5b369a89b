"""A toy next-scale-prediction transformer.

Token maps are generated coarse to fine: step k predicts the whole h_k x w_k
map in parallel, attending to every token of steps <= k (block-causal).
Weights are random draws from named seed streams; there is no training.
The point is to exercise the positional remapping and calibration paths
with the same tensor plumbing a real scale-wise model uses.
"""

from __future__ import annotations

import csv
import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import IO, Sequence

import numpy as np

from .attention import CalibrationPolicy, gated_alpha, head_statistics, normalized_entropy, scaled_attention
from .probe import band_query_norms
from .rope import (
    PI,
    NTK,
    AxisMode,
    Band,
    FrequencyTable,
    Identity,
    NoPE,
    RopeConfig,
    Stage,
    StageAware,
    StageSchedule,
    YaRN,
    apply_rope,
    build_frequency_tables,
    rotation_angles,
)
from .seeding import stream

__all__ = [
    "ModelConfig",
    "GenerationPlan",
    "KvCache",
    "StepRecord",
    "GenerationTrace",
    "ToyVAR",
    "build_scale_schedule",
    "positions_for_step",
    "make_remap",
    "make_plan",
    "generate",
]

REMAP_NAMES = ("none", "nope", "pi", "ntk", "yarn", "stage-aware")


def build_scale_schedule(L: int, K: int) -> list[tuple[int, int]]:
    """K strictly increasing square sides from 1 to L, near-geometric."""
    if K < 3:
        raise ValueError(f"need at least 3 scale steps, got {K}")
    if L < K:
        raise ValueError(f"side {L} cannot hold {K} strictly increasing scales")
    sides = [round(L ** (i / (K - 1))) for i in range(K)]
    sides[0] = 1
    for i in range(1, K):
        sides[i] = max(sides[i], sides[i - 1] + 1)
    for i in range(K - 1, -1, -1):
        sides[i] = min(sides[i], L - (K - 1 - i))
    return [(s, s) for s in sides]


def positions_for_step(h: int, w: int, side: int) -> np.ndarray:
    """Center-aligned (row, col) coordinates of an h x w map on the side x side grid."""
    if side < max(h, w):
        raise ValueError(f"finest side {side} is smaller than the map {h}x{w}")
    rows = (np.arange(h) + 0.5) * side / h - 0.5
    cols = (np.arange(w) + 0.5) * side / w - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=-1)


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 4
    head_dim: int = 64
    vocab_size: int = 32
    train_side: int = 16
    steps: int = 13
    seed: int = 0
    base: float = 10000.0
    high_band_size: int = 3
    axis_mode: AxisMode = AxisMode.TWO_D_AXIAL
    mlp_ratio: int = 2
    # query/key weight gain of the last head; head h gets qk_gain ** (h / (heads - 1)).
    qk_gain: float = 3.0
    scale_schedule: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "axis_mode", AxisMode(self.axis_mode))
        for name in ("layers", "heads", "head_dim", "train_side", "steps", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if not self.qk_gain > 0:
            raise ValueError("qk_gain must be positive")
        if self.scale_schedule is None:
            sched = tuple(build_scale_schedule(self.train_side, self.steps))
        else:
            sched = tuple((int(h), int(w)) for h, w in self.scale_schedule)
        if len(sched) != self.steps:
            raise ValueError(f"scale schedule has {len(sched)} entries, expected {self.steps}")
        for (h0, w0), (h1, w1) in zip(sched, sched[1:]):
            if h1 < h0 or w1 < w0:
                raise ValueError("scale schedule sides must be non-decreasing")
        if sched[-1] != (self.train_side, self.train_side):
            raise ValueError(f"scale schedule must end at ({self.train_side}, {self.train_side})")
        object.__setattr__(self, "scale_schedule", sched)
        self.rope()  # validates head_dim / band size

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim

    def rope(self, target_side: int | None = None) -> RopeConfig:
        return RopeConfig(
            head_dim=self.head_dim,
            base=self.base,
            train_side=self.train_side,
            target_side=self.train_side if target_side is None else target_side,
            high_band_size=self.high_band_size,
            axis_mode=self.axis_mode,
        )

    def sides(self, target_side: int) -> tuple[tuple[int, int], ...]:
        if target_side == self.train_side:
            return self.scale_schedule
        return tuple(build_scale_schedule(target_side, self.steps))

    def canonical(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, AxisMode):
                value = value.value
            elif f.name == "scale_schedule":
                value = " ".join(f"{h}x{w}" for h, w in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def make_remap(name: str, s: float, schedule: StageSchedule | None = None, *, verylow_nope: bool = True):
    """Remap rule from its CLI name."""
    if name in ("none", "identity"):
        return Identity()
    if name == "nope":
        return NoPE()
    if name == "pi":
        return PI(s)
    if name == "ntk":
        return NTK(s)
    if name == "yarn":
        return YaRN(s)
    if name in ("stage-aware", "stage_aware"):
        return StageAware(s, schedule or StageSchedule(), verylow_nope=verylow_nope)
    raise ValueError(f"unknown remap {name!r}; choose from {', '.join(REMAP_NAMES)}")


@dataclass(frozen=True)
class GenerationPlan:
    """How to run one generation: target side, positional rule, calibration."""

    target_side: int
    remap: object = field(default_factory=Identity)
    schedule: StageSchedule = StageSchedule()
    calibration: CalibrationPolicy | None = None
    reference: object | None = None
    interventions: tuple = ()
    sample: int = 0
    use_cache: bool = True
    retain_maps: bool = False
    parallel_heads: bool = False

    @property
    def calibrate(self) -> bool:
        return self.calibration is not None


def make_plan(
    cfg: ModelConfig,
    target_side: int | None = None,
    remap: str = "stage-aware",
    *,
    calibrate: bool = False,
    reference=None,
    schedule: StageSchedule | None = None,
    tau_h: float = 0.3,
    epsilon: float = 1e-8,
    verylow_nope: bool = True,
    **kwargs,
) -> GenerationPlan:
    target_side = cfg.train_side if target_side is None else target_side
    schedule = schedule or StageSchedule(cfg.steps, min(6, cfg.steps), min(9, cfg.steps))
    s = target_side / cfg.train_side
    policy = None
    if calibrate:
        policy = CalibrationPolicy(tau_h=tau_h, epsilon=epsilon, active_after_step=schedule.local_end)
    return GenerationPlan(
        target_side=target_side,
        remap=make_remap(remap, s, schedule, verylow_nope=verylow_nope),
        schedule=schedule,
        calibration=policy,
        reference=reference,
        **kwargs,
    )


@dataclass
class KvCache:
    """Rotated keys and values of every token generated so far, per layer.

    Arrays are only ever replaced by longer copies, so rows already
    appended are never modified.
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]
    steps: np.ndarray
    positions: np.ndarray

    @classmethod
    def empty(cls, cfg: ModelConfig) -> "KvCache":
        shape = (cfg.heads, 0, cfg.head_dim)
        return cls(
            keys=[np.zeros(shape) for _ in range(cfg.layers)],
            values=[np.zeros(shape) for _ in range(cfg.layers)],
            steps=np.zeros(0, dtype=np.int64),
            positions=np.zeros((0, 2)),
        )

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def last_step(self) -> int:
        return int(self.steps[-1]) if len(self.steps) else 0


@dataclass
class StepRecord:
    step: int
    side: tuple[int, int]
    tokens: np.ndarray
    logits: np.ndarray
    freqs: tuple[np.ndarray, ...]
    omega: float
    stage: Stage
    alpha: np.ndarray
    entropy: np.ndarray
    entropy_scaled: np.ndarray
    variance: np.ndarray
    band_norms: np.ndarray
    maps: list[list[np.ndarray]] | None = None


@dataclass
class GenerationTrace:
    config_hash: str
    target_side: int
    remap: str
    steps: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def step(self, k: int) -> StepRecord:
        if not 1 <= k <= len(self.steps):
            raise ValueError(f"step {k} outside [1, {len(self.steps)}]")
        return self.steps[k - 1]

    @property
    def total_tokens(self) -> int:
        return sum(r.tokens.size for r in self.steps)

    @property
    def token_maps(self) -> list[np.ndarray]:
        return [r.tokens for r in self.steps]

    def mean_band_norms(self, k: int, layers=None, heads=None) -> dict[Band, float]:
        """Band norms at step k averaged over the selected layers and heads."""
        norms = self.step(k).band_norms
        if layers is not None:
            norms = norms[list(layers)]
        if heads is not None:
            norms = norms[:, list(heads)]
        flat = norms.reshape(-1, len(Band))
        return {b: float(flat[:, i].mean()) for i, b in enumerate(Band)}

    def write_csv(self, fh: IO[str]) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["step", "layer", "head", "omega", "alpha", "entropy", "entropy_scaled", "variance"]
            + [f"norm_{b.value.lower()}" for b in Band]
        )
        for rec in self.steps:
            omega = "" if math.isnan(rec.omega) else repr(rec.omega)
            for layer in range(rec.alpha.shape[0]):
                for head in range(rec.alpha.shape[1]):
                    writer.writerow(
                        [rec.step, layer, head, omega]
                        + [repr(float(a[layer, head])) for a in (rec.alpha, rec.entropy, rec.entropy_scaled, rec.variance)]
                        + [repr(float(v)) for v in rec.band_norms[layer, head]]
                    )

    def write_tokens(self, fh: IO[str]) -> None:
        for rec in self.steps:
            h, w = rec.side
            fh.write(f"# step {rec.step} {h}x{w}\n")
            for row in rec.tokens:
                fh.write(" ".join(str(int(t)) for t in row) + "\n")


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


@dataclass
class _StepGeometry:
    """Per-token rotation angles and zeroed pairs for one scale step."""

    freqs: tuple[np.ndarray, ...]
    angles: np.ndarray
    zeroed: np.ndarray
    positions: np.ndarray


class ToyVAR:
    """Randomly initialised scale-wise transformer built from ``cfg.seed``."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        D, H, d = cfg.model_dim, cfg.heads, cfg.head_dim
        seed = cfg.seed
        self.embed = stream(seed, "embed").standard_normal((cfg.vocab_size, D))
        self.step_embed = stream(seed, "step_embed").standard_normal((cfg.steps, D))
        self.layers = []
        for li in range(cfg.layers):
            heads = []
            for h in range(H):
                gain = cfg.qk_gain ** (h / (H - 1)) if H > 1 else cfg.qk_gain
                w = {
                    p: stream(seed, "layer", li, "head", h, p).standard_normal((D, d)) / math.sqrt(D)
                    for p in ("wq", "wk", "wv")
                }
                w["wq"] *= gain
                w["wk"] *= gain
                heads.append(w)
            self.layers.append(
                {
                    "wq": np.stack([w["wq"] for w in heads]),
                    "wk": np.stack([w["wk"] for w in heads]),
                    "wv": np.stack([w["wv"] for w in heads]),
                    "wo": stream(seed, "layer", li, "wo").standard_normal((H * d, D)) / math.sqrt(H * d),
                    "w1": stream(seed, "layer", li, "mlp_in").standard_normal((D, cfg.mlp_ratio * D)) / math.sqrt(D),
                    "w2": stream(seed, "layer", li, "mlp_out").standard_normal((cfg.mlp_ratio * D, D))
                    / math.sqrt(cfg.mlp_ratio * D),
                }
            )
        self.unembed = stream(seed, "unembed").standard_normal((D, cfg.vocab_size)) / math.sqrt(D)

    # -- inputs and geometry -------------------------------------------------

    def step_inputs(self, k: int, side: tuple[int, int], prev_tokens: np.ndarray | None, sample: int) -> np.ndarray:
        """Embeddings fed at step k: the previous map upsampled (nearest) plus a step vector."""
        h, w = side
        if k == 1:
            start = stream(self.cfg.seed, "start", sample).standard_normal(self.cfg.model_dim)
            base = np.broadcast_to(start, (h * w, self.cfg.model_dim))
        else:
            if prev_tokens is None:
                raise ValueError(f"step {k} needs the step {k - 1} token map")
            ph, pw = prev_tokens.shape
            ri = ((np.arange(h) + 0.5) * ph / h).astype(int)
            ci = ((np.arange(w) + 0.5) * pw / w).astype(int)
            base = self.embed[prev_tokens[np.ix_(ri, ci)].ravel()]
        return base + self.step_embed[k - 1]

    def geometry(self, k: int, side: tuple[int, int], plan: GenerationPlan, tables: Sequence[FrequencyTable]) -> _StepGeometry:
        freqs = []
        zeroed = []
        for table in tables:
            theta = plan.remap.frequencies(table, k)
            pair_zero = np.zeros(len(table), dtype=bool)
            for iv in plan.interventions:
                theta = iv.adjust_frequencies(table, k, theta)
                pair_zero |= iv.zeroed_pairs(table, k)
            freqs.append(np.asarray(theta, dtype=np.float64))
            zeroed.append(pair_zero)
        pos = positions_for_step(side[0], side[1], plan.target_side)
        if self.cfg.axis_mode is AxisMode.TWO_D_AXIAL:
            angles = rotation_angles(tuple(freqs), pos)
        else:
            angles = rotation_angles(freqs[0], pos[:, 0] * plan.target_side + pos[:, 1])
        return _StepGeometry(tuple(freqs), angles, np.concatenate(zeroed), pos)

    # -- attention -------------------------------------------------------------

    def _rotate(self, x: np.ndarray, angles: np.ndarray, zeroed: np.ndarray) -> np.ndarray:
        """x: (H, n, d); angles: (n, d/2); zeroed: (n, d/2) pairs to clear after rotation."""
        out = apply_rope(x, angles[None])
        if zeroed.any():
            feat = np.repeat(zeroed, 2, axis=-1)
            out = np.where(feat[None], 0.0, out)
        return out

    def _head(self, q, k_all, v_all, q_steps, key_steps, li, h, plan, k_now, tables, stats_out):
        """One head over all query blocks; returns its (n, d) output."""
        cfg = self.cfg
        S = q @ k_all.T / math.sqrt(cfg.head_dim)
        out = np.empty_like(q)
        for b in np.unique(q_steps):
            rows = q_steps == b
            cols = key_steps <= b
            mask = None if cols.all() else np.broadcast_to(cols, (int(rows.sum()), len(cols)))
            Sb = S[rows]
            stats, P1 = head_statistics(Sb, mask)
            h_ref = None
            if plan.calibration is not None and plan.reference is not None:
                h_ref = plan.reference.lookup(li, h, int(b))
            alpha = 1.0
            if plan.calibration is not None:
                alpha = gated_alpha(stats, plan.calibration, int(b), h_ref)
            P = P1 if alpha == 1.0 else scaled_attention(Sb, alpha, mask)
            out[rows] = P @ v_all
            if b == k_now:
                h_scaled = stats.entropy
                if alpha != 1.0:
                    h_scaled = normalized_entropy(P, mask)
                stats_out[(li, h)] = (alpha, stats, h_scaled, P[:, cols] if plan.retain_maps else None)
        return out

    def _forward(self, x, q_steps, geom_angles, geom_zeroed, plan, k_now, tables, cache: KvCache | None):
        """Run all layers on rows ``x``; appends their K/V to ``cache`` when given."""
        cfg = self.cfg
        stats: dict = {}
        norms = np.full((cfg.layers, cfg.heads, len(Band)), np.nan)
        new_keys, new_values = [], []
        last = q_steps == k_now
        for li, layer in enumerate(self.layers):
            hN = _layer_norm(x)
            q = self._rotate(np.einsum("nD,hDd->hnd", hN, layer["wq"]), geom_angles, geom_zeroed)
            kk = self._rotate(np.einsum("nD,hDd->hnd", hN, layer["wk"]), geom_angles, geom_zeroed)
            v = np.einsum("nD,hDd->hnd", hN, layer["wv"])
            if cache is not None:
                k_all = np.concatenate([cache.keys[li], kk], axis=1)
                v_all = np.concatenate([cache.values[li], v], axis=1)
                key_steps = np.concatenate([cache.steps, q_steps])
                new_keys.append(k_all)
                new_values.append(v_all)
            else:
                k_all, v_all, key_steps = kk, v, q_steps
            for h in range(cfg.heads):
                bn = band_query_norms(q[h][last], tables)
                norms[li, h] = [bn[b] for b in Band]

            def run(h):
                return self._head(q[h], k_all[h], v_all[h], q_steps, key_steps, li, h, plan, k_now, tables, stats)

            if plan.parallel_heads and cfg.heads > 1:
                with ThreadPoolExecutor(max_workers=cfg.heads) as pool:
                    outs = list(pool.map(run, range(cfg.heads)))
            else:
                outs = [run(h) for h in range(cfg.heads)]
            attn = np.concatenate(outs, axis=1) @ layer["wo"]
            x = x + attn
            x = x + _gelu(_layer_norm(x) @ layer["w1"]) @ layer["w2"]
        logits = _layer_norm(x) @ self.unembed
        return logits, stats, norms, new_keys, new_values

    # -- public steps ----------------------------------------------------------

    def forward_step(
        self,
        cache: KvCache,
        k: int,
        plan: GenerationPlan,
        prev_tokens: np.ndarray | None,
        tables: Sequence[FrequencyTable] | None = None,
    ):
        """Logits for every step-k position, attending to the cache plus step k itself.

        The cache is extended in place with this step's keys and values.
        """
        cfg = self.cfg
        if cache.last_step != k - 1:
            raise ValueError(f"cache holds steps up to {cache.last_step}, cannot run step {k}")
        sides = cfg.sides(plan.target_side)
        expected = sum(h * w for h, w in sides[: k - 1])
        if len(cache) != expected:
            raise ValueError(f"cache has {len(cache)} rows, expected {expected} before step {k}")
        if tables is None:
            tables = build_frequency_tables(cfg.rope(plan.target_side))
        side = sides[k - 1]
        x = self.step_inputs(k, side, prev_tokens, plan.sample)
        geom = self.geometry(k, side, plan, tables)
        n = side[0] * side[1]
        q_steps = np.full(n, k, dtype=np.int64)
        zeroed = np.broadcast_to(geom.zeroed, (n, len(geom.zeroed)))
        logits, stats, norms, keys, values = self._forward(x, q_steps, geom.angles, zeroed, plan, k, tables, cache)
        cache.keys, cache.values = keys, values
        cache.steps = np.concatenate([cache.steps, q_steps])
        cache.positions = np.concatenate([cache.positions, geom.positions])
        return logits, stats, norms, geom

    def forward_full(self, token_maps: Sequence[np.ndarray], k: int, plan: GenerationPlan, tables=None):
        """Cache-free pass over steps 1..k under the block-causal mask.

        ``token_maps`` must hold the maps of steps 1..k-1. Returns the same
        tuple as :meth:`forward_step` for step k.
        """
        cfg = self.cfg
        if tables is None:
            tables = build_frequency_tables(cfg.rope(plan.target_side))
        sides = cfg.sides(plan.target_side)
        xs, steps, angles, zeroed = [], [], [], []
        geom = None
        for kk in range(1, k + 1):
            prev = token_maps[kk - 2] if kk > 1 else None
            side = sides[kk - 1]
            xs.append(self.step_inputs(kk, side, prev, plan.sample))
            geom = self.geometry(kk, side, plan, tables)
            n = side[0] * side[1]
            steps.append(np.full(n, kk, dtype=np.int64))
            angles.append(geom.angles)
            zeroed.append(np.broadcast_to(geom.zeroed, (n, len(geom.zeroed))))
        q_steps = np.concatenate(steps)
        logits, stats, norms, _, _ = self._forward(
            np.concatenate(xs), q_steps, np.concatenate(angles), np.concatenate(zeroed), plan, k, tables, None
        )
        return logits[q_steps == k], stats, norms, geom

    def generate(self, plan: GenerationPlan) -> GenerationTrace:
        cfg = self.cfg
        if plan.target_side < cfg.train_side:
            raise ValueError(f"target side {plan.target_side} below training side {cfg.train_side}")
        if plan.schedule.total_steps != cfg.steps:
            raise ValueError(f"stage schedule covers {plan.schedule.total_steps} steps, model has {cfg.steps}")
        if plan.calibration is not None and plan.reference is None:
            if plan.calibration.active_after_step < cfg.steps:
                raise ValueError("calibration is on but no reference entropy store was given")
        if plan.reference is not None and hasattr(plan.reference, "check_config"):
            plan.reference.check_config(cfg.config_hash())
        tables = build_frequency_tables(cfg.rope(plan.target_side))
        sides = cfg.sides(plan.target_side)
        trace = GenerationTrace(cfg.config_hash(), plan.target_side, getattr(plan.remap, "name", "custom"))
        cache = KvCache.empty(cfg) if plan.use_cache else None
        maps_so_far: list[np.ndarray] = []
        prev = None
        for k in range(1, cfg.steps + 1):
            if plan.use_cache:
                logits, stats, norms, geom = self.forward_step(cache, k, plan, prev, tables)
            else:
                logits, stats, norms, geom = self.forward_full(maps_so_far, k, plan, tables)
            side = sides[k - 1]
            tokens = np.argmax(logits, axis=1).reshape(side)
            trace.steps.append(self._record(k, side, tokens, logits, geom, stats, norms, plan))
            maps_so_far.append(tokens)
            prev = tokens
        return trace

    def _record(self, k, side, tokens, logits, geom, stats, norms, plan) -> StepRecord:
        cfg = self.cfg
        shape = (cfg.layers, cfg.heads)
        alpha, ent, ent_s, var = (np.ones(shape), np.zeros(shape), np.zeros(shape), np.zeros(shape))
        maps = [[None] * cfg.heads for _ in range(cfg.layers)] if plan.retain_maps else None
        for (li, h), (a, st, hs, P) in stats.items():
            alpha[li, h], ent[li, h], ent_s[li, h], var[li, h] = a, st.entropy, hs, st.variance
            if maps is not None:
                maps[li][h] = P
        remap = plan.remap
        omega = remap.schedule.weight(k) if isinstance(remap, StageAware) else math.nan
        return StepRecord(
            step=k,
            side=side,
            tokens=tokens,
            logits=logits,
            freqs=geom.freqs,
            omega=omega,
            stage=plan.schedule.stage(k),
            alpha=alpha,
            entropy=ent,
            entropy_scaled=ent_s,
            variance=var,
            band_norms=norms,
            maps=maps,
        )


def generate(cfg: ModelConfig, plan: GenerationPlan) -> GenerationTrace:
    return ToyVAR(cfg).generate(plan)
