"""Command-line entry point.

    extravar [--config FILE] [--set section.key=value ...] COMMAND ...

Commands: freq-table, capture-ref, generate, probe. Exit codes: 0 success,
2 configuration error, 3 missing or mismatched artifact, 4 runtime failure.
The manifest written by ``generate`` is itself a config file; feeding it
back through ``--config`` reproduces the run byte for byte.
"""

from __future__ import annotations

import argparse
import io
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path


from . import reference as refmod
from .attention import CalibrationPolicy
from .model import REMAP_NAMES, ModelConfig, ToyVAR, make_plan
from .probe import apply_intervention, export_attention_map, parse_intervention, write_norms_csv
from .rope import Band, StageSchedule, build_frequency_table, build_frequency_tables, write_frequency_csv

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_RUNTIME = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class ArtifactError(RuntimeError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _sched(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for item in text.split():
        h, _, w = item.partition("x")
        out.append((int(h), int(w or h)))
    return tuple(out)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return " ".join(f"{h}x{w}" for h, w in value)
    if value is None:
        return ""
    return str(value)


# section -> key -> parser. Order here is the manifest order.
SCHEMA: dict[str, dict[str, object]] = {
    "model": {
        "layers": int,
        "heads": int,
        "head_dim": int,
        "vocab_size": int,
        "train_side": int,
        "steps": int,
        "seed": int,
        "mlp_ratio": int,
        "qk_gain": float,
        "scale_schedule": _sched,
    },
    "rope": {
        "head_dim": int,
        "train_side": int,
        "base": float,
        "high_band_size": int,
        "axis_mode": str,
    },
    "schedule": {"total_steps": int, "layout_end": int, "local_end": int},
    "calibration": {"tau_h": float, "epsilon": float, "alpha_min": float, "alpha_max": float, "samples": int},
    "generate": {
        "target_side": int,
        "remap": str,
        "calibrate": _bool,
        "ref": str,
        "verylow_nope": _bool,
        "sample": int,
        "use_cache": _bool,
        "parallel_heads": _bool,
    },
    "reference": {"content_hash": str},
}


def parse_config_text(text: str, source: str = "<config>") -> dict[tuple[str, str], str]:
    raw: dict[tuple[str, str], str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        name, sep, value = line.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {line!r}")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"{source}:{lineno}: unknown key {section}.{key}")
        if (section, key) in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {section}.{key}")
        raw[(section, key)] = value.strip()
    return raw


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    schedule: StageSchedule
    tau_h: float = 0.3
    epsilon: float = 1e-8
    alpha_min: float = 0.5
    alpha_max: float = 4.0
    samples: int = 1
    target_side: int | None = None
    remap: str = "stage-aware"
    calibrate: bool = False
    ref: str = ""
    verylow_nope: bool = True
    sample: int = 0
    use_cache: bool = True
    parallel_heads: bool = False
    ref_hash: str = ""

    @property
    def effective_target(self) -> int:
        return self.model.train_side if self.target_side is None else self.target_side

    def manifest(self) -> str:
        m, s = self.model, self.schedule
        values = {
            "model": {f: getattr(m, f) for f in SCHEMA["model"]},
            "rope": {
                "head_dim": m.head_dim,
                "train_side": m.train_side,
                "base": m.base,
                "high_band_size": m.high_band_size,
                "axis_mode": m.axis_mode.value,
            },
            "schedule": {"total_steps": s.total_steps, "layout_end": s.layout_end, "local_end": s.local_end},
            "calibration": {
                "tau_h": self.tau_h,
                "epsilon": self.epsilon,
                "alpha_min": self.alpha_min,
                "alpha_max": self.alpha_max,
                "samples": self.samples,
            },
            "generate": {
                "target_side": self.effective_target,
                "remap": self.remap,
                "calibrate": self.calibrate,
                "ref": self.ref,
                "verylow_nope": self.verylow_nope,
                "sample": self.sample,
                "use_cache": self.use_cache,
                "parallel_heads": self.parallel_heads,
            },
            "reference": {"content_hash": self.ref_hash},
        }
        lines = [f"# extravar run manifest; config hash {m.config_hash()}"]
        for section, keys in SCHEMA.items():
            for key in keys:
                lines.append(f"{section}.{key} = {_fmt(values[section][key])}")
        return "\n".join(lines) + "\n"


def build_run_config(raw: dict[tuple[str, str], str]) -> RunConfig:
    vals: dict[tuple[str, str], object] = {}
    for (section, key), text in raw.items():
        if text == "" and key in ("ref", "content_hash"):
            vals[(section, key)] = ""
            continue
        try:
            vals[(section, key)] = SCHEMA[section][key](text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}") from None

    def agree(a, b):
        if a in vals and b in vals and vals[a] != vals[b]:
            raise ConfigError(f"{'.'.join(a)} = {vals[a]} disagrees with {'.'.join(b)} = {vals[b]}")

    agree(("model", "head_dim"), ("rope", "head_dim"))
    agree(("model", "train_side"), ("rope", "train_side"))
    agree(("model", "steps"), ("schedule", "total_steps"))

    model_kw = {k: vals[("model", k)] for k in SCHEMA["model"] if ("model", k) in vals}
    for k in ("head_dim", "train_side"):
        if ("rope", k) in vals:
            model_kw.setdefault(k, vals[("rope", k)])
    for k in ("base", "high_band_size", "axis_mode"):
        if ("rope", k) in vals:
            model_kw[k] = vals[("rope", k)]
    if ("schedule", "total_steps") in vals:
        model_kw.setdefault("steps", vals[("schedule", "total_steps")])
    try:
        model = ModelConfig(**model_kw)
        K = model.steps
        schedule = StageSchedule(
            K,
            vals.get(("schedule", "layout_end"), min(6, K)),
            vals.get(("schedule", "local_end"), min(9, K)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    kw = {k: vals[("calibration", k)] for k in SCHEMA["calibration"] if ("calibration", k) in vals}
    kw.update({k: vals[("generate", k)] for k in SCHEMA["generate"] if ("generate", k) in vals})
    if ("reference", "content_hash") in vals:
        kw["ref_hash"] = vals[("reference", "content_hash")]
    run = RunConfig(model=model, schedule=schedule, **kw)
    return validate_run(run)


def validate_run(run: RunConfig) -> RunConfig:
    if run.remap not in REMAP_NAMES:
        raise ConfigError(f"unknown remap {run.remap!r}; choose from {', '.join(REMAP_NAMES)}")
    if run.effective_target < run.model.train_side:
        raise ConfigError(f"target side {run.effective_target} below training side {run.model.train_side}")
    try:
        run.model.sides(run.effective_target)
        _check_calibration(run)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return run


def _check_calibration(run: RunConfig) -> None:
    CalibrationPolicy(run.tau_h, run.epsilon, run.schedule.local_end, run.alpha_min, run.alpha_max)
    if run.samples < 1:
        raise ValueError("calibration.samples must be >= 1")


def load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    raw: dict[tuple[str, str], str] = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} not found")
        raw.update(parse_config_text(p.read_text(), str(p)))
    for item in overrides:
        raw.update(parse_config_text(item, "--set"))
    return build_run_config(raw)


def _out_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get("EXTRAVAR_OUT") or ".")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(text)


# -- commands ---------------------------------------------------------------


def cmd_freq_table(run: RunConfig, args) -> int:
    rope = run.model.rope(run.effective_target)
    axes = rope.axes if args.axis in (None, "all") else (args.axis,)
    try:
        tables = [t for t in build_frequency_tables(rope) if t.axis in axes]
        if not tables:
            build_frequency_table(rope, args.axis)  # raises with a clear message
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    buf = io.StringIO()
    write_frequency_csv(tables, buf)
    if args.out:
        _write(Path(args.out), buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_capture_ref(run: RunConfig, args) -> int:
    if run.effective_target != run.model.train_side:
        raise ConfigError(
            f"reference capture must run at the training side {run.model.train_side}, "
            f"got target side {run.effective_target}"
        )
    store = refmod.capture_reference(run.model, samples=run.samples)
    path = Path(args.out) if args.out else refmod.default_path(run.model.config_hash(), _out_dir(None))
    refmod.save(store, path)
    print(path)
    return EXIT_OK


def _load_reference(run: RunConfig):
    if not run.calibrate:
        return None
    if not run.ref:
        raise ArtifactError("calibration is on but no reference store was given (--ref)")
    path = Path(run.ref)
    if not path.exists():
        raise ArtifactError(f"reference store {path} not found")
    try:
        store = refmod.load(path)
    except refmod.ReferenceFormatError as exc:
        raise ArtifactError(str(exc)) from None
    if run.ref_hash and store.content_hash() != run.ref_hash:
        raise ArtifactError(
            f"reference store {path} has content hash {store.content_hash()}, manifest expects {run.ref_hash}"
        )
    return store


def _plan(run: RunConfig, store, **kw):
    plan = make_plan(
        run.model,
        run.effective_target,
        run.remap,
        calibrate=run.calibrate,
        reference=store,
        schedule=run.schedule,
        tau_h=run.tau_h,
        epsilon=run.epsilon,
        verylow_nope=run.verylow_nope,
        sample=run.sample,
        use_cache=run.use_cache,
        parallel_heads=run.parallel_heads,
        **kw,
    )
    if plan.calibration is not None:
        policy = replace(plan.calibration, alpha_min=run.alpha_min, alpha_max=run.alpha_max)
        plan = replace(plan, calibration=policy)
    return plan


def _freqs_rows(trace, tables):
    rows = []
    for rec in trace.steps:
        for table, theta in zip(tables, rec.freqs):
            for j, (band, th) in enumerate(zip(table.bands, theta), start=1):
                rows.append((rec.step, table.axis, j, band.value, float(th)))
    return rows


def cmd_generate(run: RunConfig, args) -> int:
    store = _load_reference(run)
    if store is not None:
        run = replace(run, ref_hash=store.content_hash())
    maps = [tuple(int(x) for x in spec.split(":")) for spec in (args.export_map or [])]
    plan = _plan(run, store, retain_maps=bool(maps))
    trace = ToyVAR(run.model).generate(plan)
    out = _out_dir(args.out)
    tables = build_frequency_tables(run.model.rope(run.effective_target))

    buf = io.StringIO()
    trace.write_tokens(buf)
    _write(out / "tokens.txt", buf.getvalue())
    buf = io.StringIO()
    trace.write_csv(buf)
    _write(out / "trace.csv", buf.getvalue())
    lines = ["step,axis,j,band,theta"] + [f"{k},{ax},{j},{b},{th!r}" for k, ax, j, b, th in _freqs_rows(trace, tables)]
    _write(out / "freqs.csv", "\n".join(lines) + "\n")
    _write(out / "manifest.txt", run.manifest())
    for layer, head, step in maps:
        export_attention_map(trace, layer, head, step, out / f"attn_l{layer}_h{head}_k{step}.mat")
    return EXIT_OK


def cmd_probe(run: RunConfig, args) -> int:
    store = _load_reference(run)
    model = ToyVAR(run.model)
    tables = build_frequency_tables(run.model.rope(run.effective_target))
    try:
        iv = parse_intervention(args.intervention, run.model.train_side, run.model.steps)
        base_plan = _plan(run, store)
        probe_plan = apply_intervention(base_plan, iv, tables, run.model.steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    base = model.generate(base_plan)
    pert = model.generate(probe_plan)
    out = _out_dir(args.out)

    rows = []
    for rb, rp in zip(base.steps, pert.steps):
        nb, np_ = base.mean_band_norms(rb.step), pert.mean_band_norms(rp.step)
        for band in Band:
            rows.append((rb.step, band.value, nb[band], np_[band], np_[band] - nb[band]))
    lines = ["step,band,mean_norm_base,mean_norm_probe,delta"] + [
        f"{k},{b},{x!r},{y!r},{d!r}" for k, b, x, y, d in rows
    ]
    _write(out / "norm_deltas.csv", "\n".join(lines) + "\n")

    fb, fp = _freqs_rows(base, tables), _freqs_rows(pert, tables)
    lines = ["step,axis,j,band,theta_base,theta_probe,delta"] + [
        f"{k},{ax},{j},{b},{x!r},{y[4]!r},{y[4] - x!r}" for (k, ax, j, b, x), y in zip(fb, fp)
    ]
    _write(out / "freq_deltas.csv", "\n".join(lines) + "\n")
    buf = io.StringIO()
    write_norms_csv(((r[0], r[1], r[3]) for r in rows), buf)
    _write(out / "norms.csv", buf.getvalue())
    changed = sum(1 for (_, _, _, _, x), y in zip(fb, fp) if x != y[4])
    tokens_changed = sum(int((a.tokens != b.tokens).sum()) for a, b in zip(base.steps, pert.steps))
    print(f"{iv.kind.value} on {iv.band.value} steps {iv.steps[0]}-{iv.steps[1]}: "
          f"{changed} frequency entries changed, {tokens_changed} tokens changed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="extravar", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="config file of 'section.key = value' lines")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config key")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("freq-table", help="band-labelled RoPE frequency table as CSV")
    f.add_argument("--axis", choices=["all", "height", "width", "one_d"], default="all")
    f.add_argument("--out")

    c = sub.add_parser("capture-ref", help="capture training-resolution reference entropies")
    c.add_argument("--seed", type=int)
    c.add_argument("--target-side", type=int)
    c.add_argument("--samples", type=int)
    c.add_argument("--out")

    g = sub.add_parser("generate", help="generate token maps, optionally extrapolated")
    g.add_argument("--target-side", type=int)
    g.add_argument("--remap", choices=REMAP_NAMES)
    g.add_argument("--calibrate", choices=["on", "off"])
    g.add_argument("--ref")
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--export-map", action="append", metavar="LAYER:HEAD:STEP")

    r = sub.add_parser("probe", help="compare a band intervention against the unperturbed run")
    r.add_argument("--intervention", required=True, metavar="KIND:BAND:START-END[:T]")
    r.add_argument("--target-side", type=int)
    r.add_argument("--remap", choices=REMAP_NAMES)
    r.add_argument("--calibrate", choices=["on", "off"])
    r.add_argument("--ref")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    return p


def _apply_flags(run: RunConfig, args) -> RunConfig:
    changes = {}
    if getattr(args, "seed", None) is not None:
        try:
            changes["model"] = replace(run.model, seed=args.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if getattr(args, "target_side", None) is not None:
        changes["target_side"] = args.target_side
    if getattr(args, "samples", None) is not None:
        changes["samples"] = args.samples
    if getattr(args, "remap", None) is not None:
        changes["remap"] = args.remap
    if getattr(args, "calibrate", None) is not None:
        changes["calibrate"] = args.calibrate == "on"
    if getattr(args, "ref", None) is not None:
        changes["ref"] = args.ref
        changes["ref_hash"] = ""
    return validate_run(replace(run, **changes))


COMMANDS = {
    "freq-table": cmd_freq_table,
    "capture-ref": cmd_capture_ref,
    "generate": cmd_generate,
    "probe": cmd_probe,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = _apply_flags(load_run_config(args.config, args.set), args)
        return COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(f"extravar: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"extravar: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except Exception as exc:  # noqa: BLE001
        print(f"extravar: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
