import filecmp

import pytest

from extravar.cli import (
    EXIT_ARTIFACT,
    EXIT_CONFIG,
    EXIT_OK,
    ConfigError,
    build_run_config,
    main,
    parse_config_text,
)
from extravar.reference import load

SMALL = [
    "--set", "model.head_dim=32",
    "--set", "model.train_side=8",
    "--set", "model.steps=6",
    "--set", "rope.high_band_size=2",
    "--set", "schedule.layout_end=3",
    "--set", "schedule.local_end=4",
]


@pytest.fixture(autouse=True)
def in_tmp(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("EXTRAVAR_OUT", raising=False)
    return tmp_path


def rows(path):
    return path.read_text().splitlines()[1:]


# -- config parsing ------------------------------------------------------------


def test_config_parses_sections():
    raw = parse_config_text("# comment\nmodel.seed = 4\n\ngenerate.remap = pi  # trailing\n")
    run = build_run_config(raw)
    assert run.model.seed == 4 and run.remap == "pi"


@pytest.mark.parametrize(
    "text, match",
    [
        ("model.colour = red", "unknown key"),
        ("seed = 4", "section.key"),
        ("model.seed = 1\nmodel.seed = 2", "duplicate"),
        ("model.seed = many", "bad value"),
        ("model.head_dim = 64\nrope.head_dim = 32", "disagrees"),
        ("model.train_side = 16\nrope.train_side = 32", "disagrees"),
        ("model.steps = 13\nschedule.total_steps = 12", "disagrees"),
        ("schedule.layout_end = 10\nschedule.local_end = 9", "layout_end"),
        ("generate.remap = warp", "unknown remap"),
        ("generate.target_side = 8", "below training side"),
        ("generate.calibrate = maybe", "bad value"),
        ("calibration.tau_h = 2", "tau_h"),
    ],
)
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        build_run_config(parse_config_text(text))


def test_rope_section_fills_model():
    run = build_run_config(parse_config_text("rope.head_dim = 32\nrope.axis_mode = one_d\nrope.base = 500"))
    assert run.model.head_dim == 32 and run.model.base == 500.0


def test_unknown_key_exit_code(capsys):
    assert main(["--set", "model.nope=1", "freq-table"]) == EXIT_CONFIG
    assert "unknown key" in capsys.readouterr().err


def test_missing_config_file():
    assert main(["--config", "absent.txt", "freq-table"]) == EXIT_CONFIG


# -- freq-table ------------------------------------------------------------------


def test_freq_table_band_counts(in_tmp):
    args = ["--set", "model.train_side=32", "--set", "rope.axis_mode=one_d", "freq-table", "--out", "f.csv"]
    assert main(args) == EXIT_OK
    bands = [r.split(",")[4] for r in rows(in_tmp / "f.csv")]
    assert len(bands) == 32
    assert [bands.count(b) for b in ("High", "Mid", "Low", "VeryLow")] == [3, 3, 5, 21]


def test_freq_table_axial_d8(in_tmp):
    args = ["--set", "model.head_dim=8", "--set", "rope.high_band_size=1", "freq-table", "--out", "f.csv"]
    assert main(args) == EXIT_OK
    axes = [r.split(",")[0] for r in rows(in_tmp / "f.csv")]
    assert axes == ["height", "height", "width", "width"]
    assert main(args[:4] + ["freq-table", "--axis", "width", "--out", "w.csv"]) == EXIT_OK
    assert len(rows(in_tmp / "w.csv")) == 2


def test_freq_table_stdout(capsys):
    assert main(["freq-table"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("axis,j,theta,wavelength,band\n")


def test_freq_table_odd_dim():
    assert main(["--set", "model.head_dim=63", "freq-table"]) == EXIT_CONFIG


def test_freq_table_wrong_axis():
    assert main(["freq-table", "--axis", "one_d"]) == EXIT_CONFIG


# -- capture-ref --------------------------------------------------------------------


def test_capture_ref_default_path(in_tmp, capsys):
    assert main(SMALL + ["capture-ref", "--seed", "3"]) == EXIT_OK
    path = in_tmp / capsys.readouterr().out.strip()
    assert path.parent.name == "refs" and path.suffix == ".entropy"
    store = load(path)
    assert len(store) == 2 * 4 * 6
    assert store.metadata.seed == 3


def test_capture_ref_idempotent(in_tmp):
    assert main(SMALL + ["capture-ref", "--out", "a.entropy"]) == EXIT_OK
    assert main(SMALL + ["capture-ref", "--out", "b.entropy"]) == EXIT_OK
    assert (in_tmp / "a.entropy").read_bytes() == (in_tmp / "b.entropy").read_bytes()


def test_capture_ref_refuses_extrapolation():
    assert main(SMALL + ["capture-ref", "--target-side", "16"]) == EXIT_CONFIG


def test_capture_ref_respects_env(in_tmp, monkeypatch):
    monkeypatch.setenv("EXTRAVAR_OUT", str(in_tmp / "outdir"))
    assert main(SMALL + ["capture-ref"]) == EXIT_OK
    assert len(list((in_tmp / "outdir" / "refs").glob("*.entropy"))) == 1


# -- generate -------------------------------------------------------------------------


def test_generate_writes_artifacts(in_tmp):
    assert main(SMALL + ["generate", "--target-side", "16", "--out", "run"]) == EXIT_OK
    for name in ("tokens.txt", "trace.csv", "freqs.csv", "manifest.txt"):
        assert (in_tmp / "run" / name).exists()
    manifest = (in_tmp / "run" / "manifest.txt").read_text()
    assert "generate.target_side = 16" in manifest
    assert "model.head_dim = 32" in manifest


def test_generate_calibrated_run_and_manifest_replay(in_tmp):
    assert main(SMALL + ["capture-ref", "--out", "ref.entropy"]) == EXIT_OK
    args = SMALL + ["generate", "--target-side", "16", "--calibrate", "on", "--ref", "ref.entropy"]
    assert main(args + ["--out", "a"]) == EXIT_OK
    manifest = (in_tmp / "a" / "manifest.txt").read_text()
    assert "reference.content_hash = " + load(in_tmp / "ref.entropy").content_hash() in manifest
    assert main(["--config", "a/manifest.txt", "generate", "--out", "b"]) == EXIT_OK
    cmp = filecmp.dircmp(in_tmp / "a", in_tmp / "b")
    assert cmp.left_list == cmp.right_list
    assert filecmp.cmpfiles(in_tmp / "a", in_tmp / "b", cmp.left_list, shallow=False)[0] == cmp.left_list


def test_generate_alpha_only_after_local_end(in_tmp):
    assert main(["capture-ref", "--out", "ref.entropy"]) == EXIT_OK
    assert main(["generate", "--target-side", "32", "--calibrate", "on", "--ref", "ref.entropy", "--out", "r"]) == EXIT_OK
    lines = (in_tmp / "r" / "trace.csv").read_text().splitlines()
    header = lines[0].split(",")
    changed = []
    for line in lines[1:]:
        rec = dict(zip(header, line.split(",")))
        if float(rec["alpha"]) != 1.0:
            changed.append(int(rec["step"]))
    assert changed and min(changed) > 9


def test_generate_manifest_hash_mismatch(in_tmp):
    assert main(SMALL + ["capture-ref", "--out", "ref.entropy"]) == EXIT_OK
    assert main(SMALL + ["generate", "--calibrate", "on", "--ref", "ref.entropy", "--out", "a"]) == EXIT_OK
    manifest = in_tmp / "a" / "manifest.txt"
    text = manifest.read_text()
    lines = [l if not l.startswith("reference.content_hash") else "reference.content_hash = 0000" for l in text.splitlines()]
    manifest.write_text("\n".join(lines) + "\n")
    assert main(["--config", str(manifest), "generate", "--out", "b"]) == EXIT_ARTIFACT


def test_generate_calibrate_without_ref(capsys):
    assert main(SMALL + ["generate", "--calibrate", "on"]) == EXIT_ARTIFACT
    assert "--ref" in capsys.readouterr().err


def test_generate_missing_ref_file():
    assert main(SMALL + ["generate", "--calibrate", "on", "--ref", "gone.entropy"]) == EXIT_ARTIFACT


def test_generate_corrupt_ref(in_tmp):
    (in_tmp / "bad.entropy").write_text("format_version=9\n")
    assert main(SMALL + ["generate", "--calibrate", "on", "--ref", "bad.entropy"]) == EXIT_ARTIFACT


def test_generate_infeasible_schedule():
    # 6 strictly increasing sides cannot end at 5
    assert main(SMALL + ["--set", "model.train_side=5", "generate"]) == EXIT_CONFIG


def test_generate_none_at_unit_ratio_matches_baseline(in_tmp):
    assert main(SMALL + ["generate", "--remap", "none", "--out", "a"]) == EXIT_OK
    assert main(SMALL + ["--set", "generate.use_cache=off", "generate", "--remap", "none", "--out", "b"]) == EXIT_OK
    assert (in_tmp / "a" / "tokens.txt").read_bytes() == (in_tmp / "b" / "tokens.txt").read_bytes()


def test_generate_exports_attention_map(in_tmp):
    assert main(SMALL + ["generate", "--out", "r", "--export-map", "1:2:3"]) == EXIT_OK
    assert (in_tmp / "r" / "attn_l1_h2_k3.mat").exists()


def test_generate_uses_env_out(in_tmp, monkeypatch):
    monkeypatch.setenv("EXTRAVAR_OUT", str(in_tmp / "envout"))
    assert main(SMALL + ["generate"]) == EXIT_OK
    assert (in_tmp / "envout" / "manifest.txt").exists()


# -- probe ------------------------------------------------------------------------------


def test_probe_verylow_nope_has_zero_deltas(in_tmp):
    assert main(SMALL + ["probe", "--intervention", "nope:verylow:1-6", "--target-side", "16", "--out", "p"]) == EXIT_OK
    for line in rows(in_tmp / "p" / "norm_deltas.csv"):
        delta = line.split(",")[-1]
        assert delta in ("0.0", "nan")
    for line in rows(in_tmp / "p" / "freq_deltas.csv"):
        assert line.split(",")[-1] == "0.0"


def test_probe_force_mid(in_tmp):
    args = ["--set", "model.train_side=24", "--set", "rope.high_band_size=2"]
    assert main(args + ["probe", "--intervention", "force:mid:6-9:T=L/6", "--out", "p"]) == EXIT_OK
    changed = [l.split(",") for l in rows(in_tmp / "p" / "freq_deltas.csv") if l.split(",")[-1] != "0.0"]
    assert changed
    assert {int(c[0]) for c in changed} <= set(range(6, 10))
    assert {c[3] for c in changed} == {"Mid"}
    assert all(float(c[5]) == pytest.approx(2 * 3.141592653589793 / 4.0) for c in changed)


def test_probe_range_error(capsys):
    assert main(["probe", "--intervention", "force:mid:0-99"]) == EXIT_CONFIG
    assert "outside" in capsys.readouterr().err


def test_probe_malformed_spec():
    assert main(["probe", "--intervention", "garbage"]) == EXIT_CONFIG


def test_probe_empty_band_on_default_config():
    assert main(["probe", "--intervention", "force:mid:6-9:T=L/6"]) == EXIT_CONFIG


def test_argparse_errors_exit_two():
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--remap", "warp"])
    assert exc.value.code == 2


def test_alpha_clamp_reaches_policy(in_tmp):
    assert main(["capture-ref", "--out", "ref.entropy"]) == EXIT_OK
    base = ["generate", "--target-side", "32", "--calibrate", "on", "--ref", "ref.entropy"]
    assert main(["--set", "calibration.alpha_max=1.05"] + base + ["--out", "r"]) == EXIT_OK
    lines = (in_tmp / "r" / "trace.csv").read_text().splitlines()
    col = lines[0].split(",").index("alpha")
    alphas = {float(l.split(",")[col]) for l in lines[1:]}
    assert max(alphas) <= 1.05 and len(alphas) > 1
