import warnings

import numpy as np
import pytest

from extravar.model import ModelConfig
from extravar.reference import (
    ReferenceEntropyStore,
    ReferenceFormatError,
    ReferenceMetadata,
    ReferenceMismatchWarning,
    capture_reference,
    default_path,
    load,
    loads,
    lookup,
    save,
)

SMALL = ModelConfig(layers=2, heads=4, head_dim=32, train_side=8, steps=6, high_band_size=2)
META = ReferenceMetadata("0123456789abcdef", 16, 7)


def random_store(seed: int, n: int = 30) -> ReferenceEntropyStore:
    rng = np.random.default_rng(seed)
    entries = {(int(rng.integers(4)), int(rng.integers(8)), int(rng.integers(1, 14))): float(rng.random()) for _ in range(n)}
    return ReferenceEntropyStore(entries, META)


def test_capture_cardinality_and_range():
    store = capture_reference(SMALL)
    assert len(store) == SMALL.layers * SMALL.heads * SMALL.steps
    assert all(0.0 <= v <= 1.0 for v in store.entries.values())
    assert store.metadata.config_hash == SMALL.config_hash()


def test_capture_default_toy_model():
    cfg = ModelConfig(seed=7)
    a, b = capture_reference(cfg), capture_reference(cfg)
    assert len(a) == 2 * 4 * 13
    assert a.dumps() == b.dumps()


def test_single_head_single_layer_has_k_entries():
    cfg = ModelConfig(layers=1, heads=1, head_dim=16, train_side=8, steps=5, high_band_size=1)
    assert sorted(capture_reference(cfg).entries) == [(0, 0, k) for k in range(1, 6)]


def test_uniform_attention_gives_unit_entropy():
    # a single head takes the full gain, so its logits vanish
    cfg = ModelConfig(layers=2, heads=1, head_dim=16, train_side=8, steps=5, high_band_size=1, qk_gain=1e-12)
    store = capture_reference(cfg)
    np.testing.assert_allclose(list(store.entries.values()), 1.0, atol=1e-12)


def test_capture_refuses_other_side():
    with pytest.raises(ValueError, match="training side"):
        capture_reference(SMALL, target_side=16)


def test_samples_average_runs():
    one = capture_reference(SMALL, samples=1)
    three = capture_reference(SMALL, samples=3)
    assert three.metadata.samples == 3
    assert one.entries != three.entries
    with pytest.raises(ValueError):
        capture_reference(SMALL, samples=0)


@pytest.mark.parametrize("seed", range(100))
def test_random_store_roundtrip(seed, tmp_path):
    store = random_store(seed)
    back = load(save(store, tmp_path / "s.entropy"))
    assert dict(back.entries) == dict(store.entries)
    assert back.metadata == store.metadata


def test_empty_store_roundtrip(tmp_path):
    empty = ReferenceEntropyStore({}, META)
    back = load(save(empty, tmp_path / "e.entropy"))
    assert len(back) == 0
    assert back.metadata == META


def test_truncated_file_names_line(tmp_path):
    text = random_store(1).dumps()
    cut = "\n".join(text.splitlines()[:-3]) + "\n"
    with pytest.raises(ReferenceFormatError, match=r":\d+: header declares"):
        loads(cut, "cut.entropy")


def test_truncated_header_rejected():
    with pytest.raises(ReferenceFormatError, match="truncated"):
        loads("format_version=1\nconfig_hash=abc\n")


def test_version_mismatch():
    text = random_store(1).dumps().replace("format_version=1", "format_version=2")
    with pytest.raises(ReferenceFormatError, match=":1: unsupported format version"):
        loads(text)


def test_malformed_record_names_line():
    lines = random_store(1).dumps().splitlines()
    lines[9] = "0,1,oops,0.5"
    with pytest.raises(ReferenceFormatError, match=":10: malformed record"):
        loads("\n".join(lines) + "\n")


def test_out_of_range_entropy_rejected():
    lines = random_store(1).dumps().splitlines()
    lines[8] = lines[8].rsplit(",", 1)[0] + ",1.5"
    with pytest.raises(ReferenceFormatError, match="outside"):
        loads("\n".join(lines) + "\n")


def test_duplicate_key_rejected():
    lines = random_store(1).dumps().splitlines()
    lines.insert(8, lines[7])
    lines[5] = f"records={len(lines) - 7}"
    with pytest.raises(ReferenceFormatError, match="duplicate"):
        loads("\n".join(lines) + "\n")


def test_unknown_header_rejected():
    text = random_store(1).dumps().replace("seed=7", "colour=blue")
    with pytest.raises(ReferenceFormatError, match="unexpected header"):
        loads(text)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load(tmp_path / "nope.entropy")


def test_store_is_read_only():
    store = random_store(2)
    with pytest.raises(TypeError):
        store.entries[(0, 0, 1)] = 0.5


def test_store_validates_range():
    with pytest.raises(ValueError):
        ReferenceEntropyStore({(0, 0, 1): -0.1}, META)


def test_lookup_present_and_absent():
    store = ReferenceEntropyStore({(1, 2, 10): 0.125}, META)
    assert lookup(store, 1, 2, 10) == 0.125
    assert lookup(store, 1, 2, 11) is None
    assert lookup(None, 0, 0, 1) is None


def test_mismatch_warning_surfaces_once():
    cfg16 = ModelConfig(train_side=16)
    cfg32 = ModelConfig(train_side=32)
    store = ReferenceEntropyStore({(0, 0, 1): 0.5}, ReferenceMetadata(cfg16.config_hash(), 16, 0))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for _ in range(3):
            lookup(store, 0, 0, 1, cfg32.config_hash())
        lookup(store, 0, 0, 1, cfg16.config_hash())
    mismatches = [w for w in caught if issubclass(w.category, ReferenceMismatchWarning)]
    assert len(mismatches) == 1
    assert "train_side=16" in str(mismatches[0].message)


def test_content_hash_tracks_content():
    a, b = random_store(3), random_store(4)
    assert a.content_hash() == random_store(3).content_hash()
    assert a.content_hash() != b.content_hash()


def test_default_path_convention(tmp_path):
    assert default_path("abc", tmp_path) == tmp_path / "refs" / "abc.entropy"
