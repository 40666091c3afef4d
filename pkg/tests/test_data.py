import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fgfm import data as D
from fgfm.errors import EvaluationError, FormatError, SpecError


def recs(bona, spoof):
    return ([D.ScoreRecord(f"b{i}", "bonafide", s) for i, s in enumerate(bona)]
            + [D.ScoreRecord(f"s{i}", "spoof", s) for i, s in enumerate(spoof)])


def sweep_oracle(bona, spoof):
    """Direct O(n^2) sweep: count errors at every candidate threshold, interpolate at the first crossing."""
    values = sorted(set(bona) | set(spoof))
    cands = [values[0] - 1.0] + [(a + b) / 2 for a, b in zip(values, values[1:])] + [values[-1] + 1.0]
    pts = []
    for t in cands:
        far = sum(1 for s in spoof if s >= t) / len(spoof)
        frr = sum(1 for s in bona if s < t) / len(bona)
        pts.append((t, far, frr))
    for (t0, a0, r0), (t1, a1, r1) in zip(pts, pts[1:]):
        if a1 - r1 <= 0:
            d0, d1 = a0 - r0, a1 - r1
            alpha = d0 / (d0 - d1)
            return r0 + alpha * (r1 - r0)
    raise AssertionError("no crossing")


# ---------------------------------------------------------------- EER

def test_eer_perfect_separation():
    eer, _ = D.compute_eer(recs([0.9, 0.8], [0.1, 0.2]))
    assert eer == 0.0


def test_eer_interleaved_is_half():
    eer, _ = D.compute_eer(recs([0.8, 0.2], [0.7, 0.3]))
    assert eer == 0.5
    assert sweep_oracle([0.8, 0.2], [0.7, 0.3]) == 0.5


def test_eer_threshold_sits_between_classes():
    eer, thr = D.compute_eer(recs([0.9, 0.8], [0.1, 0.2]))
    assert 0.2 <= thr <= 0.8


def test_eer_single_class_rejected():
    with pytest.raises(EvaluationError):
        D.compute_eer(recs([0.1, 0.2], []))


def test_eer_matches_sweep_oracle_on_random_sets():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(500):
        nb, ns = rng.integers(1, 101, size=2)
        if rng.random() < 0.5:  # coarse grid: lots of ties
            bona, spoof = rng.integers(0, 8, nb) / 4.0, rng.integers(0, 8, ns) / 4.0 - 0.5
        else:
            bona, spoof = rng.normal(1.0, 1.0, nb), rng.normal(0.0, 1.0, ns)
        eer, _ = D.compute_eer(recs(bona, spoof))
        worst = max(worst, abs(eer - sweep_oracle(list(bona), list(spoof))))
    assert worst < 1e-9


@settings(max_examples=100)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=40), st.lists(st.floats(-10, 10), min_size=1, max_size=40),
       st.sampled_from([-3.0, -0.5, 0.25, 2.0, 8.0]))
def test_eer_symmetry_and_shift(bona, spoof, c):
    eer, _ = D.compute_eer(recs(bona, spoof))
    swapped, _ = D.compute_eer(recs([-s for s in spoof], [-b for b in bona]))
    assert 0.0 <= eer <= 1.0
    assert abs(eer - swapped) < 1e-9
    # a float shift can merge or split ties through rounding, so shift scores on a dyadic grid
    grid_b = [round(b * 4) / 4 for b in bona]
    grid_s = [round(s * 4) / 4 for s in spoof]
    g0, _ = D.compute_eer(recs(grid_b, grid_s))
    g1, _ = D.compute_eer(recs([b + c for b in grid_b], [s + c for s in grid_s]))
    assert g0 == g1


def test_eer_bounded_when_oriented():
    rng = np.random.default_rng(1)
    for _ in range(50):
        eer, _ = D.compute_eer(recs(rng.normal(0.5, 1, 60), rng.normal(0, 1, 60)))
        assert 0.0 <= eer <= 0.5 + 0.1


# ---------------------------------------------------------------- generator

def _spec(label="spoof", kind="splice", window=(10, 3), seed=5):
    return D.SynthSpec(duration=0.4, artifact_kind=kind, artifact_window=window, label=label, seed=seed)


def test_bonafide_mask_is_zero():
    wave, mask = D.generate_utterance(_spec(label="bonafide"))
    assert wave.shape == (3200,)
    assert mask.shape == (20,) and not mask.any()


@pytest.mark.parametrize("kind", D.ARTIFACT_KINDS)
def test_spoof_differs_only_inside_window(kind):
    bona, _ = D.generate_utterance(_spec(label="bonafide"))
    spoof, mask = D.generate_utterance(_spec(kind=kind))
    a, b = 10 * 160, 13 * 160
    assert np.array_equal(spoof[:a], bona[:a])
    assert np.array_equal(spoof[b:], bona[b:])
    assert not np.array_equal(spoof[a:b], bona[a:b])
    assert mask.tolist() == [False] * 10 + [True] * 3 + [False] * 7


def test_generator_is_deterministic():
    a, _ = D.generate_utterance(_spec())
    b, _ = D.generate_utterance(_spec())
    assert a.tobytes() == b.tobytes()
    c, _ = D.generate_utterance(_spec(seed=6))
    assert a.tobytes() != c.tobytes()


@pytest.mark.parametrize("window", [(18, 3), (-1, 2), (4, 0)])
def test_window_outside_utterance_rejected(window):
    with pytest.raises(SpecError):
        D.generate_utterance(_spec(window=window))


def test_manifest_windows_and_round_trip(tmp_path):
    entries = D.make_manifest(200, 3, 32, prefix="x")
    spoofs = [e for e in entries if e.label == "spoof"]
    assert len(spoofs) == 100
    for e in spoofs:
        assert 1 <= e.window_start and e.window_start + e.window_len <= 31
        assert 2 <= e.window_len <= 3
    path = tmp_path / "m.txt"
    D.write_manifest(entries, path)
    assert D.read_manifest(path) == entries


def test_manifest_malformed_line_offset(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("a bonafide none 0 0 1\nbroken line\n")
    with pytest.raises(FormatError) as err:
        D.read_manifest(path)
    assert err.value.offset == len("a bonafide none 0 0 1\n")


# ---------------------------------------------------------------- feature / score files

def test_feature_file_round_trip_bit_exact(tmp_path):
    x = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32)
    path = tmp_path / "f.fgft"
    D.write_feature_file(x, path)
    y = D.read_feature_file(path)
    assert y.dtype == np.float32 and y.tobytes() == x.tobytes()
    raw = path.read_bytes()
    assert raw[:4] == b"FGFT" and struct.unpack("<III", raw[4:16]) == (1, 7, 5)
    assert len(raw) == 16 + 4 * 35


def test_feature_file_truncated_payload(tmp_path):
    path = tmp_path / "f.fgft"
    D.write_feature_file(np.ones((4, 3), np.float32), path)
    path.write_bytes(path.read_bytes()[:-6])
    with pytest.raises(FormatError) as err:
        D.read_feature_file(path)
    assert "expected 48 bytes, found 42" in str(err.value)
    assert err.value.offset == 16 + 42


def test_feature_file_bad_magic_and_empty(tmp_path):
    path = tmp_path / "f.fgft"
    path.write_bytes(b"XXXX" + struct.pack("<III", 1, 2, 2) + bytes(16))
    with pytest.raises(FormatError) as err:
        D.read_feature_file(path)
    assert err.value.offset == 0
    path.write_bytes(b"FGFT" + struct.pack("<III", 1, 0, 4))
    with pytest.raises(FormatError) as err:
        D.read_feature_file(path)
    assert err.value.offset == 8
    path.write_bytes(b"FGF")
    with pytest.raises(FormatError):
        D.read_feature_file(path)


def test_score_file_round_trip(tmp_path):
    records = recs([0.1234567, -2.5], [3.0])
    path = tmp_path / "s.txt"
    D.write_score_file(records, path)
    assert path.read_text().splitlines()[0] == "b0 bonafide 0.123457"
    back = D.read_score_file(path)
    assert [(r.utt_id, r.label) for r in back] == [(r.utt_id, r.label) for r in records]
    assert [r.score for r in back] == [0.123457, -2.5, 3.0]


def test_score_file_malformed(tmp_path):
    path = tmp_path / "s.txt"
    path.write_text("a bonafide 0.5\nb maybe 0.1\n")
    with pytest.raises(FormatError) as err:
        D.read_score_file(path)
    assert err.value.offset == len("a bonafide 0.5\n")


# ---------------------------------------------------------------- localization

def test_localization_all_inside():
    rate, chance = D.localization_rate([[2, 3]], [[0, 0, 1, 1, 0, 0, 0, 0]])
    assert rate == 1.0 and chance == 0.25


def test_localization_whole_window():
    rate, chance = D.localization_rate([[0, 4]], [[1] * 5])
    assert rate == 1.0 and chance == 1.0


def test_localization_skips_bonafide_and_needs_a_window():
    rate, _ = D.localization_rate([[0], [1]], [[0, 0], [0, 1]])
    assert rate == 1.0
    with pytest.raises(EvaluationError):
        D.localization_rate([[0]], [[0, 0]])


def test_localization_random_selection_matches_chance():
    rng = np.random.default_rng(0)
    T, v, n = 32, 4, 400
    sels, masks = [], []
    for _ in range(n):
        m = np.zeros(T, dtype=bool)
        length = int(rng.integers(2, 4))
        start = int(rng.integers(0, T - length + 1))
        m[start:start + length] = True
        masks.append(m)
        sels.append(sorted(rng.choice(T, v, replace=False)))
    rate, chance = D.localization_rate(sels, masks)
    # per-utterance hit fraction has variance <= p(1-p)/v; 4 sigma band
    sigma = np.sqrt(chance * (1 - chance) / (v * n))
    assert abs(rate - chance) < 4 * sigma


# ---------------------------------------------------------------- features

def test_frame_features_shape_and_finiteness():
    wave, _ = D.generate_utterance(_spec(label="bonafide"))
    f = D.frame_features(wave, 160, 16)
    assert f.shape == (20, 16) and np.all(np.isfinite(f))
