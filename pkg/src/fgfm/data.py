"""Synthetic localized-artifact utterances, manifests, feature/score files and EER."""
import struct
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError, FormatError, SpecError

ARTIFACT_KINDS = ("splice", "phase_jump", "transition_blur")
FEATURE_MAGIC = b"FGFT"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")


@dataclass
class SynthSpec:
    sample_rate: int = 8000
    duration: float = 0.64
    num_harmonics: int = 6
    artifact_kind: str = "splice"
    artifact_window: tuple = (0, 0)  # (start frame, length in frames)
    label: str = "bonafide"
    seed: int = 0
    hop: int = 160  # samples per frontend frame
    noise: float = 0.01
    f0_range: tuple = (100.0, 300.0)

    @property
    def num_samples(self):
        return int(round(self.sample_rate * self.duration))

    @property
    def num_frames(self):
        return self.num_samples // self.hop

    def validate(self):
        if self.label not in ("bonafide", "spoof"):
            raise SpecError(f"label must be bonafide or spoof, got {self.label!r}")
        if self.num_frames < 1:
            raise SpecError("utterance shorter than one frame")
        if self.label == "spoof":
            if self.artifact_kind not in ARTIFACT_KINDS:
                raise SpecError(f"unknown artifact kind {self.artifact_kind!r}")
            start, length = self.artifact_window
            if length < 1 or start < 0 or start + length > self.num_frames:
                raise SpecError(f"artifact window {self.artifact_window} outside utterance "
                                f"of {self.num_frames} frames")


def _harmonic_draw(rng, spec):
    return {
        "f0": rng.uniform(*spec.f0_range),
        "amps": rng.uniform(0.3, 1.0, spec.num_harmonics) / np.arange(1, spec.num_harmonics + 1) ** 2,
        "phases": rng.uniform(0.0, 2 * np.pi, spec.num_harmonics),
        "env_rate": rng.uniform(0.5, 2.0),
        "env_phase": rng.uniform(0.0, 2 * np.pi),
    }


def _render(draw, t, phase_offset=0.0):
    env = 0.6 + 0.4 * np.sin(2 * np.pi * draw["env_rate"] * t + draw["env_phase"])
    h = np.arange(1, draw["amps"].shape[0] + 1)[:, None]
    waves = np.sin(2 * np.pi * h * draw["f0"] * t[None, :] + draw["phases"][:, None] + phase_offset)
    return 0.5 * env * (draw["amps"][:, None] * waves).sum(axis=0)


def generate_utterance(spec):
    """Waveform and per-frame artifact mask.

    The base signal depends only on ``spec.seed``; artifact parameters come
    from a separate stream, so a spoof differs from its bonafide twin only
    inside the artifact window.
    """
    spec.validate()
    S, T = spec.num_samples, spec.num_frames
    rng = np.random.default_rng(spec.seed)
    t = np.arange(S) / spec.sample_rate
    draw = _harmonic_draw(rng, spec)
    wave = _render(draw, t) + spec.noise * rng.standard_normal(S)
    mask = np.zeros(T, dtype=bool)
    if spec.label == "bonafide":
        return wave, mask
    start, length = spec.artifact_window
    a, b = start * spec.hop, (start + length) * spec.hop
    art = np.random.default_rng([spec.seed, 1])
    if spec.artifact_kind == "splice":
        other = _harmonic_draw(art, spec)
        wave[a:b] = _render(other, t[a:b]) + spec.noise * art.standard_normal(b - a)
    elif spec.artifact_kind == "phase_jump":
        offset = art.uniform(0.5 * np.pi, np.pi)
        wave[a:b] = _render(draw, t[a:b], offset) + (wave[a:b] - _render(draw, t[a:b]))
    else:
        width = max(3, spec.hop // 4) | 1
        smeared = np.convolve(wave, np.ones(width) / width, mode="same")
        wave[a:b] = smeared[a:b]
    mask[start:start + length] = True
    return wave, mask


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestEntry:
    utt_id: str
    label: str
    artifact_kind: str
    window_start: int
    window_len: int
    seed: int

    def synth_spec(self, **synth):
        kind = self.artifact_kind if self.label == "spoof" else "splice"
        return SynthSpec(artifact_kind=kind, artifact_window=(self.window_start, self.window_len),
                         label=self.label, seed=self.seed, **synth)

    def line(self):
        return (f"{self.utt_id} {self.label} {self.artifact_kind} "
                f"{self.window_start} {self.window_len} {self.seed}")


def make_manifest(n, seed, num_frames, prefix="utt", artifact_kind="splice",
                  window_frac=(0.05, 0.10), spoof_fraction=0.5):
    """Random balanced manifest; spoof windows cover ``window_frac`` of the frames.

    Windows are placed strictly inside the utterance (native audio on both
    sides) whenever the utterance is long enough for that.
    """
    rng = np.random.default_rng(seed)
    n_spoof = int(round(n * spoof_fraction))
    labels = np.array(["spoof"] * n_spoof + ["bonafide"] * (n - n_spoof))
    rng.shuffle(labels)
    seeds = rng.integers(0, 2 ** 31 - 1, size=n)
    entries = []
    for i, (label, s) in enumerate(zip(labels, seeds)):
        if label == "spoof":
            length = max(1, int(round(rng.uniform(*window_frac) * num_frames)))
            lo, hi = (1, num_frames - length) if num_frames - length >= 2 else (0, num_frames - length + 1)
            start = int(rng.integers(lo, hi))
            entries.append(ManifestEntry(f"{prefix}{i:05d}", "spoof", artifact_kind, start, length, int(s)))
        else:
            entries.append(ManifestEntry(f"{prefix}{i:05d}", "bonafide", "none", 0, 0, int(s)))
    return entries


def write_manifest(entries, path):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(e.line() + "\n")


def read_manifest(path):
    entries = []
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.decode("utf-8").strip()
            if line:
                parts = line.split()
                try:
                    if len(parts) != 6 or parts[1] not in ("bonafide", "spoof"):
                        raise ValueError(line)
                    entries.append(ManifestEntry(parts[0], parts[1], parts[2],
                                                 int(parts[3]), int(parts[4]), int(parts[5])))
                except ValueError:
                    raise FormatError(f"malformed manifest line {lineno} in {path}", offset) from None
            offset += len(raw)
    return entries


# ---------------------------------------------------------------- feature / score files

def write_feature_file(features, path):
    arr = np.asarray(features)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise FormatError(f"feature matrix must be [T>=1, dim>=1], got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_feature_file(path):
    """``[T, dim]`` float32 matrix from a feature file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _FEATURE_HEADER.size:
        raise FormatError(f"truncated feature header: expected {_FEATURE_HEADER.size} bytes, "
                          f"found {len(buf)}", 0)
    magic, version, T, dim = _FEATURE_HEADER.unpack_from(buf, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad feature-file magic {magic!r}", 0)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature-file version {version}", 4)
    if T == 0:
        raise FormatError("empty utterance (T=0)", 8)
    if dim == 0:
        raise FormatError("zero feature dimension", 12)
    expected = 4 * T * dim
    actual = len(buf) - _FEATURE_HEADER.size
    if actual != expected:
        raise FormatError(f"feature payload size mismatch: expected {expected} bytes, found {actual}",
                          _FEATURE_HEADER.size + min(actual, expected))
    return np.frombuffer(buf, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(T, dim).copy()


@dataclass
class ScoreRecord:
    utt_id: str
    label: str
    score: float


def write_score_file(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(f"{r.utt_id} {r.label} {r.score:.6f}\n")


def read_score_file(path):
    records = []
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.decode("utf-8").split()
            if parts:
                if len(parts) != 3 or parts[1] not in ("bonafide", "spoof"):
                    raise FormatError(f"malformed score line {lineno}", offset)
                records.append(ScoreRecord(parts[0], parts[1], float(parts[2])))
            offset += len(raw)
    return records


# ---------------------------------------------------------------- metrics

def operating_points(bonafide, spoof):
    """Thresholds below, between and above the distinct scores with their FAR/FRR.

    FAR(t) counts spoofs scoring >= t, FRR(t) bonafides scoring < t.
    """
    bona = np.sort(np.asarray(bonafide, dtype=np.float64))
    spf = np.sort(np.asarray(spoof, dtype=np.float64))
    values = np.unique(np.concatenate([bona, spf]))
    thresholds = np.concatenate([[values[0] - 1.0], (values[:-1] + values[1:]) / 2, [values[-1] + 1.0]])
    frr = np.searchsorted(bona, thresholds, side="left") / bona.size
    far = 1.0 - np.searchsorted(spf, thresholds, side="left") / spf.size
    return thresholds, far, frr


def compute_eer(records):
    """Equal error rate and its threshold, interpolated between adjacent operating points."""
    bona = [r.score for r in records if r.label == "bonafide"]
    spf = [r.score for r in records if r.label == "spoof"]
    if not bona or not spf:
        raise EvaluationError("EER needs at least one bonafide and one spoof score")
    thresholds, far, frr = operating_points(bona, spf)
    d = far - frr
    i = int(np.argmax(d <= 0))
    alpha = d[i - 1] / (d[i - 1] - d[i])
    eer = frr[i - 1] + alpha * (frr[i] - frr[i - 1])
    threshold = thresholds[i - 1] + alpha * (thresholds[i] - thresholds[i - 1])
    return float(eer), float(threshold)


def localization_rate(selections, masks):
    """Mean fraction of selected frames inside the artifact window, and the chance rate.

    Utterances whose mask is empty (bonafide) are skipped.
    """
    rates, chance = [], []
    for idx, mask in zip(selections, masks):
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            continue
        idx = np.asarray(idx, dtype=np.int64)
        rates.append(mask[idx].mean())
        chance.append(mask.mean())
    if not rates:
        raise EvaluationError("no utterance with a non-empty artifact mask")
    return float(np.mean(rates)), float(np.mean(chance))


def frame_features(wave, hop, dim):
    """Per-frame log band energies of the differenced waveform, ``[T, dim]``.

    Each ``hop``-sample frame is split into ``dim`` equal chunks; a stand-in for
    features exported by an external extractor.
    """
    d = np.diff(np.asarray(wave, dtype=np.float64), 2, prepend=[0.0, 0.0])
    T = d.shape[0] // hop
    chunk = hop // dim
    if T < 1 or chunk < 1:
        raise SpecError(f"cannot cut {d.shape[0]} samples into frames of {hop} with {dim} bands")
    frames = d[:T * hop].reshape(T, hop)[:, :chunk * dim].reshape(T, dim, chunk)
    return np.log10((frames ** 2).mean(axis=2) + 1e-8)
