"""FGFM classifier: frontend, encoder stack, voting, cross-layer refinement and head."""
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .clr import clr_forward, init_cross_attention, init_daff
from .encoder import EncoderConfig, init_block, init_linear, prepend_cls, run_stack, sub, uniform
from .errors import ConfigError, FormatError, SelectionError, TrainingError, DimensionError
from .mhv import select_frames
from .tensor import Tensor

BONAFIDE, SPOOF = 0, 1
LABELS = {"bonafide": BONAFIDE, "spoof": SPOOF}
FRONTENDS = ("toy_conv", "feature_file")

CHECKPOINT_MAGIC = b"FGFM"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    votes: int = 4
    frontend: str = "toy_conv"
    feature_dim: int = 16
    frontend_strides: tuple = (16, 10)
    frontend_channels: tuple = (16, 32)
    preemphasis_order: int = 2
    input_gain: float = 10.0
    use_fgfm: bool = True
    no_daff: bool = False
    no_enhancement: bool = False
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.frontend_strides = tuple(int(s) for s in self.frontend_strides)
        self.frontend_channels = tuple(int(c) for c in self.frontend_channels)
        self.validate()

    def validate(self):
        self.encoder.validate()
        if self.votes < 1:
            raise ConfigError("votes must be >= 1")
        if self.frontend not in FRONTENDS:
            raise ConfigError(f"unknown frontend {self.frontend!r}")
        if len(self.frontend_strides) != 2 or min(self.frontend_strides) < 1:
            raise ConfigError("frontend_strides needs two positive strides")
        if len(self.frontend_channels) != 2 or min(self.frontend_channels) < 1:
            raise ConfigError("frontend_channels needs two positive widths")
        if self.preemphasis_order < 0:
            raise ConfigError("preemphasis_order must be >= 0")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")

    @property
    def stride_product(self):
        return self.frontend_strides[0] * self.frontend_strides[1]

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        d = asdict(self)
        d["frontend_strides"] = list(self.frontend_strides)
        d["frontend_channels"] = list(self.frontend_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


@dataclass
class Diagnostics:
    """Everything needed to inspect or re-derive the voting decisions of one forward pass."""
    num_frames: int
    attention: list = field(default_factory=list)   # per block: [K, T] (block L+1: [K, L*v])
    selections: list = field(default_factory=list)  # SelectionResult for blocks 1..L
    cross_selection: object = None                  # SelectionResult of block L+1
    frontend_activation: np.ndarray = None          # first conv layer output [T1, C1]
    bundle: object = None


def num_frames(num_samples, config):
    s1, s2 = config.frontend_strides
    return (num_samples // s1) // s2


def init_parameters(config):
    """All model parameters in declaration order, seeded from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    dt = config.np_dtype
    enc = config.encoder
    D = enc.embed_dim
    p = {}
    p["cls"] = uniform(rng, (D,), D, dt)
    if config.frontend == "toy_conv":
        (s1, s2), (c1, c2) = config.frontend_strides, config.frontend_channels
        init_linear(p, "frontend.conv1", rng, s1, c1, dt)
        init_linear(p, "frontend.conv2", rng, s2 * c1, c2, dt)
        init_linear(p, "frontend.proj", rng, c2, D, dt)
    else:
        init_linear(p, "frontend.proj", rng, config.feature_dim, D, dt)
    for i in range(enc.num_blocks):
        p.update(init_block(rng, enc, f"blocks.{i}", dt))
    p.update(init_block(rng, enc, "clr.block1", dt))
    p.update(init_block(rng, enc, "clr.block2", dt))
    init_cross_attention(p, "clr.xattn", rng, D, dt)
    init_daff(p, "clr.daff", rng, D, enc.ffn_expansion, dt)
    init_linear(p, "head", rng, D, 2, dt)
    return p


def preemphasis(wave, order, gain):
    """Fixed ``order``-th difference (zero initial conditions) scaled by ``gain``."""
    if order:
        wave = np.diff(wave, order, prepend=np.zeros(order, dtype=wave.dtype))
    return gain * wave


def toy_frontend(waveform, p, config, diagnostics=None):
    """Pre-emphasis, two strided (kernel == stride) conv layers, projection to the embedding size."""
    wave = np.asarray(waveform, dtype=config.np_dtype).reshape(-1)
    wave = preemphasis(wave, config.preemphasis_order, config.input_gain).astype(config.np_dtype)
    s1, s2 = config.frontend_strides
    T = num_frames(wave.shape[0], config)
    if T < 1:
        raise DimensionError(f"waveform of {wave.shape[0]} samples is shorter than one frame "
                             f"({config.stride_product} samples)")
    frames = Tensor(wave[:T * s2 * s1].reshape(T * s2, s1))
    h1 = tn.gelu(tn.linear(frames, p["conv1.weight"], p["conv1.bias"]))
    if diagnostics is not None:
        diagnostics.frontend_activation = np.array(h1.data)
    h2 = tn.reshape(h1, (T, s2 * h1.shape[1]))
    h2 = tn.gelu(tn.linear(h2, p["conv2.weight"], p["conv2.bias"]))
    return tn.linear(h2, p["proj.weight"], p["proj.bias"])


def feature_frontend(features, p, config):
    feats = np.asarray(features, dtype=config.np_dtype)
    if feats.ndim != 2 or feats.shape[1] != config.feature_dim or feats.shape[0] < 1:
        raise DimensionError(f"expected [T, {config.feature_dim}] features, got {feats.shape}")
    return tn.linear(Tensor(feats), p["proj.weight"], p["proj.bias"])


def embed(inputs, params, config, diagnostics=None):
    fp = sub(params, "frontend")
    if config.frontend == "toy_conv":
        return toy_frontend(inputs, fp, config, diagnostics)
    return feature_frontend(inputs, fp, config)


def forward(inputs, config, params, rng=None):
    """Logits ``[bonafide, spoof]`` and diagnostics; ``rng`` enables dropout."""
    enc = config.encoder
    diag = Diagnostics(0)
    x_seq = embed(inputs, params, config, diag)
    T = x_seq.shape[0]
    diag.num_frames = T
    blocks = [sub(params, f"blocks.{i}") for i in range(enc.num_blocks)]
    outputs = run_stack(prepend_cls(x_seq, params["cls"]), blocks, enc, rng)
    diag.attention = [o.cls_attention for o in outputs]
    cls_L = tn.getitem(outputs[-1].sequence, 0)
    if not config.use_fgfm:
        token = cls_L
    else:
        if T < config.votes:
            raise SelectionError(f"utterance has {T} frames but {config.votes} votes are requested")
        enhance_votes = not config.no_enhancement
        diag.selections = [select_frames(o, config.votes, enhance_votes, source_block=i)
                           for i, o in enumerate(outputs)]
        bundle, sel_L1, out_L1 = clr_forward(cls_L, diag.selections, sub(params, "clr"), enc,
                                             config.votes, enhance_votes,
                                             use_daff=not config.no_daff, rng=rng)
        diag.attention.append(out_L1.cls_attention)
        diag.cross_selection = sel_L1
        diag.bundle = bundle
        token = bundle.enriched_cls
    logits = tn.linear(tn.reshape(token, (1, enc.embed_dim)), params["head.weight"], params["head.bias"])
    return tn.reshape(logits, (2,)), diag


def detection_score(logits):
    """Bonafide-minus-spoof logit margin; higher means more bonafide."""
    d = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return float(d[BONAFIDE]) - float(d[SPOOF])


# ---------------------------------------------------------------- training

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params, state):
    state.step += 1
    t = state.step
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    if state.grad_clip > 0:
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > state.grad_clip:
            grads = {k: g * (state.grad_clip / norm) for k, g in grads.items()}
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, g in grads.items():
        p = params[k]
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.data.dtype, copy=False)


def zero_grad(params):
    for p in params.values():
        p.grad = None


def sample_loss(inputs, label, params, config, rng=None):
    logits, _ = forward(inputs, config, params, rng)
    return tn.cross_entropy(logits, label)


def sample_gradients(inputs, label, params, config):
    """Per-sample cross-entropy gradients, leaving ``params[*].grad`` cleared."""
    zero_grad(params)
    tn.backward(sample_loss(inputs, label, params, config))
    grads = {k: (None if p.grad is None else p.grad.copy()) for k, p in params.items()}
    zero_grad(params)
    return grads


def train_step(batch, params, state, config, rng=None):
    """One optimizer step on the mean cross-entropy of ``batch`` (pairs of input, label)."""
    if not batch:
        raise TrainingError("empty batch")
    zero_grad(params)
    total = 0.0
    scale = 1.0 / len(batch)
    for inputs, label in batch:
        loss = sample_loss(inputs, label, params, config, rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError("non-finite loss", {"step": state.step, "label": int(label)})
        total += value
        tn.backward(tn.mul(loss, scale))
    bad = [k for k, p in params.items() if p.grad is not None and not np.all(np.isfinite(p.grad))]
    if bad:
        raise TrainingError("non-finite gradients", {"step": state.step, "parameters": bad})
    adam_update(params, state)
    zero_grad(params)
    return total * scale, state


def predict(inputs, params, config):
    with tn.no_grad():
        logits, diag = forward(inputs, config, params)
    return detection_score(logits), diag


# ---------------------------------------------------------------- checkpoints

def quantize_parameters(params):
    """Round parameters to float32 precision so they survive a checkpoint exactly."""
    for p in params.values():
        p.data = p.data.astype(np.float32).astype(p.data.dtype)


def save_checkpoint(path, params, config):
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    for p in params.values():
        parts.append(struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def _read(buf, offset, n, what):
    if offset + n > len(buf):
        raise FormatError(f"truncated checkpoint while reading {what}: expected {n} bytes, "
                          f"found {len(buf) - offset}", offset)
    return buf[offset:offset + n], offset + n


def load_checkpoint(path):
    """Return ``(params, config)`` from a checkpoint file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, off = _read(buf, 0, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    head, off = _read(buf, off, 8, "header")
    version, n = struct.unpack("<II", head)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    blob, off_cfg = _read(buf, off, n, "config")
    try:
        config = ModelConfig.from_dict(json.loads(blob.decode("utf-8")))
    except (ValueError, TypeError, KeyError) as exc:
        raise FormatError(f"unreadable model config: {exc}", off) from exc
    off = off_cfg
    params = init_parameters(config)
    for name, p in params.items():
        start = off
        raw, off = _read(buf, off, 4, f"rank of {name}")
        (ndim,) = struct.unpack("<I", raw)
        raw, off = _read(buf, off, 4 * ndim, f"shape of {name}")
        shape = struct.unpack(f"<{ndim}I", raw)
        if tuple(shape) != p.shape:
            raise FormatError(f"parameter {name} has shape {shape}, config expects {p.shape}", start)
        count = int(np.prod(shape))
        raw, off = _read(buf, off, 4 * count, f"payload of {name}")
        p.data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(config.np_dtype)
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after last parameter", off)
    return params, config
