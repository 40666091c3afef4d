"""Multi-head self-attention encoder blocks with a prepended classification token.

Two block wirings are available:

* ``transformer``: pre-norm MHSA and FFN, each with a residual.
* ``conformer_lite``: half-FFN, MHSA, depthwise-conv module, half-FFN and a
  final layer norm. The conv module only sees frame positions; the CLS row
  bypasses it.

Parameters live in flat ``dict[str, Tensor]`` mappings keyed by dotted names.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError
from .tensor import Tensor

BLOCK_KINDS = ("transformer", "conformer_lite")


@dataclass
class EncoderConfig:
    embed_dim: int = 16
    num_heads: int = 2
    num_blocks: int = 2
    block_kind: str = "conformer_lite"
    ffn_expansion: int = 4
    conv_module_kernel: int = 15
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_heads < 1 or self.num_blocks < 1 or self.embed_dim < 2:
            raise ConfigError("need embed_dim >= 2, num_heads >= 1, num_blocks >= 1")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block_kind {self.block_kind!r}")
        if self.conv_module_kernel % 2 == 0:
            raise ConfigError("conv_module_kernel must be odd")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class BlockOutput:
    """Block output sequence (row 0 = CLS) and per-head CLS attention over frames."""
    sequence: Tensor
    cls_attention: np.ndarray  # [K, N-1]


def uniform(rng, shape, fan_in, dtype=np.float64):
    s = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-s, s, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float64):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype=np.float64):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_linear(params, prefix, rng, fan_in, fan_out, dtype=np.float64):
    params[f"{prefix}.weight"] = uniform(rng, (fan_in, fan_out), fan_in, dtype)
    params[f"{prefix}.bias"] = zeros((fan_out,), dtype)


def init_norm(params, prefix, dim, dtype=np.float64):
    params[f"{prefix}.gamma"] = ones((dim,), dtype)
    params[f"{prefix}.beta"] = zeros((dim,), dtype)


def init_mhsa(params, prefix, rng, dim, dtype=np.float64):
    for name in ("q", "k", "v", "o"):
        init_linear(params, f"{prefix}.{name}", rng, dim, dim, dtype)


def init_ffn(params, prefix, rng, dim, expansion, dtype=np.float64):
    init_norm(params, f"{prefix}.norm", dim, dtype)
    init_linear(params, f"{prefix}.fc1", rng, dim, expansion * dim, dtype)
    init_linear(params, f"{prefix}.fc2", rng, expansion * dim, dim, dtype)


def init_block(rng, cfg, prefix="", dtype=np.float64):
    """Parameters of one encoder block, in declaration order."""
    p = {}
    pre = f"{prefix}." if prefix else ""
    D = cfg.embed_dim
    if cfg.block_kind == "transformer":
        init_norm(p, f"{pre}attn_norm", D, dtype)
        init_mhsa(p, f"{pre}attn", rng, D, dtype)
        init_ffn(p, f"{pre}ffn", rng, D, cfg.ffn_expansion, dtype)
    else:
        init_ffn(p, f"{pre}ffn1", rng, D, cfg.ffn_expansion, dtype)
        init_norm(p, f"{pre}attn_norm", D, dtype)
        init_mhsa(p, f"{pre}attn", rng, D, dtype)
        init_norm(p, f"{pre}conv.norm", D, dtype)
        init_linear(p, f"{pre}conv.pw1", rng, D, 2 * D, dtype)
        p[f"{pre}conv.dw.weight"] = uniform(rng, (cfg.conv_module_kernel, D), cfg.conv_module_kernel, dtype)
        p[f"{pre}conv.dw.bias"] = zeros((D,), dtype)
        init_linear(p, f"{pre}conv.pw2", rng, D, D, dtype)
        init_ffn(p, f"{pre}ffn2", rng, D, cfg.ffn_expansion, dtype)
        init_norm(p, f"{pre}final_norm", D, dtype)
    return p


def sub(params, prefix):
    """View of ``params`` restricted to ``prefix.`` with the prefix stripped."""
    n = len(prefix) + 1
    return {k[n:]: t for k, t in params.items() if k.startswith(prefix + ".")}


def prepend_cls(x_seq, cls_param):
    if x_seq.ndim != 2 or x_seq.shape[0] < 1:
        raise DimensionError(f"expected a [T, D] frame sequence, got {x_seq.shape}")
    return tn.prepend_row(cls_param, x_seq)


def _dropout(x, rate, rng):
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return tn.mul(x, Tensor(keep))


def mhsa(x, p, num_heads):
    """Channel-split scaled dot-product self-attention.

    Returns the output sequence and a ``[K, N-1]`` array holding, per head, the
    CLS query's softmax row with the CLS-key entry dropped (not renormalised).
    """
    N, D = x.shape
    if N < 2:
        raise DimensionError("mhsa needs the CLS token plus at least one frame")
    K = num_heads
    dh = D // K

    def heads(t):
        return tn.transpose(tn.reshape(t, (N, K, dh)), (1, 0, 2))

    q = heads(tn.linear(x, p["q.weight"], p["q.bias"]))
    k = heads(tn.linear(x, p["k.weight"], p["k.bias"]))
    v = heads(tn.linear(x, p["v.weight"], p["v.bias"]))
    scores = tn.mul(tn.matmul(q, tn.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = tn.softmax(scores, axis=-1)
    ctx = tn.reshape(tn.transpose(tn.matmul(attn, v), (1, 0, 2)), (N, D))
    out = tn.linear(ctx, p["o.weight"], p["o.bias"])
    cls_rows = np.array(attn.data[:, 0, 1:], dtype=np.float64)
    return out, cls_rows


def ffn(x, p, rng=None, rate=0.0):
    h = tn.layer_norm(x, p["norm.gamma"], p["norm.beta"])
    h = tn.gelu(tn.linear(h, p["fc1.weight"], p["fc1.bias"]))
    return _dropout(tn.linear(h, p["fc2.weight"], p["fc2.bias"]), rate, rng)


def conv_module(x, p):
    """Pointwise-GLU-depthwise-swish-pointwise over frame rows; CLS row gets zero."""
    N, D = x.shape
    frames = tn.getitem(x, slice(1, N))
    h = tn.layer_norm(frames, p["norm.gamma"], p["norm.beta"])
    h = tn.linear(h, p["pw1.weight"], p["pw1.bias"])
    h = tn.mul(tn.getitem(h, (slice(None), slice(0, D))),
               tn.sigmoid(tn.getitem(h, (slice(None), slice(D, 2 * D)))))
    h = tn.swish(tn.depthwise_conv(h, p["dw.weight"], p["dw.bias"]))
    h = tn.linear(h, p["pw2.weight"], p["pw2.bias"])
    zero_cls = Tensor(np.zeros((1, D), dtype=x.dtype))
    return tn.concat([zero_cls, h], axis=0)


def encoder_block(x, p, cfg, rng=None):
    """One block; ``rng`` enables dropout (training only)."""
    rate = cfg.dropout_rate
    if cfg.block_kind == "transformer":
        a, cls_rows = mhsa(tn.layer_norm(x, p["attn_norm.gamma"], p["attn_norm.beta"]),
                           sub(p, "attn"), cfg.num_heads)
        x = tn.add(x, _dropout(a, rate, rng))
        x = tn.add(x, ffn(x, sub(p, "ffn"), rng, rate))
        return BlockOutput(x, cls_rows)
    x = tn.add(x, tn.mul(ffn(x, sub(p, "ffn1"), rng, rate), 0.5))
    a, cls_rows = mhsa(tn.layer_norm(x, p["attn_norm.gamma"], p["attn_norm.beta"]),
                       sub(p, "attn"), cfg.num_heads)
    x = tn.add(x, _dropout(a, rate, rng))
    x = tn.add(x, _dropout(conv_module(x, sub(p, "conv")), rate, rng))
    x = tn.add(x, tn.mul(ffn(x, sub(p, "ffn2"), rng, rate), 0.5))
    x = tn.layer_norm(x, p["final_norm.gamma"], p["final_norm.beta"])
    return BlockOutput(x, cls_rows)


def run_stack(x, block_params, cfg, rng=None):
    """Apply the blocks in order, keeping every block's output for voting."""
    outputs = []
    for p in block_params:
        out = encoder_block(x, p, cfg, rng)
        outputs.append(out)
        x = out.sequence
    return outputs
