"""Cross-layer refinement: two extra blocks over voted frames, dual cross-attention, DAFF fusion."""
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .encoder import encoder_block, init_linear, init_norm, sub, uniform, zeros
from .errors import DimensionError
from .mhv import select_frames
from .tensor import Tensor

DAFF_CONV_WIDTH = 3


@dataclass
class CrossLayerBundle:
    f_cross: Tensor
    f_refined: Tensor
    h_cross: Tensor
    h_refined: Tensor
    enriched_cls: Tensor


def build_cross_input(cls_L, selections):
    """``[cls_L; X_1^sel; ...; X_L^sel]`` with blocks in order."""
    if not selections:
        raise DimensionError("no selections to concatenate")
    v = selections[0].representations.shape[0]
    if any(s.representations.shape[0] != v for s in selections):
        raise DimensionError("selections carry different numbers of frames")
    return tn.prepend_row(cls_L, tn.concat([s.representations for s in selections], axis=0))


def cross_layer_block(x_in, p, cfg, v, enhance_votes=True, rng=None, source_block=None):
    """Block L+1 over the gathered frames, then vote again among its outputs."""
    out = encoder_block(x_in, p, cfg, rng)
    sel = select_frames(out, v, enhance_votes,
                        source_block=cfg.num_blocks if source_block is None else source_block)
    cls = tn.getitem(out.sequence, slice(0, 1))
    f_cross = tn.concat([cls, sel.representations], axis=0)
    return f_cross, sel, out


def refine_block(cls_L, sel_L1, p, cfg, rng=None):
    """Block L+2 over ``[cls_L; X_{L+1}^sel]``; its whole output is the refined feature."""
    x = tn.prepend_row(cls_L, sel_L1.representations)
    return encoder_block(x, p, cfg, rng)


def init_cross_attention(params, prefix, rng, dim, dtype=np.float64):
    for stream in ("cross", "refined"):
        for name in ("q", "k", "v"):
            init_linear(params, f"{prefix}.{stream}.{name}", rng, dim, dim, dtype)


def dual_cross_attention(f_cross, f_refined, p):
    """Single-head cross-attention in both directions with residuals."""
    if f_cross.shape != f_refined.shape:
        raise DimensionError(f"f_cross {f_cross.shape} and f_refined {f_refined.shape} differ")
    D = f_cross.shape[1]
    scale = 1.0 / math.sqrt(D)

    def proj(x, stream, name):
        return tn.linear(x, p[f"{stream}.{name}.weight"], p[f"{stream}.{name}.bias"])

    qc, kc, vc = (proj(f_cross, "cross", n) for n in "qkv")
    qr, kr, vr = (proj(f_refined, "refined", n) for n in "qkv")
    a_cr = tn.softmax(tn.mul(tn.matmul(qc, tn.transpose(kr)), scale), axis=-1)
    a_rc = tn.softmax(tn.mul(tn.matmul(qr, tn.transpose(kc)), scale), axis=-1)
    h_cross = tn.add(tn.matmul(a_cr, vr), f_cross)
    h_refined = tn.add(tn.matmul(a_rc, vc), f_refined)
    return h_cross, h_refined


def init_daff(params, prefix, rng, dim, expansion, dtype=np.float64):
    init_norm(params, f"{prefix}.norm", dim, dtype)
    init_linear(params, f"{prefix}.fc1", rng, dim, expansion * dim, dtype)
    params[f"{prefix}.dw.weight"] = uniform(rng, (DAFF_CONV_WIDTH, expansion * dim), DAFF_CONV_WIDTH, dtype)
    params[f"{prefix}.dw.bias"] = zeros((expansion * dim,), dtype)
    init_linear(params, f"{prefix}.fc2", rng, expansion * dim, dim, dtype)


def daff_forward(h_cross, h_refined, p):
    """Full fused sequence ``Z + FFN(Z)`` for ``Z = [h_cross; h_refined]``.

    The expanded activations of the two CLS rows (0 and 1+v) skip the
    depthwise convolution; the 2v frame rows are convolved as one sequence.
    """
    if h_cross.shape != h_refined.shape:
        raise DimensionError("h_cross and h_refined differ in shape")
    n = h_cross.shape[0]
    z = tn.concat([h_cross, h_refined], axis=0)
    u = tn.layer_norm(z, p["norm.gamma"], p["norm.beta"])
    u = tn.gelu(tn.linear(u, p["fc1.weight"], p["fc1.bias"]))
    frame_rows = [i for i in range(2 * n) if i not in (0, n)]
    mixed = tn.depthwise_conv(tn.take_rows(u, frame_rows), p["dw.weight"], p["dw.bias"])
    v = n - 1
    u = tn.concat([
        tn.getitem(u, slice(0, 1)),
        tn.getitem(mixed, slice(0, v)),
        tn.getitem(u, slice(n, n + 1)),
        tn.getitem(mixed, slice(v, 2 * v)),
    ], axis=0)
    out = tn.linear(u, p["fc2.weight"], p["fc2.bias"])
    return tn.add(z, out)


def daff_fuse(h_cross, h_refined, p):
    """Enriched classification token: row 0 (the h_cross CLS slot) of the fused sequence."""
    return tn.getitem(daff_forward(h_cross, h_refined, p), 0)


def clr_forward(cls_L, selections, params, cfg, v, enhance_votes=True, use_daff=True, rng=None):
    """Blocks L+1 and L+2, cross-attention and fusion; ``params`` holds the ``clr.*`` subtree."""
    x_in = build_cross_input(cls_L, selections)
    f_cross, sel_L1, out_L1 = cross_layer_block(x_in, sub(params, "block1"), cfg, v, enhance_votes, rng)
    if not use_daff:
        # ablation: f_cross's CLS goes straight to the head, block L+2 is unused
        enriched = tn.getitem(f_cross, 0)
        return CrossLayerBundle(f_cross, None, None, None, enriched), sel_L1, out_L1
    f_refined = refine_block(cls_L, sel_L1, sub(params, "block2"), cfg, rng).sequence
    h_cross, h_refined = dual_cross_attention(f_cross, f_refined, sub(params, "xattn"))
    enriched = daff_fuse(h_cross, h_refined, sub(params, "daff"))
    return CrossLayerBundle(f_cross, f_refined, h_cross, h_refined, enriched), sel_L1, out_L1
