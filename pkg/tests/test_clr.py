import math

import numpy as np
import pytest

from fgfm import clr
from fgfm import encoder as E
from fgfm import mhv
from fgfm import tensor as tn
from fgfm.errors import DimensionError
from fgfm.tensor import Tensor

from conftest import central_difference, rel_err, tiny_model_config


def _cfg(**kw):
    values = dict(embed_dim=8, num_heads=2, num_blocks=2, block_kind="conformer_lite", conv_module_kernel=5)
    values.update(kw)
    return E.EncoderConfig(**values)


def _stack(rng, cfg, T, v):
    blocks = [E.init_block(rng, cfg) for _ in range(cfg.num_blocks)]
    x = E.prepend_cls(Tensor(rng.normal(size=(T, cfg.embed_dim))), Tensor(rng.normal(size=cfg.embed_dim)))
    outs = E.run_stack(x, blocks, cfg)
    sels = [mhv.select_frames(o, v, source_block=i) for i, o in enumerate(outs)]
    return outs, sels


def _clr_params(rng, cfg):
    p = {}
    p.update({f"block1.{k}": t for k, t in E.init_block(rng, cfg).items()})
    p.update({f"block2.{k}": t for k, t in E.init_block(rng, cfg).items()})
    clr.init_cross_attention(p, "xattn", rng, cfg.embed_dim)
    clr.init_daff(p, "daff", rng, cfg.embed_dim, cfg.ffn_expansion)
    return p


# ---------------------------------------------------------------- build_cross_input

def test_cross_input_layout():
    rng = np.random.default_rng(0)
    cfg = _cfg()
    outs, sels = _stack(rng, cfg, T=9, v=2)
    cls_L = tn.getitem(outs[-1].sequence, 0)
    x = clr.build_cross_input(cls_L, sels)
    assert x.shape == (5, 8)
    np.testing.assert_array_equal(x.data[0], outs[-1].sequence.data[0])
    for b in range(2):
        rows = [i + 1 for i in sels[b].indices]
        np.testing.assert_array_equal(x.data[1 + 2 * b:3 + 2 * b], outs[b].sequence.data[rows])


def test_cross_input_single_block_shape():
    rng = np.random.default_rng(1)
    cfg = _cfg(num_blocks=1)
    outs, sels = _stack(rng, cfg, T=6, v=2)
    assert clr.build_cross_input(tn.getitem(outs[0].sequence, 0), sels).shape == (3, 8)


def test_cross_input_rejects_mixed_vote_counts():
    rng = np.random.default_rng(2)
    cfg = _cfg()
    outs, _ = _stack(rng, cfg, T=6, v=2)
    sels = [mhv.select_frames(outs[0], 2), mhv.select_frames(outs[1], 3)]
    with pytest.raises(DimensionError):
        clr.build_cross_input(tn.getitem(outs[1].sequence, 0), sels)


# ---------------------------------------------------------------- cross_layer_block

def test_single_block_stack_keeps_all_candidates():
    rng = np.random.default_rng(3)
    cfg = _cfg(num_blocks=1)
    outs, sels = _stack(rng, cfg, T=7, v=3)
    x_in = clr.build_cross_input(tn.getitem(outs[0].sequence, 0), sels)
    f_cross, sel, out = clr.cross_layer_block(x_in, E.init_block(rng, cfg), cfg, 3)
    assert sel.indices == [0, 1, 2]
    assert f_cross.shape == (4, 8)


def test_cross_layer_block_matches_brute_force_vote():
    from test_mhv import oracle_pipeline
    rng = np.random.default_rng(4)
    cfg = _cfg(num_blocks=3)
    outs, sels = _stack(rng, cfg, T=10, v=2)
    x_in = clr.build_cross_input(tn.getitem(outs[-1].sequence, 0), sels)
    f_cross, sel, out = clr.cross_layer_block(x_in, E.init_block(rng, cfg), cfg, 2)
    assert out.cls_attention.shape == (2, 6)
    assert sel.indices == oracle_pipeline(out.cls_attention.tolist(), 2)[2]
    np.testing.assert_array_equal(f_cross.data[0], out.sequence.data[0])
    np.testing.assert_array_equal(f_cross.data[1:], out.sequence.data[[i + 1 for i in sel.indices]])


# ---------------------------------------------------------------- refine_block

def test_refine_block_uses_block_L_classification_token():
    rng = np.random.default_rng(5)
    cfg = _cfg()
    outs, sels = _stack(rng, cfg, T=8, v=2)
    cls_L = tn.getitem(outs[-1].sequence, 0)
    x_in = clr.build_cross_input(cls_L, sels)
    p1, p2 = E.init_block(rng, cfg), E.init_block(rng, cfg)
    f_cross, sel, out1 = clr.cross_layer_block(x_in, p1, cfg, 2)
    refined = clr.refine_block(cls_L, sel, p2, cfg)
    assert refined.sequence.shape == (3, 8)
    expected = E.encoder_block(tn.prepend_row(cls_L, sel.representations), p2, cfg)
    np.testing.assert_array_equal(refined.sequence.data, expected.sequence.data)
    wrong = E.encoder_block(f_cross, p2, cfg)
    assert not np.allclose(refined.sequence.data, wrong.sequence.data)


def test_gradient_through_both_extra_blocks():
    rng = np.random.default_rng(6)
    cfg = _cfg(embed_dim=4, num_blocks=1)
    outs, sels = _stack(rng, cfg, T=5, v=2)
    cls_L = Tensor(rng.normal(size=4), requires_grad=True)
    rows = Tensor(sels[0].representations.data.copy(), requires_grad=True)
    sels[0].representations = rows
    p1, p2 = E.init_block(rng, cfg), E.init_block(rng, cfg)
    w = Tensor(rng.normal(size=(3, 4)))

    def loss():
        _, sel, _ = clr.cross_layer_block(clr.build_cross_input(cls_L, sels), p1, cfg, 2)
        return tn.sum_all(tn.mul(clr.refine_block(cls_L, sel, p2, cfg).sequence, w))

    tn.backward(loss())
    for t in [cls_L, rows, p1["attn.q.weight"], p1["ffn1.fc1.weight"], p2["attn.v.weight"], p2["conv.dw.weight"]]:
        numeric = central_difference(lambda: float(loss().data), t.data)
        assert rel_err(t.grad, numeric, floor=1e-6) < 1e-3


# ---------------------------------------------------------------- dual_cross_attention

def _xattn(rng, D):
    p = {}
    clr.init_cross_attention(p, "x", rng, D)
    return E.sub(p, "x")


def test_zero_value_projection_leaves_residual_only():
    rng = np.random.default_rng(7)
    p = _xattn(rng, 4)
    for s in ("cross", "refined"):
        p[f"{s}.v.weight"].data[...] = 0
        p[f"{s}.v.bias"].data[...] = 0
    fc, fr = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    hc, hr = clr.dual_cross_attention(fc, fr, p)
    np.testing.assert_array_equal(hc.data, fc.data)
    np.testing.assert_array_equal(hr.data, fr.data)


def test_symmetric_inputs_give_symmetric_outputs():
    rng = np.random.default_rng(8)
    p = _xattn(rng, 4)
    for n in "qkv":
        for part in ("weight", "bias"):
            p[f"refined.{n}.{part}"] = p[f"cross.{n}.{part}"]
    f = Tensor(rng.normal(size=(3, 4)))
    hc, hr = clr.dual_cross_attention(f, Tensor(f.data.copy()), p)
    np.testing.assert_array_equal(hc.data, hr.data)


def test_cross_attention_hand_example():
    # v=1, D=2: two rows per stream; q/k identity, v doubles, residual added
    fc = np.array([[1.0, 0.0], [0.0, 1.0]])
    fr = np.array([[0.0, 2.0], [1.0, 1.0]])
    eye, zero = np.eye(2), np.zeros(2)
    p = {}
    for s in ("cross", "refined"):
        p[f"{s}.q.weight"], p[f"{s}.k.weight"], p[f"{s}.v.weight"] = Tensor(eye), Tensor(eye), Tensor(2 * eye)
        for n in "qkv":
            p[f"{s}.{n}.bias"] = Tensor(zero)
    hc, hr = clr.dual_cross_attention(Tensor(fc), Tensor(fr), p)

    def attend(q, kv, resid):
        out = []
        for i in range(2):
            s = [sum(q[i, d] * kv[j, d] for d in range(2)) / math.sqrt(2) for j in range(2)]
            e = [math.exp(t) for t in s]
            a = [t / sum(e) for t in e]
            out.append([resid[i, d] + sum(a[j] * 2 * kv[j, d] for j in range(2)) for d in range(2)])
        return np.array(out)

    np.testing.assert_allclose(hc.data, attend(fc, fr, fc), atol=1e-12)
    np.testing.assert_allclose(hr.data, attend(fr, fc, fr), atol=1e-12)


def test_cross_attention_shape_mismatch():
    p = _xattn(np.random.default_rng(0), 4)
    with pytest.raises(DimensionError):
        clr.dual_cross_attention(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))), p)


# ---------------------------------------------------------------- DAFF

def _daff(rng, D, expansion=4):
    p = {}
    clr.init_daff(p, "d", rng, D, expansion)
    return E.sub(p, "d")


def test_daff_zero_weights_trace():
    rng = np.random.default_rng(9)
    p = _daff(rng, 4)
    p["dw.weight"].data[...] = 0
    p["fc2.weight"].data[...] = 0
    p["fc2.bias"].data[...] = rng.normal(size=4)
    hc, hr = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    out = clr.daff_fuse(hc, hr, p)
    assert out.shape == (4,)
    np.testing.assert_allclose(out.data, hc.data[0] + p["fc2.bias"].data, atol=1e-15)


def test_daff_zero_conv_only_trace():
    # the CLS row bypasses the conv, so zeroing it leaves the row-0 feed-forward path intact
    rng = np.random.default_rng(10)
    p = _daff(rng, 4)
    p["dw.weight"].data[...] = 0
    hc, hr = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    x = hc[0]
    u = (x - x.mean()) / np.sqrt(x.var() + 1e-5) * p["norm.gamma"].data + p["norm.beta"].data
    u = u @ p["fc1.weight"].data + p["fc1.bias"].data
    u = 0.5 * u * (1 + np.tanh(math.sqrt(2 / math.pi) * (u + 0.044715 * u ** 3)))
    expected = x + u @ p["fc2.weight"].data + p["fc2.bias"].data
    np.testing.assert_allclose(clr.daff_fuse(Tensor(hc), Tensor(hr), p).data, expected, atol=1e-12)


def test_daff_conv_never_mixes_cls_rows():
    rng = np.random.default_rng(11)
    p = _daff(rng, 4)
    hc, hr = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    a = clr.daff_forward(Tensor(hc), Tensor(hr), p).data
    hc2, hr2 = hc.copy(), hr.copy()
    hc2[0] += 3.0
    hr2[0] -= 2.0
    b = clr.daff_forward(Tensor(hc2), Tensor(hr2), p).data
    frames = [1, 2, 3, 5, 6, 7]
    np.testing.assert_array_equal(a[frames], b[frames])


def test_daff_gradient():
    rng = np.random.default_rng(12)
    p = _daff(rng, 4, expansion=2)
    hc = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    hr = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=4))

    def loss():
        return tn.sum_all(tn.mul(clr.daff_fuse(hc, hr, p), w))

    tn.backward(loss())
    for t in [hc, hr] + list(p.values()):
        numeric = central_difference(lambda: float(loss().data), t.data)
        assert rel_err(t.grad, numeric, floor=1e-6) < 1e-3


# ---------------------------------------------------------------- clr_forward

def test_enriched_token_depends_on_every_selected_frame():
    rng = np.random.default_rng(13)
    cfg = _cfg()
    outs, sels = _stack(rng, cfg, T=8, v=2)
    cls_L = tn.getitem(outs[-1].sequence, 0)
    params = _clr_params(rng, cfg)
    base, _, _ = clr.clr_forward(cls_L, sels, params, cfg, 2)
    for b, sel in enumerate(sels):
        for r in range(2):
            original = sel.representations.data.copy()
            # a constant shift across channels would be erased by the blocks' layer norms
            sel.representations.data[r] += 0.5 * rng.normal(size=8)
            moved, _, _ = clr.clr_forward(cls_L, sels, params, cfg, 2)
            sel.representations.data[...] = original
            assert not np.allclose(moved.enriched_cls.data, base.enriched_cls.data), (b, r)


def test_no_daff_passes_cross_classification_token():
    rng = np.random.default_rng(14)
    cfg = _cfg()
    outs, sels = _stack(rng, cfg, T=8, v=2)
    cls_L = tn.getitem(outs[-1].sequence, 0)
    bundle, _, _ = clr.clr_forward(cls_L, sels, _clr_params(rng, cfg), cfg, 2, use_daff=False)
    assert bundle.f_refined is None
    np.testing.assert_array_equal(bundle.enriched_cls.data, bundle.f_cross.data[0])


def test_bundle_shapes():
    rng = np.random.default_rng(15)
    cfg = tiny_model_config().encoder
    outs, sels = _stack(rng, cfg, T=9, v=3)
    bundle, sel, _ = clr.clr_forward(tn.getitem(outs[-1].sequence, 0), sels, _clr_params(rng, cfg), cfg, 3)
    for t in (bundle.f_cross, bundle.f_refined, bundle.h_cross, bundle.h_refined):
        assert t.shape == (4, 8)
    assert bundle.enriched_cls.shape == (8,)
    assert len(sel.indices) == 3 and all(0 <= i < 6 for i in sel.indices)
