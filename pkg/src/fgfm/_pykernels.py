"""Pure numpy reference kernels.

Same signatures and results as the compiled ``_ckernels`` module. Used when the
extension is not built or when ``FGFM_KERNELS=python`` is set.
"""
import numpy as np


def conv1d_same(signal, kernel):
    signal = np.ascontiguousarray(signal, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    return depthwise_conv_fwd(signal[:, None], kernel[:, None])[:, 0]


def depthwise_conv_fwd(x, k):
    # out[t, c] = sum_j k[j, c] * x[t + j - h, c], zero padded
    T, C = x.shape
    w = k.shape[0]
    h = (w - 1) // 2
    padded = np.zeros((T + 2 * h, C), dtype=np.float64)
    padded[h:h + T] = x
    out = np.zeros((T, C), dtype=np.float64)
    for j in range(w):
        out += k[j] * padded[j:j + T]
    return out


def depthwise_conv_bwd(g, x, k):
    T, C = x.shape
    w = k.shape[0]
    h = (w - 1) // 2
    padded_x = np.zeros((T + 2 * h, C), dtype=np.float64)
    padded_x[h:h + T] = x
    padded_g = np.zeros((T + 2 * h, C), dtype=np.float64)
    padded_g[h:h + T] = g
    gx = np.zeros((T, C), dtype=np.float64)
    gk = np.empty((w, C), dtype=np.float64)
    for j in range(w):
        gk[j] = (g * padded_x[j:j + T]).sum(axis=0)
        # x[s] feeds out[s - j + h]
        gx += k[j] * padded_g[2 * h - j:2 * h - j + T]
    return gx, gk


def topk_indices(x, k):
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(-x, kind="stable")[:k]
    return np.sort(order).astype(np.int64)


def mhv_select(attn, v, kernel, enhance):
    attn = np.asarray(attn, dtype=np.float64)
    K, T = attn.shape
    votes = np.zeros(T, dtype=np.int64)
    for row in attn:
        votes[np.argsort(-row, kind="stable")[:v]] += 1
    if enhance:
        enhanced = conv1d_same(votes.astype(np.float64), kernel)
    else:
        enhanced = votes.astype(np.float64)
    return votes, enhanced, topk_indices(enhanced, v)
