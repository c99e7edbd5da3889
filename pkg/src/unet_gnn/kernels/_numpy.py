"""Pure-numpy reference implementations of the hot kernels."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride):
    """[N,C,Hp,Wp] padded input -> [N, C*kh*kw, Ho*Wo] patch matrix."""
    n, c, hp, wp = x.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    # [N,C,Ho,Wo,kh,kw] -> [N,C,kh,kw,Ho,Wo]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def col2im(cols, padded_shape, kh, kw, stride):
    """Adjoint of :func:`im2col`: scatter-add patches back onto the padded grid."""
    n, c, hp, wp = padded_shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += cols[:, :, u, v]
    return out


def maxpool2_forward(x):
    """2x2/stride-2 max pool. Returns (pooled, window index 0..3, row-major, first max wins)."""
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int8)


def maxpool2_backward(grad_out, arg):
    n, c, ho, wo = grad_out.shape
    onehot = (arg[..., None] == np.arange(4, dtype=np.int8)).astype(grad_out.dtype)
    g = onehot * grad_out[..., None]
    return g.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)


def neighbor_sum(values, nbrs):
    """out[b, i] = sum_k values[b, nbrs[i, k]] for values [B,N,C], nbrs [N,K]."""
    return values[:, nbrs, :].sum(axis=2)


def neighbor_sum_transpose(grad, nbrs):
    """Adjoint of :func:`neighbor_sum`."""
    out = np.zeros_like(grad)
    for k in range(nbrs.shape[1]):
        np.add.at(out, (slice(None), nbrs[:, k]), grad)
    return out


def knn_select(coords, k):
    """Each row: self plus k nearest others by squared distance, sorted by (distance, index)."""
    n = coords.shape[0]
    diff = coords[:, None, :] - coords[None, :, :]
    d = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1]
    d_others = d.copy()
    np.fill_diagonal(d_others, np.inf)
    order = np.argsort(d_others, axis=1, kind="stable")[:, :k]
    cand = np.concatenate([np.arange(n)[:, None], order], axis=1)
    cand_d = np.take_along_axis(d, cand, axis=1)
    # primary key distance, secondary key index
    idx = np.lexsort((cand, cand_d), axis=1)
    return np.take_along_axis(cand, idx, axis=1).astype(np.int64)


def confusion_tally(targets, preds, num_classes):
    """targets/preds are flat int64 arrays of already-filtered pixels."""
    flat = targets * num_classes + preds
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes).astype(np.int64)
