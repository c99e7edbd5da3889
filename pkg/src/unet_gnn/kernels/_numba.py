"""numba-compiled versions of the hot kernels; same signatures as ``_numpy``."""
import numpy as np

from .._backend import njit


@njit
def _im2col(x, kh, kw, stride, ho, wo, out):
    n, c = x.shape[0], x.shape[1]
    for b in range(n):
        for ch in range(c):
            for u in range(kh):
                for v in range(kw):
                    row = (ch * kh + u) * kw + v
                    for i in range(ho):
                        src_i = i * stride + u
                        base = i * wo
                        for j in range(wo):
                            out[b, row, base + j] = x[b, ch, src_i, j * stride + v]
    return out


def im2col(x, kh, kw, stride):
    n, c, hp, wp = x.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.empty((n, c * kh * kw, ho * wo), dtype=x.dtype)
    return _im2col(np.ascontiguousarray(x), kh, kw, stride, ho, wo, out)


@njit
def _col2im(cols, kh, kw, stride, ho, wo, out):
    n, c = out.shape[0], out.shape[1]
    for b in range(n):
        for ch in range(c):
            for u in range(kh):
                for v in range(kw):
                    row = (ch * kh + u) * kw + v
                    for i in range(ho):
                        dst_i = i * stride + u
                        base = i * wo
                        for j in range(wo):
                            out[b, ch, dst_i, j * stride + v] += cols[b, row, base + j]
    return out


def col2im(cols, padded_shape, kh, kw, stride):
    n, c, hp, wp = padded_shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros(padded_shape, dtype=cols.dtype)
    cols = np.ascontiguousarray(cols).reshape(n, c * kh * kw, ho * wo)
    return _col2im(cols, kh, kw, stride, ho, wo, out)


@njit
def _maxpool2_forward(x, out, arg):
    n, c, ho, wo = out.shape
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[b, ch, 2 * i, 2 * j]
                    bi = 0
                    for t in range(1, 4):
                        val = x[b, ch, 2 * i + t // 2, 2 * j + t % 2]
                        # strict '>' keeps the first maximum on ties
                        if val > best:
                            best = val
                            bi = t
                    out[b, ch, i, j] = best
                    arg[b, ch, i, j] = bi


def maxpool2_forward(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    arg = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
    _maxpool2_forward(np.ascontiguousarray(x), out, arg)
    return out, arg


@njit
def _maxpool2_backward(grad_out, arg, out):
    n, c, ho, wo = grad_out.shape
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    t = arg[b, ch, i, j]
                    out[b, ch, 2 * i + t // 2, 2 * j + t % 2] = grad_out[b, ch, i, j]


def maxpool2_backward(grad_out, arg):
    n, c, ho, wo = grad_out.shape
    out = np.zeros((n, c, 2 * ho, 2 * wo), dtype=grad_out.dtype)
    _maxpool2_backward(np.ascontiguousarray(grad_out), arg, out)
    return out


@njit
def _neighbor_sum(values, nbrs, out):
    bsz, n, c = values.shape
    kk = nbrs.shape[1]
    for b in range(bsz):
        for i in range(n):
            for t in range(kk):
                j = nbrs[i, t]
                for ch in range(c):
                    out[b, i, ch] += values[b, j, ch]


def neighbor_sum(values, nbrs):
    out = np.zeros_like(values)
    _neighbor_sum(np.ascontiguousarray(values), nbrs, out)
    return out


@njit
def _neighbor_sum_transpose(grad, nbrs, out):
    bsz, n, c = grad.shape
    kk = nbrs.shape[1]
    for b in range(bsz):
        for i in range(n):
            for t in range(kk):
                j = nbrs[i, t]
                for ch in range(c):
                    out[b, j, ch] += grad[b, i, ch]


def neighbor_sum_transpose(grad, nbrs):
    out = np.zeros_like(grad)
    _neighbor_sum_transpose(np.ascontiguousarray(grad), nbrs, out)
    return out


@njit
def _knn_select(coords, k, out):
    n = coords.shape[0]
    d = np.empty(n, dtype=np.float64)
    for i in range(n):
        for j in range(n):
            dx = coords[i, 0] - coords[j, 0]
            dy = coords[i, 1] - coords[j, 1]
            d[j] = dx * dx + dy * dy
        self_d = d[i]
        d[i] = np.inf
        order = np.argsort(d, kind="mergesort")
        d[i] = self_d
        # insert self into the (distance, index)-sorted list of k others
        pos = 0
        placed = False
        for t in range(k):
            j = order[t]
            if not placed and (d[j] > self_d or (d[j] == self_d and j > i)):
                out[i, pos] = i
                pos += 1
                placed = True
            out[i, pos] = j
            pos += 1
        if not placed:
            out[i, pos] = i


def knn_select(coords, k):
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    out = np.empty((coords.shape[0], k + 1), dtype=np.int64)
    _knn_select(coords, k, out)
    return out


@njit
def _confusion_tally(targets, preds, num_classes, out):
    for t in range(targets.shape[0]):
        out[targets[t], preds[t]] += 1


def confusion_tally(targets, preds, num_classes):
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    _confusion_tally(np.ascontiguousarray(targets, dtype=np.int64),
                     np.ascontiguousarray(preds, dtype=np.int64), num_classes, out)
    return out
