"""Pure numpy im2col / col2im, used when the compiled extension is absent."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, pad, oh, ow):
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (n, c, oh, ow, k, k) -> (n, c, k, k, oh, ow)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, oh * ow)
    return np.ascontiguousarray(cols)


def col2im(cols, chans, h, w, k, stride, pad, oh, ow):
    n = cols.shape[0]
    xp = np.zeros((n, chans, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    blocks = cols.reshape(n, chans, k, k, oh, ow)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += blocks[:, :, ki, kj]
    if pad:
        xp = xp[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(xp)
