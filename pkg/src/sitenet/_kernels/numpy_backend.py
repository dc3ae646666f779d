"""Pure-NumPy reference implementations of the convolution data-movement kernels.

These define the semantics; the compiled backend in ``_convkern.pyx`` must
produce bit-identical arrays (same accumulation order in ``col2im``).
"""

import numpy as np


def im2col(xp, kh, kw, stride, out_h, out_w):
    """Unfold padded images [N, C, Hp, Wp] into patch rows [N*out_h*out_w, C*kh*kw].

    Row (n, oh, ow) holds the receptive field of output pixel (oh, ow) of image
    n, channels outermost, flattened in (c, i, j) order.
    """
    n, c = xp.shape[0], xp.shape[1]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    # reshape of the transposed view copies into a fresh contiguous array
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * kh * kw)


def col2im(dcols, n, c, hp, wp, kh, kw, stride, out_h, out_w):
    """Fold patch-row gradients [N*out_h*out_w, C*kh*kw] back onto padded images.

    Adjoint of im2col: overlapping windows accumulate. Contributions are added
    in increasing (i, j) kernel-offset order so both backends sum identically.
    """
    d = dcols.reshape(n, out_h, out_w, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += d[:, :, i, j]
    return dxp
