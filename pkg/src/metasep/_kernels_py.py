"""Pure-numpy framing and overlap-add kernels (fallback backend)."""

import numpy as np


def num_frames(length, window, hop):
    if length <= window:
        return 1
    return -(-(length - window) // hop) + 1


def frame(x, window, hop):
    """Split rows of ``x`` (N, T) into zero-padded frames (N, F, window)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    n, length = x.shape
    nf = num_frames(length, window, hop)
    padded_len = (nf - 1) * hop + window
    padded = np.zeros((n, padded_len))
    padded[:, :length] = x
    s0, s1 = padded.strides
    view = np.lib.stride_tricks.as_strided(
        padded, shape=(n, nf, window), strides=(s0, hop * s1, s1), writeable=False
    )
    return view.copy()


def overlap_add(frames, hop, length):
    """Adjoint of :func:`frame`: sum frames (N, F, W) back onto (N, length)."""
    frames = np.asarray(frames, dtype=np.float64)
    n, nf, window = frames.shape
    padded_len = (nf - 1) * hop + window
    out = np.zeros((n, padded_len))
    if window % hop == 0:
        # each block of `hop` columns lands on a regular grid
        for k in range(window // hop):
            block = frames[:, :, k * hop:(k + 1) * hop].reshape(n, nf * hop)
            out[:, k * hop:k * hop + nf * hop] += block
    elif window <= nf:
        for w in range(window):
            out[:, w:w + nf * hop:hop] += frames[:, :, w]
    else:
        for f in range(nf):
            out[:, f * hop:f * hop + window] += frames[:, f, :]
    return out[:, :length].copy()
