"""Pure numpy kernels; fallback for the compiled ``_ckernels`` module.

Column layout used by both backends: ``cols[(c*k + ki)*k + kj, (b*OH + i)*OW + j]``
holds ``x[b, c, i*stride - pad + ki, j*stride - pad + kj]`` (zero outside).
"""

from __future__ import annotations

import numpy as np


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    B, C, H, W = x.shape
    oh, ow = _out_size(H, k, stride, pad), _out_size(W, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((C, k, k, B, oh, ow), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
            cols[:, ki, kj] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(C * k * k, B * oh * ow)


def col2im(cols: np.ndarray, shape, k: int, stride: int, pad: int) -> np.ndarray:
    B, C, H, W = shape
    oh, ow = _out_size(H, k, stride, pad), _out_size(W, k, stride, pad)
    c6 = cols.reshape(C, k, k, B, oh, ow)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += c6[:, ki, kj].transpose(1, 0, 2, 3)
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + H, pad:pad + W])
    return xp


def _crc_table() -> list[int]:
    poly = 0xC96C5795D7870F42
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
        table.append(crc)
    return table


_TABLE = _crc_table()
_MASK = 0xFFFFFFFFFFFFFFFF


def crc64(data, crc: int = 0) -> int:
    """CRC-64/XZ (ECMA-182 polynomial, reflected, all-ones init and xorout)."""
    table = _TABLE
    c = ~crc & _MASK
    for byte in memoryview(data).cast("B"):
        c = table[(c ^ byte) & 0xFF] ^ (c >> 8)
    return ~c & _MASK
