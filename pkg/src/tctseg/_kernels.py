"""Compiled inner loops for 3-D convolution.

Only the high-resolution layers go through here; small spatial sizes are
faster as an im2col matmul (see ``tensor.conv3d``).
"""
import numba
import numpy as np


@numba.njit(cache=True, fastmath=True)
def _conv3d_forward_generic(xp, w, out):
    B, Ci = xp.shape[0], xp.shape[1]
    Co, K = w.shape[0], w.shape[2]
    Z, Y, X = out.shape[2], out.shape[3], out.shape[4]
    acc = np.zeros(X, out.dtype)
    for b in range(B):
        for o in range(Co):
            for z in range(Z):
                for y in range(Y):
                    acc[:] = 0
                    for i in range(Ci):
                        for kz in range(K):
                            for ky in range(K):
                                row = xp[b, i, z + kz, y + ky]
                                for kx in range(K):
                                    wv = w[o, i, kz, ky, kx]
                                    for x in range(X):
                                        acc[x] += wv * row[x + kx]
                    for x in range(X):
                        out[b, o, z, y, x] = acc[x]


@numba.njit(cache=True, fastmath=True)
def _conv3d_forward_k3(xp, w, out):
    # four output channels share every input row load
    B, Ci = xp.shape[0], xp.shape[1]
    Co = w.shape[0]
    Z, Y, X = out.shape[2], out.shape[3], out.shape[4]
    acc = np.zeros((4, X), out.dtype)
    for b in range(B):
        for o0 in range(0, Co, 4):
            nb = min(4, Co - o0)
            for z in range(Z):
                for y in range(Y):
                    acc[:, :] = 0
                    for i in range(Ci):
                        for kz in range(3):
                            for ky in range(3):
                                row = xp[b, i, z + kz, y + ky]
                                if nb == 4:
                                    a0 = acc[0]
                                    a1 = acc[1]
                                    a2 = acc[2]
                                    a3 = acc[3]
                                    w00, w01, w02 = w[o0, i, kz, ky, 0], w[o0, i, kz, ky, 1], w[o0, i, kz, ky, 2]
                                    w10, w11, w12 = w[o0 + 1, i, kz, ky, 0], w[o0 + 1, i, kz, ky, 1], w[o0 + 1, i, kz, ky, 2]
                                    w20, w21, w22 = w[o0 + 2, i, kz, ky, 0], w[o0 + 2, i, kz, ky, 1], w[o0 + 2, i, kz, ky, 2]
                                    w30, w31, w32 = w[o0 + 3, i, kz, ky, 0], w[o0 + 3, i, kz, ky, 1], w[o0 + 3, i, kz, ky, 2]
                                    for x in range(X):
                                        r0 = row[x]
                                        r1 = row[x + 1]
                                        r2 = row[x + 2]
                                        a0[x] += w00 * r0 + w01 * r1 + w02 * r2
                                        a1[x] += w10 * r0 + w11 * r1 + w12 * r2
                                        a2[x] += w20 * r0 + w21 * r1 + w22 * r2
                                        a3[x] += w30 * r0 + w31 * r1 + w32 * r2
                                else:
                                    for ob in range(nb):
                                        a = acc[ob]
                                        w0 = w[o0 + ob, i, kz, ky, 0]
                                        w1 = w[o0 + ob, i, kz, ky, 1]
                                        w2 = w[o0 + ob, i, kz, ky, 2]
                                        for x in range(X):
                                            a[x] += w0 * row[x] + w1 * row[x + 1] + w2 * row[x + 2]
                    for ob in range(nb):
                        for x in range(X):
                            out[b, o0 + ob, z, y, x] = acc[ob, x]


def conv3d_forward(xp, w, out):
    """out[b, o] = sum_i xp[b, i] (*) w[o, i]  (valid cross-correlation)."""
    if w.shape[2] == 3:
        _conv3d_forward_k3(xp, w, out)
    else:
        _conv3d_forward_generic(xp, w, out)


@numba.njit(cache=True, fastmath=True)
def conv3d_weight_grad(xp, gout, gw):
    """gw[o, i, kz, ky, kx] += sum over b, z, y, x of gout * shifted xp."""
    B, Ci = xp.shape[0], xp.shape[1]
    Co, K = gw.shape[0], gw.shape[2]
    Z, Y, X = gout.shape[2], gout.shape[3], gout.shape[4]
    # per-tap lane accumulators, reduced once at the end
    acc = np.zeros((K, X), gw.dtype)
    for o in range(Co):
        for i in range(Ci):
            for kz in range(K):
                for ky in range(K):
                    acc[:, :] = 0
                    for b in range(B):
                        for z in range(Z):
                            for y in range(Y):
                                grow = gout[b, o, z, y]
                                row = xp[b, i, z + kz, y + ky]
                                for kx in range(K):
                                    a = acc[kx]
                                    for x in range(X):
                                        a[x] += grow[x] * row[x + kx]
                    for kx in range(K):
                        gw[o, i, kz, ky, kx] += acc[kx].sum()
