"""JIT-compiled inner loops for the spatial kernels in ``nn``.

All arrays are float64 NCHW; inputs arrive already padded. Accumulation
order is fixed, so results are bit-reproducible.
"""
import numba
import numpy as np

jit = numba.njit(cache=True, nogil=True)


@jit
def _depthwise_fwd_s1(xp, w, Ho, Wo):
    B, C = xp.shape[0], xp.shape[1]
    k = w.shape[1]
    out = np.zeros((B, C, Ho, Wo))
    for b in range(B):
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    wv = w[c, i, j]
                    for h in range(Ho):
                        for q in range(Wo):
                            out[b, c, h, q] += xp[b, c, h + i, q + j] * wv
    return out


@jit
def _depthwise_bwd_s1(xp, w, g):
    B, C, Ho, Wo = g.shape
    k = w.shape[1]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for b in range(B):
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    wv = w[c, i, j]
                    acc = 0.0
                    for h in range(Ho):
                        for q in range(Wo):
                            gv = g[b, c, h, q]
                            dxp[b, c, h + i, q + j] += gv * wv
                            acc += gv * xp[b, c, h + i, q + j]
                    dw[c, i, j] += acc
    return dxp, dw


def depthwise_fwd(xp, w, stride, Ho, Wo):
    if stride == 1:
        return _depthwise_fwd_s1(xp, w, Ho, Wo)
    return _depthwise_fwd(xp, w, stride, Ho, Wo)


def depthwise_bwd(xp, w, g, stride):
    if stride == 1:
        return _depthwise_bwd_s1(xp, w, g)
    return _depthwise_bwd(xp, w, g, stride)


@jit
def _depthwise_fwd(xp, w, stride, Ho, Wo):
    B, C = xp.shape[0], xp.shape[1]
    k = w.shape[1]
    out = np.zeros((B, C, Ho, Wo))
    for b in range(B):
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    wv = w[c, i, j]
                    for h in range(Ho):
                        for q in range(Wo):
                            out[b, c, h, q] += xp[b, c, h * stride + i, q * stride + j] * wv
    return out


@jit
def _depthwise_bwd(xp, w, g, stride):
    B, C, Ho, Wo = g.shape
    k = w.shape[1]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for b in range(B):
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    wv = w[c, i, j]
                    acc = 0.0
                    for h in range(Ho):
                        for q in range(Wo):
                            gv = g[b, c, h, q]
                            dxp[b, c, h * stride + i, q * stride + j] += gv * wv
                            acc += gv * xp[b, c, h * stride + i, q * stride + j]
                    dw[c, i, j] += acc
    return dxp, dw


@jit
def avgpool_fwd(xp, k, stride, Ho, Wo):
    B, C = xp.shape[0], xp.shape[1]
    out = np.zeros((B, C, Ho, Wo))
    scale = 1.0 / (k * k)
    for b in range(B):
        for c in range(C):
            for h in range(Ho):
                for q in range(Wo):
                    acc = 0.0
                    for i in range(k):
                        for j in range(k):
                            acc += xp[b, c, h * stride + i, q * stride + j]
                    out[b, c, h, q] = acc * scale
    return out


@jit
def avgpool_bwd(g, k, stride, Hp, Wp):
    B, C, Ho, Wo = g.shape
    dxp = np.zeros((B, C, Hp, Wp))
    scale = 1.0 / (k * k)
    for b in range(B):
        for c in range(C):
            for h in range(Ho):
                for q in range(Wo):
                    gv = g[b, c, h, q] * scale
                    for i in range(k):
                        for j in range(k):
                            dxp[b, c, h * stride + i, q * stride + j] += gv
    return dxp


@jit
def maxpool_fwd(xp, k, stride, Ho, Wo):
    """Returns (out, flat argmax offset i*k+j); the first maximum in row-major order wins."""
    B, C = xp.shape[0], xp.shape[1]
    out = np.empty((B, C, Ho, Wo))
    arg = np.empty((B, C, Ho, Wo), dtype=np.int64)
    for b in range(B):
        for c in range(C):
            for h in range(Ho):
                for q in range(Wo):
                    best = -np.inf
                    bi = 0
                    for i in range(k):
                        for j in range(k):
                            v = xp[b, c, h * stride + i, q * stride + j]
                            if v > best:
                                best = v
                                bi = i * k + j
                    out[b, c, h, q] = best
                    arg[b, c, h, q] = bi
    return out, arg


@jit
def maxpool_bwd(g, arg, k, stride, Hp, Wp):
    B, C, Ho, Wo = g.shape
    dxp = np.zeros((B, C, Hp, Wp))
    for b in range(B):
        for c in range(C):
            for h in range(Ho):
                for q in range(Wo):
                    a = arg[b, c, h, q]
                    dxp[b, c, h * stride + a // k, q * stride + a % k] += g[b, c, h, q]
    return dxp


@jit
def channel_moments(x):
    """Per-channel mean and biased variance over (N, H, W), two-pass."""
    B, C, H, W = x.shape
    n = B * H * W
    mu = np.zeros(C)
    var = np.zeros(C)
    for c in range(C):
        acc = 0.0
        for b in range(B):
            for h in range(H):
                for q in range(W):
                    acc += x[b, c, h, q]
        m = acc / n
        acc = 0.0
        for b in range(B):
            for h in range(H):
                for q in range(W):
                    d = x[b, c, h, q] - m
                    acc += d * d
        mu[c] = m
        var[c] = acc / n
    return mu, var


@jit
def affine_norm(x, mu, inv, gamma, beta):
    """Returns (gamma * xhat + beta, xhat) with xhat = (x - mu) * inv per channel."""
    B, C, H, W = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    for b in range(B):
        for c in range(C):
            m, s, gm, bt = mu[c], inv[c], gamma[c], beta[c]
            for h in range(H):
                for q in range(W):
                    v = (x[b, c, h, q] - m) * s
                    xhat[b, c, h, q] = v
                    out[b, c, h, q] = gm * v + bt
    return out, xhat


@jit
def bn_train_bwd(g, xhat, gamma, inv):
    B, C, H, W = g.shape
    n = B * H * W
    dx = np.empty_like(g)
    dgamma = np.zeros(C)
    dbeta = np.zeros(C)
    for c in range(C):
        sg = 0.0
        sgx = 0.0
        for b in range(B):
            for h in range(H):
                for q in range(W):
                    gv = g[b, c, h, q]
                    sg += gv
                    sgx += gv * xhat[b, c, h, q]
        dgamma[c] = sgx
        dbeta[c] = sg
        f = gamma[c] * inv[c] / n
        for b in range(B):
            for h in range(H):
                for q in range(W):
                    dx[b, c, h, q] = f * (n * g[b, c, h, q] - sg - xhat[b, c, h, q] * sgx)
    return dx, dgamma, dbeta
