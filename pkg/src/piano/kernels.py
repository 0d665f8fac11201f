"""Whole-rollout forward and backpropagation-through-time kernels.

A rollout over ``M`` steps expressed with the per-step primitives records a
dozen tape nodes per step and allocates fresh temporaries for each. These
kernels run the same recurrence with preallocated per-step buffers and
register the whole rollout as a single tape node whose adjoint is a
hand-written reverse sweep. Weight gradients are accumulated with one matrix
product over all time steps at the end of the sweep.

The per-step path in :mod:`piano.model` remains the reference; the test-suite
checks both agree in values and gradients.
"""

from __future__ import annotations

import numpy as np

from .numerics import LN_EPS, _record, _sigmoid


def _silu_grad(z, s):
    return s * (1.0 + z * (1.0 - s))


class _Probe:
    """Embedding input and two-layer probe shared by all recurrent backbones."""

    def __init__(self, P, n, M, k):
        self.We, self.be = P["embed.W"].data, P["embed.b"].data
        self.W1, self.b1 = P["probe.W1"].data, P["probe.b1"].data
        self.W2, self.b2 = P["probe.W2"].data, P["probe.b2"].data
        self.S = np.empty((M, n, self.We.shape[0]))
        self.Mm = np.empty((M, n, k))
        self.O = np.empty((M, n, k))
        self.Q = np.empty((M, n, k))
        self.Sq = np.empty((M, n, k))
        self.Aq = np.empty((M, n, k))

    def embed(self, j, x, t, u_prev):
        s = self.S[j]
        s[:, 0] = x
        s[:, 1] = t
        s[:, 2] = u_prev
        m = self.Mm[j]
        np.matmul(s, self.We, out=m)
        m += self.be
        return m

    def decode(self, j):
        q = self.Q[j]
        np.matmul(self.O[j], self.W1, out=q)
        q += self.b1
        sq = self.Sq[j]
        sq[...] = _sigmoid(q)
        a = self.Aq[j]
        np.multiply(q, sq, out=a)
        return (a @ self.W2)[:, 0] + self.b2[0]

    def back_decode(self, j, du, dQ):
        dq = dQ[j]
        np.multiply(np.outer(du, self.W2[:, 0]), _silu_grad(self.Q[j], self.Sq[j]), out=dq)
        return dq @ self.W1.T

    def back_embed(self, dm):
        return dm @ self.We[2]

    def weight_grads(self, dU, dQ, dMm):
        k = self.O.shape[-1]
        flat = lambda a: a.reshape(-1, a.shape[-1])
        return {
            "probe.W2": flat(self.Aq).T @ dU.reshape(-1, 1),
            "probe.b2": np.array([dU.sum()]),
            "probe.W1": flat(self.O).T @ flat(dQ),
            "probe.b1": dQ.reshape(-1, k).sum(axis=0),
            "embed.W": flat(self.S).T @ flat(dMm),
            "embed.b": dMm.reshape(-1, k).sum(axis=0),
        }


def _ssm(P, x, times, ic, offsets):
    n, M = x.shape[0], times.shape[0] - 1
    k = P["ssm.A"].shape[0]
    A, C = P["ssm.A"].data, P["ssm.C"].data
    BD = np.concatenate([P["ssm.B"].data, P["ssm.D"].data], axis=1)
    gain, bias = P["ssm.ln_gain"].data, P["ssm.ln_bias"].data
    pr = _Probe(P, n, M, k)
    H = np.zeros((M + 1, n, k))          # H[j] is the state after step j; H[0] = 0
    Xh = np.empty((M, n, k))
    Inv = np.empty((M, n, 1))
    Y = np.empty((M, n, k))
    Sy = np.empty((M, n, k))
    U = np.empty((n, M + 1))
    U[:, 0] = ic + offsets[:, 0]
    rk = 1.0 / k
    for j in range(M):
        m = pr.embed(j, x, times[j + 1], U[:, j])
        mbd = m @ BD
        pre = H[j] @ A
        pre += mbd[:, :k]
        pre -= pre.sum(axis=1, keepdims=True) * rk
        inv = Inv[j]
        np.sqrt(np.einsum("ij,ij->i", pre, pre)[:, None] * rk + LN_EPS, out=inv)
        np.divide(1.0, inv, out=inv)
        xh = Xh[j]
        np.multiply(pre, inv, out=xh)
        y = Y[j]
        np.multiply(xh, gain, out=y)
        y += bias
        sy = Sy[j]
        sy[...] = _sigmoid(y)
        np.multiply(y, sy, out=H[j + 1])
        o = pr.O[j]
        np.matmul(H[j + 1], C, out=o)
        o += mbd[:, k:]
        o += m
        U[:, j + 1] = pr.decode(j) + offsets[:, j + 1]
        if not np.all(np.isfinite(U[:, j + 1])):
            return U, j + 1, None

    def back(gU):
        dU = np.ascontiguousarray(gU[:, 1:].T)   # (M, n)
        dQ = np.empty((M, n, k))
        dMm = np.empty((M, n, k))
        dPre = np.empty((M, n, k))
        dO = np.empty((M, n, k))
        dY = np.empty((M, n, k))
        dh = np.zeros((n, k))
        du_next = np.zeros(n)
        for j in range(M - 1, -1, -1):
            du = dU[j]
            du += du_next
            do = pr.back_decode(j, du, dQ)
            dO[j] = do
            dh += do @ C.T
            dy = dY[j]
            np.multiply(dh, _silu_grad(Y[j], Sy[j]), out=dy)
            gx = dy * gain
            xh = Xh[j]
            dpre = dPre[j]
            np.subtract(gx, gx.sum(axis=1, keepdims=True) * rk, out=dpre)
            dpre -= xh * (np.einsum("ij,ij->i", gx, xh)[:, None] * rk)
            dpre *= Inv[j]
            dm = dMm[j]
            np.matmul(dpre, BD[:, :k].T, out=dm)
            dm += do @ BD[:, k:].T
            dm += do
            dh = dpre @ A.T
            du_next = pr.back_embed(dm)
        flat = lambda a: a.reshape(-1, k)
        grads = pr.weight_grads(dU, dQ, dMm)
        dBD = flat(pr.Mm).T @ np.concatenate([flat(dPre), flat(dO)], axis=1)
        grads.update({
            "ssm.A": flat(H[:-1]).T @ flat(dPre),
            "ssm.B": dBD[:, :k],
            "ssm.D": dBD[:, k:],
            "ssm.C": flat(H[1:]).T @ flat(dO),
            "ssm.ln_gain": np.einsum("tij,tij->j", dY, Xh),
            "ssm.ln_bias": dY.reshape(-1, k).sum(axis=0),
        })
        return grads

    return U, None, back


def _gru(P, x, times, ic, offsets):
    n, M = x.shape[0], times.shape[0] - 1
    k = P["gru.U_n"].shape[0]
    W, b = P["gru.W"].data, P["gru.b"].data
    Uzr, Un = P["gru.U_zr"].data, P["gru.U_n"].data
    pr = _Probe(P, n, M, k)
    H = np.zeros((M + 1, n, k))
    ZR = np.empty((M, n, 2 * k))
    N = np.empty((M, n, k))
    RH = np.empty((M, n, k))
    U = np.empty((n, M + 1))
    U[:, 0] = ic + offsets[:, 0]
    for j in range(M):
        m = pr.embed(j, x, times[j + 1], U[:, j])
        hp = H[j]
        gx = m @ W
        gx += b
        zr = ZR[j]
        zr[...] = _sigmoid(gx[:, :2 * k] + hp @ Uzr)
        rh = RH[j]
        np.multiply(zr[:, k:], hp, out=rh)
        nn = N[j]
        np.tanh(gx[:, 2 * k:] + rh @ Un, out=nn)
        h = H[j + 1]
        np.subtract(hp, nn, out=h)
        h *= zr[:, :k]
        h += nn
        pr.O[j] = h
        U[:, j + 1] = pr.decode(j) + offsets[:, j + 1]
        if not np.all(np.isfinite(U[:, j + 1])):
            return U, j + 1, None

    def back(gU):
        dU = np.ascontiguousarray(gU[:, 1:].T)
        dQ = np.empty((M, n, k))
        dMm = np.empty((M, n, k))
        dGX = np.empty((M, n, 3 * k))
        dh = np.zeros((n, k))
        du_next = np.zeros(n)
        for j in range(M - 1, -1, -1):
            du = dU[j]
            du += du_next
            g = dh + pr.back_decode(j, du, dQ)
            zr, nn, hp = ZR[j], N[j], H[j]
            z, r = zr[:, :k], zr[:, k:]
            dgx = dGX[j]
            da = dgx[:, 2 * k:]
            np.multiply(g * (1.0 - z), 1.0 - nn * nn, out=da)
            drh = da @ Un.T
            dzr = dgx[:, :2 * k]
            dzr[:, :k] = g * (hp - nn)
            dzr[:, k:] = drh * hp
            dzr *= zr * (1.0 - zr)
            dm = dMm[j]
            np.matmul(dgx, W.T, out=dm)
            dh = g * z + drh * r + dzr @ Uzr.T
            du_next = pr.back_embed(dm)
        grads = pr.weight_grads(dU, dQ, dMm)
        flat_h = H[:-1].reshape(-1, k)
        flat_g = dGX.reshape(-1, 3 * k)
        grads.update({
            "gru.W": pr.Mm.reshape(-1, k).T @ flat_g,
            "gru.b": flat_g.sum(axis=0),
            "gru.U_zr": flat_h.T @ flat_g[:, :2 * k],
            "gru.U_n": RH.reshape(-1, k).T @ flat_g[:, 2 * k:],
        })
        return grads

    return U, None, back


def _mlp(P, x, times, ic, offsets):
    n, M = x.shape[0], times.shape[0] - 1
    W, b = P["mlp.W"].data, P["mlp.b"].data
    k = W.shape[1]
    Wh, Wm = W[:k], W[k:]
    pr = _Probe(P, n, M, k)
    H = np.zeros((M + 1, n, k))
    Z = np.empty((M, n, k))
    Sz = np.empty((M, n, k))
    U = np.empty((n, M + 1))
    U[:, 0] = ic + offsets[:, 0]
    for j in range(M):
        m = pr.embed(j, x, times[j + 1], U[:, j])
        z = Z[j]
        np.matmul(H[j], Wh, out=z)
        z += m @ Wm
        z += b
        sz = Sz[j]
        sz[...] = _sigmoid(z)
        np.multiply(z, sz, out=H[j + 1])
        pr.O[j] = H[j + 1]
        U[:, j + 1] = pr.decode(j) + offsets[:, j + 1]
        if not np.all(np.isfinite(U[:, j + 1])):
            return U, j + 1, None

    def back(gU):
        dU = np.ascontiguousarray(gU[:, 1:].T)
        dQ = np.empty((M, n, k))
        dMm = np.empty((M, n, k))
        dZ = np.empty((M, n, k))
        dh = np.zeros((n, k))
        du_next = np.zeros(n)
        for j in range(M - 1, -1, -1):
            du = dU[j]
            du += du_next
            g = dh + pr.back_decode(j, du, dQ)
            dz = dZ[j]
            np.multiply(g, _silu_grad(Z[j], Sz[j]), out=dz)
            dm = dMm[j]
            np.matmul(dz, Wm.T, out=dm)
            dh = dz @ Wh.T
            du_next = pr.back_embed(dm)
        grads = pr.weight_grads(dU, dQ, dMm)
        flat_z = dZ.reshape(-1, k)
        inputs = np.concatenate([H[:-1].reshape(-1, k), pr.Mm.reshape(-1, k)], axis=1)
        grads.update({"mlp.W": inputs.T @ flat_z, "mlp.b": flat_z.sum(axis=0)})
        return grads

    return U, None, back


_KERNELS = {"ssm": _ssm, "gru": _gru, "mlp": _mlp}


def fused_rollout(model, x, times, ic, offsets=None):
    """Run the recurrent rollout of ``model`` as one tape node.

    Returns ``(field, failed_step)``; ``failed_step`` is the first time index
    with a non-finite value, or ``None``.
    """
    names = list(model.params)
    params = tuple(model.params[name] for name in names)
    n = x.shape[0]
    if offsets is None:
        offsets = np.zeros((n, times.shape[0]))
    U, failed, back = _KERNELS[model.backbone](model.params, x, times, ic, offsets)
    if failed is not None:
        return _record(U, (), None), failed

    def adjoint(g):
        grads = back(g)
        return tuple(grads[name] for name in names)

    return _record(U, params, adjoint), None
