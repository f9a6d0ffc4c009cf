"""Pure-numpy versions of the lattice kernels (same signatures as ``kernels_numba``).

Each step is vectorized across edit states with batched matmuls and
``np.add.at`` scatters over the successor edge list.
"""

import numpy as np

NK = 12
NS = 9


def _edges(ptr, idx):
    src = np.repeat(np.arange(len(ptr) - 1), np.diff(ptr))
    return src, idx


def _fwd_transform(a, MKg, MSg):
    # a: (n, 12, 9); MKg: (n, 12, 12); MSg: (n, 9, 9)
    return np.matmul(np.matmul(MKg.transpose(0, 2, 1), a), MSg)


def _bwd_transform(d, MKg, MSg):
    return np.matmul(np.matmul(MKg, d), MSg.transpose(0, 2, 1))


def forward(pf, rf, pi, MK, MS, ck, cs, ptr, idx, ep, alpha, scale, ops):
    T, E = pf.shape[0], pf.shape[1]
    src, dst = _edges(ptr, idx)
    alpha[0] = pi * pf[0][:, :, None] * rf[0][:, None, :]
    ops[0] += E * NK * NS
    total = alpha[0].sum()
    if total <= 0.0:
        scale[0] = 0.0
        return 0
    scale[0] = total
    alpha[0] /= total
    for t in range(1, T):
        prev = alpha[t - 1]
        alive = np.flatnonzero(prev.reshape(E, -1).any(axis=1))
        g = np.zeros((E, NK, NS))
        g[alive] = _fwd_transform(prev[alive], MK[ck[alive]], MS[cs[alive]])
        ops[0] += len(alive) * (NK * NS * NS + NK * NK * NS)
        keep = np.isin(src, alive)
        new = np.zeros((E, NK, NS))
        np.add.at(new, dst[keep], ep[keep][:, None, None] * g[src[keep]])
        ops[0] += int(keep.sum()) * NK * NS + E * NK * NS
        new *= pf[t][:, :, None] * rf[t][:, None, :]
        total = new.sum()
        alpha[t] = new
        if total <= 0.0:
            scale[t] = 0.0
            return t
        scale[t] = total
        alpha[t] /= total
    return T


def backward(pf, rf, MK, MS, ck, cs, ptr, idx, ep, beta, scale):
    T, E = pf.shape[0], pf.shape[1]
    src, dst = _edges(ptr, idx)
    beta[T - 1] = 1.0
    scale[T - 1] = 1.0
    MKg, MSg = MK[ck], MS[cs]
    for t in range(T - 2, -1, -1):
        delta = pf[t + 1][:, :, None] * rf[t + 1][:, None, :] * beta[t + 1]
        d = np.zeros((E, NK, NS))
        np.add.at(d, src, ep[:, None, None] * delta[dst])
        out = _bwd_transform(d, MKg, MSg)
        total = out.sum()
        if total <= 0.0:
            beta[t] = 0.0
            scale[t] = 0.0
            return False
        scale[t] = total
        beta[t] = out / total
    return True


def viterbi(lpf, lrf, lpi, lMK, lMS, ck, cs, ptr, idx, lep, floor, logf, tol, V, bx, bk, bs):
    T, E = lpf.shape[0], lpf.shape[1]
    src, dst = _edges(ptr, idx)
    # in-edge table padded to the max in-degree
    order = np.argsort(dst, kind="stable")
    indeg = np.bincount(dst, minlength=E)
    width = max(int(indeg.max()) if len(indeg) else 0, 1)
    slot = np.full((E, width), -1, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(indeg)[:-1]])
    for r, j in enumerate(order):
        y = dst[j]
        slot[y, r - starts[y]] = j
    lMKg, lMSg = lMK[ck], lMS[cs]
    V[0] = lpi + lpf[0][:, :, None] + lrf[0][:, None, :]
    for t in range(T):
        if t > 0:
            prev = V[t - 1]
            # m1[x, k, s2] = max_s prev[x, k, s] + MS[x, s, s2]
            c1 = prev[:, :, :, None] + lMSg[:, None, :, :]
            bs[t] = np.argmax(c1, axis=2)
            m1 = np.max(c1, axis=2)
            # m2[x, k2, s2] = max_k MK[x, k, k2] + m1[x, k, s2]
            c2 = lMKg[:, :, :, None] + m1[:, :, None, :]
            bk[t] = np.argmax(c2, axis=1)
            m2 = np.max(c2, axis=1)
            cand = np.full((E, width, NK, NS), -np.inf)
            valid = slot >= 0
            jj = slot[valid]
            cand[valid] = lep[jj][:, None, None] + m2[src[jj]]
            best_slot = np.argmax(cand, axis=1)
            cur = np.max(cand, axis=1)
            chosen = np.take_along_axis(slot[:, :, None, None].repeat(NK, 2).repeat(NS, 3), best_slot[:, None], axis=1)[:, 0]
            bx[t] = np.where(chosen >= 0, src[np.maximum(chosen, 0)], 0)
            V[t] = cur + lpf[t][:, :, None] + lrf[t][:, None, :]
        rem = T - 1 - t
        bound = rem * logf if rem > 0 else 0.0
        with np.errstate(invalid="ignore"):
            drop = V[t] + bound < floor - tol
        V[t][drop] = -np.inf
        if not np.isfinite(V[t]).any():
            return t
    return T


def counts(alpha, beta, gfac, xfac, pf, rf, dP, dR, MK, MS, ck, cs, cp, cr, ptr, idx, ep, cls,
           cE, chain, cK, cS, rowmass, cP, cR):
    T, E = alpha.shape[0], alpha.shape[1]
    src, dst = _edges(ptr, idx)
    kk = np.arange(NK)
    dK = (kk[None, :] - kk[:, None] + 5) % NK  # (k, k2) -> modulation bin
    ss = np.arange(NS)
    dS = ss[None, :] - ss[:, None] + 4  # (s, s2) -> tempo bin
    for t in range(T):
        g = alpha[t] * beta[t] * gfac[t]
        gp = g.sum(axis=2)  # (E, 12)
        np.add.at(cP, (np.broadcast_to(cp[:, None], dP[t].shape), dP[t]), gp)
        gr = g.sum(axis=1)  # (E, 9)
        ok = dR[t] >= 0
        np.add.at(cR, (np.broadcast_to(cr[:, None], ok.shape)[ok], dR[t][ok]), gr[ok])
    MKg, MSg = MK[ck], MS[cs]
    for t in range(T - 1):
        f = xfac[t]
        a = alpha[t]
        delta = pf[t + 1][:, :, None] * rf[t + 1][:, None, :] * beta[t + 1]
        G = _fwd_transform(a, MKg, MSg)
        w = ep * np.einsum("jks,jks->j", G[src], delta[dst]) * f
        reg = cls[dst] >= 0
        np.add.at(cE, (src[reg], cls[dst[reg]]), w[reg])
        chain[0] += w[~reg].sum()
        D = np.zeros((E, NK, NS))
        np.add.at(D, src, ep[:, None, None] * delta[dst])
        # modulation
        H = np.einsum("xsq,xkq->xsk", MSg, D)
        W = np.einsum("xks,xsq->xkq", a, H)
        contrib = f * MKg * W
        for x in range(E):
            np.add.at(cK[ck[x]], dK, contrib[x])
        # tempo
        Jm = np.einsum("xkq,xqs->xks", MKg, D)
        Vm = np.einsum("xks,xkq->xsq", a, Jm)
        m = f * MSg * Vm
        np.add.at(rowmass, cs, m.sum(axis=2))
        inr = np.abs(dS - 4) <= 4
        for x in range(E):
            np.add.at(cS[cs[x]], dS[inr], m[x][inr])
    return None
