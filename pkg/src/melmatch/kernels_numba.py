"""Numba kernels for the lattice recursions.

All kernels work on the factored transition structure: for a source edit
state ``x`` the 108 cluster states form a 12 x 9 block, and the cluster part
of every transition out of ``x`` is ``MK[ctx_k[x]] (x) MS[ctx_s[x]]``. One
separable transform per source edit state replaces the 108 x 108 products of
the naive recursion; it is shared by every successor edge of ``x``.

Arrays:
    pf  (T, E, 12)   pitch emission factor per step / edit state / transposition
    rf  (T, E, 9)    rhythm emission factor per step / edit state / tempo
    MK  (cK, 12, 12) modulation matrices, MS (cS, 9, 9) tempo matrices
    ptr, idx, ep     successor CSR and per-edge edit probability
"""

import numpy as np
from numba import njit

NK = 12
NS = 9

_opts = dict(cache=True, nogil=True)


@njit(**_opts)
def _fwd_transform(a, MK, MS, u, out):
    # out[k2, s2] = sum_k sum_s a[k, s] MK[k, k2] MS[s, s2]
    for k in range(NK):
        for s2 in range(NS):
            acc = 0.0
            for s in range(NS):
                acc += a[k, s] * MS[s, s2]
            u[k, s2] = acc
    for k2 in range(NK):
        for s2 in range(NS):
            acc = 0.0
            for k in range(NK):
                acc += MK[k, k2] * u[k, s2]
            out[k2, s2] = acc


@njit(**_opts)
def _bwd_transform(d, MK, MS, u, out):
    # out[k, s] = sum_k2 sum_s2 MK[k, k2] MS[s, s2] d[k2, s2]
    for k2 in range(NK):
        for s in range(NS):
            acc = 0.0
            for s2 in range(NS):
                acc += d[k2, s2] * MS[s, s2]
            u[k2, s] = acc
    for k in range(NK):
        for s in range(NS):
            acc = 0.0
            for k2 in range(NK):
                acc += MK[k, k2] * u[k2, s]
            out[k, s] = acc


@njit(**_opts)
def forward(pf, rf, pi, MK, MS, ck, cs, ptr, idx, ep, alpha, scale, ops):
    """Scaled forward pass. Returns the number of steps with non-zero mass."""
    T = pf.shape[0]
    E = pf.shape[1]
    alive = np.zeros(E, dtype=np.bool_)
    u = np.empty((NK, NS))
    g = np.empty((NK, NS))
    total = 0.0
    for e in range(E):
        for k in range(NK):
            for s in range(NS):
                v = pi[e, k, s] * pf[0, e, k] * rf[0, e, s]
                alpha[0, e, k, s] = v
                total += v
    ops[0] += E * NK * NS
    if total <= 0.0:
        scale[0] = 0.0
        return 0
    scale[0] = total
    for e in range(E):
        nz = False
        for k in range(NK):
            for s in range(NS):
                alpha[0, e, k, s] /= total
                if alpha[0, e, k, s] != 0.0:
                    nz = True
        alive[e] = nz
    for t in range(1, T):
        for e in range(E):
            for k in range(NK):
                for s in range(NS):
                    alpha[t, e, k, s] = 0.0
        for x in range(E):
            if not alive[x]:
                continue
            _fwd_transform(alpha[t - 1, x], MK[ck[x]], MS[cs[x]], u, g)
            ops[0] += NK * NS * NS + NK * NK * NS
            for j in range(ptr[x], ptr[x + 1]):
                y = idx[j]
                p = ep[j]
                for k in range(NK):
                    for s in range(NS):
                        alpha[t, y, k, s] += p * g[k, s]
                ops[0] += NK * NS
        total = 0.0
        for e in range(E):
            nz = False
            for k in range(NK):
                pk = pf[t, e, k]
                for s in range(NS):
                    v = alpha[t, e, k, s] * pk * rf[t, e, s]
                    alpha[t, e, k, s] = v
                    total += v
                    if v != 0.0:
                        nz = True
            alive[e] = nz
        ops[0] += E * NK * NS
        if total <= 0.0:
            scale[t] = 0.0
            return t
        scale[t] = total
        for e in range(E):
            if alive[e]:
                for k in range(NK):
                    for s in range(NS):
                        alpha[t, e, k, s] /= total
    return T


@njit(**_opts)
def backward(pf, rf, MK, MS, ck, cs, ptr, idx, ep, beta, scale):
    """Scaled backward pass; ``beta[t]`` is normalized to sum 1 with factor ``scale[t]``.

    ``scale[T-1]`` is 1 (beta_T = 1). Returns False if every beta vanished.
    """
    T = pf.shape[0]
    E = pf.shape[1]
    delta = np.empty((E, NK, NS))
    dz = np.zeros(E, dtype=np.bool_)
    d = np.empty((NK, NS))
    u = np.empty((NK, NS))
    out = np.empty((NK, NS))
    for e in range(E):
        for k in range(NK):
            for s in range(NS):
                beta[T - 1, e, k, s] = 1.0
    scale[T - 1] = 1.0
    for t in range(T - 2, -1, -1):
        for y in range(E):
            nz = False
            for k in range(NK):
                pk = pf[t + 1, y, k]
                for s in range(NS):
                    v = pk * rf[t + 1, y, s] * beta[t + 1, y, k, s]
                    delta[y, k, s] = v
                    if v != 0.0:
                        nz = True
            dz[y] = not nz
        total = 0.0
        for x in range(E):
            any_succ = False
            for k in range(NK):
                for s in range(NS):
                    d[k, s] = 0.0
            for j in range(ptr[x], ptr[x + 1]):
                y = idx[j]
                if dz[y]:
                    continue
                any_succ = True
                p = ep[j]
                for k in range(NK):
                    for s in range(NS):
                        d[k, s] += p * delta[y, k, s]
            if not any_succ:
                for k in range(NK):
                    for s in range(NS):
                        beta[t, x, k, s] = 0.0
                continue
            _bwd_transform(d, MK[ck[x]], MS[cs[x]], u, out)
            for k in range(NK):
                for s in range(NS):
                    beta[t, x, k, s] = out[k, s]
                    total += out[k, s]
        if total <= 0.0:
            scale[t] = 0.0
            return False
        scale[t] = total
        for x in range(E):
            for k in range(NK):
                for s in range(NS):
                    beta[t, x, k, s] /= total
    return True


@njit(**_opts)
def viterbi(lpf, lrf, lpi, lMK, lMS, ck, cs, ptr, idx, lep, floor, logf, tol, V, bx, bk, bs):
    """Log-space Viterbi with optional branch-and-bound pruning.

    A state is dropped at step t when ``V + (T-1-t) * logf < floor - tol``.
    Returns the number of steps completed with a live state (T when finished).
    """
    T = lpf.shape[0]
    E = lpf.shape[1]
    ninf = -np.inf
    alive = np.zeros(E, dtype=np.bool_)
    m1 = np.empty((NK, NS))
    m2 = np.empty((NK, NS))
    for e in range(E):
        for k in range(NK):
            for s in range(NS):
                V[0, e, k, s] = lpi[e, k, s] + lpf[0, e, k] + lrf[0, e, s]
    for t in range(T):
        if t > 0:
            for e in range(E):
                for k in range(NK):
                    for s in range(NS):
                        V[t, e, k, s] = ninf
            for x in range(E):
                if not alive[x]:
                    continue
                Vx = V[t - 1, x]
                MS = lMS[cs[x]]
                MK = lMK[ck[x]]
                for k in range(NK):
                    for s2 in range(NS):
                        best = ninf
                        arg = 0
                        for s in range(NS):
                            v = Vx[k, s] + MS[s, s2]
                            if v > best:
                                best = v
                                arg = s
                        m1[k, s2] = best
                        bs[t, x, k, s2] = arg
                for k2 in range(NK):
                    for s2 in range(NS):
                        best = ninf
                        arg = 0
                        for k in range(NK):
                            v = MK[k, k2] + m1[k, s2]
                            if v > best:
                                best = v
                                arg = k
                        m2[k2, s2] = best
                        bk[t, x, k2, s2] = arg
                for j in range(ptr[x], ptr[x + 1]):
                    y = idx[j]
                    p = lep[j]
                    for k in range(NK):
                        for s in range(NS):
                            v = p + m2[k, s]
                            if v > V[t, y, k, s]:
                                V[t, y, k, s] = v
                                bx[t, y, k, s] = x
            for e in range(E):
                for k in range(NK):
                    for s in range(NS):
                        V[t, e, k, s] += lpf[t, e, k] + lrf[t, e, s]
        rem = T - 1 - t
        bound = 0.0
        if rem > 0:
            bound = rem * logf
        any_alive = False
        for e in range(E):
            nz = False
            for k in range(NK):
                for s in range(NS):
                    v = V[t, e, k, s]
                    if v == ninf:
                        continue
                    if v + bound < floor - tol:
                        V[t, e, k, s] = ninf
                    else:
                        nz = True
            alive[e] = nz
            if nz:
                any_alive = True
        if not any_alive:
            return t
    return T


@njit(**_opts)
def counts(alpha, beta, gfac, xfac, pf, rf, dP, dR, MK, MS, ck, cs, cp, cr, ptr, idx, ep, cls,
           cE, chain, cK, cS, rowmass, cP, cR):
    """Accumulate tied expected counts from scaled forward/backward tables.

    gamma_t = alpha_hat * beta_hat * gfac[t]; xi_t uses xfac[t]. Edit counts
    are kept per source edit state ``cE[x, class]``; ``rowmass[c, s]`` is the
    transition mass leaving tempo index ``s`` in tempo context ``c``.
    """
    T = alpha.shape[0]
    E = alpha.shape[1]
    delta = np.empty((E, NK, NS))
    u = np.empty((NK, NS))
    G = np.empty((NK, NS))
    D = np.empty((NK, NS))
    H = np.empty((NS, NK))
    J = np.empty((NK, NS))
    rowtot = np.empty(NS)
    for t in range(T):
        f = gfac[t]
        for e in range(E):
            for k in range(NK):
                acc = 0.0
                for s in range(NS):
                    acc += alpha[t, e, k, s] * beta[t, e, k, s]
                if acc != 0.0:
                    cP[cp[e], dP[t, e, k]] += acc * f
            for s in range(NS):
                r = dR[t, e, s]
                if r < 0:
                    continue
                acc = 0.0
                for k in range(NK):
                    acc += alpha[t, e, k, s] * beta[t, e, k, s]
                if acc != 0.0:
                    cR[cr[e], r] += acc * f
    for t in range(T - 1):
        f = xfac[t]
        for y in range(E):
            for k in range(NK):
                for s in range(NS):
                    delta[y, k, s] = pf[t + 1, y, k] * rf[t + 1, y, s] * beta[t + 1, y, k, s]
        for x in range(E):
            nz = False
            for k in range(NK):
                for s in range(NS):
                    if alpha[t, x, k, s] != 0.0:
                        nz = True
            if not nz:
                continue
            a = alpha[t, x]
            MKx = MK[ck[x]]
            MSx = MS[cs[x]]
            _fwd_transform(a, MKx, MSx, u, G)
            for k in range(NK):
                for s in range(NS):
                    D[k, s] = 0.0
            tot = 0.0
            for j in range(ptr[x], ptr[x + 1]):
                y = idx[j]
                p = ep[j]
                w = 0.0
                for k in range(NK):
                    for s in range(NS):
                        w += G[k, s] * delta[y, k, s]
                        D[k, s] += p * delta[y, k, s]
                w *= p * f
                tot += w
                if cls[y] >= 0:
                    cE[x, cls[y]] += w
                else:
                    chain[0] += w
            if tot == 0.0:
                continue
            # modulation: W[k, k2] = sum_s a[k, s] sum_s2 MS[s, s2] D[k2, s2]
            for s in range(NS):
                for k2 in range(NK):
                    acc = 0.0
                    for s2 in range(NS):
                        acc += MSx[s, s2] * D[k2, s2]
                    H[s, k2] = acc
            for k in range(NK):
                for k2 in range(NK):
                    acc = 0.0
                    for s in range(NS):
                        acc += a[k, s] * H[s, k2]
                    if acc != 0.0:
                        di = ((k2 - k + 5) % NK + NK) % NK
                        cK[ck[x], di] += f * MKx[k, k2] * acc
            # tempo: V[s, s2] = sum_k a[k, s] sum_k2 MK[k, k2] D[k2, s2]
            for k in range(NK):
                for s2 in range(NS):
                    acc = 0.0
                    for k2 in range(NK):
                        acc += MKx[k, k2] * D[k2, s2]
                    J[k, s2] = acc
            for s in range(NS):
                rowtot[s] = 0.0
                for s2 in range(NS):
                    acc = 0.0
                    for k in range(NK):
                        acc += a[k, s] * J[k, s2]
                    m = f * MSx[s, s2] * acc
                    if m != 0.0:
                        cS[cs[x], s2 - s + 4] += m
                        rowtot[s] += m
            for s in range(NS):
                rowmass[cs[x], s] += rowtot[s]
