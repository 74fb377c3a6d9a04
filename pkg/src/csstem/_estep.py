"""Compiled per-patch E-step for the BPFA engine.

For each patch the active set S of atoms is tracked together with the
Cholesky factor L of the weight posterior precision
``Lambda_S = gamma_w I + gamma_n Dt_S^T Dt_S`` (Dt is the dictionary
restricted to the observed pixels of the patch). Support indicators are
decided one atom at a time with the weights of the other active atoms
integrated out, which needs only triangular solves against L.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _fwd(L, s, x, out):
    # solve L out = x
    for a in range(s):
        acc = x[a]
        for b in range(a):
            acc -= L[a, b] * out[b]
        out[a] = acc / L[a, a]


@njit(cache=True)
def _bwd(L, s, x, out):
    # solve L^T out = x
    for a in range(s - 1, -1, -1):
        acc = x[a]
        for b in range(a + 1, s):
            acc -= L[b, a] * out[b]
        out[a] = acc / L[a, a]


@njit(cache=True)
def _factor(Dc, no, act, s, gn, gw, L):
    for a in range(s):
        ra = Dc[act[a]]
        for b in range(a + 1):
            rb = Dc[act[b]]
            acc = 0.0
            for j in range(no):
                acc += ra[j] * rb[j]
            v = gn * acc
            if a == b:
                v += gw
            for c in range(b):
                v -= L[a, c] * L[b, c]
            if a == b:
                # the Schur complement is >= gamma_w in exact arithmetic
                if v < gw:
                    v = gw
                L[a, a] = np.sqrt(v)
            else:
                L[a, b] = v / L[b, b]


@njit(cache=True)
def _mean(L, s, h, act, gn, tmp, mu):
    for a in range(s):
        tmp[a] = gn * h[act[a]]
    _fwd(L, s, tmp, mu)
    for a in range(s):
        tmp[a] = mu[a]
    _bwd(L, s, tmp, mu)


@njit(cache=True)
def estep(Y, M, D, gn, gw, logit_pi, Z, order, sample, U, XI, stats_b, stats_H, W, V, LO):
    """Update supports and weights of a batch of patches in place.

    Parameters
    ----------
    Y, M : (Nb, P) float arrays
        Zero-filled patch values and 0/1 observation flags.
    D : (P, K) dictionary, one atom per column.
    gn, gw : noise and weight precisions.
    logit_pi : (K,) log(pi / (1 - pi)).
    Z : (Nb, K) bool, current supports, overwritten.
    order : (K,) atom visiting order.
    sample : draw z and w from their conditionals instead of taking modes.
    U, XI : (Nb, K) uniform and standard normal variates used when sampling.
    stats_b, stats_H : (P, K) and (P, K, K) accumulators for
        sum_i y_ip E[w_i] and sum_i m_ip E[w_i w_i^T] over active atoms.
    W, V : (Nb, K) outputs, weights (posterior means or samples) and
        posterior variances (zero when sampling).
    LO : (Nb, K) output, the log odds used for each support decision.

    Returns
    -------
    logdet : sum over patches of log det Sigma_i (0 when sampling).
    n_active : total number of active (patch, atom) pairs.
    ew2 : sum over patches of E[||w_i||^2] restricted to active atoms.
    """
    Nb, P = Y.shape
    K = D.shape[1]
    logdet_sum = 0.0
    n_active = 0.0
    ew2 = 0.0
    DT = np.ascontiguousarray(D.T)
    Dc = np.empty((K, P))
    yo = np.empty(P)
    obs = np.empty(P, np.int64)
    h = np.empty(K)
    nk = np.empty(K)
    act = np.empty(K, np.int64)
    L = np.zeros((K, K))
    mu = np.zeros(K)
    tmp = np.zeros(K)
    lv = np.zeros(K)
    g = np.zeros(K)
    e = np.zeros(K)
    wa = np.zeros(K)
    Li = np.zeros((K, K))
    E = np.zeros((K, K))
    for i in range(Nb):
        # restrict the dictionary to the observed pixels of this patch
        no = 0
        for p in range(P):
            if M[i, p] > 0:
                obs[no] = p
                yo[no] = Y[i, p]
                no += 1
        for k in range(K):
            acc = 0.0
            acc2 = 0.0
            for j in range(no):
                v = DT[k, obs[j]]
                Dc[k, j] = v
                acc += v * yo[j]
                acc2 += v * v
            h[k] = acc
            nk[k] = acc2
        s = 0
        for k in range(K):
            if Z[i, k]:
                act[s] = k
                s += 1
        _factor(Dc, no, act, s, gn, gw, L)
        _mean(L, s, h, act, gn, tmp, mu)

        for oi in range(K):
            k = order[oi]
            q = -1
            for a in range(s):
                if act[a] == k:
                    q = a
            if q >= 0:
                # k is active: its marginal precision given the others is 1 / Sigma_qq
                for a in range(s):
                    e[a] = 0.0
                e[q] = 1.0
                _fwd(L, s, e, tmp)
                sqq = 0.0
                for a in range(s):
                    sqq += tmp[a] * tmp[a]
                lt = 1.0 / sqq
                if lt < gw:
                    lt = gw
                mk = mu[q]
                lo = logit_pi[k] + 0.5 * np.log(gw / lt) + 0.5 * lt * mk * mk
            else:
                gm = 0.0
                rk = Dc[k]
                for a in range(s):
                    acc = 0.0
                    ra = Dc[act[a]]
                    for j in range(no):
                        acc += ra[j] * rk[j]
                    g[a] = gn * acc
                    gm += acc * mu[a]
                _fwd(L, s, g, lv)
                ll = 0.0
                for a in range(s):
                    ll += lv[a] * lv[a]
                lt = gw + gn * nk[k] - ll
                if lt < gw:
                    lt = gw
                t = gn * (h[k] - gm)
                lo = logit_pi[k] + 0.5 * np.log(gw / lt) + 0.5 * t * t / lt
            LO[i, k] = lo
            if sample:
                znew = U[i, k] < 1.0 / (1.0 + np.exp(-lo))
            else:
                znew = lo > 0.0
            if q >= 0 and not znew:
                for a in range(q, s - 1):
                    act[a] = act[a + 1]
                s -= 1
                _factor(Dc, no, act, s, gn, gw, L)
                _mean(L, s, h, act, gn, tmp, mu)
            elif q < 0 and znew:
                # append one row to the Cholesky factor
                for a in range(s):
                    L[s, a] = lv[a]
                L[s, s] = np.sqrt(lt)
                act[s] = k
                s += 1
                _mean(L, s, h, act, gn, tmp, mu)

        for k in range(K):
            Z[i, k] = False
            W[i, k] = 0.0
            V[i, k] = 0.0
        if s == 0:
            continue
        # Sigma = L^-T L^-1
        for c in range(s):
            for a in range(s):
                e[a] = 0.0
            e[c] = 1.0
            _fwd(L, s, e, tmp)
            for a in range(s):
                Li[a, c] = tmp[a]
        for a in range(s):
            wa[a] = mu[a]
        if sample:
            for a in range(s):
                tmp[a] = XI[i, a]
            _bwd(L, s, tmp, e)
            for a in range(s):
                wa[a] += e[a]
        for a in range(s):
            for b in range(s):
                sab = 0.0
                for c in range(s):
                    sab += Li[c, a] * Li[c, b]
                E[a, b] = wa[a] * wa[b]
                if not sample:
                    E[a, b] += sab
            if not sample:
                V[i, act[a]] = E[a, a] - wa[a] * wa[a]
        if not sample:
            ld = 0.0
            for a in range(s):
                ld -= 2.0 * np.log(L[a, a])
            logdet_sum += ld
        n_active += s
        for a in range(s):
            Z[i, act[a]] = True
            W[i, act[a]] = wa[a]
            ew2 += E[a, a]
        for j in range(no):
            p = obs[j]
            yp = yo[j]
            for a in range(s):
                ka = act[a]
                stats_b[p, ka] += yp * wa[a]
                for b in range(s):
                    stats_H[p, ka, act[b]] += E[a, b]
    return logdet_sum, n_active, ew2
