"""Compiled inner loops for the forward-backward pass and the M-step objective."""

import math

import numpy as np
from numba import literally, njit, objmode

PROB_FLOOR = 1e-300


@njit(cache=True)
def log_bernoulli(y, eta):
    """log P(y | eta) under a logit link, stable for any |eta|."""
    s = eta if y == 1 else -eta
    if s >= 0.0:
        return -math.log1p(math.exp(-s))
    return s - math.log1p(math.exp(s))


@njit(cache=True)
def emission_logprob(y, xb, alpha):
    n, T = y.shape
    k = alpha.shape[0]
    out = np.empty((n, T, k))
    for i in range(n):
        for t in range(T):
            for u in range(k):
                out[i, t, u] = log_bernoulli(y[i, t], alpha[u] + xb[i, t])
    return out


@njit(cache=True)
def forward_backward(logB, pi, Pi):
    """Scaled recursions; returns (z, zz, per-subject log-likelihood)."""
    n, T, k = logB.shape
    z = np.empty((n, T, k))
    zz = np.zeros((n, k, k))
    ll = np.empty(n)
    B = np.empty((T, k))
    a = np.empty((T, k))
    b = np.empty((T, k))
    c = np.empty(T)
    for i in range(n):
        shift_sum = 0.0
        for t in range(T):
            m = logB[i, t, 0]
            for u in range(1, k):
                if logB[i, t, u] > m:
                    m = logB[i, t, u]
            shift_sum += m
            for u in range(k):
                B[t, u] = math.exp(logB[i, t, u] - m)
        tot = 0.0
        for u in range(k):
            a[0, u] = pi[u] * B[0, u]
            tot += a[0, u]
        tot = max(tot, PROB_FLOOR)
        c[0] = tot
        for u in range(k):
            a[0, u] /= tot
        for t in range(1, T):
            tot = 0.0
            for u in range(k):
                acc = 0.0
                for v in range(k):
                    acc += a[t - 1, v] * Pi[v, u]
                a[t, u] = acc * B[t, u]
                tot += a[t, u]
            tot = max(tot, PROB_FLOOR)
            c[t] = tot
            for u in range(k):
                a[t, u] /= tot
        for u in range(k):
            b[T - 1, u] = 1.0
        for t in range(T - 2, -1, -1):
            for v in range(k):
                acc = 0.0
                for u in range(k):
                    acc += Pi[v, u] * B[t + 1, u] * b[t + 1, u]
                b[t, v] = acc / c[t + 1]
        logc = 0.0
        # normalizers are multiplied up and logged in batches
        cprod = 1.0
        for t in range(T):
            logc += math.log(c[t])
            s = 0.0
            for u in range(k):
                z[i, t, u] = a[t, u] * b[t, u]
                s += z[i, t, u]
            for u in range(k):
                z[i, t, u] /= s
        for t in range(1, T):
            for v in range(k):
                av = a[t - 1, v] / c[t]
                for u in range(k):
                    zz[i, v, u] += av * Pi[v, u] * B[t, u] * b[t, u]
        ll[i] = logc + shift_sum
    return z, zz, ll


def _vector_exp_log1p(A, E, L, P):
    """E = exp(-|A|), L = log1p(E) and P = 1 / (1 + E) with numpy ufuncs; overwrites A."""
    np.abs(A, out=A)
    np.negative(A, out=A)
    np.exp(A, out=E)
    np.log1p(E, out=L)
    np.add(E, 1.0, out=A)
    np.divide(1.0, A, out=P)


@njit(cache=True)
def _fill_exp(xb, alpha, A, E, L, P, k):
    """Fill E, L and P for eta = alpha_u + xb_r, using A as scratch.

    The transcendentals dominate the M-step; numpy evaluates them with SIMD
    instructions, several times faster than the scalar libm calls here.
    """
    N = xb.shape[0]
    for r in range(N):
        for u in range(k):
            A[r, u] = alpha[u] + xb[r]
    with objmode():
        _vector_exp_log1p(A, E, L, P)


@njit(cache=True)
def _weighted_logit_flat(y, x, z, alpha, beta, lam, want_derivs, g, H, WV, RS, XW, E, L, P, reuse, k):
    """Penalized weighted logit objective on flattened (N, .) arrays.

    ``E``, ``L`` and ``P`` hold ``exp(-|eta|)``, its ``log1p`` and
    ``1 / (1 + exp(-|eta|))`` per entry. With ``reuse`` they are read;
    otherwise they are computed and stored, so a later pass at the same
    (alpha, beta) can skip the transcendentals. The gradient and Hessian
    blocks involving ``x`` are formed from per-entry buffers with matrix
    products. ``k`` is the number of states, a compile-time constant in the
    specialized EM loops.
    """
    N, p = x.shape
    xb = x @ beta
    if not reuse:
        # WV is free until the derivative loop below
        _fill_exp(xb, alpha, WV, E, L, P, k)
    q = 0.0
    ga = np.zeros(k)
    ha = np.zeros(k)
    for r in range(N):
        yr = y[r]
        rs = 0.0
        ws = 0.0
        for u in range(k):
            w = z[r, u]
            eta = alpha[u] + xb[r]
            e = E[r, u]
            se = eta if yr == 1 else -eta
            q += w * (min(se, 0.0) - L[r, u])
            if want_derivs:
                inv = P[r, u]
                phi = inv if eta >= 0.0 else e * inv
                wv = w * e * inv * inv
                res = w * (yr - phi)
                WV[r, u] = wv
                ga[u] += res
                ha[u] += wv
                rs += res
                ws += wv
        if want_derivs:
            RS[r] = rs
            for j in range(p):
                XW[r, j] = x[r, j] * ws
    if want_derivs:
        H[:, :] = 0.0
        for u in range(k):
            g[u] = ga[u]
            H[u, u] = -ha[u]
        if p:
            g[k:] = RS @ x
            cross = WV.T @ x
            H[:k, k:] = -cross
            H[k:, :k] = -cross.T
            B = x.T @ XW
            # gemm need not return an exactly symmetric product
            for a in range(p):
                H[k + a, k + a] = -B[a, a]
                for b in range(a):
                    H[k + a, k + b] = -B[a, b]
                    H[k + b, k + a] = -B[a, b]
    if lam != 0.0:
        m = alpha.mean()
        pen = 0.0
        for u in range(k):
            pen += (alpha[u] - m) ** 2
        q -= lam * pen
        if want_derivs:
            for u in range(k):
                g[u] -= 2.0 * lam * (alpha[u] - m)
                for v in range(k):
                    H[u, v] -= 2.0 * lam * ((1.0 if u == v else 0.0) - 1.0 / k)
    return q


@njit(cache=True)
def weighted_logit(y, x, z, alpha, beta, lam, want_derivs):
    """sum_{i,t,u} z log p(y | alpha_u + x beta) - lam * sum_u (alpha_u - mean)^2.

    Returns ``(q, g, H)``; with ``want_derivs`` False ``g`` and ``H`` are
    zeros.
    """
    n, T, p = x.shape
    k = alpha.shape[0]
    N = n * T
    d = k + p
    g = np.zeros(d)
    H = np.zeros((d, d))
    q = _weighted_logit_flat(
        y.reshape(N), x.reshape(N, p), z.reshape(N, k), alpha, beta, lam, want_derivs,
        g, H, np.empty((N, k)), np.empty(N), np.empty((N, p)),
        np.empty((N, k)), np.empty((N, k)), np.empty((N, k)), False, k,
    )
    return q, g, H


@njit(cache=True)
def _fb_fast(y, x, alpha, beta, pi, Pi, z, zz, sub_ll, T, E, L, P, A, reuse, k):
    """Scaled forward-backward on flattened arrays, filling z, zz and sub_ll.

    Emission probabilities are computed from ``exp(-|eta|)`` (read from
    ``E`` and ``P`` with ``reuse``, else computed into ``E``, ``L`` and ``P``
    with ``A`` as scratch) and rescaled per entry by their maximum. When
    every state gives the response probability below 1e-250 that entry is
    handled in the log domain instead.
    """
    N, p = x.shape
    n = N // T
    xb = x @ beta
    if not reuse:
        _fill_exp(xb, alpha, A, E, L, P, k)
    Bf = np.empty((T, k))
    lscale = np.empty(T)
    a = np.empty((T, k))
    b = np.empty((T, k))
    inv_c = np.empty(T)
    bb = np.empty((T, k))
    pair = np.empty((k, k))
    logB = np.empty(k)
    for i in range(n):
        base = i * T
        logscale = 0.0
        for t in range(T):
            r = base + t
            yr = y[r]
            m = 0.0
            for u in range(k):
                eta = alpha[u] + xb[r]
                e = E[r, u]
                se = eta if yr == 1 else -eta
                val = P[r, u] if se >= 0.0 else e * P[r, u]
                Bf[t, u] = val
                if val > m:
                    m = val
            if m > 1e-250:
                im = 1.0 / m
                for u in range(k):
                    Bf[t, u] *= im
                lscale[t] = m
            else:
                # every state makes this response (numerically) impossible
                lm = -np.inf
                for u in range(k):
                    logB[u] = log_bernoulli(yr, alpha[u] + xb[r])
                    if logB[u] > lm:
                        lm = logB[u]
                for u in range(k):
                    Bf[t, u] = math.exp(logB[u] - lm)
                lscale[t] = 1.0
                logscale += lm
        logc = 0.0
        # normalizers are multiplied up and logged in batches
        cprod = 1.0
        for t in range(T):
            tot = 0.0
            if t == 0:
                for u in range(k):
                    a[0, u] = pi[u] * Bf[0, u]
                    tot += a[0, u]
            else:
                for u in range(k):
                    acc = 0.0
                    for v in range(k):
                        acc += a[t - 1, v] * Pi[v, u]
                    a[t, u] = acc * Bf[t, u]
                    tot += a[t, u]
            tot = max(tot, PROB_FLOOR)
            ic = 1.0 / tot
            inv_c[t] = ic
            for u in range(k):
                a[t, u] *= ic
            prod = tot * lscale[t]
            if prod > 1e-150:
                cprod *= prod
                if cprod < 1e-150:
                    logc += math.log(cprod)
                    cprod = 1.0
            else:
                logc += math.log(tot) + math.log(lscale[t])
        logc += math.log(cprod)
        # backward pass; bb[t] = Bf[t] * b[t] also feeds the pair posteriors
        for u in range(k):
            b[T - 1, u] = 1.0
            bb[T - 1, u] = Bf[T - 1, u]
        for t in range(T - 2, -1, -1):
            for v in range(k):
                acc = 0.0
                for u in range(k):
                    acc += Pi[v, u] * bb[t + 1, u]
                b[t, v] = acc * inv_c[t + 1]
                bb[t, v] = Bf[t, v] * b[t, v]
        for t in range(T):
            s = 0.0
            for u in range(k):
                val = a[t, u] * b[t, u]
                z[base + t, u] = val
                s += val
            s = 1.0 / s
            for u in range(k):
                z[base + t, u] *= s
        pair[:, :] = 0.0
        for t in range(1, T):
            for v in range(k):
                av = a[t - 1, v] * inv_c[t]
                for u in range(k):
                    pair[v, u] += av * bb[t, u]
        for v in range(k):
            for u in range(k):
                zz[i, v, u] = pair[v, u] * Pi[v, u]
        sub_ll[i] = logc + logscale


@njit(cache=True)
def _penalty(alpha):
    m = alpha.mean()
    s = 0.0
    for u in range(alpha.shape[0]):
        s += (alpha[u] - m) ** 2
    return s


@njit(cache=True)
def newton_direction(s, F, singular_rtol):
    """Newton direction with a scaled-gradient fallback on null directions of -F.

    Returns the direction and whether the fallback was used.
    """
    d = s.shape[0]
    ok = True
    for r in range(d):
        for c in range(d):
            if not np.isfinite(F[r, c]):
                ok = False
    top = 0.0
    if ok:
        evals, evecs = np.linalg.eigh(-F)
        top = evals[d - 1]
    if not ok or not (top > 0.0):
        scale = 1.0
        if ok:
            scale = max(1.0, np.linalg.norm(F, 2))
        return s / scale, True
    proj = evecs.T @ s
    fell_back = False
    for r in range(d):
        if evals[r] <= singular_rtol * top:
            proj[r] /= top
            fell_back = True
        else:
            proj[r] /= evals[r]
    return evecs @ proj, fell_back


@njit(cache=True)
def _newton_raphson_flat(
    y, x, z, theta, lam, max_nr, nr_tol, max_halvings, decrement_rtol, singular_rtol,
    g, H, g2, H2, WV, RS, XW, E, L, P, reuse, k,
):
    """Maximize the weighted objective over theta = (alpha, beta) in place.

    Every accepted step strictly increases the objective. The cached
    ``E``, ``L`` and ``P`` are read at the starting theta when ``reuse`` is
    set. Returns the number of gradient-fallback steps and whether the cache
    matches the final theta.
    """
    d = theta.shape[0]
    cand = np.empty(d)
    q = _weighted_logit_flat(y, x, z, theta[:k], theta[k:], lam, True, g, H, WV, RS, XW, E, L, P, reuse, k)
    fallbacks = 0
    cache_ok = True
    for _ in range(max_nr):
        if np.max(np.abs(g)) < nr_tol:
            break
        direc, fb = newton_direction(g, H, singular_rtol)
        if fb:
            fallbacks += 1
        # predicted gain below rounding level of q: nothing left to win
        if g @ direc <= decrement_rtol * (1.0 + abs(q)):
            break
        step = 1.0
        accepted = False
        q_new = q
        for _h in range(max_halvings + 1):
            for r in range(d):
                cand[r] = theta[r] + step * direc[r]
            q_new = _weighted_logit_flat(
                y, x, z, cand[:k], cand[k:], lam, True, g2, H2, WV, RS, XW, E, L, P, False, k
            )
            if q_new > q:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            cache_ok = False
            break
        theta[:] = cand
        q = q_new
        g[:] = g2
        H[:, :] = H2
    return fallbacks, cache_ok


@njit(cache=True)
def newton_raphson(y, x, z, theta0, lam, max_nr, nr_tol, max_halvings, decrement_rtol, singular_rtol):
    n, T, p = x.shape
    k = z.shape[2]
    N = n * T
    d = k + p
    theta = theta0.copy()
    fallbacks, _ = _newton_raphson_flat(
        y.reshape(N), x.reshape(N, p), z.reshape(N, k), theta, lam, max_nr, nr_tol,
        max_halvings, decrement_rtol, singular_rtol,
        np.empty(d), np.empty((d, d)), np.empty(d), np.empty((d, d)),
        np.empty((N, k)), np.empty(N), np.empty((N, p)),
        np.empty((N, k)), np.empty((N, k)), np.empty((N, k)), False, k,
    )
    return theta, fallbacks


@njit(cache=True)
def _ordering(alpha):
    """Stable insertion sort of state indices by alpha."""
    k = alpha.shape[0]
    order = np.arange(k)
    for s in range(1, k):
        cur = order[s]
        r = s - 1
        while r >= 0 and alpha[order[r]] > alpha[cur]:
            order[r + 1] = order[r]
            r -= 1
        order[r + 1] = cur
    return order


@njit(cache=True)
def latent_update(z0_sum, counts):
    """Closed-form pi and Pi; rows of Pi without mass become uniform."""
    k = z0_sum.shape[0]
    pi = z0_sum / z0_sum.sum()
    Pi = np.empty((k, k))
    n_empty = 0
    for v in range(k):
        mass = counts[v].sum()
        if mass > 0.0:
            for u in range(k):
                Pi[v, u] = counts[v, u] / mass
        else:
            n_empty += 1
            for u in range(k):
                Pi[v, u] = 1.0 / k
        Pi[v] /= Pi[v].sum()
    return pi, Pi, n_empty


@njit(cache=True)
def _permute_columns(A, order, tmp):
    N, k = A.shape
    for r in range(N):
        for u in range(k):
            tmp[u] = A[r, order[u]]
        for u in range(k):
            A[r, u] = tmp[u]


@njit(cache=True)
def em_loop(
    y3, x3, alpha0, beta0, pi0, Pi0, lam, max_iters, eps_loglik, eps_params,
    max_nr, nr_tol, max_halvings, decrement_rtol, singular_rtol,
):
    """One EM run; states are reordered by increasing alpha after every M-step.

    Returns ``(alpha, beta, pi, Pi, trace, n_iters, converged, n_empty,
    n_fallback)`` where ``trace`` holds the penalized log-likelihood at the
    start and after every iteration.

    Small state counts run a copy compiled with ``k`` fixed, which lets the
    compiler unroll the per-state loops; the arithmetic is the same.
    """
    args = (
        y3, x3, alpha0, beta0, pi0, Pi0, lam, max_iters, eps_loglik, eps_params,
        max_nr, nr_tol, max_halvings, decrement_rtol, singular_rtol,
    )
    k = alpha0.shape[0]
    if k == 2:
        return _em_loop_fixed_k(args, 2)
    if k == 3:
        return _em_loop_fixed_k(args, 3)
    if k == 4:
        return _em_loop_fixed_k(args, 4)
    return _em_loop(args, k)


@njit(cache=True)
def _em_loop_fixed_k(args, k):
    literally(k)
    return _em_loop(args, k)


@njit(cache=True)
def _em_loop(args, k):
    (
        y3, x3, alpha0, beta0, pi0, Pi0, lam, max_iters, eps_loglik, eps_params,
        max_nr, nr_tol, max_halvings, decrement_rtol, singular_rtol,
    ) = args
    n, T, p = x3.shape
    N = n * T
    d = k + p
    y = y3.reshape(N)
    x = x3.reshape(N, p)
    alpha = alpha0.copy()
    beta = beta0.copy()
    pi = pi0.copy()
    Pi = Pi0.copy()
    z = np.empty((N, k))
    zz = np.empty((n, k, k))
    sub_ll = np.empty(n)
    g = np.empty(d)
    H = np.empty((d, d))
    g2 = np.empty(d)
    H2 = np.empty((d, d))
    WV = np.empty((N, k))
    RS = np.empty(N)
    XW = np.empty((N, p))
    E = np.empty((N, k))
    L = np.empty((N, k))
    P = np.empty((N, k))
    tmp = np.empty(k)
    trace = np.empty(max_iters + 1)
    theta = np.empty(d)
    z0 = np.empty(k)
    n_empty = 0
    n_fallback = 0

    _fb_fast(y, x, alpha, beta, pi, Pi, z, zz, sub_ll, T, E, L, P, WV, False, k)
    ll = sub_ll.sum()
    pll = ll - lam * _penalty(alpha) if lam != 0.0 else ll
    trace[0] = pll
    converged = False
    h = 0
    for h in range(1, max_iters + 1):
        z0[:] = 0.0
        for i in range(n):
            for u in range(k):
                z0[u] += z[i * T, u]
        new_pi, new_Pi, ne = latent_update(z0, zz.sum(axis=0))
        n_empty += ne

        theta[:k] = alpha
        theta[k:] = beta
        nfb, cache_ok = _newton_raphson_flat(
            y, x, z, theta, lam, max_nr, nr_tol, max_halvings, decrement_rtol, singular_rtol,
            g, H, g2, H2, WV, RS, XW, E, L, P, True, k,
        )
        n_fallback += nfb

        order = _ordering(theta[:k])
        identity = True
        for u in range(k):
            if order[u] != u:
                identity = False
        if cache_ok and not identity:
            _permute_columns(E, order, tmp)
            _permute_columns(L, order, tmp)
            _permute_columns(P, order, tmp)
        dpar = 0.0
        for u in range(k):
            o = order[u]
            dpar = max(dpar, abs(theta[o] - alpha[u]), abs(new_pi[o] - pi[u]))
            for v in range(k):
                dpar = max(dpar, abs(new_Pi[o, order[v]] - Pi[u, v]))
        for j in range(p):
            dpar = max(dpar, abs(theta[k + j] - beta[j]))
        for u in range(k):
            o = order[u]
            alpha[u] = theta[o]
            pi[u] = new_pi[o]
            for v in range(k):
                Pi[u, v] = new_Pi[o, order[v]]
        beta[:] = theta[k:]

        _fb_fast(y, x, alpha, beta, pi, Pi, z, zz, sub_ll, T, E, L, P, WV, cache_ok, k)
        ll = sub_ll.sum()
        new_pll = ll - lam * _penalty(alpha) if lam != 0.0 else ll
        trace[h] = new_pll
        rel = (new_pll - pll) / abs(new_pll) if new_pll != 0.0 else 0.0
        pll = new_pll
        if rel < eps_loglik and dpar < eps_params:
            converged = True
            break
    return alpha, beta, pi, Pi, trace[: h + 1].copy(), h, converged, n_empty, n_fallback
