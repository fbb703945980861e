"""Compiled NUTS transition for the BSC log density.

Same algorithm and the same sequence of random draws as ``nuts._Chain.transition``;
only the evaluation is compiled. Subtrees are built recursively with their
summaries written to per-depth workspace rows instead of being returned.
"""

import math

import numpy as np
from numba import njit

from ._kernel import log_density

OK, TURNED, DIVERGED = 0, 1, 2


def workspace(dim: int, max_depth: int):
    rows = max_depth + 1
    return (
        np.empty(dim), np.empty(dim), np.empty(dim), np.zeros(1),  # frontier q, p, g, lp
        np.empty((rows, dim)), np.empty((rows, dim)), np.empty((rows, dim)),  # rho, ps_begin, ps_end
        np.empty((rows, dim)), np.empty((rows, dim)),  # p_begin, p_end
        np.empty((rows, dim)), np.empty((rows, dim)), np.empty(rows), np.empty(rows),  # sample q, g, lp; log weight
        np.zeros(2), np.empty(dim),  # accept sum and leapfrog count; scratch
    )


@njit(cache=True)
def _dot(a, b):
    return np.dot(a, b)


@njit(cache=True)
def _kinetic(p, inv_mass):
    return 0.5 * np.dot(p, inv_mass * p)


@njit(cache=True)
def _criterion(ps_a, ps_b, rho):
    return _dot(ps_a, rho) > 0.0 and _dot(ps_b, rho) > 0.0


@njit(cache=True)
def _logaddexp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    m = max(a, b)
    return m + math.log(math.exp(a - m) + math.exp(b - m))


@njit(cache=True)
def _build(k, direction, eps, H0, inv_mass, thresh, ws, model, rng):
    fq, fp, fg, flp, RHO, PSB, PSE, PB, PE, SQ, SG, SLP, LSW, acc, tmp = ws
    y, rows, cols, pmeans, inv_r2, hp, const = model
    d = fq.shape[0]
    if k == 0:
        e = direction * eps
        for i in range(d):
            fp[i] += 0.5 * e * fg[i]
        for i in range(d):
            fq[i] += e * inv_mass[i] * fp[i]
        lp = log_density(fq, y, rows, cols, pmeans, inv_r2, hp, const, fg, True)
        if math.isfinite(lp):
            for i in range(d):
                fp[i] += 0.5 * e * fg[i]
            H = -lp + _kinetic(fp, inv_mass)
            if H != H:
                H = np.inf
        else:
            H = np.inf
        flp[0] = lp
        acc[1] += 1.0
        dH = H - H0
        acc[0] += 1.0 if dH < 0 else math.exp(-dH)
        LSW[0] = -dH
        for i in range(d):
            RHO[0, i] = fp[i]
            PB[0, i] = fp[i]
            PE[0, i] = fp[i]
            PSB[0, i] = inv_mass[i] * fp[i]
            PSE[0, i] = inv_mass[i] * fp[i]
            SQ[0, i] = fq[i]
            SG[0, i] = fg[i]
        SLP[0] = lp
        return DIVERGED if dH > thresh else OK

    st = _build(k - 1, direction, eps, H0, inv_mass, thresh, ws, model, rng)
    if st != OK:
        return st
    RHO[k] = RHO[k - 1]
    PSB[k] = PSB[k - 1]
    PB[k] = PB[k - 1]
    PSE[k] = PSE[k - 1]
    PE[k] = PE[k - 1]
    SQ[k] = SQ[k - 1]
    SG[k] = SG[k - 1]
    SLP[k] = SLP[k - 1]
    LSW[k] = LSW[k - 1]
    st = _build(k - 1, direction, eps, H0, inv_mass, thresh, ws, model, rng)
    if st != OK:
        return st
    # slot k holds the inner half, slot k-1 the outer half
    lsw = _logaddexp(LSW[k], LSW[k - 1])
    if math.log(rng.random()) < LSW[k - 1] - lsw:
        SQ[k] = SQ[k - 1]
        SG[k] = SG[k - 1]
        SLP[k] = SLP[k - 1]
    LSW[k] = lsw
    for i in range(d):
        tmp[i] = RHO[k, i] + PB[k - 1, i]
    ok = _criterion(PSB[k], PSB[k - 1], tmp)
    if ok:
        for i in range(d):
            tmp[i] = RHO[k - 1, i] + PE[k, i]
        ok = _criterion(PSE[k], PSE[k - 1], tmp)
    for i in range(d):
        RHO[k, i] += RHO[k - 1, i]
    if ok:
        ok = _criterion(PSB[k], PSE[k - 1], RHO[k])
    PSE[k] = PSE[k - 1]
    PE[k] = PE[k - 1]
    return OK if ok else TURNED


@njit(cache=True)
def transition(q, lp, g, inv_mass, eps, max_depth, thresh, ws, model, rng, out_q, out_g):
    """One NUTS iteration; the new state lands in ``out_q``/``out_g``.

    Returns ``(lp, depth, divergent, saturated, accept, n_leapfrog, H0)``.
    """
    fq, fp, fg, flp, RHO, PSB, PSE, PB, PE, SQ, SG, SLP, LSW, acc, tmp = ws
    d = q.shape[0]
    p = rng.standard_normal(d) / np.sqrt(inv_mass)
    H0 = -lp + _kinetic(p, inv_mass)
    ql = q.copy()
    pl = p.copy()
    gl = g.copy()
    qr = q.copy()
    pr = p.copy()
    gr = g.copy()
    psl = inv_mass * p
    psr = psl.copy()
    rho = p.copy()
    out_q[:] = q
    out_g[:] = g
    cur_lp = lp
    tree_lsw = 0.0
    acc[0] = 0.0
    acc[1] = 0.0
    depth = 0
    divergent = False
    saturated = False
    while True:
        if depth >= max_depth:
            saturated = True
            break
        direction = 1 if rng.random() > 0.5 else -1
        if direction > 0:
            fq[:] = qr
            fp[:] = pr
            fg[:] = gr
        else:
            fq[:] = ql
            fp[:] = pl
            fg[:] = gl
        st = _build(depth, direction, eps, H0, inv_mass, thresh, ws, model, rng)
        if st != OK:
            divergent = st == DIVERGED
            break
        k = depth
        depth += 1
        if LSW[k] > tree_lsw or math.log(rng.random()) < LSW[k] - tree_lsw:
            out_q[:] = SQ[k]
            out_g[:] = SG[k]
            cur_lp = SLP[k]
        tree_lsw = _logaddexp(tree_lsw, LSW[k])
        # far = tree edge away from the junction, near = the junction edge
        if direction > 0:
            ps_far, ps_near, p_near = psl, psr, pr
        else:
            ps_far, ps_near, p_near = psr, psl, pl
        for i in range(d):
            tmp[i] = rho[i] + RHO[k, i]
        ok = _criterion(ps_far, PSE[k], tmp)
        if ok:
            for i in range(d):
                tmp[i] = rho[i] + PB[k, i]
            ok = _criterion(ps_far, PSB[k], tmp)
        if ok:
            for i in range(d):
                tmp[i] = RHO[k, i] + p_near[i]
            ok = _criterion(ps_near, PSE[k], tmp)
        for i in range(d):
            rho[i] += RHO[k, i]
        if direction > 0:
            qr[:] = fq
            pr[:] = fp
            gr[:] = fg
            psr[:] = PSE[k]
        else:
            ql[:] = fq
            pl[:] = fp
            gl[:] = fg
            psl[:] = PSE[k]
        if not ok:
            break
    accept = acc[0] / max(acc[1], 1.0)
    return cur_lp, depth, divergent, saturated, accept, int(acc[1]), H0
