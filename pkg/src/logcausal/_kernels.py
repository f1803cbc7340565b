"""Compiled inner loops shared by the Rasch-type targets."""

import numpy as np
from numba import njit


@njit(cache=True)
def logit_cells(eta, delta, stu, sec, hits, trials, sign):
    """Binomial-logit log likelihood over (student, section) cells.

    The cell logit is ``eta[stu] + sign * delta[sec]``.  ``eta`` and
    ``delta`` are batched ``(k, n)`` and ``(k, S)``.  Returns the log
    likelihood per batch row and its gradients in ``eta`` and ``delta``.
    """
    k = eta.shape[0]
    m = stu.shape[0]
    ll = np.zeros(k)
    g_eta = np.zeros_like(eta)
    g_delta = np.zeros_like(delta)
    for b in range(k):
        acc = 0.0
        for j in range(m):
            i = stu[j]
            s = sec[j]
            x = eta[b, i] + sign * delta[b, s]
            if x > 0:
                e = np.exp(-x)
                sp = x + np.log1p(e)  # log(1 + exp(x))
                p = 1.0 / (1.0 + e)
            else:
                e = np.exp(x)
                sp = np.log1p(e)
                p = e / (1.0 + e)
            acc += hits[j] * x - trials[j] * sp
            r = hits[j] - trials[j] * p
            g_eta[b, i] += r
            g_delta[b, s] += sign * r
        ll[b] = acc
    return ll, g_eta, g_delta


@njit(cache=True, error_model="numpy")
def ps_density(theta, off, X, Y, Z, pos, teacher, school, pair, c_stu, c_sec, c_hits, c_trials,
               sd_coef, sd_effect, sd_delta, sd_scale):
    """Fused log density and gradient of the principal stratification target.

    ``off`` holds the start of each parameter block in the order etaT,
    etaC_raw, delta, betaU, betaY, a1, b0, b1, tchU_raw, sclU_raw,
    tchY_raw, sclY_raw, pair, log_scales (and the total dimension).
    ``pos`` is each student's index within its arm.
    """
    k = theta.shape[0]
    n, p = X.shape
    oT, oC, oD, oBU, oBY, oA1, oB0, oB1, oTU, oSU, oTY, oSY, oP, oL, dim = (
        off[0], off[1], off[2], off[3], off[4], off[5], off[6], off[7], off[8], off[9], off[10], off[11],
        off[12], off[13], off[14])
    nS, nt, ns, npair = oBU - oD, oSU - oTU, oTY - oSU, oL - oP
    lp = np.zeros(k)
    grad = np.zeros((k, dim))
    eta = np.empty(n)
    muU = np.empty(n)
    g_eta = np.empty(n)
    for b in range(k):
        th = theta[b]
        g = grad[b]
        sc = np.exp(th[oL:oL + 7])
        sTU, sSU, sU, sTY, sSY = sc[0], sc[1], sc[2], sc[3], sc[4]
        a1, b0, b1 = th[oA1], th[oB0], th[oB1]
        for i in range(n):
            xb = 0.0
            for j in range(p):
                xb += X[i, j] * th[oBU + j]
            muU[i] = sTU * th[oTU + teacher[i]] + sSU * th[oSU + school[i]] + xb
            if Z[i] == 1:
                eta[i] = th[oT + pos[i]]
            else:
                eta[i] = muU[i] + sU * th[oC + pos[i]]
            g_eta[i] = 0.0
        acc = 0.0
        for c in range(c_stu.shape[0]):
            i = c_stu[c]
            s = c_sec[c]
            x = eta[i] + th[oD + s]
            if x > 0:
                e = np.exp(-x)
                sp = x + np.log1p(e)
                pr = 1.0 / (1.0 + e)
            else:
                e = np.exp(x)
                sp = np.log1p(e)
                pr = e / (1.0 + e)
            acc += c_hits[c] * x - c_trials[c] * sp
            r = c_hits[c] - c_trials[c] * pr
            g_eta[i] += r
            g[oD + s] += r
        g_logsU = 0.0
        g_logsY0 = 0.0
        g_logsY1 = 0.0
        log_sU = np.log(sU)
        log_sY0, log_sY1 = np.log(sc[5]), np.log(sc[6])
        for i in range(n):
            xb = 0.0
            for j in range(p):
                xb += X[i, j] * th[oBY + j]
            zi = Z[i]
            muY = (th[oP + pair[i]] + sTY * th[oTY + teacher[i]] + sSY * th[oSY + school[i]] + a1 * eta[i]
                   + zi * (b0 + b1 * eta[i]) + xb)
            om = sc[6] if zi == 1 else sc[5]
            e = (Y[i] - muY) / om
            acc += -(log_sY1 if zi == 1 else log_sY0) - 0.5 * e * e
            q = e / om
            if zi == 1:
                g_logsY1 += e * e - 1.0
            else:
                g_logsY0 += e * e - 1.0
            ge = g_eta[i] + q * (a1 + b1 * zi)
            g[oA1] += q * eta[i]
            g[oB0] += q * zi
            g[oB1] += q * zi * eta[i]
            for j in range(p):
                g[oBY + j] += q * X[i, j]
            g[oP + pair[i]] += q
            g[oTY + teacher[i]] += q
            g[oSY + school[i]] += q
            if zi == 1:
                r = (eta[i] - muU[i]) / sU
                acc += -log_sU - 0.5 * r * r
                g[oT + pos[i]] = ge - r / sU
                gm = r / sU
                g_logsU += r * r - 1.0
            else:
                raw = th[oC + pos[i]]
                acc += -0.5 * raw * raw
                g[oC + pos[i]] = ge * sU - raw
                gm = ge
                g_logsU += ge * raw * sU
            for j in range(p):
                g[oBU + j] += gm * X[i, j]
            g[oTU + teacher[i]] += gm
            g[oSU + school[i]] += gm
        # priors
        for j in range(nS):
            v = th[oD + j]
            acc -= 0.5 * (v / sd_delta) ** 2
            g[oD + j] -= v / sd_delta ** 2
        for j in range(p):
            for o in (oBU, oBY):
                v = th[o + j]
                acc -= 0.5 * (v / sd_coef) ** 2
                g[o + j] -= v / sd_coef ** 2
        for j in range(npair):
            v = th[oP + j]
            acc -= 0.5 * (v / sd_coef) ** 2
            g[oP + j] -= v / sd_coef ** 2
        for o in (oA1, oB0, oB1):
            acc -= 0.5 * (th[o] / sd_effect) ** 2
            g[o] -= th[o] / sd_effect ** 2
        gsc = np.zeros(7)
        gsc[2] = g_logsU
        gsc[5] = g_logsY0
        gsc[6] = g_logsY1
        for o, m, si in ((oTU, nt, 0), (oSU, ns, 1), (oTY, nt, 3), (oSY, ns, 4)):
            s_ = sc[si]
            tot = 0.0
            for j in range(m):
                raw = th[o + j]
                ge = g[o + j]
                tot += ge * raw
                g[o + j] = ge * s_ - raw
                acc -= 0.5 * raw * raw
            gsc[si] = tot * s_
        for j in range(7):
            acc += -0.5 * (sc[j] / sd_scale) ** 2 + th[oL + j]
            g[oL + j] = gsc[j] - (sc[j] / sd_scale) ** 2 + 1.0
        lp[b] = acc if np.isfinite(acc) else -np.inf
    return lp, grad
