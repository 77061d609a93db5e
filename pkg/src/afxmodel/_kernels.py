"""Compiled inner loops for sequential recurrences.

Every loop here runs in a fixed arithmetic order so that processing a
sequence in one call or in consecutive chunks with carried state yields
bit-identical results.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


# ---------------------------------------------------------------------------
# biquad (transposed direct form II)
# ---------------------------------------------------------------------------

@njit(cache=True)
def biquad_forward(x, coeffs, state):
    """x: (B, N); coeffs: (B, 5) = b0 b1 b2 a1 a2; state: (B, 2), updated in place."""
    bsz, n = x.shape
    y = np.empty_like(x)
    for b in range(bsz):
        b0 = coeffs[b, 0]
        b1 = coeffs[b, 1]
        b2 = coeffs[b, 2]
        a1 = coeffs[b, 3]
        a2 = coeffs[b, 4]
        z1 = state[b, 0]
        z2 = state[b, 1]
        for t in range(n):
            xt = x[b, t]
            yt = b0 * xt + z1
            z1 = b1 * xt - a1 * yt + z2
            z2 = b2 * xt - a2 * yt
            y[b, t] = yt
        state[b, 0] = z1
        state[b, 1] = z2
    return y


@njit(cache=True)
def allpole_adjoint(g, coeffs):
    """lam[n] = g[n] - a1 lam[n+1] - a2 lam[n+2], run backwards in time."""
    bsz, n = g.shape
    lam = np.empty_like(g)
    for b in range(bsz):
        a1 = coeffs[b, 3]
        a2 = coeffs[b, 4]
        l1 = 0.0
        l2 = 0.0
        for t in range(n - 1, -1, -1):
            v = g[b, t] - a1 * l1 - a2 * l2
            lam[b, t] = v
            l2 = l1
            l1 = v
    return lam


# ---------------------------------------------------------------------------
# LSTM, gate order i f g o, single bias vector
# ---------------------------------------------------------------------------

@njit(cache=True)
def lstm_forward(x, w_ih, w_hh, bias, h0, c0, store):
    """x: (B, T, I).  Returns h_seq, c_seq, gates (post-activation) and final state."""
    bsz, steps, n_in = x.shape
    hid = w_hh.shape[1]
    h_seq = np.empty((bsz, steps, hid), dtype=x.dtype)
    if store:
        c_seq = np.empty((bsz, steps, hid), dtype=x.dtype)
        gates = np.empty((bsz, steps, 4 * hid), dtype=x.dtype)
    else:
        c_seq = np.empty((1, 1, hid), dtype=x.dtype)
        gates = np.empty((1, 1, 4 * hid), dtype=x.dtype)
    h_last = np.empty((bsz, hid), dtype=x.dtype)
    c_last = np.empty((bsz, hid), dtype=x.dtype)
    z = np.empty(4 * hid, dtype=x.dtype)
    h = np.empty(hid, dtype=x.dtype)
    c = np.empty(hid, dtype=x.dtype)
    for b in range(bsz):
        for j in range(hid):
            h[j] = h0[b, j]
            c[j] = c0[b, j]
        for t in range(steps):
            for r in range(4 * hid):
                acc = bias[r]
                for k in range(n_in):
                    acc += w_ih[r, k] * x[b, t, k]
                for k in range(hid):
                    acc += w_hh[r, k] * h[k]
                z[r] = acc
            for j in range(hid):
                ig = _sigmoid(z[j])
                fg = _sigmoid(z[hid + j])
                gg = np.tanh(z[2 * hid + j])
                og = _sigmoid(z[3 * hid + j])
                cj = fg * c[j] + ig * gg
                c[j] = cj
                if store:
                    gates[b, t, j] = ig
                    gates[b, t, hid + j] = fg
                    gates[b, t, 2 * hid + j] = gg
                    gates[b, t, 3 * hid + j] = og
                    c_seq[b, t, j] = cj
                z[j] = og * np.tanh(cj)
            for j in range(hid):
                h[j] = z[j]
                h_seq[b, t, j] = z[j]
        for j in range(hid):
            h_last[b, j] = h[j]
            c_last[b, j] = c[j]
    return h_seq, c_seq, gates, h_last, c_last


@njit(cache=True)
def lstm_backward(gh, h_seq, c_seq, gates, w_hh, h0, c0):
    """Returns dz (B, T, 4H) pre-activation adjoints; weight grads are formed outside."""
    bsz, steps, hid = gh.shape
    dz = np.empty((bsz, steps, 4 * hid), dtype=gh.dtype)
    dh_next = np.zeros(hid, dtype=gh.dtype)
    dc_next = np.zeros(hid, dtype=gh.dtype)
    for b in range(bsz):
        for j in range(hid):
            dh_next[j] = 0.0
            dc_next[j] = 0.0
        for t in range(steps - 1, -1, -1):
            for j in range(hid):
                ig = gates[b, t, j]
                fg = gates[b, t, hid + j]
                gg = gates[b, t, 2 * hid + j]
                og = gates[b, t, 3 * hid + j]
                ct = c_seq[b, t, j]
                c_prev = c_seq[b, t - 1, j] if t > 0 else c0[b, j]
                tc = np.tanh(ct)
                dh = gh[b, t, j] + dh_next[j]
                do = dh * tc
                dc = dh * og * (1.0 - tc * tc) + dc_next[j]
                dz[b, t, j] = dc * gg * ig * (1.0 - ig)
                dz[b, t, hid + j] = dc * c_prev * fg * (1.0 - fg)
                dz[b, t, 2 * hid + j] = dc * ig * (1.0 - gg * gg)
                dz[b, t, 3 * hid + j] = do * og * (1.0 - og)
                dc_next[j] = dc * fg
            for k in range(hid):
                acc = 0.0
                for r in range(4 * hid):
                    acc += w_hh[r, k] * dz[b, t, r]
                dh_next[k] = acc
    return dz


# ---------------------------------------------------------------------------
# GRU, gate order r z n, single bias vector:
#   r = s(Wr x + Ur h + br); z = s(Wz x + Uz h + bz)
#   n = tanh(Wn x + bn + r * (Un h)); h' = (1 - z) n + z h
# ---------------------------------------------------------------------------

@njit(cache=True)
def gru_forward(x, w_ih, w_hh, bias, h0, store):
    bsz, steps, n_in = x.shape
    hid = w_hh.shape[1]
    h_seq = np.empty((bsz, steps, hid), dtype=x.dtype)
    if store:
        cache = np.empty((bsz, steps, 4 * hid), dtype=x.dtype)
    else:
        cache = np.empty((1, 1, 4 * hid), dtype=x.dtype)
    h_last = np.empty((bsz, hid), dtype=x.dtype)
    h = np.empty(hid, dtype=x.dtype)
    hn = np.empty(hid, dtype=x.dtype)
    for b in range(bsz):
        for j in range(hid):
            h[j] = h0[b, j]
        for t in range(steps):
            for j in range(hid):
                ar = bias[j]
                az = bias[hid + j]
                an = bias[2 * hid + j]
                for k in range(n_in):
                    xv = x[b, t, k]
                    ar += w_ih[j, k] * xv
                    az += w_ih[hid + j, k] * xv
                    an += w_ih[2 * hid + j, k] * xv
                ur = 0.0
                uz = 0.0
                un = 0.0
                for k in range(hid):
                    hv = h[k]
                    ur += w_hh[j, k] * hv
                    uz += w_hh[hid + j, k] * hv
                    un += w_hh[2 * hid + j, k] * hv
                rg = _sigmoid(ar + ur)
                zg = _sigmoid(az + uz)
                ng = np.tanh(an + rg * un)
                hn[j] = (1.0 - zg) * ng + zg * h[j]
                if store:
                    cache[b, t, j] = rg
                    cache[b, t, hid + j] = zg
                    cache[b, t, 2 * hid + j] = ng
                    cache[b, t, 3 * hid + j] = un
            for j in range(hid):
                h[j] = hn[j]
                h_seq[b, t, j] = hn[j]
        for j in range(hid):
            h_last[b, j] = h[j]
    return h_seq, cache, h_last


@njit(cache=True)
def gru_backward(gh, h_seq, cache, w_hh, h0):
    """Returns (dx_pre (B,T,3H) adjoints of input projections, du (B,T,3H) adjoints of U h)."""
    bsz, steps, hid = gh.shape
    dxp = np.empty((bsz, steps, 3 * hid), dtype=gh.dtype)
    dup = np.empty((bsz, steps, 3 * hid), dtype=gh.dtype)
    dh_next = np.zeros(hid, dtype=gh.dtype)
    dh_prev = np.zeros(hid, dtype=gh.dtype)
    for b in range(bsz):
        for j in range(hid):
            dh_next[j] = 0.0
        for t in range(steps - 1, -1, -1):
            for j in range(hid):
                dh_prev[j] = 0.0
            for j in range(hid):
                rg = cache[b, t, j]
                zg = cache[b, t, hid + j]
                ng = cache[b, t, 2 * hid + j]
                un = cache[b, t, 3 * hid + j]
                hp = h_seq[b, t - 1, j] if t > 0 else h0[b, j]
                dh = gh[b, t, j] + dh_next[j]
                dn = dh * (1.0 - zg)
                dzg = dh * (hp - ng)
                dh_prev[j] += dh * zg
                dan = dn * (1.0 - ng * ng)
                dr = dan * un
                dar = dr * rg * (1.0 - rg)
                daz = dzg * zg * (1.0 - zg)
                dxp[b, t, j] = dar
                dxp[b, t, hid + j] = daz
                dxp[b, t, 2 * hid + j] = dan
                dup[b, t, j] = dar
                dup[b, t, hid + j] = daz
                dup[b, t, 2 * hid + j] = dan * rg
            for k in range(hid):
                acc = dh_prev[k]
                for r in range(3 * hid):
                    acc += w_hh[r, k] * dup[b, t, r]
                dh_next[k] = acc
    return dxp, dup


# ---------------------------------------------------------------------------
# diagonal SSM recurrence (streaming mode)
# ---------------------------------------------------------------------------

@njit(cache=True)
def ssm_recurrent(u, zbar_re, zbar_im, bbar_re, bbar_im, c_re, c_im, d, s_re, s_im):
    """u: (B, H, L).  s_k = z s_{k-1} + Bbar u_k;  y_k = 2 Re(C . s_k) + D u_k.

    State arrays (B, H, N) are updated in place.
    """
    bsz, hch, steps = u.shape
    nst = zbar_re.shape[1]
    y = np.empty_like(u)
    for b in range(bsz):
        for h in range(hch):
            for t in range(steps):
                ut = u[b, h, t]
                acc = 0.0
                for n in range(nst):
                    sr = s_re[b, h, n]
                    si = s_im[b, h, n]
                    zr = zbar_re[h, n]
                    zi = zbar_im[h, n]
                    nr = zr * sr - zi * si + bbar_re[h, n] * ut
                    ni = zr * si + zi * sr + bbar_im[h, n] * ut
                    s_re[b, h, n] = nr
                    s_im[b, h, n] = ni
                    acc += c_re[h, n] * nr - c_im[h, n] * ni
                y[b, h, t] = 2.0 * acc + d[h] * ut
    return y
