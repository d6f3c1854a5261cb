"""Numba kernels for the 2D splat renderer (serial, fixed compositing order)."""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _prepare(log_scale, angle, logit_opacity, alpha_min):
    m = log_scale.shape[0]
    cos = np.empty(m)
    sin = np.empty(m)
    inv1 = np.empty(m)
    inv2 = np.empty(m)
    sig = np.empty(m)
    qcut = np.empty(m)
    for i in range(m):
        cos[i] = math.cos(angle[i, 0])
        sin[i] = math.sin(angle[i, 0])
        inv1[i] = math.exp(-2.0 * log_scale[i, 0])
        inv2[i] = math.exp(-2.0 * log_scale[i, 1])
        sig[i] = 1.0 / (1.0 + math.exp(-logit_opacity[i, 0]))
        # beyond this Mahalanobis distance alpha < alpha_min; the margin keeps the
        # pre-filter conservative and the exact alpha test still decides
        qcut[i] = 2.0 * math.log(max(sig[i] / alpha_min, 1e-300)) + 1e-6
    return cos, sin, inv1, inv2, sig, qcut


@njit(cache=True)
def forward(position, log_scale, angle, logit_opacity, color, height, width, alpha_min, t_min):
    m = position.shape[0]
    cos, sin, inv1, inv2, sig, qcut = _prepare(log_scale, angle, logit_opacity, alpha_min)
    img = np.zeros((height, width, 3))
    for y in range(height):
        for x in range(width):
            t = 1.0
            for i in range(m):
                if t < t_min:
                    break
                dx = x - position[i, 0]
                dy = y - position[i, 1]
                u1 = cos[i] * dx + sin[i] * dy
                u2 = -sin[i] * dx + cos[i] * dy
                q = u1 * u1 * inv1[i] + u2 * u2 * inv2[i]
                if q > qcut[i]:
                    continue
                a = sig[i] * math.exp(-0.5 * q)
                if a < alpha_min:
                    continue
                for ch in range(3):
                    c = min(max(color[i, ch], 0.0), 1.0)
                    img[y, x, ch] += c * a * t
                t *= 1.0 - a
    return img


@njit(cache=True)
def backward(position, log_scale, angle, logit_opacity, color, grad_img, alpha_min, t_min):
    m = position.shape[0]
    height, width = grad_img.shape[0], grad_img.shape[1]
    cos, sin, inv1, inv2, sig, qcut = _prepare(log_scale, angle, logit_opacity, alpha_min)
    d_pos = np.zeros((m, 2))
    d_ls = np.zeros((m, 2))
    d_ang = np.zeros((m, 1))
    d_lo = np.zeros((m, 1))
    d_col = np.zeros((m, 3))
    idx = np.empty(m, dtype=np.int64)
    alph = np.empty(m)
    trans = np.empty(m)
    uu1 = np.empty(m)
    uu2 = np.empty(m)
    behind = np.zeros(3)
    cc = np.zeros(3)
    for y in range(height):
        for x in range(width):
            g0 = grad_img[y, x, 0]
            g1 = grad_img[y, x, 1]
            g2 = grad_img[y, x, 2]
            if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                continue
            t = 1.0
            cnt = 0
            for i in range(m):
                if t < t_min:
                    break
                dx = x - position[i, 0]
                dy = y - position[i, 1]
                u1 = cos[i] * dx + sin[i] * dy
                u2 = -sin[i] * dx + cos[i] * dy
                q = u1 * u1 * inv1[i] + u2 * u2 * inv2[i]
                if q > qcut[i]:
                    continue
                a = sig[i] * math.exp(-0.5 * q)
                if a < alpha_min:
                    continue
                idx[cnt] = i
                alph[cnt] = a
                trans[cnt] = t
                uu1[cnt] = u1
                uu2[cnt] = u2
                cnt += 1
                t *= 1.0 - a
            behind[0] = 0.0
            behind[1] = 0.0
            behind[2] = 0.0
            for r in range(cnt - 1, -1, -1):
                i = idx[r]
                a = alph[r]
                ti = trans[r]
                d_alpha = 0.0
                for ch in range(3):
                    raw = color[i, ch]
                    c = min(max(raw, 0.0), 1.0)
                    cc[ch] = c
                    g = g0 if ch == 0 else (g1 if ch == 1 else g2)
                    if raw >= 0.0 and raw <= 1.0:
                        d_col[i, ch] += g * a * ti
                    d_alpha += g * ti * (c - behind[ch])
                for ch in range(3):
                    behind[ch] = a * cc[ch] + (1.0 - a) * behind[ch]
                d_lo[i, 0] += d_alpha * a * (1.0 - sig[i])
                d_q = -0.5 * a * d_alpha
                u1 = uu1[r]
                u2 = uu2[r]
                d_ls[i, 0] += d_q * (-2.0 * u1 * u1 * inv1[i])
                d_ls[i, 1] += d_q * (-2.0 * u2 * u2 * inv2[i])
                d_ang[i, 0] += d_q * (2.0 * u1 * u2 * (inv1[i] - inv2[i]))
                q1 = 2.0 * u1 * inv1[i]
                q2 = 2.0 * u2 * inv2[i]
                d_pos[i, 0] -= d_q * (cos[i] * q1 - sin[i] * q2)
                d_pos[i, 1] -= d_q * (sin[i] * q1 + cos[i] * q2)
    return d_pos, d_ls, d_ang, d_lo, d_col
