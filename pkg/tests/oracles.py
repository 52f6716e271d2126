"""Independent reference implementations used by the test-suite.

These are deliberately naive (explicit loops, 4x4 matrices, scipy where
handy) and share no code with the package beyond plain data types.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial.transform import Rotation


# ---------------------------------------------------------------- time surfaces

def ring16():
    return [(dx, dy) for dy in range(-2, 3) for dx in range(-2, 3) if max(abs(dx), abs(dy)) == 2]


def decay_rate(last_t, x, y, t_now, tau_u, tau_l, n, pattern=None):
    """Per-pixel decay rate; last_t uses -1 for never-fired pixels (microseconds)."""
    h, w = last_t.shape
    ages = []
    for dx, dy in pattern or ring16():
        xx, yy = x + dx, y + dy
        if 0 <= xx < w and 0 <= yy < h and last_t[yy, xx] >= 0:
            ages.append((t_now - int(last_t[yy, xx])) * 1e-6)
    if not ages:
        return tau_u
    ages = sorted(ages)[:n]
    return max(tau_u - sum(ages) / len(ages), tau_l)


def surface_value(age_s, tau):
    return int(math.floor(255.0 * math.exp(-age_s / tau) + 0.5))


def raw_ats(last_t, t_now, tau_u, tau_l, n):
    h, w = last_t.shape
    out = np.zeros((h, w), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            if last_t[y, x] < 0:
                continue
            tau = decay_rate(last_t, x, y, t_now, tau_u, tau_l, n)
            out[y, x] = surface_value((t_now - int(last_t[y, x])) * 1e-6, tau)
    return out


# ---------------------------------------------------------------- pixel selection

def central_grad_mag(img, u, v):
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    gx = 0.5 * (img[v, u + 1] - img[v, u - 1]) if 0 < u < w - 1 else 0.0
    gy = 0.5 * (img[v + 1, u] - img[v - 1, u]) if 0 < v < h - 1 else 0.0
    return math.sqrt(gx * gx + gy * gy)


def greedy_select(cands, img, alpha, h_thr, d):
    """Brute-force greedy spacing: O(N^2) over accepted pixels."""
    scored = []
    for u, v in cands:
        s = float(img[v, u]) + alpha * central_grad_mag(img, u, v)
        if s > h_thr:
            scored.append((-s, u, v))
    scored.sort()
    acc = []
    for negs, u, v in scored:
        if all(max(abs(u - a), abs(v - b)) > d for _, a, b in acc):
            acc.append((-negs, u, v))
    return acc


def median_filter(img, r):
    """Median over a (2r+1)^2 window, borders extended by edge replication."""
    img = np.asarray(img)
    h, w = img.shape
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            win = [img[min(max(y + dy, 0), h - 1), min(max(x + dx, 0), w - 1)]
                   for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
            out[y, x] = sorted(win)[len(win) // 2]
    return out


# ---------------------------------------------------------------- interpolation / projection

def bilinear(img, u, v):
    return map_coordinates(np.asarray(img, dtype=np.float64), [[v], [u]], order=1, mode="nearest")[0]


def project(fx, fy, cx, cy, p):
    return fx * p[0] / p[2] + cx, fy * p[1] / p[2] + cy


# ---------------------------------------------------------------- trajectories

def to_matrix(pose):
    T = np.eye(4)
    T[:3, :3] = Rotation.from_quat(pose.rotation).as_matrix()
    T[:3, 3] = pose.translation
    return T


def horn_alignment(src, dst):
    """Closed-form rigid fit dst ~ R src + t via Horn's unit-quaternion method."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    a = src - src.mean(0)
    b = dst - dst.mean(0)
    S = a.T @ b
    Sxx, Sxy, Sxz = S[0]
    Syx, Syy, Syz = S[1]
    Szx, Szy, Szz = S[2]
    N = np.array([
        [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
        [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
        [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
        [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz],
    ])
    vals, vecs = np.linalg.eigh(N)
    qw, qx, qy, qz = vecs[:, np.argmax(vals)]
    R = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
    t = dst.mean(0) - R @ src.mean(0)
    return R, t


def align_oracle(est_T, gt_T, k):
    """Rigid fit over first k positions, then rotate about the first aligned position."""
    src = [T[:3, 3] for T in est_T[:k]]
    dst = [T[:3, 3] for T in gt_T[:k]]
    R, t = horn_alignment(src, dst)
    G = np.eye(4)
    G[:3, :3], G[:3, 3] = R, t
    first = G @ est_T[0]
    R_off = gt_T[0][:3, :3] @ first[:3, :3].T
    p0 = first[:3, 3]
    C = np.eye(4)
    C[:3, :3] = R_off
    C[:3, 3] = p0 - R_off @ p0
    return [C @ G @ T for T in est_T]


def ate_oracle(est_T, gt_T):
    d = [np.sum((a[:3, 3] - b[:3, 3]) ** 2) for a, b in zip(est_T, gt_T)]
    return math.sqrt(sum(d) / len(d)) * 100.0


def rot_angle_deg(R):
    return math.degrees(Rotation.from_matrix(R).magnitude())


def rpe_oracle(est_T, gt_T, unit):
    rot = trans = norm = 0.0
    for i in range(len(est_T) - 1):
        dg = np.linalg.inv(gt_T[i]) @ gt_T[i + 1]
        de = np.linalg.inv(est_T[i]) @ est_T[i + 1]
        D = np.linalg.inv(dg) @ de
        if unit == "per_frame":
            n = 1.0
        elif unit == "per_degree":
            n = rot_angle_deg(dg[:3, :3])
        else:
            n = float(np.linalg.norm(dg[:3, 3]))
        if n <= 0:
            continue
        rot += rot_angle_deg(D[:3, :3])
        trans += float(np.linalg.norm(D[:3, 3])) * 100.0
        norm += n
    return (rot / norm, trans / norm) if norm else (0.0, 0.0)
