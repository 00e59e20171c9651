"""Reference implementations used as test oracles."""

import math
from fractions import Fraction

import numpy as np

from izsd.metrics import INTERP11, Detection, GroundTruth


def frac_iou(a, b):
    ax1, ay1, ax2, ay2 = (Fraction(v) for v in a)
    bx1, by1, bx2, by2 = (Fraction(v) for v in b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return Fraction(0)
    inter = iw * ih
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def brute_force_ap(dets, gts, cls, mode, thr=Fraction(1, 2)):
    """Enumerate every cutoff of the ranked list with exact rationals."""
    dets = [d for d in dets if d.class_id == cls]
    gts = [g for g in gts if g.class_id == cls]
    n_gt = len(gts)
    if n_gt == 0 or not dets:
        return 0.0
    ranked = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = set()
    hits = []
    for i in ranked:
        d = dets[i]
        cands = [(frac_iou(d.box, g.box), -j, j) for j, g in enumerate(gts) if g.scene_id == d.scene_id]
        if not cands:
            hits.append(False)
            continue
        ov, _, j = max(cands)
        ok = ov >= thr and j not in taken
        if ok:
            taken.add(j)
        hits.append(ok)
    curve = []
    for k in range(1, len(hits) + 1):
        tp = sum(hits[:k])
        curve.append((Fraction(tp, n_gt), Fraction(tp, k)))
    if mode == INTERP11:
        pts = []
        for t in range(11):
            ps = [p for r, p in curve if r >= Fraction(t, 10)]
            pts.append(float(max(ps)) if ps else 0.0)
        return math.fsum(pts) / 11.0
    vals = []
    for k, hit in enumerate(hits):
        if hit:
            vals.append(float(max(p for _, p in curve[k:])))
    return math.fsum(vals) / n_gt


def random_fixture(rng, n_det, n_gt, n_scenes=2):
    def box():
        x1, y1 = rng.integers(0, 6, size=2)
        w, h = rng.integers(1, 5, size=2)
        return (int(x1), int(y1), int(x1 + w), int(y1 + h))

    scenes = [f"s{i}" for i in range(n_scenes)]
    gts = [GroundTruth(str(rng.choice(scenes)), box(), 1) for _ in range(n_gt)]
    dets = []
    for _ in range(n_det):
        if gts and rng.uniform() < 0.6:
            g = gts[rng.integers(len(gts))]
            x1, y1, x2, y2 = g.box
            jit = rng.integers(-1, 2, size=4)
            b = (x1 + jit[0], y1 + jit[1], max(x1 + jit[0] + 1, x2 + jit[2]), max(y1 + jit[1] + 1, y2 + jit[3]))
            dets.append(Detection(g.scene_id, b, 1, float(rng.choice([0.1, 0.5, 0.7, 0.9]))))
        else:
            dets.append(Detection(str(rng.choice(scenes)), box(), 1, float(rng.choice([0.1, 0.5, 0.7, 0.9]))))
    return dets, gts


def gpd_sample(rng, n, sigma, xi):
    """Inverse-CDF draws, written out independently of the library."""
    u = rng.uniform(size=n)
    if xi == 0:
        return -sigma * np.log1p(-u)
    return sigma / xi * ((1.0 - u) ** (-xi) - 1.0)


def central_diff(fn, x, h=1e-5):
    """Central finite-difference gradient of scalar ``fn`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
