"""Normalized cross-correlation template matching for point tracking."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

TEMPLATE_RADIUS = 5  # 11x11 templates
VISIBILITY_THRESHOLD = 0.5


def _pad(frame: np.ndarray, p: int) -> np.ndarray:
    return np.pad(np.asarray(frame, dtype=np.float64), ((p, p), (p, p), (0, 0)))


def extract_patch(frame: np.ndarray, center, r: int = TEMPLATE_RADIUS) -> np.ndarray:
    """(2r+1, 2r+1, C) patch around the rounded center; zeros outside the frame."""
    cx, cy = int(round(center[0])), int(round(center[1]))
    padded = _pad(frame, r)
    return padded[cy: cy + 2 * r + 1, cx: cx + 2 * r + 1]


def ncc_map(image: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Zero-mean NCC of ``template`` at every valid offset of ``image`` (both HxWxC).

    Channel means are removed separately and the correlation is summed over
    channels. Offsets where either side has zero variance score 0.
    """
    image = np.asarray(image, dtype=np.float64)
    t = np.asarray(template, dtype=np.float64)
    t = t - t.mean(axis=(0, 1), keepdims=True)
    tn = math.sqrt(float((t * t).sum()))
    th, tw = t.shape[:2]
    win = sliding_window_view(image, (th, tw), axis=(0, 1))  # (Y, X, C, th, tw)
    mean = win.mean(axis=(3, 4), keepdims=True)
    cen = win - mean
    num = np.einsum("yxcij,ijc->yx", cen, t)
    den = np.sqrt(np.einsum("yxcij,yxcij->yx", cen, cen)) * tn
    out = np.zeros(num.shape)
    ok = den > 1e-12
    out[ok] = num[ok] / den[ok]
    return out


def masked_ncc_map(image: np.ndarray, template: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """NCC restricted to the template pixels where ``alpha`` is set."""
    image = np.asarray(image, dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64)
    k = a.sum()
    if k == 0:
        raise ValueError("template mask is empty")
    t = np.asarray(template, dtype=np.float64)
    t = (t - (t * a[..., None]).sum(axis=(0, 1)) / k) * a[..., None]
    tn = math.sqrt(float((t * t).sum()))
    win = sliding_window_view(image, a.shape, axis=(0, 1))  # (Y, X, C, th, tw)
    s1 = np.einsum("yxcij,ij->yxc", win, a)
    s2 = np.einsum("yxcij,yxcij,ij->yxc", win, win, a)
    num = np.einsum("yxcij,ijc->yx", win, t)
    var = np.clip(s2 - s1 * s1 / k, 0, None).sum(axis=-1)
    den = np.sqrt(var) * tn
    out = np.zeros(num.shape)
    ok = den > 1e-12
    out[ok] = num[ok] / den[ok]
    return out


def match_in_window(frame: np.ndarray, template: np.ndarray, center, radius: int):
    """Best integer match of ``template`` within ``radius`` of ``center``.

    Returns ((x, y), score). Ties go to the offset closest to ``center``, then
    raster order.
    """
    h, w = frame.shape[:2]
    r = template.shape[0] // 2
    cx, cy = int(round(center[0])), int(round(center[1]))
    x0, x1 = max(0, cx - radius), min(w - 1, cx + radius)
    y0, y1 = max(0, cy - radius), min(h - 1, cy + radius)
    padded = _pad(frame, r)
    region = padded[y0: y1 + 2 * r + 1, x0: x1 + 2 * r + 1]
    scores = ncc_map(region, template)
    best = scores.max()
    yy, xx = np.nonzero(scores >= best - 1e-9)
    d2 = (xx + x0 - cx) ** 2 + (yy + y0 - cy) ** 2
    k = int(np.argmin(d2))
    return (int(xx[k] + x0), int(yy[k] + y0)), float(best)


def track_points(frames: np.ndarray, points: np.ndarray, radius: int = 8, r: int = TEMPLATE_RADIUS):
    """Frame-to-frame tracking of query points given on frame 0.

    The template is re-extracted from the previous frame at the previous
    estimate; visibility compares each frame against the frame-0 template.
    Returns xy (P, N, 2) and vis (P, N).
    """
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0]
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    xy = np.zeros((len(pts), n, 2))
    vis = np.zeros((len(pts), n), dtype=bool)
    for p, q in enumerate(pts):
        frac = q - np.round(q)
        anchor = extract_patch(frames[0], q, r)
        cur = q.copy()
        xy[p, 0], vis[p, 0] = q, True
        for f in range(1, n):
            tmpl = extract_patch(frames[f - 1], cur, r)
            (bx, by), _ = match_in_window(frames[f], tmpl, cur, radius)
            cur = np.array([bx, by], dtype=np.float64) + frac
            xy[p, f] = cur
            anchor_score = ncc_map(extract_patch(frames[f], cur, r), anchor)[0, 0]
            vis[p, f] = anchor_score >= VISIBILITY_THRESHOLD
    return xy, vis


def relocate_points(
    edited: np.ndarray,
    source: np.ndarray,
    gt_xy: np.ndarray,
    gt_vis: np.ndarray,
    r: int = TEMPLATE_RADIUS,
    vis_threshold: float = VISIBILITY_THRESHOLD,
):
    """Find ground-truth points of ``source`` in ``edited``.

    For point p at frame f the template is the source patch at the GT position
    (the nearest GT-visible frame when p is occluded at f). The search window
    is centered on the point's query position (first visible frame) with a
    half-size of twice the largest GT displacement from it. The sub-pixel
    offset of the GT point inside its template is carried over to the match.
    Returns pred_xy (P, N, 2), pred_vis (P, N), scores (P, N).
    """
    edited = np.asarray(edited, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    gt_xy = np.asarray(gt_xy, dtype=np.float64)
    gt_vis = np.asarray(gt_vis, dtype=bool)
    n_pts, n = gt_vis.shape
    pred = np.zeros((n_pts, n, 2))
    pvis = np.zeros((n_pts, n), dtype=bool)
    scores = np.zeros((n_pts, n))
    for p in range(n_pts):
        visible = np.nonzero(gt_vis[p])[0]
        if len(visible) == 0:
            pred[p] = gt_xy[p]
            continue
        q = visible[0]
        disp = np.linalg.norm(gt_xy[p, visible] - gt_xy[p, q], axis=1).max()
        radius = max(int(math.ceil(2.0 * disp)), r)
        for f in range(n):
            g = f if gt_vis[p, f] else visible[np.argmin(np.abs(visible - f) * 2 + (visible > f))]
            tmpl = extract_patch(source[g], gt_xy[p, g], r)
            frac = gt_xy[p, g] - np.round(gt_xy[p, g])
            (bx, by), s = match_in_window(edited[f], tmpl, gt_xy[p, q], radius)
            pred[p, f] = np.array([bx, by]) + frac
            scores[p, f] = s
            pvis[p, f] = s >= vis_threshold
    return pred, pvis, scores
