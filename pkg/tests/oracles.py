"""Slow, independent reference implementations used as test oracles."""

import math

import numpy as np


def conv2d_loops(x, w, b, stride=1, pad=0):
    """Direct cross-correlation by explicit loops over output positions."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (H + 2 * pad - k) // stride + 1
    wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, O, ho, wo))
    for i in range(ho):
        for j in range(wo):
            win = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.tensordot(win, w, axes=([1, 2, 3], [1, 2, 3]))
    if b is not None:
        out += b[None, :, None, None]
    return out


def average_precision_bruteforce(scores, labels):
    """Walk every cut of the ranked list, build (R_n, P_n) and sum recall steps times precision."""
    scores = list(scores)
    labels = list(labels)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(1 for v in labels if v == 1)
    terms = []
    prev_recall = 0.0
    tp = 0
    for n, i in enumerate(order, 1):
        tp += labels[i] == 1
        recall = tp / n_pos
        precision = tp / n
        terms.append((recall - prev_recall) * precision)
        prev_recall = recall
    return math.fsum(terms)


def bilinear_point(img, y, x):
    """Sample a 2-D array at a real-valued position with edge clamping."""
    h, w = img.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear_loops(plane, height, width):
    h, w = plane.shape
    out = np.zeros((height, width))
    for i in range(height):
        for j in range(width):
            out[i, j] = bilinear_point(plane, (i + 0.5) * h / height - 0.5, (j + 0.5) * w / width - 0.5)
    return out


def adam_reference(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out step by step."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
        out.append(theta)
    return out


def plateau_reference(metrics, lr=2e-4, patience=5, threshold=0.001, factor=10.0):
    """LR after each epoch under the 'no threshold gain for patience epochs' rule."""
    best = -np.inf
    bad = 0
    trace = []
    for m in metrics:
        if m > best + threshold:
            best, bad = m, 0
        else:
            bad += 1
            if bad >= patience:
                lr /= factor
                bad = 0
        trace.append(lr)
    return trace
