"""Independent reference implementations used by the tests.

Written with plain Python loops, ``math`` and least squares so they share no
code with the package.
"""
import itertools
import math

import numpy as np


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def kl_row(lt, ls):
    """KL(softmax(lt) || softmax(ls)) for one sample."""
    p, q = softmax_row(lt), softmax_row(ls)
    return sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q) if pi > 0)


def cross_entropy(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        total -= math.log(softmax_row(row)[y])
    return total / len(labels)


def feature_sq_dist(fs, ft):
    return sum(sum((a - b) ** 2 for a, b in zip(r, s)) for r, s in zip(fs, ft)) / len(fs)


def phase_literal(epoch, tau):
    """Case-by-case reading of the phase rule: phase j covers epochs
    tau_1 + ... + tau_{j-1} < e <= tau_1 + ... + tau_j."""
    k = len(tau)
    if k >= 1 and 1 <= epoch <= tau[0]:
        return 1
    if k >= 2 and tau[0] < epoch <= tau[0] + tau[1]:
        return 2
    if k >= 3 and tau[0] + tau[1] < epoch <= tau[0] + tau[1] + tau[2]:
        return 3
    if k >= 4 and tau[0] + tau[1] + tau[2] < epoch <= tau[0] + tau[1] + tau[2] + tau[3]:
        return 4
    raise ValueError("epoch outside schedule")


def prioritized_literal(epoch, tau, ranking):
    j = phase_literal(epoch, tau)
    if j == len(tau):
        return set(ranking)
    return {ranking[j - 1]}


def absence_rate_enumerated(q, k):
    """Per-cell absence probability when all-absent draws are rejected, by enumerating
    all 2^k presence patterns."""
    num = den = 0.0
    for pattern in itertools.product((0, 1), repeat=k):  # 1 = absent
        if all(pattern):
            continue
        p = 1.0
        for a in pattern:
            p *= q if a else 1 - q
        den += p
        num += p * pattern[0]
    return num / den


def momentum_steps(theta, grads, lr, mu, wd=0.0):
    """Heavy-ball SGD with coupled weight decay, scalar parameter."""
    v = 0.0
    out = []
    for g in grads:
        v = mu * v + g + wd * theta
        theta = theta - lr * v
        out.append(theta)
    return out


def _design(x):
    return np.hstack([x, np.ones((len(x), 1))])


def probe_accuracy(x_train, y_train, x_test, y_test, num_classes):
    """Least-squares one-vs-rest linear probe, test accuracy."""
    target = np.eye(num_classes)[y_train]
    w, *_ = np.linalg.lstsq(_design(x_train), target, rcond=None)
    return float((np.argmax(_design(x_test) @ w, axis=1) == y_test).mean())


def probe_r2(x_train, y_train, x_test, y_test):
    """Least-squares linear probe, test R^2."""
    w, *_ = np.linalg.lstsq(_design(x_train), y_train, rcond=None)
    pred = _design(x_test) @ w
    return 1.0 - float(((y_test - pred) ** 2).sum() / ((y_test - y_test.mean()) ** 2).sum())
