"""Independent scalar reference implementations used by the tests.

Written with ``math`` and plain loops only, so they share no code with the
vectorised package implementations they are compared against.
"""

import math


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def bce(logit, target):
    p = sigmoid(logit)
    return -(target * math.log(p) + (1 - target) * math.log(1 - p))


def cross_entropy(logits, label):
    m = max(logits)
    lse = m + math.log(sum(math.exp(v - m) for v in logits))
    return lse - logits[label]


def relaxed_sort_scores(pi, i):
    """Pre-softmax scores of rank row ``i`` (1-based)."""
    n = len(pi)
    return [(n + 1 - 2 * i) * pi[j] - sum(abs(pi[j] - pi[k]) for k in range(n)) for j in range(n)]


def softmax(xs):
    m = max(xs)
    e = [math.exp(v - m) for v in xs]
    s = sum(e)
    return [v / s for v in e]


def relaxed_sort(pi, tau):
    return [softmax([s / tau for s in relaxed_sort_scores(pi, i)]) for i in range(1, len(pi) + 1)]


def residual_block(h, w1, b1, wc, w2, b2):
    """One backbone block on a token list: h + relu(h w1 + b1 + mean(h) wc) w2 + b2."""
    n, d = len(h), len(h[0])
    hid = len(b1)
    mean = [sum(h[t][k] for t in range(n)) / n for k in range(d)]
    ctx = [sum(mean[k] * wc[k][j] for k in range(d)) for j in range(hid)]
    out = []
    for t in range(n):
        a = [max(0.0, sum(h[t][k] * w1[k][j] for k in range(d)) + b1[j] + ctx[j]) for j in range(hid)]
        out.append([h[t][k] + sum(a[j] * w2[j][k] for j in range(hid)) + b2[k] for k in range(d)])
    return out


# frozen values produced by the functions above
SIGMOID_4 = 0.9820137900379085
EULER_GAMMA = 0.5772156649015329
SORT_210_ROW1_SCORES = [1, 0, -3]
SORT_210_TAU1 = [
    [0.7213991842739687, 0.26538792877224193, 0.013212886953789414],
    [0.21194155761708544, 0.5761168847658291, 0.21194155761708544],
    [0.013212886953789414, 0.26538792877224193, 0.7213991842739687],
]
