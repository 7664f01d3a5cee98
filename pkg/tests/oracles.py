"""Independent reference computations used by the tests.

Nothing here calls into the engine's backward pass: gradients come from
central finite differences and forward values from explicit loops.
"""

import math

import numpy as np

from muldef import nn


def central_difference(f, arr, idx, step=1e-4):
    old = arr[idx]
    arr[idx] = old + step
    hi = f()
    arr[idx] = old - step
    lo = f()
    arr[idx] = old
    return (hi - lo) / (2 * step)


def relative_error(a, b, floor=1e-7):
    return abs(a - b) / max(floor, abs(a), abs(b))


def gradcheck(net, x, y, rng_seed=5, step=1e-4, max_entries=40, sample_seed=0):
    """Worst relative error between analytic and finite-difference gradients.

    Checks up to ``max_entries`` randomly chosen entries of every parameter
    tensor and of the input batch. Dropout masks are pinned by reseeding.
    """
    def loss():
        return nn.backward(net, x, y, rng=np.random.default_rng(rng_seed), need_input=False)[0]

    _, grads = nn.backward(net, x, y, rng=np.random.default_rng(rng_seed))
    pick = np.random.default_rng(sample_seed)
    worst = 0.0
    targets = [(prm[k], grads.params[i][k]) for i, prm in enumerate(net.params) for k in prm]
    targets.append((x, grads.input))
    for arr, g in targets:
        flat = list(np.ndindex(arr.shape))
        if len(flat) > max_entries:
            flat = [flat[i] for i in pick.choice(len(flat), max_entries, replace=False)]
        for idx in flat:
            fd = central_difference(loss, arr, idx, step)
            err = relative_error(fd, g[idx])
            # entries where both sides are ~0 carry no information
            if abs(fd) < 1e-9 and abs(g[idx]) < 1e-9:
                err = 0.0
            worst = max(worst, err)
    return worst


def hand_forward_dense_relu_dense(w1, b1, w2, b2, x):
    """softmax(relu(x W1 + b1) W2 + b2) with explicit Python loops."""
    h = []
    for j in range(len(b1)):
        s = b1[j]
        for i in range(len(x)):
            s += x[i] * w1[i][j]
        h.append(max(s, 0.0))
    z = []
    for k in range(len(b2)):
        s = b2[k]
        for j in range(len(h)):
            s += h[j] * w2[j][k]
        z.append(s)
    m = max(z)
    e = [math.exp(v - m) for v in z]
    tot = sum(e)
    return [v / tot for v in e], z


def random_instance(kind, seed):
    """A small float64 network exercising ``kind``, plus a random batch and labels."""
    rng = np.random.default_rng(seed)
    classes = int(rng.integers(2, 5))
    n = int(rng.integers(1, 4))
    if kind == "dense":
        d = int(rng.integers(2, 6))
        spec, shape = [nn.dense(d, classes, l2=float(rng.choice([0.0, 0.05])))], (d,)
    elif kind == "conv2d":
        k = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, k))
        cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        h = int(rng.integers(k, 7))
        conv = nn.conv2d(cin, cout, k, stride=s, padding=p)
        ho = (h + 2 * p - k) // s + 1
        spec = [conv, nn.flatten(), nn.dense(ho * ho * cout, classes)]
        shape = (h, h, cin)
    elif kind == "relu":
        d = int(rng.integers(2, 6))
        spec, shape = [nn.dense(d, 6), nn.relu(), nn.dense(6, classes)], (d,)
    elif kind == "maxpool2d":
        win = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        h = int(rng.integers(win, 7))
        c = int(rng.integers(1, 3))
        ho = (h - win) // s + 1
        spec = [nn.maxpool2d(win, s), nn.flatten(), nn.dense(ho * ho * c, classes)]
        shape = (h, h, c)
    elif kind == "dropout":
        d = int(rng.integers(2, 6))
        spec = [nn.dense(d, 6), nn.dropout(float(rng.uniform(0.3, 1.0))), nn.dense(6, classes)]
        shape = (d,)
    elif kind == "flatten":
        h, c = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        spec, shape = [nn.flatten(), nn.dense(h * h * c, classes)], (h, h, c)
    elif kind == "softmax":
        d = int(rng.integers(2, 6))
        spec, shape = [nn.dense(d, classes), nn.softmax()], (d,)
    else:
        raise ValueError(kind)
    net = nn.Network.create(spec, shape, seed=seed, dtype=np.float64)
    for prm in net.params:
        if "b" in prm:
            prm["b"][:] = rng.normal(0, 0.1, prm["b"].shape)
    x = rng.normal(0.5, 0.5, size=(n,) + shape)
    y = rng.integers(0, classes, size=n)
    return net, x, y
