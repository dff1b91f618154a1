"""Central finite-difference check of HSTFNet.backward."""
import numpy as np

from hstf.net import HSTFNet


def max_relative_errors(net: HSTFNet, batch, eps=1e-4, dropout_seed=7, floor=1e-8):
    """Return {param name: worst elementwise relative error} over every entry.

    Dropout stays active; each forward pass draws its mask from a freshly
    seeded generator so all evaluations see the same mask.
    """
    def loss():
        probs, cache = net.forward(batch, train=True, rng=np.random.default_rng(dropout_seed))
        return net.loss(probs, batch.y), cache

    _, cache = loss()
    analytic = net.backward(cache)
    worst = {}
    for name, p in net.params.items():
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            up, _ = loss()
            flat[j] = old - eps
            down, _ = loss()
            flat[j] = old
            nflat[j] = (up - down) / (2 * eps)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        worst[name] = float((np.abs(a - num) / denom).max())
    return worst
