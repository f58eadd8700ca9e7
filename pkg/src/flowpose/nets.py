"""Small residual MLP conditioners and their parameter bookkeeping.

Parameters live in an ordered name -> Node mapping so the same network code
runs on the tape (training) or on plain arrays (fast evaluation).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ag

__all__ = ["ParamStore", "mlp_init", "mlp_apply", "Adam", "GradientDescent"]


class ParamStore:
    """Ordered mapping of parameter names to autodiff leaves."""

    def __init__(self):
        self._params = {}

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name}")
        self._params[name] = ag.leaf(value)
        return self._params[name]

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def leaves(self):
        return list(self._params.values())

    def values(self):
        return {k: v.value for k, v in self._params.items()}

    def load_values(self, mapping):
        for k, node in self._params.items():
            v = np.asarray(mapping[k], dtype=np.float64)
            if v.shape != node.value.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {node.value.shape}")
            node.value = v.copy()

    def n_parameters(self):
        return sum(v.value.size for v in self._params.values())


def mlp_init(store: ParamStore, prefix, d_in, d_out, channels, blocks, rng,
             zero_final=True, final_bias=None):
    """Residual MLP: fc_in -> tanh -> blocks x (h + tanh(tanh(h W)W)) -> fc_out.

    ``zero_final`` makes the network output exactly ``final_bias`` (or zero)
    at initialization, which is what gives the flow its identity start.
    """
    def glorot(n_in, n_out):
        return rng.normal(size=(n_in, n_out)) * np.sqrt(2.0 / (n_in + n_out))

    store.add(f"{prefix}/w_in", glorot(d_in, channels))
    store.add(f"{prefix}/b_in", np.zeros(channels))
    for b in range(blocks):
        store.add(f"{prefix}/blk{b}/w1", glorot(channels, channels))
        store.add(f"{prefix}/blk{b}/b1", np.zeros(channels))
        store.add(f"{prefix}/blk{b}/w2", glorot(channels, channels))
        store.add(f"{prefix}/blk{b}/b2", np.zeros(channels))
    w_out = np.zeros((channels, d_out)) if zero_final else glorot(channels, d_out)
    b_out = np.zeros(d_out) if final_bias is None else np.asarray(final_bias, float)
    store.add(f"{prefix}/w_out", w_out)
    store.add(f"{prefix}/b_out", b_out)


def mlp_apply(params, prefix, x, blocks):
    """Run the residual MLP; ``params`` maps names to Nodes or ndarrays."""
    h = ag.tanh(ag.add(ag.matmul(x, params[f"{prefix}/w_in"]), params[f"{prefix}/b_in"]))
    for b in range(blocks):
        t = ag.tanh(ag.add(ag.matmul(h, params[f"{prefix}/blk{b}/w1"]),
                           params[f"{prefix}/blk{b}/b1"]))
        t = ag.tanh(ag.add(ag.matmul(t, params[f"{prefix}/blk{b}/w2"]),
                           params[f"{prefix}/blk{b}/b2"]))
        h = ag.add(h, t)
    return ag.add(ag.matmul(h, params[f"{prefix}/w_out"]), params[f"{prefix}/b_out"])


class GradientDescent:
    """Plain gradient descent with global gradient-norm clipping."""

    def __init__(self, leaves, lr, clip_norm=1.0):
        self.leaves = leaves
        self.lr = lr
        self.clip_norm = clip_norm

    def step(self):
        grads = [np.zeros_like(l.value) if l.grad is None else l.grad for l in self.leaves]
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        scale = 1.0 if total <= self.clip_norm else self.clip_norm / total
        for l, g in zip(self.leaves, grads):
            l.value = l.value - self.lr * scale * g


class Adam:
    def __init__(self, leaves, lr, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=1.0):
        self.leaves = leaves
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(l.value) for l in leaves]
        self.v = [np.zeros_like(l.value) for l in leaves]
        self.t = 0

    def step(self):
        self.t += 1
        grads = [np.zeros_like(l.value) if l.grad is None else l.grad for l in self.leaves]
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if self.clip_norm and total > self.clip_norm:
            grads = [g * (self.clip_norm / total) for g in grads]
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, (l, g) in enumerate(zip(self.leaves, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            mhat = self.m[i] / b1t
            vhat = self.v[i] / b2t
            l.value = l.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)
