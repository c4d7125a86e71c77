"""Small fully connected networks with hand-written backpropagation.

The same :class:`MLP` serves as a noise-prediction denoiser (with a sinusoidal
time embedding appended to its input) and as a plain regressor
(``embed_dim=0``).  Besides parameter gradients it exposes vector-Jacobian
products with respect to the data input, which the guided sampler needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["time_embedding", "MLP", "Adam", "silu", "silu_grad"]


def time_embedding(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal features of ``t / T`` at geometrically spaced frequencies, shape ``(N, dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if dim == 0:
        return np.zeros((t.shape[0], 0))
    if dim % 2:
        raise ValueError("embedding width must be even")
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    phase = (t / T)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


def _sigmoid(a):
    # split on sign to avoid overflow in exp
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def silu(a):
    return a * _sigmoid(a)


def silu_grad(a):
    s = _sigmoid(a)
    return s * (1.0 + a * (1.0 - s))


class MLP:
    """Feedforward network ``[x, emb(t)] -> hidden SiLU layers -> linear output``.

    Parameters are kept as a flat list ``[W0, b0, W1, b1, ...]`` with ``W`` shaped
    ``(fan_in, fan_out)``.
    """

    activation = "silu"

    def __init__(self, data_dim: int, hidden: tuple[int, ...] | list[int], out_dim: int | None = None,
                 embed_dim: int = 32, T: int = 1000, params: list[np.ndarray] | None = None,
                 rng: np.random.Generator | int | None = 0):
        self.data_dim = int(data_dim)
        self.out_dim = int(data_dim if out_dim is None else out_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.embed_dim = int(embed_dim)
        self.T = int(T)
        widths = self.widths
        if params is None:
            rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
            params = []
            for fan_in, fan_out in zip(widths[:-1], widths[1:]):
                params.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))
                params.append(np.zeros(fan_out))
        else:
            params = [np.array(p, dtype=float) for p in params]
            shapes = self.param_shapes()
            if [p.shape for p in params] != shapes:
                raise ValueError(f"parameter shapes {[p.shape for p in params]} do not match {shapes}")
        self.params = params

    @property
    def widths(self) -> list[int]:
        return [self.data_dim + self.embed_dim, *self.hidden, self.out_dim]

    def param_shapes(self) -> list[tuple]:
        w = self.widths
        shapes = []
        for a, b in zip(w[:-1], w[1:]):
            shapes += [(a, b), (b,)]
        return shapes

    def config(self) -> dict:
        return {"data_dim": self.data_dim, "out_dim": self.out_dim, "hidden": list(self.hidden),
                "embed_dim": self.embed_dim, "T": self.T, "activation": self.activation}

    @classmethod
    def zeros_like(cls, other: "MLP") -> "MLP":
        return cls(other.data_dim, other.hidden, other.out_dim, other.embed_dim, other.T,
                   params=[np.zeros_like(p) for p in other.params])

    def copy(self) -> "MLP":
        return MLP(self.data_dim, self.hidden, self.out_dim, self.embed_dim, self.T,
                   params=[p.copy() for p in self.params])

    def _inputs(self, x, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.data_dim:
            raise ValueError(f"input width {x.shape[1]} does not match data width {self.data_dim}")
        if self.embed_dim == 0:
            return x
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        return np.concatenate([x, time_embedding(t, self.T, self.embed_dim)], axis=1)

    def _forward(self, x, t):
        h = self._inputs(x, t)
        pre, acts = [], [h]
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            a = h @ self.params[2 * k] + self.params[2 * k + 1]
            if k < n_layers - 1:
                pre.append(a)
                h = silu(a)
                acts.append(h)
            else:
                h = a
        return h, pre, acts

    def forward(self, x, t=None) -> np.ndarray:
        """Predicted output for a batch ``x`` of shape ``(N, data_dim)``."""
        squeeze = np.ndim(x) == 1
        out = self._forward(x, t)[0]
        return out[0] if squeeze else out

    __call__ = forward

    def _backward(self, grad_out, pre, acts, want_params=True):
        n_layers = len(self.params) // 2
        grads = [None] * len(self.params)
        g = grad_out
        for k in reversed(range(n_layers)):
            if want_params:
                grads[2 * k] = acts[k].T @ g
                grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.params[2 * k].T
            if k > 0:
                g = g * silu_grad(pre[k - 1])
        return grads, g

    def param_gradients(self, x, t, target):
        """Loss ``mean_n ||target_n - f(x_n, t_n)||^2`` and its parameter gradients."""
        out, pre, acts = self._forward(x, t)
        target = np.atleast_2d(np.asarray(target, dtype=float))
        diff = out - target
        n = diff.shape[0]
        loss = float(np.sum(diff * diff) / n)
        grads, _ = self._backward(2.0 * diff / n, pre, acts)
        return loss, grads

    def input_vjp(self, x, t, cotangent) -> np.ndarray:
        """``cotangent^T d f / d x`` restricted to the data block (batch-wise)."""
        squeeze = np.ndim(x) == 1
        out, pre, acts = self._forward(x, t)
        ct = np.broadcast_to(np.atleast_2d(np.asarray(cotangent, dtype=float)), out.shape)
        _, g = self._backward(ct, pre, acts, want_params=False)
        g = g[:, :self.data_dim]
        return g[0] if squeeze else g


@dataclass
class Adam:
    """Adaptive moment estimation with bias correction."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, model: MLP, grads: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in model.params]
            self.v = [np.zeros_like(p) for p in model.params]
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(model.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
