"""
Small dense networks with exact derivatives, in float64 numpy.

Provides reverse-mode parameter/input gradients, Jacobians, second-order
forward-mode jets for Hessian-weighted traces, and an Adam optimiser.
Networks take batched inputs of shape (n, in) and return (n, out).
"""

from __future__ import annotations

import base64
import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("tanh", "softplus", "identity")


class ShapeError(ValueError):
    pass


def softplus(a):
    return np.logaddexp(0.0, a)


def sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _activate(tag: str, a: np.ndarray, order: int = 0):
    """Return the activation and, if requested, its first and second derivatives."""
    if tag == "tanh":
        h = np.tanh(a)
        if order == 0:
            return h, None, None
        d1 = 1.0 - h * h
        return h, d1, (-2.0 * h * d1 if order > 1 else None)
    if tag == "softplus":
        h = softplus(a)
        if order == 0:
            return h, None, None
        s = sigmoid(a)
        return h, s, (s * (1.0 - s) if order > 1 else None)
    if tag == "identity":
        if order == 0:
            return a, None, None
        return a, np.ones_like(a), (np.zeros_like(a) if order > 1 else None)
    raise ValueError(f"unknown activation {tag!r}")


@dataclass
class Mlp:
    """Affine/activation chain; ``weights[k]`` has shape (in_k, out_k)."""

    widths: tuple[int, ...]
    activations: tuple[str, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)
        self.activations = tuple(self.activations)
        if len(self.widths) < 2:
            raise ShapeError("need at least input and output widths")
        n_layers = len(self.widths) - 1
        if len(self.activations) != n_layers:
            raise ShapeError("one activation tag per layer")
        if any(a not in ACTIVATIONS for a in self.activations):
            raise ShapeError(f"activations must be among {ACTIVATIONS}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[k], self.widths[k + 1]) or b.shape != (self.widths[k + 1],):
                raise ShapeError(f"layer {k} parameter shapes inconsistent with widths")

    @classmethod
    def init(
        cls,
        widths: Sequence[int],
        rng: np.random.Generator,
        hidden: str = "tanh",
        head: str = "identity",
    ) -> "Mlp":
        """Xavier-uniform weights (gain 5/3 on tanh layers), zero biases."""
        widths = tuple(int(w) for w in widths)
        acts = tuple([hidden] * (len(widths) - 2) + [head])
        ws, bs = [], []
        for k in range(len(widths) - 1):
            fan_in, fan_out = widths[k], widths[k + 1]
            gain = 5.0 / 3.0 if acts[k] == "tanh" else 1.0
            bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
            ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(widths, acts, ws, bs)

    # -- parameter plumbing ------------------------------------------------

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    @property
    def n_params(self) -> int:
        return sum(self.widths[k] * self.widths[k + 1] + self.widths[k + 1] for k in range(len(self.widths) - 1))

    def copy(self) -> "Mlp":
        return Mlp(self.widths, self.activations, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zero_like(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.params]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    # -- evaluation ----------------------------------------------------------

    def _check_input(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ShapeError(f"expected input width {self.widths[0]}, got shape {x.shape}")
        return x, single

    def forward(self, x) -> np.ndarray:
        x, single = self._check_input(x)
        h = x
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            h, _, _ = _activate(tag, h @ w + b)
        return h[0] if single else h

    def forward_cached(self, x):
        x, _ = self._check_input(x)
        hs = [x]
        d1s = []
        h = x
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            h, d1, _ = _activate(tag, h @ w + b, order=1)
            hs.append(h)
            d1s.append(d1)
        return h, (hs, d1s)

    def backward(self, cache, upstream, grads: list[np.ndarray] | None = None, accumulate: bool = False):
        """Gradients of sum(upstream * output) w.r.t. parameters and input.

        With ``accumulate`` the parameter gradients are added into ``grads``.
        """
        hs, d1s = cache
        g = np.asarray(upstream, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != hs[-1].shape:
            raise ShapeError(f"upstream shape {g.shape} != output shape {hs[-1].shape}")
        if grads is None:
            grads = self.zero_like()
            accumulate = False
        for k in range(len(self.weights) - 1, -1, -1):
            da = g * d1s[k]
            gw = hs[k].T @ da
            gb = da.sum(axis=0)
            if accumulate:
                grads[2 * k] += gw
                grads[2 * k + 1] += gb
            else:
                grads[2 * k][...] = gw
                grads[2 * k + 1][...] = gb
            g = da @ self.weights[k].T
        return grads, g

    def jet(self, x, directions):
        """Second-order forward-mode propagation.

        ``directions`` is (m, in) or (n, m, in). Returns the output (n, out),
        first directional derivatives (n, m, out) and pure second directional
        derivatives vᵀ∇²f v (n, m, out).
        """
        x, _ = self._check_input(x)
        v = np.asarray(directions, dtype=float)
        n = x.shape[0]
        if v.ndim == 2:
            v = np.broadcast_to(v, (n,) + v.shape)
        if v.shape[0] != n or v.shape[2] != self.widths[0]:
            raise ShapeError("direction shape inconsistent with input")
        h, t, s = x, v, np.zeros_like(v)
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            a = h @ w + b
            at = t @ w
            as_ = s @ w
            h, d1, d2 = _activate(tag, a, order=2)
            t_new = d1[:, None, :] * at
            s = d1[:, None, :] * as_ + d2[:, None, :] * at * at
            t = t_new
        return h, t, s


def forward(net: Mlp, x) -> np.ndarray:
    return net.forward(x)


def backward(net: Mlp, x, upstream):
    """(parameter gradients, input gradient) of <upstream, net(x)>."""
    _, cache = net.forward_cached(x)
    grads, gx = net.backward(cache, upstream)
    if np.asarray(x).ndim == 1:
        gx = gx[0]
    return grads, gx


def input_jacobian(net: Mlp, x) -> np.ndarray:
    """Jacobian (n, out, in) for batched x, (out, in) for a single vector."""
    xb, single = net._check_input(x)
    _, cache = net.forward_cached(xb)
    n, n_out = xb.shape[0], net.widths[-1]
    jac = np.empty((n, n_out, net.widths[0]))
    scratch = net.zero_like()
    for j in range(n_out):
        up = np.zeros((n, n_out))
        up[:, j] = 1.0
        _, gx = net.backward(cache, up, grads=scratch)
        jac[:, j, :] = gx
    return jac[0] if single else jac


def weighted_hessian_trace(net: Mlp, x, A, output: int = 0):
    """Tr(A ∇²f) for output ``output`` via second-order jets along A's eigenvectors."""
    A = np.asarray(A, dtype=float)
    n_in = net.widths[0]
    if A.shape != (n_in, n_in):
        raise ShapeError("A must be square with the network input width")
    if np.max(np.abs(A - A.T)) > 1e-10:
        raise ValueError("A must be symmetric")
    xb, single = net._check_input(x)
    evals, evecs = np.linalg.eigh(0.5 * (A + A.T))
    keep = np.abs(evals) > 0.0
    if not np.any(keep):
        out = np.zeros(xb.shape[0])
        return float(out[0]) if single else out
    dirs = evecs[:, keep].T
    _, _, second = net.jet(xb, dirs)
    out = second[:, :, output] @ evals[keep]
    return float(out[0]) if single else out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """Bias-corrected Adam update applied in place; returns ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# -- serialisation -----------------------------------------------------------


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(float)


def mlp_to_dict(net: Mlp) -> dict:
    return {
        "widths": list(net.widths),
        "activations": list(net.activations),
        "params": [encode_array(p) for p in net.params],
    }


def mlp_from_dict(d: dict) -> Mlp:
    ps = [decode_array(p) for p in d["params"]]
    return Mlp(tuple(d["widths"]), tuple(d["activations"]), ps[0::2], ps[1::2])
