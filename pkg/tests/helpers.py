"""Shared finite-difference oracles and tiny fixtures."""

import numpy as np

from arbfree.nn import Mlp, input_jacobian, weighted_hessian_trace


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_net(rng, widths=None, head="identity"):
    if widths is None:
        depth = int(rng.integers(1, 4))
        widths = [int(rng.integers(2, 6))] + [int(rng.integers(3, 9)) for _ in range(depth)] + [int(rng.integers(1, 4))]
    net = Mlp.init(widths, rng, head=head)
    for b in net.biases:
        b[:] = rng.normal(0, 0.3, b.shape)
    return net


def fd_param_grads(net, x, up, h=1e-5, sample=None, rng=None):
    """Central differences of sum(up * net(x)) for (up to ``sample``) coordinates per tensor."""
    f = lambda: float(np.sum(net.forward(x) * up))
    out = []
    for p in net.params:
        flat = p.reshape(-1)
        idx = range(flat.size) if sample is None else rng.choice(flat.size, min(sample, flat.size), replace=False)
        for i in idx:
            o = flat[i]
            flat[i] = o + h
            a = f()
            flat[i] = o - h
            b = f()
            flat[i] = o
            out.append((p, i, (a - b) / (2 * h)))
    return out


def derivative_errors(net, rng, x):
    """Worst relative errors (params, jacobian, hessian trace) against central differences."""
    up = rng.standard_normal(net.widths[-1])
    _, cache = net.forward_cached(x)
    grads, gx = net.backward(cache, up)
    lookup = {id(p): g for p, g in zip(net.params, grads)}
    worst_p = 0.0
    for p, i, fd in fd_param_grads(net, x, up):
        worst_p = max(worst_p, rel_err(lookup[id(p)].reshape(-1)[i], fd))

    h = 1e-5
    n_in = net.widths[0]
    fd_j = np.empty((net.widths[-1], n_in))
    for k in range(n_in):
        e = np.zeros(n_in)
        e[k] = h
        fd_j[:, k] = (net.forward(x + e) - net.forward(x - e)) / (2 * h)
    worst_j = rel_err(input_jacobian(net, x), fd_j)

    a = rng.standard_normal((n_in, n_in))
    A = a @ a.T
    h2 = 1e-3
    H = np.empty((n_in, n_in))
    f0 = lambda v: float(net.forward(v)[0])
    for i in range(n_in):
        for j in range(n_in):
            ei = np.zeros(n_in)
            ej = np.zeros(n_in)
            ei[i] = h2
            ej[j] = h2
            H[i, j] = (f0(x + ei + ej) - f0(x + ei - ej) - f0(x - ei + ej) + f0(x - ei - ej)) / (4 * h2 * h2)
    worst_h = rel_err(weighted_hessian_trace(net, x, A), np.trace(A @ H), floor=1e-4)
    return worst_p, worst_j, worst_h


def small_panel(n_days=160, step=8, seed=7):
    from arbfree.pipeline import heavy_tailed_spec, synth_panel, truncate_and_densify

    res = synth_panel(heavy_tailed_spec(n_days=n_days), seed)
    dense, _ = truncate_and_densify(res.panel)
    return dense.select(np.arange(0, len(dense), step))


def zero_heads(model):
    """Silence the pseudo-yield output so P = exp(-τ·level)."""
    model.decoder.weights[-1][:, 0] = 0.0
    model.decoder.biases[-1][0] = 0.0
    return model


def ou_paramnet(kappa, theta, sigma, lam=None):
    """Exact linear ParamNet: μ_P = κ(θ - z), diagonal Σ = σ, constant λ."""
    from arbfree.nn import Mlp

    kappa, theta, sigma = (np.atleast_1d(np.asarray(a, float)) for a in (kappa, theta, sigma))
    d = kappa.size
    lam = np.zeros(d) if lam is None else np.atleast_1d(np.asarray(lam, float))
    w = np.zeros((d, 3 * d))
    w[:, :d] = -np.diag(kappa)
    b = np.concatenate([kappa * theta, np.log(np.expm1(sigma)), lam])
    return Mlp((d, 3 * d), ("identity",), [w], [b])


def ou_model(kappa, theta, sigma, lam=None, **cfg):
    from arbfree.dynamics import DynamicsConfig, DynamicsModel, VasicekDecoder

    net = ou_paramnet(kappa, theta, sigma, lam)
    d = net.widths[0]
    dec = VasicekDecoder(0.5, 0.03, 0.01, latent_dim=d)
    return DynamicsModel(DynamicsConfig(widths=(), **cfg), net, dec, dec.checksum(), d)


def simulate_ou(kappa, theta, sigma, n, dt, rng, z0=None):
    """Exact OU transitions, diagonal coefficients."""
    kappa, theta, sigma = (np.asarray(a, float) for a in (kappa, theta, sigma))
    a = np.exp(-kappa * dt)
    sd = sigma * np.sqrt(-np.expm1(-2 * kappa * dt) / (2 * kappa))
    z = np.empty((n, kappa.size))
    z[0] = theta if z0 is None else z0
    for t in range(1, n):
        z[t] = theta + a * (z[t - 1] - theta) + sd * rng.standard_normal(kappa.size)
    return z
