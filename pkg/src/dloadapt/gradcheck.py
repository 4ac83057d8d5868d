"""Finite-difference check of the training gradients on random small networks.

The reference loss is an independent straight-line implementation evaluated
in extended precision, so central differences resolve gradient entries far
below the float64 round-off of the loss itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rbfn import RbfNetwork
from .training import _heads_forward, backprop

KNEE_MARGIN = 1e-3  # residuals are kept this far from the smooth-L1 knee


@dataclass
class GradCheckReport:
    configs: int
    entries: int
    max_rel_error: float
    worst: tuple  # (config index, parameter name, flat index)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-5


def random_problem(rng: np.random.Generator, q_max: int = 16, lm_max: int = 12):
    """A random network and batch with every residual away from the loss knee."""
    l = int(rng.integers(1, 4))
    n = int(rng.integers(1, 4))
    m = int(rng.integers(1, lm_max // l + 1))
    q = int(rng.integers(1, q_max + 1))
    batch = int(rng.integers(1, 9))
    beta = float(rng.uniform(0.2, 2.0))
    centers = rng.normal(size=(q, l * m))
    widths = rng.uniform(0.8, 3.0, size=q)
    weights = rng.normal(size=(l * n * (m + 1), q))
    net = RbfNetwork(centers, widths, weights, l, n, m)
    phi = centers[rng.integers(q, size=batch)] + 0.7 * rng.normal(size=(batch, l * m))
    rdot = rng.normal(size=(batch, n))
    xdot = rng.normal(scale=2.0 * beta, size=(batch, m, l))
    # push residuals that land near |e| = beta outwards
    *_, pred = _heads_forward(net, phi, rdot, m)
    e = xdot - pred
    near = np.abs(np.abs(e) - beta) < KNEE_MARGIN
    xdot = np.where(near, xdot + np.sign(e) * 4 * KNEE_MARGIN, xdot)
    return net, phi, rdot, xdot, beta


def reference_loss(centers, widths, weights, phi, rdot, xdot, beta, l: int, n: int, m: int):
    """Batch-mean smooth-L1 loss over the feature heads, in ``np.longdouble``."""
    ld = np.longdouble
    centers, widths, weights = (np.asarray(a, dtype=ld) for a in (centers, widths, weights))
    phi, rdot, xdot = (np.asarray(a, dtype=ld) for a in (phi, rdot, xdot))
    beta = ld(beta)
    diff = phi[:, None, :] - centers[None, :, :]
    theta = np.exp(-(diff * diff).sum(axis=2) / (widths * widths))  # (B, q)
    flat = np.einsum("rq,bq->br", weights[:l * n * m], theta)  # vec(J_h) stacked per head
    jac = flat.reshape(len(phi), m, n, l)  # column i of head h is jac[:, h, i, :]
    e = np.abs(xdot - np.einsum("bhij,bi->bhj", jac, rdot))
    per = np.where(e < beta, 0.5 * e * e / beta, e - 0.5 * beta)
    return per.sum() / len(phi)


def check_gradients(configs: int = 100, seed: int = 0, h: float = 1e-6, q_max: int = 16,
                    lm_max: int = 12, floor: float = 1e-7) -> GradCheckReport:
    """Compare analytic loss gradients with central differences, entry by entry.

    Relative error is ``|a - f| / max(|a|, |f|, floor * max(1, loss))``: entries
    smaller than ``floor`` times the loss are compared in absolute terms.
    """
    rng = np.random.default_rng(seed)
    worst_err, worst = 0.0, (-1, "", -1)
    entries = 0
    for c in range(configs):
        net, phi, rdot, xdot, beta = random_problem(rng, q_max, lm_max)
        value, grads = backprop(net, phi, rdot, xdot, beta)
        tiny = floor * max(1.0, value)
        params = {k: np.asarray(getattr(net, k), dtype=np.longdouble) for k in ("centers", "widths", "weights")}

        def loss():
            return reference_loss(params["centers"], params["widths"], params["weights"],
                                  phi, rdot, xdot, beta, net.l, net.n, net.m)

        for name in ("weights", "centers", "widths"):
            flat = params[name].reshape(-1)
            g = grads[name].reshape(-1)
            for k in range(flat.size):
                old = flat[k]
                flat[k] = old + h
                up = loss()
                flat[k] = old - h
                down = loss()
                flat[k] = old
                fd = float((up - down) / (2 * h))
                err = abs(g[k] - fd) / max(abs(g[k]), abs(fd), tiny)
                entries += 1
                if err > worst_err:
                    worst_err, worst = err, (c, name, k)
    return GradCheckReport(configs, entries, float(worst_err), worst)
