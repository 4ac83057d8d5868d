"""Offline fitting of the RBF network: k-means init, smooth-L1 loss, Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import TrainingDiverged
from .optim import Adam
from .rbfn import RbfNetwork, backward


@dataclass(frozen=True)
class TrainConfig:
    q: int = 256
    beta: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 200
    seed: int = 0
    kmeans_samples: int = 10_000
    kmeans_iters: int = 100
    sigma_min: float = 1e-3
    target_feature: int = 4

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.batch_size < 1 or self.q < 1:
            raise ValueError("batch_size and q must be at least 1")


@dataclass(frozen=True)
class Normalization:
    """``phi_n = (phi - shape_mean) / shape_scale``, ``v_n = v / velocity_scale``."""

    shape_mean: np.ndarray
    shape_scale: float
    velocity_scale: float

    @classmethod
    def fit(cls, data: Dataset) -> "Normalization":
        mean = data.phi.mean(axis=0)
        scale = float(np.sqrt(np.mean(data.phi.var(axis=0))))
        vel = np.concatenate([data.rdot.ravel(), data.xdot.ravel()])
        return cls(mean, scale, float(np.sqrt(np.mean(vel**2))))

    def apply(self, data: Dataset) -> Dataset:
        return Dataset(data.t, (data.phi - self.shape_mean) / self.shape_scale,
                       data.rdot / self.velocity_scale, data.xdot / self.velocity_scale,
                       data.gripper, data.meta)

    def denormalize(self, net: RbfNetwork) -> RbfNetwork:
        """Fold the shape map into centers and widths.  Weights are scale-free."""
        out = net.copy()
        out.centers = self.shape_mean + self.shape_scale * net.centers
        out.widths = self.shape_scale * net.widths
        return out


@dataclass
class TrainResult:
    net: RbfNetwork
    history: list[float]
    normalization: Normalization
    initial_net: RbfNetwork = field(repr=False)


# --- k-means ---------------------------------------------------------------

def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100, tol: float = 1e-9):
    """k-means++ seeding followed by Lloyd iterations.

    Returns ``(centers, labels, objective_history)``; the history holds the
    within-cluster sum of squares after every iteration.
    """
    x = np.asarray(x, dtype=float)
    if len(x) < k:
        raise ValueError(f"need at least {k} samples, got {len(x)}")
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(len(x))]
    closest = _sqdist(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        pick = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=closest / total)
        centers[j] = x[pick]
        closest = np.minimum(closest, _sqdist(x, centers[j:j + 1])[:, 0])

    history = []
    labels = np.zeros(len(x), dtype=int)
    for _ in range(max_iter):
        d = _sqdist(x, centers)
        labels = d.argmin(axis=1)
        dmin = d[np.arange(len(x)), labels]
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # steal the farthest point from a cluster that can spare one
            far = int(np.where(counts[labels] > 1, dmin, -1.0).argmax())
            counts[labels[far]] -= 1
            counts[j] += 1
            centers[j] = x[far]
            labels[far] = j
            dmin[far] = -1.0
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        centers = sums / counts[:, None]
        diff = x - centers[labels]
        history.append(float(np.einsum("ij,ij->", diff, diff)))
        if len(history) > 1 and history[-2] - history[-1] <= tol * max(history[-2], 1e-300):
            break
    return centers, labels, history


def kmeans_init(phi: np.ndarray, q: int, seed: int = 0, sigma_min: float = 1e-3,
                max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Centers from k-means, widths from the mean member-to-center distance."""
    rng = np.random.default_rng(seed)
    centers, labels, _ = kmeans(phi, q, rng, max_iter)
    dist = np.linalg.norm(phi - centers[labels], axis=1)
    counts = np.bincount(labels, minlength=q)
    widths = np.bincount(labels, weights=dist, minlength=q) / np.maximum(counts, 1)
    return centers, np.maximum(widths, sigma_min)


# --- loss and gradients ----------------------------------------------------

def smooth_l1_loss(e: np.ndarray, beta: float = 1.0) -> tuple[float, np.ndarray]:
    """Summed smooth-L1 loss and its gradient with respect to ``e``."""
    e = np.asarray(e, dtype=float)
    a = np.abs(e)
    quad = a < beta
    loss = np.where(quad, 0.5 * e * e / beta, a - 0.5 * beta)
    grad = np.where(quad, e / beta, np.sign(e))
    return float(loss.sum()), grad


def _heads_forward(net: RbfNetwork, phi, rdot, heads: int):
    sqdist = _sqdist(phi, net.centers)
    theta = np.exp(-sqdist / net.widths**2)
    rows = slice(0, heads * net.block)
    out = (theta @ net.weights[rows].T).reshape(len(phi), heads, net.n, net.l)
    pred = np.einsum("bhij,bi->bhj", out, rdot)
    return theta, sqdist, rows, pred


def batch_loss(net: RbfNetwork, phi, rdot, xdot, beta: float = 1.0) -> float:
    """Batch-mean loss summed over the feature heads."""
    *_, pred = _heads_forward(net, phi, rdot, xdot.shape[1])
    return smooth_l1_loss(xdot - pred, beta)[0] / len(phi)


def backprop(net: RbfNetwork, phi, rdot, xdot, beta: float = 1.0) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and exact gradients w.r.t. weights, centers and widths.

    ``xdot`` has shape ``(B, heads, l)``; head ``h`` is compared with the
    network's head ``h``.
    """
    heads = xdot.shape[1]
    theta, sqdist, rows, pred = _heads_forward(net, phi, rdot, heads)
    loss, g = smooth_l1_loss(xdot - pred, beta)
    g_pred = -g / len(phi)
    g_out = np.einsum("bhj,bi->bhij", g_pred, rdot).reshape(len(phi), -1)
    return loss / len(phi), backward(net, phi, theta, sqdist, g_out, rows)


def dataset_loss(net: RbfNetwork, data: Dataset, beta: float = 1.0, velocity_scale: float = 1.0,
                 chunk: int = 4096) -> float:
    """Mean per-sample loss with velocities divided by ``velocity_scale``."""
    total = 0.0
    for s in range(0, len(data), chunk):
        sl = slice(s, s + chunk)
        *_, pred = _heads_forward(net, data.phi[sl], data.rdot[sl] / velocity_scale, data.m)
        total += smooth_l1_loss(data.xdot[sl] / velocity_scale - pred, beta)[0]
    return total / len(data)


# --- training --------------------------------------------------------------

def train(data: Dataset, cfg: TrainConfig = TrainConfig(), seed: int | None = None,
          on_epoch=None) -> TrainResult:
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    norm = Normalization.fit(data)
    nd = norm.apply(data)
    floor = cfg.sigma_min / norm.shape_scale

    sub = nd.phi
    if len(sub) > cfg.kmeans_samples:
        sub = sub[np.sort(rng.choice(len(sub), cfg.kmeans_samples, replace=False))]
    centers, widths = kmeans_init(sub, cfg.q, seed=seed, sigma_min=floor, max_iter=cfg.kmeans_iters)
    net = RbfNetwork(centers, widths, np.zeros((data.l * data.n * (data.m + 1), cfg.q)),
                     data.l, data.n, data.m, sigma_min=floor)
    initial = norm.denormalize(net)

    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    params = {"weights": net.weights, "centers": net.centers, "widths": net.widths}
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(nd))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            loss, grads = backprop(net, nd.phi[b], nd.rdot[b], nd.xdot[b], cfg.beta)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            opt.step(params, grads)
            np.maximum(net.widths, floor, out=net.widths)
            total += loss * len(b)
        history.append(total / len(nd))
        if on_epoch is not None:
            on_epoch(epoch, history[-1])

    final = norm.denormalize(net)
    final.sigma_min = cfg.sigma_min
    final.target_feature = cfg.target_feature
    initial.sigma_min = cfg.sigma_min
    return TrainResult(final, history, norm, initial)
