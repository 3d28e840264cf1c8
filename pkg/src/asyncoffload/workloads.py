"""Seeded synthetic training problems with analytic gradients.

Parameters live in one flat float64 vector; :class:`ParamLayout` maps it to
named tensors. Weight matrices are stored ``(out, in)`` so that columns are
input channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import WorkloadConfig

__all__ = [
    "LogisticRegression",
    "MLP2",
    "ParamLayout",
    "ParamSpec",
    "PlantedDataset",
    "Quadratic",
    "Workload",
    "build_workload",
]


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def is_matrix(self) -> bool:
        return len(self.shape) == 2


class ParamLayout:
    def __init__(self, specs):
        self.specs = tuple(specs)
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.offsets = {}
        pos = 0
        for s in self.specs:
            self.offsets[s.name] = (pos, pos + s.size)
            pos += s.size
        self.size = pos

    @property
    def matrix_names(self) -> list[str]:
        return [s.name for s in self.specs if s.is_matrix]

    def spec(self, name: str) -> ParamSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise KeyError(name)

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        a, b = self.offsets[name]
        return flat[a:b].reshape(self.spec(name).shape)

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {s.name: self.view(flat, s.name) for s in self.specs}

    def flatten(self, tensors: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(tensors[s.name], dtype=np.float64).ravel() for s in self.specs])

    def important_mask(self, channel_masks: dict[str, np.ndarray]) -> np.ndarray:
        """Flat mask from per-matrix ``(rows, cols)`` masks; vectors are always important."""
        out = np.ones(self.size, dtype=bool)
        for name, mk in channel_masks.items():
            a, b = self.offsets[name]
            out[a:b] = np.asarray(mk, dtype=bool).ravel()
        return out


class PlantedDataset:
    """Gaussian features where a fixed subset of columns drives the labels.

    Feature ``j`` has scale ``s_j`` (lognormal, boosted by ``relevant_scale``
    on relevant columns). Labels are drawn from a softmax over a planted
    linear model that reads only the relevant columns.
    """

    def __init__(self, cfg: WorkloadConfig, seed: int):
        rng = np.random.default_rng([seed, 101])
        m, C, N = cfg.n_features, cfg.n_classes, cfg.n_samples
        n_rel = max(1, int(round(cfg.relevant_frac * m)))
        self.relevant = np.sort(rng.choice(m, size=n_rel, replace=False))
        scales = np.exp(cfg.feature_sigma * rng.standard_normal(m))
        scales[self.relevant] *= cfg.relevant_scale
        self.scales = scales
        u = rng.standard_normal((N, m))
        self.X = u * scales
        w = np.zeros((C, m))
        w[:, self.relevant] = cfg.weight_scale * rng.standard_normal((C, n_rel))
        logits = u @ w.T
        p = _softmax(logits)
        cum = p.cumsum(axis=1)
        draw = rng.random((N, 1))
        self.y = np.minimum((draw > cum).sum(axis=1), C - 1)
        self.n_classes = C


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = y.shape[0]
    loss = float(np.mean(logsum - z[np.arange(n), y]))
    d = np.exp(z - logsum[:, None])
    d[np.arange(n), y] -= 1.0
    return loss, d / n


class Workload:
    layout: ParamLayout
    has_accuracy = False

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def sample_batch(self, rng: np.random.Generator):
        raise NotImplementedError

    def loss_and_grad(self, theta: np.ndarray, batch) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def loss(self, theta: np.ndarray, batch) -> float:
        return self.loss_and_grad(theta, batch)[0]

    def evaluate(self, theta: np.ndarray) -> tuple[float, float | None]:
        """Full-data loss and, for classifiers, accuracy."""
        raise NotImplementedError


class Quadratic(Workload):
    """``L(W) = 1/2 sum_ij a_j (W_ij - W*_ij)^2`` with per-column curvature ``a_j``.

    The target has large entries on the relevant columns, so gradient energy
    concentrates there. ``noise`` adds seeded Gaussian noise to the gradient.
    """

    def __init__(self, cfg: WorkloadConfig, seed: int):
        rng = np.random.default_rng([seed, 102])
        r, m = cfg.n_outputs, cfg.n_features
        self.layout = ParamLayout([ParamSpec("W", (r, m))])
        a = np.exp(cfg.curvature_sigma * rng.standard_normal(m))
        self.curv = a / a.max()
        n_rel = max(1, int(round(cfg.relevant_frac * m)))
        rel = np.sort(rng.choice(m, size=n_rel, replace=False))
        col_scale = np.ones(m)
        col_scale[rel] = cfg.relevant_scale
        self.target = cfg.weight_scale * rng.standard_normal((r, m)) * col_scale
        self.noise = cfg.noise
        self.shape = (r, m)

    def init_params(self, rng):
        return np.zeros(self.layout.size)

    def sample_batch(self, rng):
        if self.noise > 0:
            return self.noise * rng.standard_normal(self.shape)
        return None

    def _loss(self, theta):
        d = theta.reshape(self.shape) - self.target
        return 0.5 * float(np.sum(self.curv * d * d)), d

    def loss_and_grad(self, theta, batch):
        loss, d = self._loss(theta)
        g = self.curv * d
        if batch is not None:
            g = g + batch
        return loss, g.ravel()

    def evaluate(self, theta):
        return self._loss(theta)[0], None


class LogisticRegression(Workload):
    has_accuracy = True

    def __init__(self, cfg: WorkloadConfig, seed: int):
        self.data = PlantedDataset(cfg, seed)
        self.C, self.m = cfg.n_classes, cfg.n_features
        self.batch_size = min(cfg.batch_size, cfg.n_samples)
        self.init_scale = cfg.init_scale
        self.layout = ParamLayout([ParamSpec("W", (self.C, self.m)), ParamSpec("b", (self.C,))])

    def init_params(self, rng):
        """Zeros, or random weights that add ``init_scale``-sized logit noise per feature."""
        theta = np.zeros(self.layout.size)
        if self.init_scale > 0:
            W = self.init_scale * rng.standard_normal((self.C, self.m)) / self.data.scales
            theta[: W.size] = W.ravel()
        return theta

    def sample_batch(self, rng):
        return rng.integers(0, self.data.X.shape[0], size=self.batch_size)

    def _forward(self, theta, X, y):
        W = self.layout.view(theta, "W")
        b = self.layout.view(theta, "b")
        loss, dz = _xent(X @ W.T + b, y)
        return loss, dz

    def loss_and_grad(self, theta, batch):
        X, y = self.data.X[batch], self.data.y[batch]
        loss, dz = self._forward(theta, X, y)
        return loss, np.concatenate([(dz.T @ X).ravel(), dz.sum(axis=0)])

    def loss(self, theta, batch):
        return self._forward(theta, self.data.X[batch], self.data.y[batch])[0]

    def evaluate(self, theta):
        W = self.layout.view(theta, "W")
        b = self.layout.view(theta, "b")
        logits = self.data.X @ W.T + b
        loss, _ = _xent(logits, self.data.y)
        return loss, float(np.mean(logits.argmax(axis=1) == self.data.y))


class MLP2(Workload):
    """One tanh hidden layer followed by a softmax classifier."""

    has_accuracy = True

    def __init__(self, cfg: WorkloadConfig, seed: int):
        self.data = PlantedDataset(cfg, seed)
        self.m, self.h, self.C = cfg.n_features, cfg.n_hidden, cfg.n_classes
        self.batch_size = min(cfg.batch_size, cfg.n_samples)
        self.layout = ParamLayout([
            ParamSpec("W1", (self.h, self.m)), ParamSpec("b1", (self.h,)),
            ParamSpec("W2", (self.C, self.h)), ParamSpec("b2", (self.C,)),
        ])

    def init_params(self, rng):
        W1 = rng.standard_normal((self.h, self.m)) / np.sqrt(self.m)
        W2 = rng.standard_normal((self.C, self.h)) / np.sqrt(self.h)
        return self.layout.flatten({"W1": W1, "b1": np.zeros(self.h), "W2": W2, "b2": np.zeros(self.C)})

    def sample_batch(self, rng):
        return rng.integers(0, self.data.X.shape[0], size=self.batch_size)

    def _forward(self, theta, X):
        p = self.layout.views(theta)
        a = np.tanh(X @ p["W1"].T + p["b1"])
        return p, a, a @ p["W2"].T + p["b2"]

    def loss_and_grad(self, theta, batch):
        X, y = self.data.X[batch], self.data.y[batch]
        p, a, logits = self._forward(theta, X)
        loss, dz = _xent(logits, y)
        dW2 = dz.T @ a
        db2 = dz.sum(axis=0)
        dpre = (dz @ p["W2"]) * (1.0 - a * a)
        dW1 = dpre.T @ X
        db1 = dpre.sum(axis=0)
        return loss, self.layout.flatten({"W1": dW1, "b1": db1, "W2": dW2, "b2": db2})

    def loss(self, theta, batch):
        _, _, logits = self._forward(theta, self.data.X[batch])
        return _xent(logits, self.data.y[batch])[0]

    def evaluate(self, theta):
        _, _, logits = self._forward(theta, self.data.X)
        loss, _ = _xent(logits, self.data.y)
        return loss, float(np.mean(logits.argmax(axis=1) == self.data.y))


_KINDS = {"quadratic": Quadratic, "logistic_regression": LogisticRegression, "mlp2": MLP2}


def build_workload(cfg: WorkloadConfig, seed: int) -> Workload:
    try:
        cls = _KINDS[cfg.kind]
    except KeyError:
        raise ValueError(f"unknown workload kind {cfg.kind!r}") from None
    return cls(cfg, seed)
