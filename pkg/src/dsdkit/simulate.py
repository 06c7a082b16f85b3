"""Synthetic bonafide-resource / generator imbalance experiment.

Bonafide embeddings are drawn from a mixture of "resource" clusters and fakes
from a mixture of "generator" clusters, all centred on a sphere. A regime
fixes how many of each the training set sees; every regime is scored on the
same held-out set drawn from the full pools. Training on few resources and
many generators pushes the EER threshold on the log-score negative; the
converse pushes it positive.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import losses, metrics, nnet
from .errors import ConfigError

REGIMES = {
    # regime: (resource clusters, generator clusters)
    "ag_skewed": (1, 20),
    "br_skewed": (8, 2),
    "balanced": (8, 10),
}


@dataclass(frozen=True)
class ImbalanceSpec:
    regime: str = "balanced"
    n_bonafide: int = 1000
    n_fake: int = 1000
    n_resources: int | None = None
    n_generators: int | None = None
    dim: int = 16
    radius: float = 4.0
    spread: float = 1.0
    resource_pool: int = 16
    generator_pool: int = 40
    n_test_per_class: int = 1000
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    hidden: tuple[int, ...] = (256, 128)
    seed: int = 7

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {sorted(REGIMES)}")
        if min(self.n_bonafide, self.n_fake, self.n_test_per_class) < 10:
            raise ConfigError("need at least 10 samples per class")
        if not (np.isfinite(self.radius) and np.isfinite(self.spread)) or self.spread < 0:
            raise ConfigError("cluster geometry must be finite with nonnegative spread")
        if self.epochs < 1 or not self.lr > 0:
            raise ConfigError("epochs must be >= 1 and lr positive")
        k, g = self.clusters
        if not (1 <= k <= self.resource_pool and 1 <= g <= self.generator_pool):
            raise ConfigError("cluster counts must lie within the pools")

    @property
    def clusters(self) -> tuple[int, int]:
        k, g = REGIMES[self.regime]
        return (self.n_resources or k, self.n_generators or g)


def cluster_means(spec: ImbalanceSpec) -> tuple[np.ndarray, np.ndarray]:
    """Resource and generator means on the sphere; depends only on the seed and pool sizes."""
    rng = np.random.default_rng([spec.seed, 0])
    v = rng.normal(size=(spec.resource_pool + spec.generator_pool, spec.dim))
    v = spec.radius * v / np.linalg.norm(v, axis=1, keepdims=True)
    dist = np.linalg.norm(v[:, None] - v[None], axis=2)
    np.fill_diagonal(dist, np.inf)
    if not dist.min() > 1e-9:
        raise ConfigError("degenerate geometry: two cluster means coincide")
    return v[:spec.resource_pool], v[spec.resource_pool:]


def _draw(means, n, spread, rng):
    idx = rng.integers(0, len(means), n)
    return means[idx] + spread * rng.normal(size=(n, means.shape[1]))


def held_out(spec: ImbalanceSpec):
    res, gen = cluster_means(spec)
    rng = np.random.default_rng([spec.seed, 1])
    xb = _draw(res, spec.n_test_per_class, spec.spread, rng)
    xf = _draw(gen, spec.n_test_per_class, spec.spread, rng)
    y = np.r_[np.zeros(len(xb)), np.ones(len(xf))].astype(np.int64)
    return np.vstack([xb, xf]), y


def training_set(spec: ImbalanceSpec):
    res, gen = cluster_means(spec)
    k, g = spec.clusters
    rng = np.random.default_rng([spec.seed, 2])
    xb = _draw(res[:k], spec.n_bonafide, spec.spread, rng)
    xf = _draw(gen[:g], spec.n_fake, spec.spread, rng)
    y = np.r_[np.zeros(len(xb)), np.ones(len(xf))].astype(np.int64)
    return np.vstack([xb, xf]), y


def train_baseline(x, y, hidden, epochs, lr, batch_size, seed) -> nnet.MlpModel:
    """Plain MLP with a two-way softmax head trained by BCE (no stage-1 heads)."""
    model = nnet.build_mlp(x.shape[1], (*hidden, 2), seed=seed)
    params = model.params()
    state = nnet.AdamState.zeros_like(params)
    rng = np.random.default_rng([seed, 3])
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            acts = nnet.forward_cache(model, x[idx])
            _, g = losses.bce_with_logits(acts[-1], y[idx])
            params, state = nnet.adam_step(params, nnet.backward(model, x[idx], g, acts=acts), state, lr)
            model = model.with_params(params)
    return model


def run_regime(spec: ImbalanceSpec) -> dict:
    x, y = training_set(spec)
    model = train_baseline(x, y, spec.hidden, spec.epochs, spec.lr, spec.batch_size, spec.seed)
    xt, yt = held_out(spec)
    p = nnet.forward(model, xt).probabilities
    report = metrics.evaluate(p[:, 1], yt, boundary=0.5)
    out = report.to_dict()
    out["regime"] = spec.regime
    out["clusters"] = {"resources": spec.clusters[0], "generators": spec.clusters[1]}
    out["spec"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()}
    return out


def run_experiment(seed: int = 7, regimes=("ag_skewed", "br_skewed", "balanced"), **overrides) -> dict:
    """Run each regime with matched seeds and check the threshold sign pattern."""
    base = ImbalanceSpec(seed=seed, **overrides)
    results = {r: run_regime(replace(base, regime=r)) for r in regimes}
    tau = {r: results[r]["eer"]["threshold"] for r in regimes}
    checks = {}
    if "ag_skewed" in tau:
        checks["ag_skewed_threshold_negative"] = _num(tau["ag_skewed"]) < 0
    if "br_skewed" in tau:
        checks["br_skewed_threshold_positive"] = _num(tau["br_skewed"]) > 0
    if {"ag_skewed", "br_skewed", "balanced"} <= set(tau):
        b = abs(_num(tau["balanced"]))
        checks["balanced_threshold_smallest"] = b < abs(_num(tau["ag_skewed"])) and b < abs(_num(tau["br_skewed"]))
    return {
        "seed": seed,
        "thresholds": tau,
        "eer": {r: results[r]["eer"]["eer"] for r in regimes},
        "checks": checks,
        "sign_pattern_matches": all(checks.values()),
        "regimes": results,
    }


def _num(x) -> float:
    # thresholds arrive JSON-encoded, so infinities are the strings "inf" / "-inf"
    return float(x)
