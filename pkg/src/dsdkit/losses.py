"""Stage-one heads (angular-margin softmax, contrastive, bonafide centre) and the
binary cross-entropy of stage two, each returning analytic gradients.

Three-way labels: 0 = bonafide, 1 = TTS fake, 2 = VC fake.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

BONAFIDE, TTS, VC = 0, 1, 2
N_STAGE1_CLASSES = 3
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class LossConfig:
    asoftmax_margin: int = 2
    contrastive_margin: float = 1.0
    center_rate: float = 0.5
    weight_asoftmax: float = 1.0
    weight_contrastive: float = 0.5
    weight_center: float = 0.1
    pair_cap_factor: int = 4

    def __post_init__(self):
        if int(self.asoftmax_margin) != self.asoftmax_margin or self.asoftmax_margin < 1:
            raise ConfigError(f"A-Softmax margin must be an integer >= 1, got {self.asoftmax_margin}")
        if not self.contrastive_margin > 0:
            raise ConfigError("contrastive margin must be positive")
        if not 0 < self.center_rate <= 1:
            raise ConfigError("center update rate must lie in (0, 1]")
        w = (self.weight_asoftmax, self.weight_contrastive, self.weight_center)
        if min(w) < 0 or max(w) == 0:
            raise ConfigError(f"loss weights must be nonnegative and not all zero, got {w}")
        if self.pair_cap_factor < 1:
            raise ConfigError("pair_cap_factor must be >= 1")

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.weight_asoftmax, self.weight_contrastive, self.weight_center)


# --- angular-margin softmax ----------------------------------------------------

def chebyshev_t(m: int, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``cos(m*theta)`` and its derivative with respect to ``cos(theta)``."""
    t_prev, t_cur = np.ones_like(c), c.copy()
    d_prev, d_cur = np.zeros_like(c), np.ones_like(c)
    if m == 0:
        return t_prev, d_prev
    for _ in range(m - 1):
        t_prev, t_cur = t_cur, 2 * c * t_cur - t_prev
        d_prev, d_cur = d_cur, 2 * t_prev + 2 * c * d_cur - d_prev
    return t_cur, d_cur


def psi(cos_theta: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Monotone margin function ``(-1)^k cos(m theta) - 2k`` and ``d psi / d cos theta``.

    ``k`` is the index of the interval ``[k pi/m, (k+1) pi/m]`` holding theta.
    """
    c = np.clip(cos_theta, -1.0, 1.0)
    theta = np.arccos(c)
    k = np.minimum(np.floor(m * theta / np.pi), m - 1)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    t, dt = chebyshev_t(m, c)
    return sign * t - 2.0 * k, sign * dt


def asoftmax_loss(embeddings, class_weights, labels, m: int = 2):
    """Mean SphereFace loss.

    Logits are ``|x| cos(theta_j)`` for the other classes and ``|x| psi(theta_y)``
    for the target, with the class weight columns normalised to unit length.

    Returns ``(loss, d_embeddings, d_class_weights)``.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    w = np.asarray(class_weights, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    if x.ndim != 2 or w.ndim != 2 or w.shape[0] != x.shape[1] or y.shape != (n,):
        raise ShapeError(f"embeddings {x.shape}, class weights {w.shape}, labels {y.shape} are inconsistent")
    if n == 0:
        return 0.0, np.zeros_like(x), np.zeros_like(w)
    if y.min() < 0 or y.max() >= w.shape[1]:
        raise ShapeError("label outside the class range")

    x_norm = np.linalg.norm(x, axis=1)
    w_norm = np.linalg.norm(w, axis=0)
    if np.any(x_norm == 0) or np.any(w_norm == 0):
        raise NumericError("zero-norm embedding or class weight: angle undefined")
    u = x / x_norm[:, None]
    w_hat = w / w_norm
    cos = u @ w_hat  # (n, C)
    rows = np.arange(n)
    c_y = cos[rows, y]
    psi_y, dpsi_y = psi(c_y, m)

    logits = x_norm[:, None] * cos
    logits[rows, y] = x_norm * psi_y
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_norm - z[rows, y]))

    g = np.exp(z - log_norm[:, None])  # softmax
    g[rows, y] -= 1.0
    g /= n  # dL/dlogits

    # non-target: f_j = x . w_hat_j ; target: f_y = |x| psi(c_y)
    g_other = g.copy()
    g_other[rows, y] = 0.0
    gy = g[rows, y]
    wy_hat = w_hat[:, y].T  # (n, d)
    d_x = g_other @ w_hat.T
    d_x += gy[:, None] * (psi_y[:, None] * u + dpsi_y[:, None] * (wy_hat - c_y[:, None] * u))

    # d f_j / d w_j = |x| (u - c_j w_hat_j) / |w_j|
    coef = g_other * x_norm[:, None]
    coef[rows, y] = gy * x_norm * dpsi_y
    d_w = (u.T @ coef - w_hat * (coef * cos).sum(axis=0)) / w_norm
    return loss, d_x, d_w


# --- contrastive ---------------------------------------------------------------

def contrastive_loss(emb_a, emb_b, same_class, margin: float = 1.0):
    """Mean over pairs of ``d^2/2`` (same class) or ``max(0, margin - d)^2 / 2`` (cross).

    Returns ``(loss, d_emb_a, d_emb_b)``. A cross-class pair at distance zero
    has no defined direction and gets a zero gradient.
    """
    a = np.asarray(emb_a, dtype=np.float64)
    b = np.asarray(emb_b, dtype=np.float64)
    same = np.asarray(same_class, dtype=bool)
    if a.shape != b.shape or same.shape != (a.shape[0],):
        raise ShapeError("pair arrays are inconsistent")
    n = a.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(a), np.zeros_like(b)
    diff = a - b
    d = np.linalg.norm(diff, axis=1)
    hinge = np.maximum(0.0, margin - d)
    per_pair = np.where(same, 0.5 * d * d, 0.5 * hinge * hinge)
    scale = np.where(same, 1.0, -hinge / np.where(d > 0, d, 1.0))
    scale = np.where(~same & (d == 0), 0.0, scale)
    ga = scale[:, None] * diff / n
    return float(per_pair.mean()), ga, -ga


def make_pairs(is_fake, rng: np.random.Generator, cap: int | None = None):
    """Index pairs ``(i, j, same)`` for one batch.

    Every bonafide x fake pair, plus as many same-class pairs drawn without
    replacement. With ``cap`` set, cross pairs are first subsampled to
    ``cap // 2`` so the total never exceeds ``cap``.
    """
    is_fake = np.asarray(is_fake, dtype=bool)
    bona = np.flatnonzero(~is_fake)
    fake = np.flatnonzero(is_fake)
    ci, cj = np.meshgrid(bona, fake, indexing="ij")
    cross = np.stack([ci.ravel(), cj.ravel()], axis=1)
    if cap is not None and len(cross) > cap // 2:
        keep = np.sort(rng.choice(len(cross), size=cap // 2, replace=False))
        cross = cross[keep]

    same = []
    for group in (bona, fake):
        if group.size > 1:
            a, b = np.triu_indices(group.size, k=1)
            same.append(np.stack([group[a], group[b]], axis=1))
    same = np.concatenate(same) if same else np.zeros((0, 2), dtype=np.int64)
    n_same = min(len(cross), len(same))
    if n_same < len(same):
        same = same[np.sort(rng.choice(len(same), size=n_same, replace=False))]

    pairs = np.concatenate([cross, same]).astype(np.int64)
    flags = np.concatenate([np.zeros(len(cross), bool), np.ones(len(same), bool)])
    return pairs[:, 0], pairs[:, 1], flags


def contrastive_on_batch(embeddings, i, j, same, margin: float = 1.0):
    """Contrastive loss over index pairs, gradient scattered back onto ``embeddings``."""
    x = np.asarray(embeddings, dtype=np.float64)
    loss, ga, gb = contrastive_loss(x[i], x[j], same, margin)
    grad = np.zeros_like(x)
    np.add.at(grad, i, ga)
    np.add.at(grad, j, gb)
    return loss, grad


# --- centre --------------------------------------------------------------------

def center_loss(embeddings, labels, center, rate: float = 0.5):
    """Half mean squared distance of bonafide embeddings to the centre.

    Returns ``(loss, d_embeddings, new_center)``; fakes contribute nothing and
    the input centre is never modified.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    if c.shape != (x.shape[1],):
        raise ShapeError(f"center has shape {c.shape}, embeddings have dim {x.shape[1]}")
    bona = np.asarray(labels) == BONAFIDE
    n_b = int(bona.sum())
    grad = np.zeros_like(x)
    if n_b == 0:
        return 0.0, grad, c.copy()
    diff = x[bona] - c
    loss = 0.5 * float(np.mean(np.sum(diff * diff, axis=1)))
    grad[bona] = diff / n_b
    new_center = c - rate * np.mean(c - x[bona], axis=0)
    return loss, grad, new_center


# --- binary cross-entropy ------------------------------------------------------

def _check_binary(labels):
    y = np.asarray(labels)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("binary labels must be 0 or 1")
    return y.astype(np.float64)


def bce_loss(p_fake, labels):
    """Mean binary cross-entropy of fake probabilities against 0/1 labels (1 = fake).

    Returns ``(loss, d_p_fake)``; the gradient is zero where clamping is active.
    """
    y = _check_binary(labels)
    p = np.asarray(p_fake, dtype=np.float64)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = p.size
    loss = -float(np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc)))
    active = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    grad = np.where(active, (-(y / pc) + (1 - y) / (1 - pc)) / n, 0.0)
    return loss, grad


def bce_with_logits(logits, labels):
    """BCE on the fake column of a two-way softmax; returns ``(loss, d_logits)``."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != 2:
        raise ShapeError(f"expected (n, 2) logits, got {z.shape}")
    y = _check_binary(labels)
    # p_fake = sigmoid(z1 - z0), computed in log space for stability
    s = z[:, 1] - z[:, 0]
    log_p = -np.logaddexp(0.0, -s)
    log_q = -np.logaddexp(0.0, s)
    floor = np.log(PROB_CLAMP)
    clamped = np.where(y == 1, log_p < floor, log_q < floor)
    log_p = np.maximum(log_p, floor)
    log_q = np.maximum(log_q, floor)
    n = s.size
    loss = -float(np.mean(y * log_p + (1 - y) * log_q))
    p = np.exp(-np.logaddexp(0.0, -s))
    ds = np.where(clamped, 0.0, (p - y) / n)
    grad = np.stack([-ds, ds], axis=1)
    return loss, grad


# --- combined stage-one objective ----------------------------------------------

@dataclass
class Stage1Result:
    loss: float
    grad_embeddings: np.ndarray
    grad_class_weights: np.ndarray
    new_center: np.ndarray
    parts: dict


def stage1_combined(embeddings, labels, cfg: LossConfig, center, class_weights, pairs=None,
                    rng: np.random.Generator | None = None) -> Stage1Result:
    """Weighted sum of the three heads on one shared embedding.

    ``pairs`` is ``(i, j, same)``; when omitted it is drawn with :func:`make_pairs`
    from ``rng`` (or a fixed seed).
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    lam_as, lam_con, lam_cen = cfg.weights
    if pairs is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        pairs = make_pairs(y != BONAFIDE, rng, cap=cfg.pair_cap_factor * len(y))

    l_as, g_as, g_w = asoftmax_loss(x, class_weights, y, cfg.asoftmax_margin)
    l_con, g_con = contrastive_on_batch(x, *pairs, margin=cfg.contrastive_margin)
    l_cen, g_cen, new_center = center_loss(x, y, center, cfg.center_rate)

    loss = lam_as * l_as + lam_con * l_con + lam_cen * l_cen
    grad = lam_as * g_as + lam_con * g_con + lam_cen * g_cen
    return Stage1Result(
        loss=loss,
        grad_embeddings=grad,
        grad_class_weights=lam_as * g_w,
        new_center=new_center,
        parts={"asoftmax": l_as, "contrastive": l_con, "center": l_cen},
    )
