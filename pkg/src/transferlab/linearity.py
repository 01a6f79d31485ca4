"""Local linearity of embeddings along image interpolation paths.

For a pair (x_a, x_b) of different identities and the blends
x^(lam) = (1 - lam) x_a + lam x_b, a well-behaved embedding keeps the cosine
distance 1 - cos(R(x^(lam)), R(x_a)) close to lam itself. This module
measures that curve and its RMS deviation from the diagonal, derives the
ideal two-class softmax output along the path, and fine-tunes a trained
model toward the property with a triplet loss plus soft-assignment terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .augment import AugmentedDataset, AugTuple, interpolate
from .data import Dataset
from .models import (
    DegenerateEmbeddingError,
    EmbeddingModel,
    ParamGrads,
    TrainingDivergedError,
    ZERO_EMBED_TOL,
    log_softmax,
    softmax,
)

DEFAULT_BETA = 4.5
PROB_FLOOR = 1e-12


@dataclass
class LinearityCurve:
    k_grid: np.ndarray      # integers 0..K
    mean_cosine: np.ndarray  # mean of 1 - cos(R(x^(k/K)), R(x_a)) over pairs
    l2_norm: np.ndarray      # mean normalized L2 distance from x_a (= k/K)
    xi: float                # RMS deviation from the diagonal over k >= 1
    num_pairs: int


def _embed_batch(model, X: np.ndarray) -> np.ndarray:
    """Accept an EmbeddingModel or any callable x -> representation."""
    if hasattr(model, "representations"):
        return model.representations(X)
    return np.stack([np.asarray(model(x), dtype=float) for x in X])


def measure_linearity_curve(model, pairs, k_steps: int = 100) -> LinearityCurve:
    """Mean cosine-distance curve along the interpolation grid k = 0..k_steps."""
    if len(pairs) == 0:
        raise ValueError("need at least one image pair")
    grid = np.arange(k_steps + 1)
    lams = grid / k_steps
    cos_sum = np.zeros(k_steps + 1)
    l2_sum = np.zeros(k_steps + 1)
    for x_a, x_b in pairs:
        x_a = np.asarray(x_a, dtype=float)
        x_b = np.asarray(x_b, dtype=float)
        X = (1.0 - lams)[:, None] * x_a + lams[:, None] * x_b
        R = _embed_batch(model, X)
        norms = np.linalg.norm(R, axis=1)
        if norms.min() < ZERO_EMBED_TOL:
            raise DegenerateEmbeddingError("zero-norm representation on the path")
        r_a = R[0]
        cos_sum += 1.0 - (R @ r_a) / (norms * norms[0])
        l2_sum += np.linalg.norm(X - x_a, axis=1) / np.linalg.norm(x_b - x_a)
    mean_cos = cos_sum / len(pairs)
    l2 = l2_sum / len(pairs)
    xi = diagonal_rms_deviation(mean_cos, l2)
    return LinearityCurve(grid, mean_cos, l2, xi, len(pairs))


def diagonal_rms_deviation(mean_cosine: np.ndarray, l2_norm: np.ndarray) -> float:
    """RMS gap between the measured curve and the diagonal, k = 1..K."""
    diff = np.asarray(mean_cosine)[1:] - np.asarray(l2_norm)[1:]
    return float(np.sqrt(np.mean(diff ** 2)))


def curve_deviation(curve: LinearityCurve) -> float:
    return diagonal_rms_deviation(curve.mean_cosine, curve.l2_norm)


def poi_anchored_pairs(dataset: Dataset, poi_ids, count: int, seed: int):
    """Fresh (PoI image, other-identity image) pairs for held-out measurement."""
    rng = np.random.default_rng(seed)
    poi_ids = list(poi_ids)
    other = np.nonzero(~np.isin(dataset.labels, poi_ids))[0]
    if len(other) == 0:
        raise ValueError("dataset holds only PoI images")
    pairs = []
    for i in range(count):
        anchor = dataset.indices_of(poi_ids[i % len(poi_ids)])
        ia = rng.choice(anchor)
        ib = rng.choice(other)
        pairs.append((dataset.images[ia], dataset.images[ib]))
    return pairs


# -- ideal output along the path ---------------------------------------------

def ideal_pair_output(lam: float, beta: float, a: int, b: int,
                      num_classes: int) -> np.ndarray:
    """Ideal class probabilities at x^(lam): mass splits between a and b.

    Entry a is (1 + exp(2*beta*lam - beta))^-1, entry b the complement,
    every other class zero.
    """
    if a == b:
        raise ValueError("endpoints must have different identities")
    out = np.zeros(num_classes)
    p_a = 1.0 / (1.0 + np.exp(2.0 * beta * lam - beta))
    out[a] = p_a
    out[b] = 1.0 - p_a
    return out


def fit_sharpness(lambdas: np.ndarray, observed: np.ndarray,
                  beta0: float | None = None) -> float:
    """Least-squares fit of the sharpness beta to observed subject-side probs."""
    lambdas = np.asarray(lambdas, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if len(lambdas) < 2 or np.ptp(observed) < 1e-12:
        raise ValueError("observations are degenerate; cannot fit")
    if beta0 is None:
        # logit trick for a starting point: logit(y) = beta * (1 - 2 lam)
        y = np.clip(observed, 1e-9, 1.0 - 1e-9)
        z = np.log(y / (1.0 - y))
        u = 1.0 - 2.0 * lambdas
        denom = float(u @ u)
        beta0 = float(z @ u / denom) if denom > 1e-12 else 1.0
        beta0 = min(max(beta0, 0.1), 50.0)

    def f(lam, beta):
        return 1.0 / (1.0 + np.exp(2.0 * beta * lam - beta))

    popt, _ = curve_fit(f, lambdas, observed, p0=[beta0],
                        maxfev=10000, xtol=1e-15, ftol=1e-15, gtol=1e-15)
    beta = float(popt[0])
    if beta <= 0:
        raise ValueError(f"fit produced non-positive sharpness {beta}")
    return beta


def fit_beta(model, tuples: list[AugTuple]) -> float:
    """Fit the sharpness on a model's observed subject-side probabilities."""
    if len(tuples) < 20:
        raise ValueError("need at least 20 tuples spanning lambda in [0, 1]")
    lambdas = np.array([t.lam for t in tuples])
    observed = np.array([model.probs(t.x_interp)[t.a] for t in tuples])
    return fit_sharpness(lambdas, observed)


# -- losses -------------------------------------------------------------------

def triplet_linearity_loss(model, tup: AugTuple) -> float:
    """(C_a(lam) - lam)^2 + (1 - lam - C_b(lam))^2 for one tuple."""
    R = _embed_batch(model, np.stack([tup.x_a, tup.x_interp, tup.x_b]))
    norms = np.linalg.norm(R, axis=1)
    if norms.min() < ZERO_EMBED_TOL:
        raise DegenerateEmbeddingError("zero-norm representation in triplet")
    c_a = 1.0 - R[1] @ R[0] / (norms[1] * norms[0])
    c_b = 1.0 - R[1] @ R[2] / (norms[1] * norms[2])
    return float((c_a - tup.lam) ** 2 + (1.0 - tup.lam - c_b) ** 2)


def soft_assignment_loss(model, x_point: np.ndarray, lam: float, a: int, b: int,
                         beta: float = DEFAULT_BETA) -> float:
    """Cross-entropy of the model's output against the ideal pair output.

    Only entries a and b of the target are nonzero, so the sum reduces to two
    terms; probabilities are floored at 1e-12 inside the log.
    """
    target = ideal_pair_output(lam, beta, a, b, model.config.num_classes)
    probs = np.maximum(model.probs(x_point), PROB_FLOOR)
    return float(-(target[a] * np.log(probs[a]) + target[b] * np.log(probs[b])))


def _cos_grad_wrt_u(U: np.ndarray, V: np.ndarray, cos_uv: np.ndarray,
                    nu: np.ndarray, nv: np.ndarray) -> np.ndarray:
    """Row-wise d cos(u, v) / d u."""
    return V / (nu * nv)[:, None] - U * (cos_uv / nu ** 2)[:, None]


def finetune_batch_loss_and_grads(model: EmbeddingModel, batch: list[AugTuple],
                                  beta: float) -> tuple[float, float, ParamGrads]:
    """Sum of per-tuple objectives over the batch, with parameter gradients.

    Each tuple contributes the triplet term plus soft-assignment terms
    evaluated at x_a (lam=0), x^(lam) and x_b (lam=1). Returns
    (total loss, total triplet part, grads of the total).
    """
    B = len(batch)
    X = np.concatenate([
        np.stack([t.x_a for t in batch]),
        np.stack([t.x_interp for t in batch]),
        np.stack([t.x_b for t in batch]),
    ])
    lam = np.array([t.lam for t in batch])
    a_idx = np.array([t.a for t in batch])
    b_idx = np.array([t.b for t in batch])

    R, acts = model.feature_forward(X)
    R_a, R_l, R_b = R[:B], R[B : 2 * B], R[2 * B :]
    n_a = np.linalg.norm(R_a, axis=1)
    n_l = np.linalg.norm(R_l, axis=1)
    n_b = np.linalg.norm(R_b, axis=1)
    if min(n_a.min(), n_l.min(), n_b.min()) < ZERO_EMBED_TOL:
        raise DegenerateEmbeddingError("zero-norm representation in fine-tune batch")

    cos_la = np.einsum("ij,ij->i", R_l, R_a) / (n_l * n_a)
    cos_lb = np.einsum("ij,ij->i", R_l, R_b) / (n_l * n_b)
    c_a = 1.0 - cos_la
    c_b = 1.0 - cos_lb
    tri = (c_a - lam) ** 2 + (1.0 - lam - c_b) ** 2
    loss_tri = float(tri.sum())

    # Triplet gradient via the cosine chain rule, for all three endpoints.
    d_ca = 2.0 * (c_a - lam)
    d_cb = 2.0 * (c_b - (1.0 - lam))
    dR = np.zeros_like(R)
    dR[B : 2 * B] -= d_ca[:, None] * _cos_grad_wrt_u(R_l, R_a, cos_la, n_l, n_a)
    dR[:B] -= d_ca[:, None] * _cos_grad_wrt_u(R_a, R_l, cos_la, n_a, n_l)
    dR[B : 2 * B] -= d_cb[:, None] * _cos_grad_wrt_u(R_l, R_b, cos_lb, n_l, n_b)
    dR[2 * B :] -= d_cb[:, None] * _cos_grad_wrt_u(R_b, R_l, cos_lb, n_b, n_l)

    # Soft targets at the path positions 0, lam and 1.
    pos = np.concatenate([np.zeros(B), lam, np.ones(B)])
    p_a = 1.0 / (1.0 + np.exp(2.0 * beta * pos - beta))
    rows = np.arange(3 * B)
    cols_a = np.tile(a_idx, 3)
    cols_b = np.tile(b_idx, 3)
    target = np.zeros((3 * B, model.config.num_classes))
    target[rows, cols_a] = p_a
    target[rows, cols_b] = 1.0 - p_a

    Z = R @ model.w_c.T + model.b_c
    logp = log_softmax(Z)
    floored = np.maximum(logp, np.log(PROB_FLOOR))
    loss_soft = float(-(target[rows, cols_a] * floored[rows, cols_a]
                        + target[rows, cols_b] * floored[rows, cols_b]).sum())

    dZ = softmax(Z) - target
    dR += dZ @ model.w_c
    _, feat_grads = model.feature_backward(acts, dR, want_params=True)
    grads = ParamGrads(feature=feat_grads, w_c=dZ.T @ R, b_c=dZ.sum(axis=0))
    return loss_tri + loss_soft, loss_tri, grads


@dataclass
class FinetuneConfig:
    beta: float = DEFAULT_BETA
    lr: float = 0.05
    epochs: int = 5
    batch: int = 32
    seed: int = 0
    freeze_classifier: bool = False


def finetune(model: EmbeddingModel, augmented: AugmentedDataset,
             cfg: FinetuneConfig) -> EmbeddingModel:
    """Fine-tune a softmax-trained model on the interpolation tuples.

    Minimizes the summed triplet + soft-assignment objective with minibatch
    gradient descent; epoch means are recorded in finetune_history.
    Deterministic in cfg.seed; epochs=0 returns an unchanged copy.
    """
    tuned = model.copy()
    tuned.finetune_history = []
    tuples = augmented.tuples
    if not tuples:
        raise ValueError("augmented dataset holds no tuples")
    rng = np.random.default_rng(cfg.seed)
    n = len(tuples)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch):
            chunk = [tuples[i] for i in order[start : start + cfg.batch]]
            loss, _, grads = finetune_batch_loss_and_grads(tuned, chunk, cfg.beta)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite fine-tune loss at epoch {epoch} "
                    f"(lr={cfg.lr}, batch={cfg.batch}, beta={cfg.beta})"
                )
            grads_scale = 1.0 / len(chunk)
            scaled = ParamGrads(
                feature=[(gW * grads_scale, gb * grads_scale) for gW, gb in grads.feature],
                w_c=grads.w_c * grads_scale,
                b_c=grads.b_c * grads_scale,
            )
            tuned.apply_grads(scaled, cfg.lr, freeze_classifier=cfg.freeze_classifier)
            total += loss
        tuned.finetune_history.append(total / n)
    return tuned


def mean_triplet_loss(model, tuples: list[AugTuple]) -> float:
    return float(np.mean([triplet_linearity_loss(model, t) for t in tuples]))
