"""Adversarial-example search against one or more substitute models.

All searches optimize in the unconstrained tanh parameterization
(x' = tanh(w), w = arctanh(x) with an epsilon clamp), so pixels can never
leave (-1, 1). Three searches are provided: the classic hinge-objective
attack (single model or ensemble sum), a multi-step search that drives the
mean substitute cosine toward a target image under a growing distance
budget, and a distance-capped variant with an exponential penalty. An
optional pixel mask restricts every update to a region.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import DegenerateEmbeddingError, EmbeddingModel, ZERO_EMBED_TOL

ARCTANH_EPS = 1e-6


class AttackDivergedError(RuntimeError):
    pass


@dataclass
class AttackConfig:
    c: float = 20.0              # weight of the hinge term vs the L2 term
    kappa: float = 20.0          # hinge margin: objective floors at -kappa
    l2_budget: float = 20.0      # success-accounting distance bound
    gamma: float | None = None   # distance cap for the penalized variant
    region_mask: np.ndarray | None = None
    lr: float = 0.01
    steps_per_round: int = 1000  # inner iterations per budget round
    max_rounds: int = 50         # budget rounds before giving up
    cosine_stop: float = 0.8     # mean-cosine level that ends the search
    seed: int = 0


@dataclass
class AttackResult:
    mode: str
    x_adv: np.ndarray
    l2: float
    steps: int
    substitute_success: bool
    mean_cosine: float | None = None
    substitute_cosines: list[float] | None = None
    rounds_used: int | None = None
    failure_reason: str | None = None
    subject_id: int | None = None
    victim_id: int | None = None
    target_success: dict[str, bool] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "mode": self.mode,
            "subject_id": self.subject_id,
            "victim_id": self.victim_id,
            "l2": self.l2,
            "steps": self.steps,
            "delta_final": self.rounds_used,
            "mean_cosine": self.mean_cosine,
            "per_target_success": dict(sorted(self.target_success.items())),
            "failure_reason": self.failure_reason,
        }


def to_search_space(x: np.ndarray) -> np.ndarray:
    """arctanh with inputs clamped to +-(1 - 1e-6)."""
    x = np.clip(np.asarray(x, dtype=float), -1.0 + ARCTANH_EPS, 1.0 - ARCTANH_EPS)
    return np.arctanh(x)


def _resolve_mask(cfg: AttackConfig, dim: int) -> np.ndarray | None:
    if cfg.region_mask is None:
        return None
    mask = np.asarray(cfg.region_mask, dtype=bool)
    if mask.shape != (dim,):
        raise ValueError(f"region mask length {mask.shape} != input dim {dim}")
    if not mask.any():
        raise ValueError("region mask selects no pixels")
    return mask.astype(float)


# -- hinge objective ----------------------------------------------------------

def cw_hinge(logits: np.ndarray, mode: str, label: int, kappa: float) -> float:
    """Hinge attack objective; -kappa means the goal holds with full margin.

    dodge: max(Z_o - max_{i != o} Z_i, -kappa)
    impersonate: max(max_{i != t} Z_i - Z_t, -kappa)
    """
    logits = np.asarray(logits, dtype=float)
    other = np.delete(logits, label)
    if mode == "dodge":
        value = logits[label] - other.max()
    elif mode == "impersonate":
        value = other.max() - logits[label]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(max(value, -kappa))


def _hinge_dlogits(logits: np.ndarray, mode: str, label: int,
                   kappa: float) -> np.ndarray:
    """Gradient of cw_hinge w.r.t. the logits (zero when clamped)."""
    dZ = np.zeros_like(logits)
    masked = logits.copy()
    masked[label] = -np.inf
    runner = int(np.argmax(masked))
    if mode == "dodge":
        value = logits[label] - masked[runner]
        if value > -kappa:
            dZ[label] = 1.0
            dZ[runner] = -1.0
    else:
        value = masked[runner] - logits[label]
        if value > -kappa:
            dZ[runner] = 1.0
            dZ[label] = -1.0
    return dZ


def _hinge_value_and_input_grad(model: EmbeddingModel, x: np.ndarray, mode: str,
                                label: int, kappa: float) -> tuple[float, np.ndarray]:
    R, acts = model.feature_forward(x)
    logits = (R @ model.w_c.T + model.b_c)[0]
    value = cw_hinge(logits, mode, label, kappa)
    dZ = _hinge_dlogits(logits, mode, label, kappa)
    dx = model.feature_backward(acts, (dZ @ model.w_c)[None, :])[0]
    return value, dx


def cw_objective_value_and_grad(models: list[EmbeddingModel], w: np.ndarray,
                                x: np.ndarray, mode: str, labels: list[int],
                                cfg: AttackConfig) -> tuple[float, np.ndarray, list[float]]:
    """Value and w-gradient of 0.5 |tanh(w) - x|^2 + c * sum_k hinge_k."""
    x_adv = np.tanh(w)
    diff = x_adv - x
    value = 0.5 * float(diff @ diff)
    dx = diff.copy()
    hinges = []
    for model, label in zip(models, labels):
        h, dh = _hinge_value_and_input_grad(model, x_adv, mode, label, cfg.kappa)
        hinges.append(h)
        value += cfg.c * h
        dx += cfg.c * dh
    return value, dx * (1.0 - x_adv ** 2), hinges


def cw_attack(models: list[EmbeddingModel], x: np.ndarray, mode: str,
              labels: list[int], cfg: AttackConfig) -> AttackResult:
    """Gradient descent on the hinge objective from w = arctanh(x).

    Returns the iterate with the lowest objective among those satisfying the
    goal on every model (all hinges negative); otherwise the final iterate,
    flagged unsuccessful.
    """
    x = np.asarray(x, dtype=float)
    mask = _resolve_mask(cfg, x.size)
    w = to_search_space(x)
    best_obj = np.inf
    best_x = None
    steps = 0
    for _ in range(cfg.steps_per_round):
        value, g, hinges = cw_objective_value_and_grad(models, w, x, mode, labels, cfg)
        if not np.isfinite(value):
            raise AttackDivergedError("non-finite hinge objective")
        if max(hinges) < 0.0 and value < best_obj:
            best_obj = value
            best_x = np.tanh(w)
        if mask is not None:
            g = g * mask
        if not g.any():
            break
        w = w - cfg.lr * g
        steps += 1
    x_final = np.tanh(w)
    if mask is not None:
        x_final = np.where(mask > 0, x_final, x)
    _, _, hinges = cw_objective_value_and_grad(models, to_search_space(x_final), x,
                                               mode, labels, cfg)
    if best_x is None and max(hinges) < 0.0:
        best_x = x_final
    success = best_x is not None
    x_adv = best_x if success else x_final
    if mask is not None:
        x_adv = np.where(mask > 0, x_adv, x)
    return AttackResult(
        mode=mode,
        x_adv=x_adv,
        l2=float(np.linalg.norm(x_adv - x)),
        steps=steps,
        substitute_success=success,
        failure_reason=None if success else "goal not reached",
    )


# -- gradient assembly --------------------------------------------------------

@dataclass
class GradientAssembly:
    alphas: np.ndarray           # per-model cosine distances, in [0, 2]
    grads: np.ndarray            # per-model gradients, shape (K, dim)
    p: np.ndarray                # per-dimension mean over models
    q: np.ndarray                # per-dimension std (population) over models
    max_p: float
    g: np.ndarray                # assembled, clipped gradient
    clipped: np.ndarray          # boolean mask of zeroed dimensions
    aligned: bool                # all models already at cosine 1


CLIP_BAR_FRACTION = 0.3


def assemble_from_parts(alphas: np.ndarray, grads: np.ndarray) -> GradientAssembly:
    """Weighted-average the per-model gradients and clip disagreeing dims.

    Weight k is alphas[k]; dimensions where mean^2/std falls at or below
    0.3 * max(mean) are zeroed. std == 0 counts as perfect agreement (never
    clipped); a non-positive max(mean) disables clipping entirely.
    """
    alphas = np.asarray(alphas, dtype=float)
    grads = np.asarray(grads, dtype=float)
    total = float(alphas.sum())
    if total < 1e-12:
        dim = grads.shape[1]
        return GradientAssembly(alphas, grads, np.zeros(dim), np.zeros(dim), 0.0,
                                np.zeros(dim), np.zeros(dim, dtype=bool), True)
    g = alphas @ grads / total
    p = grads.mean(axis=0)
    q = grads.std(axis=0)
    max_p = float(p.max())
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where(q == 0.0, np.inf, p ** 2 / q)
    if max_p > 0.0:
        clipped = score <= CLIP_BAR_FRACTION * max_p
    else:
        clipped = np.zeros_like(score, dtype=bool)
    g = np.where(clipped, 0.0, g)
    return GradientAssembly(alphas, grads, p, q, max_p, g, clipped, False)


def _cosine_to_target_and_grad(model: EmbeddingModel, x_adv: np.ndarray,
                               r_target: np.ndarray) -> tuple[float, np.ndarray, float]:
    """cos(R(x'), R(x_t)), its gradient w.r.t. x', and |R(x')|."""
    R, acts = model.feature_forward(x_adv)
    r = R[0]
    nr = np.linalg.norm(r)
    nt = np.linalg.norm(r_target)
    if nr < ZERO_EMBED_TOL or nt < ZERO_EMBED_TOL:
        raise DegenerateEmbeddingError("degenerate embedding during attack")
    cos = float(r @ r_target / (nr * nt))
    d_repr = r_target / (nr * nt) - r * (cos / nr ** 2)
    dx = model.feature_backward(acts, d_repr[None, :])[0]
    return cos, dx, float(nr)


def assemble_gradients(models: list[EmbeddingModel], w: np.ndarray,
                       x_t: np.ndarray,
                       target_reprs: list[np.ndarray] | None = None) -> GradientAssembly:
    """Per-model cosine-alignment gradients in w-space, weighted and clipped.

    Model k contributes weight alpha_k = 1 - cos(R_k(x'), R_k(x_t)) and
    gradient g_k = -|R_k(x')| * grad_w cos(R_k(x'), R_k(x_t)); descending the
    assembled gradient raises the lagging cosines fastest.
    """
    x_adv = np.tanh(w)
    tanh_jac = 1.0 - x_adv ** 2
    if target_reprs is None:
        target_reprs = [m.checked_representation(x_t) for m in models]
    alphas = np.empty(len(models))
    grads = np.empty((len(models), w.size))
    for k, (model, r_t) in enumerate(zip(models, target_reprs)):
        cos, dx, norm_r = _cosine_to_target_and_grad(model, x_adv, r_t)
        alphas[k] = 1.0 - cos
        grads[k] = -norm_r * dx * tanh_jac
    return assemble_from_parts(alphas, grads)


# -- multi-step search ---------------------------------------------------------

def mean_cosine(models: list[EmbeddingModel], x_adv: np.ndarray,
                target_reprs: list[np.ndarray]) -> tuple[float, list[float]]:
    cosines = []
    for model, r_t in zip(models, target_reprs):
        r = model.representation(x_adv)
        nr = np.linalg.norm(r)
        nt = np.linalg.norm(r_t)
        if nr < ZERO_EMBED_TOL or nt < ZERO_EMBED_TOL:
            raise DegenerateEmbeddingError("degenerate embedding during attack")
        cosines.append(float(r @ r_t / (nr * nt)))
    return float(np.mean(cosines)), cosines


def step_coefficients(dist: float, budget: float, mean_cos: float) -> tuple[float, float]:
    """Weights on the distance gradient and the alignment gradient.

    exp(dist - budget) and exp(3 - mean_cos): the alignment weight stays at
    least e^2 times the distance weight while dist <= budget and cos <= 1.
    """
    return float(np.exp(dist - budget)), float(np.exp(3.0 - mean_cos))


def search_adversarial(models: list[EmbeddingModel], x_o: np.ndarray,
                       x_t: np.ndarray, cfg: AttackConfig) -> AttackResult:
    """Multi-step alignment search toward x_t under a growing budget.

    The inner loop steps w along exp(dist - budget) * grad dist plus
    exp(3 - mean_cos) * assembled alignment gradient; the budget counter
    starts at 1 and grows by 1 each round until the mean substitute cosine
    reaches cfg.cosine_stop. No update is made once the stop level holds.
    """
    x_o = np.asarray(x_o, dtype=float)
    mask = _resolve_mask(cfg, x_o.size)
    target_reprs = [m.checked_representation(x_t) for m in models]
    w = to_search_space(x_o)
    x_adv = x_o.copy()  # untouched until the first update
    cbar, cosines = mean_cosine(models, x_adv, target_reprs)
    steps = 0
    budget = 1
    while cbar < cfg.cosine_stop and budget <= cfg.max_rounds:
        for _ in range(cfg.steps_per_round):
            diff = x_adv - x_o
            dist = float(np.linalg.norm(diff))
            if dist > 0.0:
                g_w = (diff / dist) * (1.0 - x_adv ** 2)
            else:
                g_w = np.zeros_like(x_adv)
            asm = assemble_gradients(models, w, x_t, target_reprs)
            coef_dist, coef_align = step_coefficients(dist, budget, cbar)
            g = coef_dist * g_w + coef_align * asm.g
            if mask is not None:
                g = g * mask
            if not np.all(np.isfinite(g)):
                raise AttackDivergedError("non-finite search gradient")
            w = w - cfg.lr * g
            x_adv = np.tanh(w)
            steps += 1
            cbar, cosines = mean_cosine(models, x_adv, target_reprs)
            if cbar >= cfg.cosine_stop:
                break
        if cbar < cfg.cosine_stop:
            budget += 1
    if mask is not None:
        x_adv = np.where(mask > 0, x_adv, x_o)
    success = cbar >= cfg.cosine_stop
    return AttackResult(
        mode="impersonate",
        x_adv=x_adv,
        l2=float(np.linalg.norm(x_adv - x_o)),
        steps=steps,
        substitute_success=success,
        mean_cosine=cbar,
        substitute_cosines=cosines,
        rounds_used=budget,
        failure_reason=None if success else "budget exhausted",
    )


def path_objective_value_and_grad(models: list[EmbeddingModel], w: np.ndarray,
                                  x_o: np.ndarray, x_t: np.ndarray, budget: float,
                                  eta: float = float(np.exp(2.0))
                                  ) -> tuple[float, np.ndarray]:
    """Value and exact w-gradient of exp(dist - budget) + eta * exp(1 - mean_cos).

    This is the scalar the multi-step search tracks; the search itself steps
    along the assembled (weighted, clipped) alignment gradient instead of the
    exact mean-cosine gradient.
    """
    x_adv = np.tanh(w)
    tanh_jac = 1.0 - x_adv ** 2
    diff = x_adv - x_o
    dist = float(np.linalg.norm(diff))
    target_reprs = [m.checked_representation(x_t) for m in models]
    cos_sum = 0.0
    dcos_sum = np.zeros_like(w)
    for model, r_t in zip(models, target_reprs):
        cos, dx, _ = _cosine_to_target_and_grad(model, x_adv, r_t)
        cos_sum += cos
        dcos_sum += dx * tanh_jac
    cbar = cos_sum / len(models)
    dcbar = dcos_sum / len(models)
    value = float(np.exp(dist - budget) + eta * np.exp(1.0 - cbar))
    grad = np.exp(dist - budget) * (diff / dist) * tanh_jac if dist > 0 else np.zeros_like(w)
    grad = grad - eta * np.exp(1.0 - cbar) * dcbar
    return value, grad


# -- constrained variants --------------------------------------------------------

def distance_constrained_attack(models: list[EmbeddingModel], x: np.ndarray,
                                mode: str, labels: list[int],
                                cfg: AttackConfig) -> AttackResult:
    """Hinge attack with an exponential penalty on distance beyond gamma.

    Objective: exp(|tanh(w) - x|_2 - gamma) + sum_k hinge_k. Success requires
    the goal on every model and a final distance within 1.1 * gamma.
    """
    if cfg.gamma is None or cfg.gamma <= 0:
        raise ValueError("distance-constrained attack needs gamma > 0")
    x = np.asarray(x, dtype=float)
    mask = _resolve_mask(cfg, x.size)
    w = to_search_space(x)
    best_obj = np.inf
    best_x = None
    steps = 0

    def eval_point(w_point):
        x_adv = np.tanh(w_point)
        tanh_jac = 1.0 - x_adv ** 2
        diff = x_adv - x
        dist = float(np.linalg.norm(diff))
        value = float(np.exp(dist - cfg.gamma))
        grad = np.exp(dist - cfg.gamma) * (diff / dist) * tanh_jac if dist > 0 \
            else np.zeros_like(x_adv)
        hinges = []
        for model, label in zip(models, labels):
            h, dh = _hinge_value_and_input_grad(model, x_adv, mode, label, cfg.kappa)
            hinges.append(h)
            value += h
            grad = grad + dh * tanh_jac
        return value, grad, hinges, dist

    for _ in range(cfg.steps_per_round):
        value, g, hinges, dist = eval_point(w)
        if not np.isfinite(value):
            raise AttackDivergedError("non-finite constrained objective")
        if max(hinges) < 0.0 and dist <= 1.1 * cfg.gamma and value < best_obj:
            best_obj = value
            best_x = np.tanh(w)
        if mask is not None:
            g = g * mask
        if not g.any():
            break
        w = w - cfg.lr * g
        steps += 1
    value, _, hinges, dist = eval_point(w)
    if best_x is None and max(hinges) < 0.0 and dist <= 1.1 * cfg.gamma:
        best_x = np.tanh(w)
    success = best_x is not None
    x_adv = best_x if success else np.tanh(w)
    if mask is not None:
        x_adv = np.where(mask > 0, x_adv, x)
    return AttackResult(
        mode=mode,
        x_adv=x_adv,
        l2=float(np.linalg.norm(x_adv - x)),
        steps=steps,
        substitute_success=success,
        failure_reason=None if success else "goal not reached within distance cap",
    )


def region_restricted_attack(models: list[EmbeddingModel], x_o: np.ndarray,
                             x_t: np.ndarray, cfg: AttackConfig) -> AttackResult:
    """Alignment search with updates confined to the mask; off-mask pixels
    of the result are bit-identical to x_o."""
    if cfg.region_mask is None:
        raise ValueError("region-restricted attack needs a region mask")
    return search_adversarial(models, x_o, x_t, cfg)
