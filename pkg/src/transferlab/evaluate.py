"""Success criteria, transfer rates, verifier-style scoring and the
cross-model success predictor.

The predictor treats the cosine-distance loss gap between two models as
Gaussian with mean mu_b - mu_a and variance sigma_a^2 + sigma_b^2, fits the
loss statistics against log training-set size, and converts an observed loss
value into the probability that it crosses the 0.5 decision level on the
better-trained model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attack import AttackResult
from .models import cosine


@dataclass
class SuccessCriteria:
    theta: float = 20.0               # L2 budget for success accounting
    prob_threshold: float = 0.5       # impersonation probability level
    th_dodge: float | None = None     # verifier threshold (dodge succeeds below)
    th_impersonate: float | None = None  # verifier threshold (impersonation above)


# Published operating thresholds (dodge, impersonate) of three commercial
# face-verification services, kept for context only; desk-scale thresholds
# are calibrated with calibrate_eer instead.
REFERENCE_VERIFIER_THRESHOLDS = (
    (0.75, 0.80),
    (0.64, 0.74),
    (0.623, 0.691),
)


def dodge_success(target_model, x: np.ndarray, x_adv: np.ndarray,
                  criteria: SuccessCriteria) -> bool:
    """True iff x_adv stays within the L2 budget and changes the argmax."""
    if np.linalg.norm(np.asarray(x_adv) - np.asarray(x)) > criteria.theta:
        return False
    owner = int(np.argmax(target_model.probs(x)))
    return int(np.argmax(target_model.probs(x_adv))) != owner


def impersonate_success(target_model, x: np.ndarray, x_adv: np.ndarray,
                        victim_label: int, criteria: SuccessCriteria) -> bool:
    """True iff the victim-class probability strictly exceeds the threshold
    and x_adv stays within the L2 budget."""
    if np.linalg.norm(np.asarray(x_adv) - np.asarray(x)) > criteria.theta:
        return False
    return float(target_model.probs(x_adv)[victim_label]) > criteria.prob_threshold


# -- verifier-style evaluation -------------------------------------------------

def verifier_score(model, x1: np.ndarray, x2: np.ndarray) -> float:
    """Similarity score of two images: cosine of their representations."""
    return cosine(model.representation(x1), model.representation(x2))


def verify_success(score: float, mode: str, criteria: SuccessCriteria) -> bool:
    if mode == "dodge":
        if criteria.th_dodge is None:
            raise ValueError("dodge verification needs th_dodge")
        return score < criteria.th_dodge
    if mode == "impersonate":
        if criteria.th_impersonate is None:
            raise ValueError("impersonation verification needs th_impersonate")
        return score > criteria.th_impersonate
    raise ValueError(f"unknown mode {mode!r}")


def calibrate_eer(genuine_scores, impostor_scores) -> tuple[float, float]:
    """Equal-error-rate threshold for 'same identity iff score >= threshold'.

    Returns (threshold, eer) minimizing |FRR - FAR| over midpoints of the
    pooled score grid.
    """
    genuine = np.sort(np.asarray(genuine_scores, dtype=float))
    impostor = np.sort(np.asarray(impostor_scores, dtype=float))
    if len(genuine) == 0 or len(impostor) == 0:
        raise ValueError("need both genuine and impostor scores")
    pooled = np.unique(np.concatenate([genuine, impostor]))
    candidates = np.concatenate([[pooled[0] - 1e-6],
                                 (pooled[:-1] + pooled[1:]) / 2.0,
                                 [pooled[-1] + 1e-6]])
    best = (np.inf, 0.0, 0.0)
    for th in candidates:
        frr = float(np.mean(genuine < th))
        far = float(np.mean(impostor >= th))
        gap = abs(frr - far)
        if gap < best[0]:
            best = (gap, th, (frr + far) / 2.0)
    return best[1], best[2]


# -- transfer accounting ---------------------------------------------------------

@dataclass
class TransferReport:
    instances: int
    successes: dict[str, int]
    rates: dict[str, float]
    hist_edges: list[float]
    hist_counts: list[int]

    def to_json_dict(self) -> dict:
        return {
            "instances": self.instances,
            "successes": dict(sorted(self.successes.items())),
            "rates": dict(sorted(self.rates.items())),
            "distance_histogram": {"edges": self.hist_edges, "counts": self.hist_counts},
        }


def transferability(results: list[AttackResult], target_names: list[str],
                    theta: float = 20.0, hist_bins: int = 10) -> TransferReport:
    """Per-target success rates plus an L2-distance histogram."""
    successes = {name: 0 for name in target_names}
    for r in results:
        for name in target_names:
            if r.target_success.get(name, False):
                successes[name] += 1
    n = len(results)
    rates = {name: (successes[name] / n if n else 0.0) for name in target_names}
    edges = np.linspace(0.0, theta, hist_bins + 1)
    distances = np.array([r.l2 for r in results]) if results else np.empty(0)
    counts, _ = np.histogram(distances, bins=np.concatenate([edges, [np.inf]]))
    return TransferReport(n, successes, rates,
                          [float(e) for e in edges] + [math.inf],
                          [int(c) for c in counts])


# -- cosine-distance loss and the success predictor ------------------------------

@dataclass
class CosineLossStats:
    m_train: int
    mean: float
    std: float


def pair_cosine_loss(r1: np.ndarray, r2: np.ndarray, same_identity: bool) -> float:
    """1 - |cos| for same-identity pairs, |cos| for different identities."""
    c = abs(cosine(r1, r2))
    return 1.0 - c if same_identity else c


def cosine_loss(model, labeled_pairs) -> CosineLossStats:
    """Mean/std of the pair loss over (x1, x2, same_identity) triples."""
    losses = [
        pair_cosine_loss(model.representation(x1), model.representation(x2), same)
        for x1, x2, same in labeled_pairs
    ]
    if not losses:
        raise ValueError("no pairs supplied")
    arr = np.asarray(losses)
    return CosineLossStats(getattr(model, "m_train", 0),
                           float(arr.mean()), float(arr.std()))


@dataclass
class LossCurveFit:
    """a + b * log(m) fits of the loss mean and std against training size."""
    mu_intercept: float
    mu_slope: float
    sigma_intercept: float
    sigma_slope: float
    mu_residual: float
    sigma_residual: float

    def mu(self, m_train: float) -> float:
        return self.mu_intercept + self.mu_slope * math.log(m_train)

    def sigma(self, m_train: float) -> float:
        return self.sigma_intercept + self.sigma_slope * math.log(m_train)


def fit_loss_curves(stats: list[CosineLossStats]) -> LossCurveFit:
    sizes = np.array([s.m_train for s in stats], dtype=float)
    if len(np.unique(sizes)) < 3:
        raise ValueError("need stats at >= 3 distinct training sizes")
    logm = np.log(sizes)
    mus = np.array([s.mean for s in stats])
    sigmas = np.array([s.std for s in stats])
    mu_slope, mu_icpt = np.polyfit(logm, mus, 1)
    sg_slope, sg_icpt = np.polyfit(logm, sigmas, 1)
    mu_res = float(np.sqrt(np.mean((mu_icpt + mu_slope * logm - mus) ** 2)))
    sg_res = float(np.sqrt(np.mean((sg_icpt + sg_slope * logm - sigmas) ** 2)))
    return LossCurveFit(float(mu_icpt), float(mu_slope),
                        float(sg_icpt), float(sg_slope), mu_res, sg_res)


# Normal CDF via the Abramowitz & Stegun 26.2.17 polynomial; |error| < 7.5e-8.
_AS_P = 0.2316419
_AS_B = (0.319381530, -0.356563782, 1.781477937, -1.821255978, 1.330274429)


def normal_cdf(x: float) -> float:
    if x < 0.0:
        return 1.0 - normal_cdf(-x)
    t = 1.0 / (1.0 + _AS_P * x)
    poly = t * (_AS_B[0] + t * (_AS_B[1] + t * (_AS_B[2] + t * (_AS_B[3] + t * _AS_B[4]))))
    return 1.0 - math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi) * poly


def predict_transferability(observed_loss: float, mode: str,
                            mu_alpha: float, sigma_alpha: float,
                            mu_beta: float, sigma_beta: float) -> float:
    """Probability that the observed loss, shifted by the model-gap
    distribution N(mu_b - mu_a, sigma_a^2 + sigma_b^2), crosses 0.5.

    Dodging asks for P(value > 0.5), impersonation for P(value < 0.5).
    """
    if sigma_alpha < 0 or sigma_beta < 0:
        raise ValueError("negative standard deviation")
    mean = observed_loss + (mu_beta - mu_alpha)
    var = sigma_alpha ** 2 + sigma_beta ** 2
    if var == 0.0:
        crossed_up = mean > 0.5
        return float(crossed_up) if mode == "dodge" else float(mean < 0.5)
    z = (0.5 - mean) / math.sqrt(var)
    if mode == "dodge":
        return 1.0 - normal_cdf(z)
    if mode == "impersonate":
        return normal_cdf(z)
    raise ValueError(f"unknown mode {mode!r}")


def predict_from_sizes(fit: LossCurveFit, m_alpha: int, m_beta: int,
                       observed_loss: float, mode: str) -> float:
    """Predictor driven by the fitted loss curves at the two training sizes."""
    return predict_transferability(
        observed_loss, mode,
        fit.mu(m_alpha), max(fit.sigma(m_alpha), 0.0),
        fit.mu(m_beta), max(fit.sigma(m_beta), 0.0),
    )
