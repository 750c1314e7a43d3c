"""Training objective and evaluation metrics.

Focal loss over a single genuine-class probability (genuine = class 0),
equal error rate with linear interpolation at the crossing, the legacy
normalized minimum tandem detection cost, and per-attack EER breakdowns.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor, _maybe_record

__all__ = [
    "FocalLossConfig",
    "LabeledScore",
    "TdcfParams",
    "EvalReport",
    "focal_loss",
    "focal_loss_logits",
    "alpha_from_counts",
    "compute_eer",
    "min_tdcf",
    "per_attack_breakdown",
    "evaluate_scores",
]

log = logging.getLogger(__name__)

PROB_EPS = 1e-7

GENUINE, SPOOF = 0, 1


@dataclass
class FocalLossConfig:
    gamma: float = 2.0
    alpha_genuine: float = 0.5

    @property
    def alpha_spoof(self):
        return 1.0 - self.alpha_genuine


@dataclass
class LabeledScore:
    utt_id: str
    score: float
    label: int                     # 0 = genuine, 1 = spoof
    attack_id: str = "-"

    def __post_init__(self):
        if (self.attack_id == "-") != (self.label == GENUINE):
            raise ContractError(
                f"{self.utt_id}: attack id {self.attack_id!r} inconsistent "
                f"with label {self.label}")


@dataclass
class TdcfParams:
    """Priors, costs, and a fixed ASV operating point for the legacy
    normalized t-DCF."""
    p_target: float = 0.9405
    p_nontarget: float = 0.0095
    p_spoof: float = 0.05
    c_miss_asv: float = 1.0
    c_fa_asv: float = 10.0
    c_miss_cm: float = 1.0
    c_fa_cm: float = 10.0
    p_miss_asv: float = 0.01
    p_fa_asv: float = 0.01
    p_miss_spoof_asv: float = 0.01

    def constants(self):
        c1 = (self.p_target * (self.c_miss_cm - self.c_miss_asv * self.p_miss_asv)
              - self.p_nontarget * self.c_fa_asv * self.p_fa_asv)
        c2 = self.c_fa_cm * self.p_spoof * (1.0 - self.p_miss_spoof_asv)
        return c1, c2


@dataclass
class EvalReport:
    eer: float                     # percent
    threshold: float
    min_tdcf: float
    n_genuine: int
    n_spoof: int
    per_attack_eer: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Focal loss

def _focal_terms(p, labels, cfg):
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    labels = np.asarray(labels)
    if p.size == 0:
        raise ContractError("focal loss over an empty batch")
    genuine = labels == GENUINE
    p_t = np.where(genuine, p, 1.0 - p)
    alpha_t = np.where(genuine, cfg.alpha_genuine, cfg.alpha_spoof)
    return p, p_t, alpha_t, genuine


def focal_loss(p, labels, cfg=None):
    """Mean focal loss given per-item genuine probabilities ``p``."""
    cfg = cfg or FocalLossConfig()
    _, p_t, alpha_t, _ = _focal_terms(p, labels, cfg)
    return float(np.mean(-alpha_t * (1.0 - p_t) ** cfg.gamma * np.log(p_t)))


def focal_loss_logits(logits, labels, cfg=None):
    """Differentiable mean focal loss on (B, 1, 1) countermeasure logits.

    The logit is the model's genuine-vs-spoof score; p = sigmoid(logit).
    Returns a scalar (1, 1, 1) tensor with an analytic backward rule.
    """
    cfg = cfg or FocalLossConfig()
    z = logits.data.reshape(-1).astype(np.float64)
    p_raw = 1.0 / (1.0 + np.exp(-z))
    p, p_t, alpha_t, genuine = _focal_terms(p_raw, labels, cfg)
    n = z.size
    if n != np.asarray(labels).size:
        raise ContractError(f"{n} logits vs {np.asarray(labels).size} labels")
    one_m = 1.0 - p_t
    loss = float(np.mean(-alpha_t * one_m ** cfg.gamma * np.log(p_t)))
    out = np.full((1, 1, 1), loss, dtype=logits.dtype)

    def back(g):
        # d loss_i / d p_t, with the first term vanishing identically at gamma=0
        if cfg.gamma == 0.0:
            dl_dpt = -alpha_t / p_t
        else:
            dl_dpt = (cfg.gamma * alpha_t * one_m ** (cfg.gamma - 1.0) * np.log(p_t)
                      - alpha_t * one_m ** cfg.gamma / p_t)
        dpt_dz = p_raw * (1.0 - p_raw) * np.where(genuine, 1.0, -1.0)
        dz = (g.reshape(()) / n) * dl_dpt * dpt_dz
        return (dz.reshape(logits.shape).astype(logits.dtype),)

    return _maybe_record("focal_loss", [logits], out, back)


def alpha_from_counts(n_genuine, n_spoof):
    """Class weight for the genuine class from training-set counts
    (minority class up-weighted)."""
    if n_genuine < 1 or n_spoof < 1:
        raise ContractError("both class counts must be >= 1")
    return n_spoof / (n_genuine + n_spoof)


# ---------------------------------------------------------------------------
# EER / t-DCF

def _split_scores(scores):
    genuine = np.array([s.score for s in scores if s.label == GENUINE], dtype=np.float64)
    spoof = np.array([s.score for s in scores if s.label == SPOOF], dtype=np.float64)
    if genuine.size == 0 or spoof.size == 0:
        raise ContractError("need at least one genuine and one spoof score")
    return genuine, spoof


def _operating_points(genuine, spoof):
    """FAR / FRR at every distinct score plus one threshold above the max."""
    thresholds = np.unique(np.concatenate([genuine, spoof]))
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)
    # FAR: fraction of spoof scores >= theta; FRR: fraction of genuine < theta
    far = 1.0 - np.searchsorted(np.sort(spoof), thresholds, side="left") / spoof.size
    frr = np.searchsorted(np.sort(genuine), thresholds, side="left") / genuine.size
    return thresholds, far, frr


def compute_eer(scores):
    """Equal error rate in percent and the interpolated threshold."""
    genuine, spoof = _split_scores(scores)
    thresholds, far, frr = _operating_points(genuine, spoof)
    d = frr - far
    j = int(np.argmax(d >= 0.0))       # first crossing; d[0] = -1 always
    if d[j] == 0.0:
        return float(100.0 * far[j]), float(thresholds[j])
    s = -d[j - 1] / (d[j] - d[j - 1])
    eer = far[j - 1] + s * (far[j] - far[j - 1])
    theta = thresholds[j - 1] + s * (thresholds[j] - thresholds[j - 1])
    return float(100.0 * eer), float(theta)


def min_tdcf(scores, params=None):
    """Minimum normalized tandem detection cost over all score thresholds."""
    params = params or TdcfParams()
    c1, c2 = params.constants()
    if c1 <= 0 or c2 <= 0:
        raise ValueError(f"invalid t-DCF constants C1={c1:.6g}, C2={c2:.6g}")
    genuine, spoof = _split_scores(scores)
    _, p_fa_cm, p_miss_cm = _operating_points(genuine, spoof)
    tdcf = (c1 * p_miss_cm + c2 * p_fa_cm) / min(c1, c2)
    return float(tdcf.min())


def per_attack_breakdown(scores, attacks=None):
    """EER per attack id, each computed against all genuine scores."""
    genuine = [s for s in scores if s.label == GENUINE]
    by_attack = {}
    for s in scores:
        if s.label == SPOOF:
            by_attack.setdefault(s.attack_id, []).append(s)
    wanted = attacks if attacks is not None else sorted(by_attack)
    result = {}
    for attack in wanted:
        subset = by_attack.get(attack)
        if not subset:
            log.warning("attack %s has no scores; omitted from breakdown", attack)
            continue
        result[attack] = compute_eer(genuine + subset)[0]
    return result


def evaluate_scores(scores, params=None, per_attack=False):
    """Pooled EER, min t-DCF, and an optional per-attack breakdown."""
    eer, theta = compute_eer(scores)
    report = EvalReport(
        eer=eer,
        threshold=theta,
        min_tdcf=min_tdcf(scores, params),
        n_genuine=sum(1 for s in scores if s.label == GENUINE),
        n_spoof=sum(1 for s in scores if s.label == SPOOF),
    )
    if per_attack:
        report.per_attack_eer = per_attack_breakdown(scores)
    return report
