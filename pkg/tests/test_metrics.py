import logging

import numpy as np
import pytest

from rawcm.metrics import (FocalLossConfig, LabeledScore, TdcfParams,
                           alpha_from_counts, compute_eer, evaluate_scores,
                           focal_loss, focal_loss_logits, min_tdcf,
                           per_attack_breakdown)
from rawcm.tensor import ContractError, Tape, Tensor, backward


# ---------------------------------------------------------------------------
# Exhaustive-threshold oracles (independent of the implementation: plain
# loops, every candidate threshold evaluated by counting)

def _rates_at(genuine, spoof, theta):
    far = sum(1 for s in spoof if s >= theta) / len(spoof)
    frr = sum(1 for s in genuine if s < theta) / len(genuine)
    return far, frr


def eer_oracle(genuine, spoof):
    thresholds = sorted(set(genuine) | set(spoof))
    thresholds.append(thresholds[-1] + 1.0)
    points = [_rates_at(genuine, spoof, th) for th in thresholds]
    for (far0, frr0), (far1, frr1) in zip(points, points[1:]):
        d0, d1 = frr0 - far0, frr1 - far1
        if d0 == 0.0:
            return 100.0 * far0
        if d0 < 0.0 <= d1:
            s = -d0 / (d1 - d0)
            return 100.0 * (far0 + s * (far1 - far0))
    return 100.0 * points[-1][0]


def tdcf_oracle(genuine, spoof, params):
    c1, c2 = params.constants()
    thresholds = sorted(set(genuine) | set(spoof))
    thresholds.append(thresholds[-1] + 1.0)
    best = float("inf")
    for th in thresholds:
        p_fa, p_miss = _rates_at(genuine, spoof, th)
        best = min(best, (c1 * p_miss + c2 * p_fa) / min(c1, c2))
    return best


def _labeled(genuine, spoof, attack="S01"):
    out = [LabeledScore(f"g{i}", s, 0) for i, s in enumerate(genuine)]
    out += [LabeledScore(f"s{i}", s, 1, attack) for i, s in enumerate(spoof)]
    return out


def _random_scores(rng, n_per_class=200):
    genuine = rng.normal(1.0, 1.0, size=n_per_class)
    spoof = rng.normal(-0.5, 1.2, size=n_per_class)
    return list(genuine), list(spoof)


# ---------------------------------------------------------------------------
# Focal loss

class TestFocalLoss:
    def test_well_classified_loss_vanishes(self):
        cfg = FocalLossConfig(gamma=2.0, alpha_genuine=0.5)
        loss = focal_loss([1.0 - 1e-7, 1e-7], [0, 1], cfg)
        assert loss < 1e-12

    def test_plain_cross_entropy_at_gamma_zero(self):
        # alpha_genuine = 1 makes alpha_t = 1 for a genuine item
        cfg = FocalLossConfig(gamma=0.0, alpha_genuine=1.0)
        assert focal_loss([0.5], [0], cfg) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_hand_value_at_gamma_two(self):
        cfg = FocalLossConfig(gamma=2.0, alpha_genuine=1.0)
        assert focal_loss([0.5], [0], cfg) == pytest.approx(0.25 * np.log(2.0),
                                                            abs=1e-12)

    def test_equals_bce_at_gamma_zero_alpha_one(self):
        # per-item comparison: alpha_t = 1 for either class via the matching
        # single-class config
        rng = np.random.default_rng(0)
        for _ in range(1000):
            p = float(rng.uniform(1e-3, 1.0 - 1e-3))
            y = int(rng.integers(2))
            cfg = FocalLossConfig(gamma=0.0, alpha_genuine=1.0 - y)
            bce = -np.log(p) if y == 0 else -np.log(1.0 - p)
            assert abs(focal_loss([p], [y], cfg) - bce) < 1e-9

    def test_nonnegative_and_decreasing_in_pt(self):
        cfg = FocalLossConfig(gamma=2.0, alpha_genuine=0.6)
        probs = np.linspace(0.01, 0.99, 50)
        losses = [focal_loss([p], [0], cfg) for p in probs]
        assert all(l >= 0 for l in losses)
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_empty_batch(self):
        with pytest.raises(ContractError):
            focal_loss([], [])

    @pytest.mark.parametrize("p", [0.01, 0.5, 0.99])
    @pytest.mark.parametrize("y", [0, 1])
    def test_logit_gradient_matches_finite_differences(self, p, y):
        cfg = FocalLossConfig(gamma=2.0, alpha_genuine=0.7)
        z = float(np.log(p / (1.0 - p)))
        labels = np.array([y])

        def value(zv):
            t = Tensor(np.array(zv, dtype=np.float64).reshape(1, 1, 1))
            return float(focal_loss_logits(t, labels, cfg).data.reshape(()))

        with Tape() as tape:
            t = Tensor(np.array(z, dtype=np.float64).reshape(1, 1, 1),
                       requires_grad=True)
            backward(tape, focal_loss_logits(t, labels, cfg))
            analytic = float(tape.grad(t).reshape(()))
        h = 1e-6
        numeric = (value(z + h) - value(z - h)) / (2.0 * h)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        assert abs(analytic - numeric) / denom < 1e-6

    def test_loss_and_logit_loss_agree(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(6, 1, 1))
        labels = np.array([0, 1, 0, 1, 1, 0])
        cfg = FocalLossConfig(gamma=2.0, alpha_genuine=0.8)
        p = 1.0 / (1.0 + np.exp(-z.reshape(-1)))
        want = focal_loss(p, labels, cfg)
        got = float(focal_loss_logits(Tensor(z), labels, cfg).data.reshape(()))
        assert got == pytest.approx(want, abs=1e-9)


class TestAlphaFromCounts:
    def test_la_train_ratio(self):
        assert alpha_from_counts(2580, 22800) == pytest.approx(0.8983, abs=1e-4)

    def test_balanced(self):
        assert alpha_from_counts(1, 1) == 0.5

    def test_direct_ratio(self):
        assert alpha_from_counts(1, 3) == 0.75

    def test_zero_count(self):
        with pytest.raises(ContractError):
            alpha_from_counts(0, 5)


# ---------------------------------------------------------------------------
# EER

class TestComputeEer:
    def test_perfect_separation(self):
        eer, _ = compute_eer(_labeled([0.9, 0.8], [0.1, 0.2]))
        assert eer == 0.0

    def test_inverted_scores(self):
        eer, _ = compute_eer(_labeled([0.1, 0.2], [0.8, 0.9]))
        assert eer == 100.0

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            genuine, spoof = _random_scores(rng)
            got, _ = compute_eer(_labeled(genuine, spoof))
            assert abs(got - eer_oracle(genuine, spoof)) < 1e-9

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(3)
        genuine, spoof = _random_scores(rng)
        base, _ = compute_eer(_labeled(genuine, spoof))
        for f in (lambda s: 2.0 * s + 1.0, np.tanh):
            eer, _ = compute_eer(_labeled([f(s) for s in genuine],
                                          [f(s) for s in spoof]))
            assert abs(eer - base) < 1e-9

    def test_threshold_sits_at_crossing(self):
        rng = np.random.default_rng(4)
        genuine, spoof = _random_scores(rng, 100)
        eer, theta = compute_eer(_labeled(genuine, spoof))
        far, frr = _rates_at(genuine, spoof, theta)
        # the crossing is interpolated: both rates bracket the EER within one
        # step of the empirical staircase
        assert abs(far - frr) <= 1.0 / 100 + 1e-12

    def test_single_class_rejected(self):
        with pytest.raises(ContractError):
            compute_eer([LabeledScore("a", 0.5, 0)])


# ---------------------------------------------------------------------------
# min t-DCF

class TestMinTdcf:
    def test_perfect_cm_costs_nothing(self):
        assert min_tdcf(_labeled([0.9, 0.8], [0.1, 0.2])) == 0.0

    def test_reject_everything_boundary(self):
        # substituting p_miss = 1, p_fa = 0 into the normalized cost gives
        # C1/min(C1, C2); coincident scores make both boundary points the
        # only operating points, so the min is the cheaper of the two
        params = TdcfParams()
        c1, c2 = params.constants()
        reject_all = c1 / min(c1, c2)
        accept_all = c2 / min(c1, c2)
        scores = _labeled([0.5], [0.5])
        assert min_tdcf(scores, params) == pytest.approx(
            min(reject_all, accept_all), abs=1e-12)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(5)
        params = TdcfParams()
        for _ in range(50):
            genuine, spoof = _random_scores(rng, 50)
            got = min_tdcf(_labeled(genuine, spoof), params)
            assert abs(got - tdcf_oracle(genuine, spoof, params)) < 1e-9

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(6)
        genuine, spoof = _random_scores(rng)
        base = min_tdcf(_labeled(genuine, spoof))
        for f in (lambda s: 2.0 * s + 1.0, np.tanh):
            got = min_tdcf(_labeled([f(s) for s in genuine],
                                    [f(s) for s in spoof]))
            assert abs(got - base) < 1e-9

    def test_minimum_bounds_every_fixed_threshold(self):
        rng = np.random.default_rng(7)
        genuine, spoof = _random_scores(rng, 80)
        params = TdcfParams()
        c1, c2 = params.constants()
        best = min_tdcf(_labeled(genuine, spoof), params)
        for th in rng.choice(np.concatenate([genuine, spoof]), size=20):
            p_fa, p_miss = _rates_at(genuine, spoof, th)
            assert best <= (c1 * p_miss + c2 * p_fa) / min(c1, c2) + 1e-12

    def test_invalid_constants_rejected(self):
        params = TdcfParams(p_target=0.0, p_nontarget=0.95, p_spoof=0.05)
        with pytest.raises(ValueError):
            min_tdcf(_labeled([0.9], [0.1]), params)


# ---------------------------------------------------------------------------
# Per-attack breakdown

class TestPerAttackBreakdown:
    def test_single_attack_equals_pooled(self):
        rng = np.random.default_rng(8)
        genuine, spoof = _random_scores(rng, 60)
        scores = _labeled(genuine, spoof, attack="S02")
        assert per_attack_breakdown(scores) == {"S02": compute_eer(scores)[0]}

    def test_per_group_independence(self):
        scores = _labeled([0.5, 0.6], [0.1, 0.2], attack="S01")
        scores += [LabeledScore(f"x{i}", s, 1, "S02")
                   for i, s in enumerate([0.9, 0.95])]
        got = per_attack_breakdown(scores)
        assert got["S01"] == 0.0
        assert got["S02"] == 100.0

    def test_three_attacks_match_subset_oracle(self):
        rng = np.random.default_rng(9)
        genuine = list(rng.normal(1.0, 1.0, size=50))
        scores = [LabeledScore(f"g{i}", s, 0) for i, s in enumerate(genuine)]
        per_attack_spoof = {}
        for j, attack in enumerate(("S01", "S02", "S03")):
            spoof = list(rng.normal(-1.0 + 0.6 * j, 1.0, size=40))
            per_attack_spoof[attack] = spoof
            scores += [LabeledScore(f"{attack}_{i}", s, 1, attack)
                       for i, s in enumerate(spoof)]
        got = per_attack_breakdown(scores)
        for attack, spoof in per_attack_spoof.items():
            assert abs(got[attack] - eer_oracle(genuine, spoof)) < 1e-9

    def test_missing_attack_omitted_with_warning(self, caplog):
        scores = _labeled([0.9], [0.1], attack="S01")
        with caplog.at_level(logging.WARNING, logger="rawcm.metrics"):
            got = per_attack_breakdown(scores, attacks=["S01", "S09"])
        assert "S09" not in got
        assert any("S09" in rec.message for rec in caplog.records)


class TestEvaluateScores:
    def test_report_fields(self):
        scores = _labeled([0.9, 0.8, 0.7], [0.1, 0.2], attack="S01")
        report = evaluate_scores(scores, per_attack=True)
        assert report.eer == 0.0
        assert report.min_tdcf == 0.0
        assert report.n_genuine == 3
        assert report.n_spoof == 2
        assert report.per_attack_eer == {"S01": 0.0}
