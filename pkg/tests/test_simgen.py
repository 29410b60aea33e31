import numpy as np
import pytest

from lmmsel import SCENARIOS, evaluate, generate, run_study
from lmmsel.simgen import METHODS, _rng, run_replicate


class TestScenarioTable:
    def test_parameters(self):
        assert SCENARIOS["M1"].n == 120 and SCENARIOS["M1"].p == 80
        assert SCENARIOS["M1"].beta_value == pytest.approx(2 / 3)
        assert SCENARIOS["M1"].fitted_q == 3
        assert SCENARIOS["M2"].p == 300 and SCENARIOS["M2"].rho == 0.5
        assert SCENARIOS["M2"].beta_value == pytest.approx(3 / 4)
        assert SCENARIOS["M3"].group_sizes == ((20, 6), (15, 8))
        assert SCENARIOS["M4"].p == 600
        for sc in SCENARIOS.values():
            assert sc.true_q == 2


class TestGenerate:
    def test_shapes_and_structure(self):
        data, truth = generate(SCENARIOS["M1"], (0, 0))
        assert data.n == 120 and data.p == 80 and data.q == 3
        assert all(e.n_levels == 20 for e in data.effects)
        assert truth.support == (0, 1, 2, 3, 4)
        assert truth.true_effects == (0, 1)
        assert data.unpenalized == frozenset({0})

    def test_reproducible(self):
        a, ta = generate(SCENARIOS["M3"], (5, 7))
        b, tb = generate(SCENARIOS["M3"], (5, 7))
        assert np.array_equal(a.y, b.y) and np.array_equal(a.X, b.X)
        assert ta.snr == tb.snr

    def test_replicates_differ(self):
        a, _ = generate(SCENARIOS["M1"], (0, 0))
        b, _ = generate(SCENARIOS["M1"], (0, 1))
        assert not np.array_equal(a.y, b.y)

    def test_standardization_contract(self):
        for name in ("M1", "M2"):
            data, _ = generate(SCENARIOS[name], (1, 0))
            body = data.X[:, 1:]
            assert np.abs(body.mean(axis=0)).max() <= 1e-12
            assert np.abs((body ** 2).mean(axis=0) - 1).max() <= 1e-12
            assert np.all(data.X[:, 0] == 1.0)

    def test_snr_recompute(self):
        data, truth = generate(SCENARIOS["M4"], (2, 3))
        assert truth.snr == pytest.approx(
            float(truth.signal @ truth.signal) / float(truth.noise @ truth.noise))
        assert np.allclose(truth.signal + truth.noise, data.y)

    def test_m2_random_support(self):
        _, ta = generate(SCENARIOS["M2"], (0, 0))
        _, tb = generate(SCENARIOS["M2"], (0, 1))
        assert set(ta.support) >= {0, 1} and len(ta.support) == 5
        assert all(j >= 2 for j in ta.support if j not in (0, 1))
        # the random part of the support varies across replicates
        assert any(generate(SCENARIOS["M2"], (0, r))[1].support != ta.support
                   for r in range(1, 6))

    def test_m2_fixed_support(self):
        src = _rng(0, 0xFFFFFFFF)
        supports = set()
        for rep in range(3):
            src = _rng(0, 0xFFFFFFFF)
            _, t = generate(SCENARIOS["M2"], (0, rep), support_rng=src)
            supports.add(t.support)
        assert len(supports) == 1

    def test_m2_correlated_columns(self):
        # AR(1) rho = 0.5: adjacent raw columns correlate near 0.5
        rs = []
        for rep in range(20):
            data, _ = generate(SCENARIOS["M2"], (3, rep))
            a, b = data.X[:, 5], data.X[:, 6]
            rs.append(np.corrcoef(a, b)[0, 1])
        assert abs(np.mean(rs) - 0.5) < 0.1


class TestEvaluate:
    def test_exact_recovery(self):
        from lmmsel.ecm import FitResult, ParameterState
        data, truth = generate(SCENARIOS["M1"], (4, 0))
        state = ParameterState(truth.beta, np.ones(2), 1.0, (0, 1))
        perfect = FitResult(state=state, u=None, support=truth.support, deleted={2: 1},
                            trajectory=[], converged=True, reason="", iterations=1,
                            lam=0.0)
        rep = evaluate(perfect, truth, data)
        assert rep.truth and rep.support_exact and rep.mse == 0.0
        assert rep.tp == 5 and not rep.false_deletion

    def test_spurious_effect_retained_splits_flags(self):
        from lmmsel.ecm import FitResult, ParameterState
        data, truth = generate(SCENARIOS["M1"], (4, 1))
        state = ParameterState(truth.beta, np.ones(3), 1.0, (0, 1, 2))
        res = FitResult(state=state, u=None, support=truth.support, deleted={},
                        trajectory=[], converged=True, reason="", iterations=1, lam=0.0)
        rep = evaluate(res, truth, data)
        assert rep.support_exact and not rep.truth
        assert not rep.false_deletion

    def test_null_fit(self):
        from lmmsel.ecm import FitResult, ParameterState
        data, truth = generate(SCENARIOS["M1"], (4, 2))
        state = ParameterState(np.zeros(data.p), np.ones(2), 1.0, (0, 1))
        res = FitResult(state=state, u=None, support=(), deleted={}, trajectory=[],
                        converged=True, reason="", iterations=1, lam=0.0)
        rep = evaluate(res, truth, data)
        assert rep.tp == 0 and not rep.truth
        assert rep.mse == pytest.approx(truth.signal @ truth.signal / data.n)

    def test_false_deletion_flag(self):
        from lmmsel.ecm import FitResult, ParameterState
        data, truth = generate(SCENARIOS["M1"], (4, 3))
        state = ParameterState(truth.beta, np.ones(1), 1.0, (0,))  # lost effect 2
        res = FitResult(state=state, u=None, support=truth.support, deleted={1: 3, 2: 3},
                        trajectory=[], converged=True, reason="", iterations=3, lam=0.0)
        assert evaluate(res, truth, data).false_deletion


class TestStudy:
    def test_plain_method_ignores_effects(self):
        study = run_study("M1", 2, "lasso", 0, grid_size=10)
        assert not study.failures
        for r in study.reports:
            assert not r.sigma2_k_hat.any()

    def test_mixed_method_aggregate_fields(self):
        study = run_study("M1", 2, "lasso+", 0, grid_size=10)
        agg = study.aggregate()
        for key in ("truth", "support_size", "tp", "sigma2_e", "sigma2_3",
                    "mse", "snr", "false_deletion"):
            assert key in agg
        mean, sd = agg["tp"]
        assert 0 <= mean <= 5 and sd >= 0

    def test_refit_reports(self):
        study = run_study("M1", 2, "lasso+", 0, grid_size=10, with_refit=True)
        assert len(study.refit_reports) == len(study.reports)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            run_replicate(SCENARIOS["M1"], "ridge", 0, 0)

    def test_methods_registry(self):
        assert METHODS == ("lasso", "adlasso", "lasso+", "adlasso+")

    def test_study_deterministic(self):
        a = run_study("M1", 2, "lasso+", 3, grid_size=8)
        b = run_study("M1", 2, "lasso+", 3, grid_size=8)
        for ra, rb in zip(a.reports, b.reports):
            assert ra.sigma2_e_hat == rb.sigma2_e_hat
            assert ra.mse == rb.mse
