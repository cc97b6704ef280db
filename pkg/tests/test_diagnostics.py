import csv
import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats
from sklearn.covariance import MinCovDet

from robopvar.classical import FitResult, mle_fit
from robopvar.diagnostics import (LEVEL_CAP, adjusted_level, c_step, chi2_threshold, default_h, dkw_halfwidth,
                                  ecdf_within_dkw, ges, influence_table, mcd_cov, outlyingness_table, qq_band_table,
                                  qq_bands)
from robopvar.gpd_model import GpdParams, LossSample, cdf, quantile, sample, score
from robopvar.medkmad import medkmad_fit
from robopvar.robust_optimal import default_grid, mle_spec, one_step, solve_mbre, solve_omse

STD = GpdParams(0.0, 0.7, 1.0)


@pytest.fixture(scope="module")
def rmxe_grid():
    return default_grid("RMXE")


def contaminated(seed, n=500, n_out=5):
    s = sample(STD, n, seed=seed)
    x = s.values.copy()
    x[:n_out] = 100 * quantile(STD, 0.999)
    return LossSample(x)


def fits(s, grid):
    start = medkmad_fit(s, 0.0)
    return mle_fit(s, 0.0), one_step(start, "RMXE", None, s, grid=grid)


class TestInfluenceTable:
    def test_mle_max_at_sample_max(self):
        s = sample(STD, 300, seed=1)
        tab = influence_table(mle_spec(STD), s)
        assert tab["value"][np.argmax(tab["psi_norm"])] == s.values.max()

    def test_outliers_downweighted(self, rmxe_grid):
        s = contaminated(3)
        _, rob = fits(s, rmxe_grid)
        tab = influence_table(rob.influence, s)
        out = tab["index"] < 5
        assert np.all(tab["weight"][out] < np.median(tab["weight"][~out]))
        assert np.all((tab["weight"] > 0) & (tab["weight"] <= 1))

    def test_one_step_identity(self, rmxe_grid):
        s = sample(STD, 400, seed=2)
        _, rob = fits(s, rmxe_grid)
        tab = influence_table(rob.influence, s)
        beta0 = rob.info["start"]["beta"]
        n = len(tab)
        assert tab["psi_xi"].sum() == pytest.approx(n * rob.info["correction"][0], rel=1e-10)
        assert tab["psi_beta"].sum() * beta0 == pytest.approx(n * rob.info["correction"][1], rel=1e-10)

    def test_weight_identity(self):
        # min(1, b / |Y|) recomputed from (A, a, b) and the raw score
        p = GpdParams(2.0, 0.9, 5.0)
        spec = solve_omse(GpdParams(0, 0.9, 1.0), 0.5).rescaled(5.0)
        spec = type(spec)(**{**spec.__dict__, "params": p})
        x = quantile(p, np.linspace(0.01, 0.9999, 200))
        lam_std = score(p, x) * np.array([1.0, p.beta])
        y = lam_std @ spec.A.T - spec.a
        expected = np.minimum(1.0, spec.b / np.linalg.norm(y, axis=1))
        tab = influence_table(spec, LossSample(x))
        np.testing.assert_allclose(tab["weight"], expected, rtol=1e-12)

    def test_excludes_below_threshold(self):
        p = GpdParams(1.0, 0.7, 1.0)
        tab = influence_table(mle_spec(p), LossSample([0.5, 1.0, 2.0, 3.0]))
        assert len(tab) == 2 and tab.meta["excluded"] == 2

    def test_csv_and_json(self, tmp_path):
        tab = influence_table(mle_spec(STD), sample(STD, 20, seed=0))
        path = tmp_path / "t.csv"
        tab.write_csv(path, ["tool=robopvar", "seed=1"])
        lines = path.read_text().splitlines()
        assert lines[:2] == ["# tool=robopvar", "# seed=1"]
        rows = list(csv.DictReader(lines[2:]))
        assert list(rows[0]) == ["index", "value", "psi_xi", "psi_beta", "psi_norm", "weight"]
        np.testing.assert_array_equal([float(r["value"]) for r in rows], tab["value"])
        doc = json.loads(json.dumps(tab.to_json()))
        assert len(doc["rows"]) == 20


class TestMcd:
    def test_enumeration_resists_shift(self):
        rng = np.random.default_rng(0)
        clean = rng.standard_normal((20, 2))
        pts = np.r_[clean, rng.standard_normal((5, 2)) * 0.3 + [12.0, 12.0]]
        cov = mcd_cov(pts, h=15)
        sd = np.sqrt(np.diag(cov.scatter * cov.consistency))
        assert np.all(np.abs(cov.center - clean.mean(axis=0)) < 3 * sd)
        assert np.any(np.abs(pts.mean(axis=0) - clean.mean(axis=0)) > 3 * sd)
        assert not cov.support[20:].any()

    def test_enumeration_is_exact(self):
        rng = np.random.default_rng(5)
        pts = rng.standard_normal((10, 2))
        h = 6
        best = min(np.linalg.det(np.cov(pts[list(c)], rowvar=False)) for c in itertools.combinations(range(10), h))
        assert mcd_cov(pts, h=h).det == pytest.approx(best, rel=1e-10)

    def test_fast_matches_exact(self):
        rng = np.random.default_rng(6)
        pts = np.r_[rng.standard_normal((20, 2)), rng.standard_normal((5, 2)) + 6]
        exact = mcd_cov(pts, h=15)
        fast = mcd_cov(pts, h=15, exact_max_n=0)
        assert fast.det == pytest.approx(exact.det, rel=1e-10)

    def test_not_worse_than_sklearn(self):
        rng = np.random.default_rng(7)
        pts = rng.standard_normal((200, 2)) @ np.array([[2.0, 0.5], [0.0, 1.0]])
        pts[:20] += 8
        ours = mcd_cov(pts)
        sk = MinCovDet(support_fraction=ours.h / 200, random_state=0).fit(pts)
        assert ours.det <= np.linalg.det(np.cov(pts[sk.raw_support_], rowvar=False)) * (1 + 1e-9)

    def test_affine_equivariance(self):
        rng = np.random.default_rng(8)
        pts = rng.standard_normal((14, 2))
        M, v = np.array([[2.0, 1.0], [-0.5, 3.0]]), np.array([4.0, -1.0])
        a, b = mcd_cov(pts), mcd_cov(pts @ M.T + v)
        np.testing.assert_allclose(b.center, M @ a.center + v, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(b.scatter, M @ a.scatter @ M.T, rtol=1e-8, atol=1e-10)

    def test_close_to_classical_on_clean_data(self):
        rng = np.random.default_rng(9)
        sigma = np.array([[4.0, 1.0], [1.0, 1.0]])
        L = np.linalg.cholesky(sigma)
        rel, scat = [], []
        for r in range(50):
            pts = rng.standard_normal((200, 2)) @ L.T
            est = mcd_cov(pts, n_restarts=100, seed=r, reweight=True)
            classical = np.cov(pts, rowvar=False)
            scat.append(est.scatter * est.consistency)
            rel.append(np.linalg.norm(scat[-1] - classical) / np.linalg.norm(classical))
        assert np.median(rel) < 0.1
        assert np.linalg.norm(np.mean(scat, axis=0) - sigma) / np.linalg.norm(sigma) < 0.1

    def test_reweighting_keeps_raw(self):
        pts = np.random.default_rng(1).standard_normal((60, 2))
        est = mcd_cov(pts, reweight=True)
        assert est.raw is not None and est.raw.h == default_h(60)
        assert est.h >= est.raw.h

    @given(seed=st.integers(0, 2**32 - 1))
    def test_c_step_monotone(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.standard_normal((60, 2))
        pts[:6] *= 10
        h = default_h(60)
        idx = rng.choice(60, h, replace=False)
        mu, cov = pts[idx].mean(axis=0), np.cov(pts[idx], rowvar=False)
        det = np.linalg.det(cov)
        for _ in range(10):
            mu, cov, _ = c_step(pts, mu, cov, h)
            new = np.linalg.det(cov)
            assert new <= det * (1 + 1e-12)
            det = new

    def test_validation(self):
        with pytest.raises(ValueError):
            mcd_cov(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            mcd_cov(np.random.default_rng(0).standard_normal((10, 2)), h=4)
        with pytest.raises(np.linalg.LinAlgError):
            t = np.arange(12.0)
            mcd_cov(np.c_[t, 2 * t])

    def test_deterministic(self):
        pts = np.random.default_rng(2).standard_normal((100, 2))
        np.testing.assert_array_equal(mcd_cov(pts, seed=3).support, mcd_cov(pts, seed=3).support)


class TestOutlyingness:
    def test_threshold(self):
        assert chi2_threshold(0.99) == pytest.approx(9.2103, abs=1e-4)
        assert chi2_threshold(0.99) == pytest.approx(-2 * math.log(0.01), rel=1e-12)

    def test_flags_injected(self, rmxe_grid):
        s = contaminated(11)
        tab = outlyingness_table(s, *fits(s, rmxe_grid))
        assert tab["flagged"][tab["index"] < 5].all()
        flagged = tab["flagged"]
        assert np.all(tab["mahalanobis_sq"][flagged] > tab.meta["y_threshold"])
        assert np.all(tab["value"][flagged] > tab.meta["x_threshold"])

    def test_flag_monotone(self, rmxe_grid):
        s = contaminated(12)
        mle, rob = fits(s, rmxe_grid)
        tab = outlyingness_table(s, mle, rob)
        i = int(np.nonzero(tab["flagged"])[0][0])
        for factor in (2.0, 10.0, 1e3):
            x = s.values.copy()
            x[tab["index"][i]] *= factor
            again = outlyingness_table(LossSample(x), mle, rob)
            assert again["flagged"][i]

    def test_needs_converged_fits(self, rmxe_grid):
        s = sample(STD, 100, seed=0)
        bad = FitResult(STD, "MLE", converged=False)
        with pytest.raises(ValueError):
            outlyingness_table(s, bad, bad)


class TestQQBands:
    def test_adjusted_level(self):
        assert adjusted_level(0.95, 0.6, 400) == (pytest.approx(0.98), False)
        with pytest.warns(UserWarning):
            level, capped = adjusted_level(0.95, 5.0, 100)
        assert capped and level == LEVEL_CAP

    def test_dkw_halfwidth(self):
        assert dkw_halfwidth(0.95, 500) == pytest.approx(0.0607, abs=5e-5)

    def test_ordering_and_nesting(self):
        pw, sim = qq_bands(STD, 500, 0.95)
        assert np.all(pw.lower <= pw.upper) and np.all(sim.lower <= sim.upper)
        i = np.arange(1, 501)
        central = (i > 50) & (i <= 450)
        assert np.all(sim.lower[central] <= pw.lower[central])
        assert np.all(pw.upper[central] <= sim.upper[central])

    def test_pointwise_coverage_oracle(self):
        # the pointwise band for one order statistic is an exact Beta interval
        pw, _ = qq_bands(STD, 50, 0.9)
        rng = np.random.default_rng(0)
        xs = np.sort(quantile(STD, rng.random((20000, 50))), axis=1)[:, 24]
        cover = np.mean((xs >= pw.lower[24]) & (xs <= pw.upper[24]))
        assert cover == pytest.approx(0.9, abs=0.01)

    def test_table(self, rmxe_grid):
        s = sample(STD, 300, seed=4)
        _, rob = fits(s, rmxe_grid)
        pw, sim, tab = qq_band_table(rob, s)
        assert tab.meta["radius"] == pytest.approx(rob.influence.radius)
        assert sim.radius_adjusted_level == pytest.approx(0.95 + rob.influence.radius / math.sqrt(300))
        np.testing.assert_allclose(tab["position"], np.arange(1, 301) / 301)
        assert np.all(np.diff(tab["value"]) >= 0)

    @pytest.mark.parametrize("seed", range(6))
    def test_ecdf_within_dkw_matches_ks(self, seed):
        x = sample(STD, 500, seed=seed).values
        ks = stats.kstest(x, lambda v: cdf(STD, v)).statistic
        assert ecdf_within_dkw(STD, x, 0.95) == (ks <= dkw_halfwidth(0.95, 500))
        assert not ecdf_within_dkw(STD, x * 3, 0.95)


class TestGes:
    def test_robust_kinds(self):
        m = solve_mbre(STD)
        o = solve_omse(STD, 0.5)
        assert ges(m) == m.b and ges(o) == o.b

    @pytest.mark.parametrize("xi", [0.1, 0.7, 2.0])
    def test_mle_infinite(self, xi):
        assert ges(mle_spec(GpdParams(0, xi, 1.0))) == math.inf

    def test_tenfold_growth_at_small_shape(self):
        spec = mle_spec(GpdParams(0, 0.1, 1.0))
        x = quantile(spec.params, np.array([0.99, 1 - 1e-6]))
        n = np.linalg.norm(spec(x), axis=1)
        assert n[1] > 10 * n[0]

    def test_bounded_probe_not_flagged(self):
        # a probe grid that stops growing is reported as its maximum
        assert math.isfinite(ges(mle_spec(STD), probe_grid=[0.5, 0.6, 0.61, 0.611]))
