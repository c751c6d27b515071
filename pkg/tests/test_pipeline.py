from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from hdqr.core import Dataset
from hdqr.errors import IdentificationError, RankDeficient, StageError
from hdqr.pipeline import (DOUBLE_SELECTION, ESTIMATED, HOMOSCEDASTIC, KNOWN, NAIVE,
                           OPTIMAL_IV, PipelineConfig, Stages, run, run_algorithm1,
                           run_algorithm2, run_full, run_methods, run_naive)


def sparse_data(seed, n=200, p=40, alpha=0.5, signal=True):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, p - 1))
    x = np.column_stack([np.ones(n), z])
    d = (z[:, 0] - 0.5 * z[:, 1] if signal else 0.0) + rng.standard_normal(n)
    y = alpha * d + ((z[:, 0] + z[:, 2]) if signal else 0.0) + rng.standard_normal(n)
    return Dataset(y=y, d=d, x=x)


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(method="bogus")
    with pytest.raises(ValueError):
        PipelineConfig(density=KNOWN)
    with pytest.raises(ValueError):
        PipelineConfig(tau=1.0)
    with pytest.raises(ValueError):
        PipelineConfig(sigma_choice="sigma4")


def test_report_contents():
    data = sparse_data(1)
    rep = run_algorithm1(data, PipelineConfig(density=HOMOSCEDASTIC))
    assert rep.method == OPTIMAL_IV and rep.sigma_choice == "sigma3"
    assert rep.ci_wald[0] < rep.alpha_check < rep.ci_wald[1]
    assert rep.ci_inversion is not None and rep.ln_at_estimate >= 0
    assert 0 in rep.supports["final"]
    for key in ("step1", "step1_truncated", "step2", "post_lasso"):
        assert key in rep.supports
    assert rep.resolved["unpenalized"] == [0]
    assert rep.se == pytest.approx(rep.sigma3 / math.sqrt(data.n))
    rep2 = run_algorithm2(data, PipelineConfig(density=HOMOSCEDASTIC))
    assert rep2.method == DOUBLE_SELECTION and rep2.sigma_choice == "sigma2"
    assert rep2.alpha_tilde is not None


def test_oracle_strong_instrument():
    rng = np.random.default_rng(500)
    n = 500
    x = np.column_stack([np.ones(n), rng.standard_normal(n)])
    d = rng.standard_normal(n)
    y = 0.5 * d + rng.standard_normal(n)
    f = np.full(n, 1 / math.sqrt(2 * math.pi))
    rep = run_algorithm1(Dataset(y=y, d=d, x=x), PipelineConfig(density=KNOWN, known_density=f))
    assert abs(rep.alpha_check - 0.5) <= 3 * rep.se


def test_zero_signal_double_selection():
    data = sparse_data(2, n=500, p=30, alpha=0.0, signal=False)
    rep = run_algorithm2(data, PipelineConfig(density=HOMOSCEDASTIC))
    assert abs(rep.alpha_check) <= 3 * rep.sigma2 / math.sqrt(data.n)


def test_constant_known_density_cancels():
    data = sparse_data(3)
    n = data.n
    a = run_algorithm1(data, PipelineConfig(density=KNOWN, known_density=np.ones(n)))
    b = run_algorithm1(data, PipelineConfig(density=KNOWN, known_density=np.full(n, 7.0)))
    assert a.alpha_check == b.alpha_check
    assert a.supports == b.supports
    assert a.ci_inversion == b.ci_inversion


def test_known_density_scale_leaves_double_selection_unchanged():
    data = sparse_data(4)
    rng = np.random.default_rng(0)
    f = rng.uniform(0.2, 0.6, data.n)
    a = run_algorithm2(data, PipelineConfig(density=KNOWN, known_density=f))
    b = run_algorithm2(data, PipelineConfig(density=KNOWN, known_density=3.0 * f))
    assert a.alpha_check == pytest.approx(b.alpha_check, abs=1e-10)
    assert a.supports == b.supports


def test_zero_treatment_is_identification_error():
    data = sparse_data(5)
    data = Dataset(y=data.y, d=np.zeros(data.n), x=data.x)
    with pytest.raises(StageError) as err:
        run_algorithm1(data, PipelineConfig(density=HOMOSCEDASTIC))
    assert isinstance(err.value.cause, IdentificationError)
    assert err.value.stage == "step3"


def test_rank_deficient_union():
    rng = np.random.default_rng(6)
    n = 12
    x = np.column_stack([np.ones(n), rng.standard_normal((n, 30))])
    d = x[:, 1:].sum(axis=1) + 0.1 * rng.standard_normal(n)
    y = x[:, 1:] @ rng.standard_normal(30) + d
    cfg = PipelineConfig(density=HOMOSCEDASTIC, lam_tau=1e-3, truncation_k=30)
    with pytest.raises(StageError) as err:
        run_algorithm2(Dataset(y=y, d=d, x=x), cfg)
    assert isinstance(err.value.cause, RankDeficient)


def test_naive_and_full():
    data = sparse_data(7)
    cfg = PipelineConfig(density=HOMOSCEDASTIC)
    nv = run_naive(data, cfg)
    assert nv.method == NAIVE and nv.ci_inversion is None and nv.curve is None
    assert set(nv.supports["final"]) >= {0}
    fl = run_full(data, cfg)
    assert fl.supports["final"] == list(range(data.p)) and "step1" not in fl.supports
    assert fl.alpha_tilde is None


def test_determinism_and_shared_stages():
    data = sparse_data(8)
    cfg = PipelineConfig(density=ESTIMATED, seed=3)
    a = run_methods(data, cfg, (OPTIMAL_IV, DOUBLE_SELECTION, NAIVE))
    b = run_methods(data, cfg, (OPTIMAL_IV, DOUBLE_SELECTION, NAIVE))
    for m in a:
        assert a[m].to_dict() == b[m].to_dict()
    single = run(data, replace(cfg, method=OPTIMAL_IV))
    assert single.to_dict() == a[OPTIMAL_IV].to_dict()


def test_estimated_density_summary():
    data = sparse_data(9)
    stages = Stages(data, PipelineConfig(density=ESTIMATED))
    rep = stages.report(OPTIMAL_IV)
    est = stages.density_estimate
    assert est is not None and est.fhat.shape == (data.n,)
    assert rep.fhat_summary["trimmed"] == est.trimmed_count
    assert est.fhat.max() <= 3.0 * np.median(est.fhat) * (1 + 1e-12)
    assert set(stages.timings) >= {"step1", "step1_refit", "density", "step2", "optiv"}


def test_penalized_intercept_option():
    data = sparse_data(10)
    rep = run_algorithm2(data, PipelineConfig(density=HOMOSCEDASTIC, penalize_intercept=True))
    assert rep.resolved["unpenalized"] == []


def test_sigma_override():
    data = sparse_data(11)
    rep = run_algorithm1(data, PipelineConfig(density=HOMOSCEDASTIC, sigma_choice="sigma1"))
    assert rep.sigma_choice == "sigma1" and rep.se == pytest.approx(rep.sigma1 / math.sqrt(data.n))
