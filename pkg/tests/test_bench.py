"""Tests for the Monte Carlo benchmark harness and report emission.

Numbers here use deliberately small pools and replication counts; the
full-scale grid pattern is asserted by the acceptance tests.
"""

import dataclasses

import numpy as np
import pytest

from helpers import benchmark_params, strong_emission_dgp
from longbridge.bench import (
    BenchmarkConfig,
    BenchmarkReport,
    _child_seed,
    emit_report,
    load_report,
    run_benchmark,
)
from longbridge.estimators import naive_dim
from longbridge.synthetic import (
    SubsampleConfig,
    biased_subsample,
    discrete_true_tau,
    gen_levels_sem,
)


def _tiny_config(**overrides) -> BenchmarkConfig:
    base = dict(dgp=benchmark_params(), pool_n_o=2000, n_e=1000,
                eta_grid=(0.8,), lambda0_grid=(0.33,), replications=3,
                estimators=("naive", "dr"), base_seed=11)
    base.update(overrides)
    return BenchmarkConfig(**base)


@pytest.fixture(scope="module")
def ordering_report() -> BenchmarkReport:
    cfg = BenchmarkConfig(dgp=benchmark_params(), pool_n_o=3000, n_e=1500,
                          eta_grid=(0.0, 0.8), lambda0_grid=(0.33,),
                          replications=24,
                          estimators=("naive", "imputation", "dr"),
                          base_seed=7)
    return run_benchmark(cfg)


# -- single-cell arithmetic --------------------------------------------------------------


def test_single_replication_naive_cell_is_the_hand_computed_error():
    cfg = _tiny_config(eta_grid=(0.6,), estimators=("naive",), replications=1)
    report = run_benchmark(cfg)
    pool, latent = gen_levels_sem(cfg.dgp, cfg.pool_n_o, cfg.n_e,
                                  seed=_child_seed(11, 0xDA, 0), n_levels=4)
    sub = biased_subsample(pool, latent, SubsampleConfig(
        eta=0.6, l_max=3, seed=_child_seed(11, 0xBE, 0)))
    expected = abs(naive_dim(sub.sample).tau_hat - report.metadata["tau_true"])
    cell = report.cell(0.6, None, "naive")
    assert cell.mae == expected
    assert cell.medae == expected
    assert cell.replications == 1 and cell.failures == 0
    assert cell.pct_mae is None


# -- grid patterns -----------------------------------------------------------------------


def test_unconfounded_row_keeps_naive_smallest(ordering_report):
    naive = ordering_report.cell(0.0, None, "naive")
    assert naive.mae < ordering_report.cell(0.0, None, "imputation").mae
    assert naive.mae < ordering_report.cell(0.0, 0.33, "dr").mae


def test_confounded_row_prefers_the_combined_route(ordering_report):
    naive = ordering_report.cell(0.8, None, "naive")
    imputation = ordering_report.cell(0.8, None, "imputation")
    dr = ordering_report.cell(0.8, 0.33, "dr")
    assert naive.mae > 0.5
    assert dr.pct_medae > imputation.pct_medae > 0
    assert dr.pct_mae > 0


def test_naive_error_grows_with_confounding(ordering_report):
    assert (ordering_report.cell(0.8, None, "naive").mae
            > ordering_report.cell(0.0, None, "naive").mae)


def test_discrete_process_pipeline():
    dgp = strong_emission_dgp()
    cfg = BenchmarkConfig(dgp=dgp, pool_n_o=3000, n_e=1500, eta_grid=(0.5,),
                          lambda0_grid=(0.33,), replications=2,
                          estimators=("naive", "dr"), base_seed=3)
    report = run_benchmark(cfg)
    assert report.metadata["tau_true"] == discrete_true_tau(dgp)
    cell = report.cell(0.5, 0.33, "dr")
    assert cell.failures == 0
    assert np.isfinite(cell.mae)


# -- failures ----------------------------------------------------------------------------


def test_failures_are_counted_and_excluded():
    cfg = BenchmarkConfig(dgp=benchmark_params(), pool_n_o=60, n_e=40,
                          eta_grid=(1.2,), lambda0_grid=(0.33,),
                          replications=12, estimators=("naive", "dr"),
                          base_seed=2)
    report = run_benchmark(cfg)
    dr = report.cell(1.2, 0.33, "dr")
    assert dr.failures > 0
    assert dr.replications + dr.failures == 12
    assert np.isfinite(dr.mae) and np.isfinite(dr.medae)
    naive = report.cell(1.2, None, "naive")
    assert naive.failures == 0


# -- determinism -------------------------------------------------------------------------


def test_reports_are_identical_across_runs_and_worker_counts():
    cfg = _tiny_config(replications=4)
    first = run_benchmark(cfg)
    again = run_benchmark(cfg)
    assert first == again
    parallel = run_benchmark(dataclasses.replace(cfg, workers=2))
    assert parallel.cells == first.cells


def test_config_hash_ignores_worker_count():
    cfg = _tiny_config()
    assert cfg.hash() == dataclasses.replace(cfg, workers=3).hash()
    assert cfg.hash() != dataclasses.replace(cfg, base_seed=12).hash()


# -- emission ----------------------------------------------------------------------------


def test_json_round_trip(tmp_path, ordering_report):
    path = str(tmp_path / "report.json")
    emit_report(ordering_report, "json", path)
    assert load_report(path) == ordering_report


def test_csv_is_tidy(tmp_path, ordering_report):
    path = str(tmp_path / "report.csv")
    emit_report(ordering_report, "csv", path)
    lines = open(path).read().splitlines()
    assert lines[0] == ("eta,lambda0,estimator,metric,value,"
                        "replications,failures,pct_improvement")
    assert len(lines) == 1 + 2 * len(ordering_report.cells)


def test_markdown_layout(tmp_path, ordering_report):
    path = str(tmp_path / "report.md")
    emit_report(ordering_report, "md", path)
    lines = open(path).read().splitlines()
    n_etas = len({c.eta for c in ordering_report.cells})
    assert len(lines) == 2 + 2 * n_etas
    header = lines[0]
    assert header.index("naive") < header.index("imputation") < header.index("dr")
    naive_cell = lines[2].split("|")[3]
    assert "%" not in naive_cell


def test_unknown_format_rejected(tmp_path, ordering_report):
    with pytest.raises(ValueError, match="format"):
        emit_report(ordering_report, "yaml", str(tmp_path / "x"))


# -- config validation -------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError, match="unknown estimator"):
        _tiny_config(estimators=("naive", "bogus"))
    with pytest.raises(ValueError, match="replications"):
        _tiny_config(replications=0)
    with pytest.raises(ValueError, match="non-empty"):
        _tiny_config(eta_grid=())
    with pytest.raises(ValueError, match="workers"):
        _tiny_config(workers=0)
    with pytest.raises(ValueError, match="nonnegative"):
        _tiny_config(eta_grid=(-0.5,))


def test_config_dict_round_trip():
    cfg = _tiny_config()
    assert BenchmarkConfig.from_dict(cfg.to_dict()) == cfg
    discrete = _tiny_config(dgp=strong_emission_dgp())
    recovered = BenchmarkConfig.from_dict(discrete.to_dict())
    assert recovered.to_dict() == discrete.to_dict()
    assert recovered.hash() == discrete.hash()
    with pytest.raises(ValueError, match="schema_version"):
        BenchmarkConfig.from_dict({"schema_version": 99})
    with pytest.raises(ValueError, match="unknown config fields"):
        BenchmarkConfig.from_dict({"schema_version": 1, "bogus_field": 3})
    with pytest.raises(ValueError, match="dgp kind"):
        BenchmarkConfig.from_dict({"dgp": {"kind": "bogus", "params": {}}})
