import numpy as np
import pytest

from sclm.accounting import (
    bench,
    conv_macs,
    count_flops,
    count_params,
    default_workers,
    pointwise_ops,
    round_sig,
    time_call,
)
from sclm.reparam import collapse
from sclm.verify import trained_like


@pytest.fixture(scope="module")
def fused():
    return collapse(trained_like("db", seed=0))


def test_fused_params(fused):
    assert count_params(fused) == 87


def test_branch_params():
    assert count_params(trained_like("db")) == 252


def test_macs_per_pixel(fused):
    assert conv_macs(fused, 1, 1) == 81


def test_full_hd(fused):
    assert conv_macs(fused, 1080, 1920) == 1080 * 1920 * 81 == 167_961_600
    assert count_flops(fused, 1080, 1920) == pytest.approx(0.1679616)
    assert round_sig(count_flops(fused, 1080, 1920)) == 0.17
    assert round_sig(count_flops(fused, 1080, 1920, "2x")) == 0.34


def test_branch_costs_more(fused):
    assert conv_macs(trained_like("db"), 64, 64) > conv_macs(fused, 64, 64)


def test_bad_convention(fused):
    with pytest.raises(ValueError, match="convention"):
        count_flops(fused, 1, 1, "3x")


def test_pointwise_scales_with_area():
    assert pointwise_ops(20, 10) == 2 * pointwise_ops(10, 10)


@pytest.mark.parametrize("x,expected", [(0.1679616, 0.17), (1234.0, 1200.0), (0.0, 0.0), (9.96, 10.0)])
def test_round_sig(x, expected):
    assert round_sig(x) == expected


def test_workers_env(monkeypatch):
    monkeypatch.setenv("SCLM_THREADS", "1")
    assert default_workers() == 1
    monkeypatch.setenv("SCLM_THREADS", "100000")
    assert default_workers() >= 1
    monkeypatch.setenv("SCLM_THREADS", "many")
    with pytest.raises(ValueError, match="SCLM_THREADS"):
        default_workers()


def test_time_call_counts():
    calls = []
    med, p95 = time_call(lambda: calls.append(1), repeats=5, warmup=2)
    assert len(calls) == 7 and 0 <= med <= p95
    with pytest.raises(ValueError):
        time_call(lambda: None, repeats=0)


def test_bench_rows(fused):
    rows = bench(fused, trained_like("db"), 16, 16, repeats=2, warmup=0, threads=1)
    assert [r[0] for r in rows] == ["fused_conv", "branch_forward", "enhance"]
    assert all(r[1] == 1 and r[2] == 2 and r[3] > 0 for r in rows)
    assert np.isfinite([r[4] for r in rows]).all()
