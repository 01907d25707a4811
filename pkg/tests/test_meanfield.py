import numpy as np
import pytest

from mfbdsde.model.errors import InvalidArgumentError, ShapeError
from mfbdsde.model.schemas import LipschitzMeta
from mfbdsde.model.types import PopulationSnapshot
from mfbdsde.services.dsl import parse
from mfbdsde.services.meanfield import (
    check_h1, check_h2, empirical_average, estar_hat, estar_hat_many, gamma_hat, gamma_hat_many,
    pairwise_mean, pairwise_sum, std_err,
)


def snapshot(y, z=None, v=None, x=None):
    y = np.asarray(y, dtype=float)
    return PopulationSnapshot(
        time_index=0,
        y=y,
        z=np.zeros_like(y) if z is None else np.asarray(z, dtype=float),
        v=None if v is None else np.asarray(v, dtype=float),
        x=None if x is None else np.asarray(x, dtype=float),
    )


def test_pairwise_reductions():
    rng = np.random.default_rng(0)
    values = rng.normal(size=(3, 1001))
    np.testing.assert_allclose(pairwise_sum(values), values.sum(axis=1), rtol=1e-12)
    np.testing.assert_allclose(pairwise_mean(values, axis=0), values.mean(axis=0), rtol=1e-12)
    assert pairwise_sum(np.zeros(0)) == 0.0
    assert std_err([3.0]) == 0.0
    assert std_err(values[0]) == pytest.approx(values[0].std(ddof=1) / np.sqrt(1001), rel=1e-10)


def test_gamma_hat_examples():
    assert gamma_hat(parse("yp"), {}, snapshot([1, 2, 3]), 0.0) == pytest.approx(2.0, abs=1e-15)
    assert gamma_hat(parse("y"), {"y": 5.0}, snapshot([-7, 11]), 0.0) == 5.0
    assert gamma_hat(parse("y*yp"), {"y": 2.0}, snapshot([0, 1, 2]), 0.0) == pytest.approx(2.0, abs=1e-15)


def test_gamma_hat_reads_every_primed_slot():
    snap = snapshot(y=[1, 3], z=[2, 4], v=[0, 1], x=[5, 7])
    value = gamma_hat(parse("yp + zp + vp + xp + t"), {}, snap, 0.5)
    assert value == pytest.approx(2 + 3 + 0.5 + 6 + 0.5, abs=1e-14)


def test_estar_hat_examples():
    assert estar_hat(parse("1"), np.array([1.0, 2.0, 3.0]), snapshot([0, 0, 0]), {}, 0.0) == pytest.approx(2.0)
    assert estar_hat(parse("yp"), np.ones(2), snapshot([0, 2]), {}, 0.0) == pytest.approx(1.0)
    assert estar_hat(parse("y"), np.ones(2), snapshot([9, 9]), {"y": 3.0}, 0.0) == pytest.approx(3.0)


def test_estar_hat_weights_the_kernel():
    carrier = np.array([1.0, -1.0, 2.0])
    snap = snapshot([1, 2, 3])
    value = estar_hat(parse("y*yp"), carrier, snap, {"y": 2.0}, 0.0)
    assert value == pytest.approx(2.0 * (1 - 2 + 6) / 3, abs=1e-14)
    many = estar_hat_many(parse("y*yp"), carrier, snap, {"y": np.array([1.0, 2.0])}, 0.0)
    np.testing.assert_allclose(many, [5 / 3, 10 / 3], atol=1e-14)


def test_estar_hat_carrier_length_checked():
    with pytest.raises(ShapeError):
        estar_hat(parse("1"), np.ones(3), snapshot([0, 1]), {}, 0.0)


def test_own_bindings_must_agree_in_length():
    with pytest.raises(ShapeError):
        empirical_average(parse("y + z + yp"), {"y": np.ones(3), "z": np.ones(4)}, snapshot([1, 2]), 0.0)


def test_non_separable_kernel_matches_brute_force():
    rng = np.random.default_rng(3)
    own = rng.normal(size=50)
    pop = rng.normal(size=200)
    result = gamma_hat_many(parse("tanh(y + yp)"), {"y": own}, snapshot(pop), 0.0)
    expected = np.tanh(own[:, None] + pop[None, :]).mean(axis=1)
    np.testing.assert_allclose(result, expected, atol=1e-13)


def test_separable_kernel_matches_brute_force():
    rng = np.random.default_rng(4)
    own = rng.normal(size=40)
    pop = rng.normal(size=300)
    separable = gamma_hat_many(parse("exp(-t)*(y - yp)^2"), {"y": own}, snapshot(pop), 0.2)
    expected = (np.exp(-0.2) * (own[:, None] - pop[None, :]) ** 2).mean(axis=1)
    np.testing.assert_allclose(separable, expected, rtol=1e-12)


def test_population_order_does_not_matter():
    rng = np.random.default_rng(5)
    own = rng.normal(size=30)
    pop = rng.normal(size=257)
    kernel = parse("tanh(y*yp + zp)")
    z = rng.normal(size=257)
    perm = rng.permutation(257)
    a = gamma_hat_many(kernel, {"y": own}, snapshot(pop, z=z), 0.0)
    b = gamma_hat_many(kernel, {"y": own}, snapshot(pop[perm], z=z[perm]), 0.0)
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


def test_blocked_average_is_thread_independent():
    rng = np.random.default_rng(6)
    own = rng.normal(size=3000)
    pop = rng.normal(size=4096)
    kernel = parse("tanh(y + yp)")
    one = gamma_hat_many(kernel, {"y": own}, snapshot(pop), 0.0, threads=1)
    four = gamma_hat_many(kernel, {"y": own}, snapshot(pop), 0.0, threads=4)
    assert np.array_equal(one, four)


def test_gamma_without_population():
    values = gamma_hat_many(parse("2*y + t"), {"y": np.array([1.0, 2.0])}, None, 1.0)
    np.testing.assert_allclose(values, [3.0, 5.0])
    with pytest.raises(InvalidArgumentError):
        gamma_hat_many(parse("y + yp"), {"y": np.array([1.0])}, None, 0.0)


def test_check_h1_examples():
    passing = check_h1(LipschitzMeta(alpha1=0.3, alpha2=0.5, alpha3=0.4, alpha4=0.4))
    assert passing.h1_ok
    assert passing.margin == pytest.approx(0.3)

    failing = check_h1(LipschitzMeta(alpha1=0.8, alpha2=1.0, alpha3=0.3))
    assert not failing.h1_ok
    assert failing.margin == pytest.approx(-0.1)

    lz = check_h1(LipschitzMeta(L_z=0.1))
    assert lz.h1_ok
    assert lz.M2 == pytest.approx(0.1 / lz.C)
    assert lz.M2 < 1


def test_check_h1_rejects_large_z_coupling():
    report = check_h1(LipschitzMeta(alpha2=1.0, alpha3=0.6, alpha4=0.3, L_zp=500.0, L_gamma=1.0))
    assert report.margin == pytest.approx(0.1)
    assert not report.h1_ok


def test_check_h2():
    ok, margin = check_h2(LipschitzMeta(alpha3=0.3, alpha4=0.4))
    assert ok and margin == pytest.approx(0.3)
    ok, _ = check_h2(LipschitzMeta(alpha3=0.6, alpha4=0.4))
    assert not ok


def rms_error(average, kernel, exact, n, replicates, rng):
    errors = [average(kernel, {"y": 0.0}, snapshot(rng.normal(size=n)), 0.0) - exact for _ in range(replicates)]
    return float(np.sqrt(np.mean(np.square(errors))))


@pytest.mark.parametrize(
    "average, source, exact",
    [
        (gamma_hat, "yp", 0.0),
        (lambda *args: float(empirical_average(*args)[0]), "yp", 0.0),
        (lambda *args: float(empirical_average(*args)[0]), "exp(-(yp - y)^2)", 1 / np.sqrt(3)),
    ],
)
def test_population_average_error_rate(average, source, exact):
    rng = np.random.default_rng(2024)
    sizes = [100, 1000, 10000, 100000]
    errors = [rms_error(average, parse(source), exact, n, 100, rng) for n in sizes]
    slope = np.polyfit(np.log(sizes), np.log(errors), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.1)
