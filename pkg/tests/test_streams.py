import numpy as np
from scipy import stats

from piadm.streams import NormalStream, uniform_direction


def test_chunking_does_not_change_draws():
    s = NormalStream(7, "sde", 3)
    whole = s.draw(0, 50, (5, 3))
    parts = np.concatenate([s.draw(0, 7, (5, 3)), s.draw(7, 8, (5, 3)), s.draw(8, 50, (5, 3))])
    assert np.array_equal(whole, parts)


def test_streams_are_keyed():
    a = NormalStream(1, "sde", 0).draw(0, 4, (3,))
    assert np.array_equal(a, NormalStream(1, "sde", 0).draw(0, 4, (3,)))
    assert not np.array_equal(a, NormalStream(1, "sde", 1).draw(0, 4, (3,)))
    assert not np.array_equal(a, NormalStream(2, "sde", 0).draw(0, 4, (3,)))
    assert not np.array_equal(a, NormalStream(1, "init").draw(0, 4, (3,)))


def test_draws_are_standard_normal():
    z = NormalStream(3, "aux").draw(0, 20000, (5,)).ravel()
    assert stats.kstest(z, "norm").pvalue > 1e-3
    assert np.all(np.isfinite(z))


def test_uniform_direction_is_unit_and_deterministic():
    u = uniform_direction(4, 0.37, 6)
    assert abs(np.linalg.norm(u) - 1) < 1e-14
    assert np.array_equal(u, uniform_direction(4, 0.37, 6))
    assert not np.array_equal(u, uniform_direction(4, 0.38, 6))
