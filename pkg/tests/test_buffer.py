import numpy as np
import pytest

from safestab.buffer import NotWarmedUp, ReplayBuffer, Transition


def make_buffer(capacity=8, rng=None):
    return ReplayBuffer(capacity, state_dim=3, control_dim=2,
                        rng=rng or np.random.default_rng(0))


def t(i):
    return Transition(np.full(3, float(i)), np.full(2, float(i)),
                      reward=float(i), cost=abs(float(i)),
                      x_next=np.full(3, float(i) + 0.5))


def test_push_grows_size():
    buf = make_buffer()
    buf.push(t(1))
    assert len(buf) == 1


def test_ring_keeps_last_in_order():
    buf = make_buffer(capacity=3)
    for i in range(4):
        buf.push(t(i))
    stored = buf.transitions()
    assert [s.reward for s in stored] == [1.0, 2.0, 3.0]
    assert len(buf) == 3


def test_storage_fidelity():
    buf = make_buffer()
    x = np.array([0.1, -0.2, 0.3])
    u = np.array([1.25, -7.5])
    buf.push(Transition(x, u, reward=0.123456789, cost=9.87,
                        x_next=x + 1.0))
    s = buf.transitions()[0]
    assert np.array_equal(s.x, x)
    assert np.array_equal(s.u, u)
    assert s.reward == 0.123456789
    assert s.cost == 9.87
    assert np.array_equal(s.x_next, x + 1.0)


def test_undersized_sample_raises():
    buf = make_buffer()
    buf.push(t(0))
    with pytest.raises(NotWarmedUp):
        buf.sample(3)


def test_sampling_deterministic_given_seed():
    a = make_buffer(rng=np.random.default_rng(42))
    b = make_buffer(rng=np.random.default_rng(42))
    for i in range(6):
        a.push(t(i))
        b.push(t(i))
    for _ in range(5):
        sa = a.sample(4)
        sb = b.sample(4)
        for xa, xb in zip(sa, sb):
            np.testing.assert_array_equal(xa, xb)


def test_sampling_uniform():
    buf = ReplayBuffer(10, 1, 1, np.random.default_rng(3))
    for i in range(10):
        buf.push(Transition(np.array([float(i)]), np.zeros(1), 0.0, 0.0,
                            np.zeros(1)))
    n = 100_000
    draws = np.concatenate(
        [buf.sample(10)[0][:, 0] for _ in range(n // 10)])
    counts = np.bincount(draws.astype(int), minlength=10)
    p = 0.1
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 5 * sigma)


def test_sampling_never_returns_evicted():
    buf = make_buffer(capacity=4)
    for i in range(20):
        buf.push(t(i))
    draws = np.concatenate([buf.sample(4)[0][:, 0] for _ in range(25)])
    assert draws.min() >= 16.0


def test_dimension_mismatch_raises():
    buf = make_buffer()
    with pytest.raises(ValueError):
        buf.push(Transition(np.zeros(4), np.zeros(2), 0.0, 0.0, np.zeros(3)))
    with pytest.raises(ValueError):
        buf.push(Transition(np.zeros(3), np.zeros(1), 0.0, 0.0, np.zeros(3)))


def test_negative_cost_rejected():
    with pytest.raises(ValueError):
        Transition(np.zeros(3), np.zeros(2), 0.0, -1.0, np.zeros(3))
