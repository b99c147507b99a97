import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specbias.data import sample_sphere
from specbias.errors import DivergenceError, InputError, InvalidSpectrumMapError
from specbias.linalg import eigh
from specbias.msk import Custom, FlattenTopK, Identity, Power, Shift
from specbias.network import MlpConfig, MlpState, empirical_ntk, forward, init, vjp
from specbias.precond import (
    Preconditioner,
    TrainTrace,
    apply_precond,
    build_preconditioner,
    iterations_to_learn,
    ks_spectrum,
    linear_dynamics,
    max_stable_lr,
    pgd_train,
    preconditioned_loss,
    preconditioned_loss_grad,
)

from conftest import random_psd


def _dec(rng, n=16):
    K, _, _ = random_psd(rng, n)
    return K, eigh(K)


def test_k_zero_and_identity_give_identity(rng):
    K, d = _dec(rng)
    assert np.allclose(build_preconditioner(d, Power(0.5), 0).dense(), np.eye(16))
    S = build_preconditioner(d, Identity(), 5)
    assert np.allclose(S.coefficients, 0)
    assert np.allclose(S.dense(), np.eye(16))


def test_shift_full_variant(rng):
    K, d = _dec(rng, 10)
    S = build_preconditioner(d, Shift(0.3), 10, full=True)
    assert np.linalg.norm(K @ S.dense() - (K + 0.3 * np.eye(10))) <= 1e-8


def test_dense_spectrum_of_s(rng):
    K, d = _dec(rng)
    S = build_preconditioner(d, Power(0.5), 5)
    lam = d.eigenvalues
    expect = np.sort(np.concatenate([np.ones(11), np.sqrt(lam[:5]) / lam[:5]]))[::-1]
    assert np.allclose(np.linalg.eigvalsh(S.dense())[::-1], expect, rtol=1e-10)
    assert S.min_eigenvalue() == pytest.approx(min(1.0, (np.sqrt(lam[:5]) / lam[:5]).min()))


def test_build_errors(rng):
    K, d = _dec(rng, 6)
    with pytest.raises(InputError):
        build_preconditioner(d, Identity(), 6)
    with pytest.raises(InvalidSpectrumMapError):
        build_preconditioner(d, Custom(func=lambda lam: -lam), 2)


def test_apply_examples(rng):
    K, d = _dec(rng, 32)
    S = build_preconditioner(d, Power(0.5), 4)
    r = rng.standard_normal(32)
    assert np.allclose(apply_precond(Preconditioner.identity(32), r), r)
    v = d.eigenvectors[:, 1]
    assert np.allclose(S.apply(v), np.sqrt(d.eigenvalues[1]) / d.eigenvalues[1] * v)
    assert np.max(np.abs(S.apply(r) - S.dense() @ r)) <= 1e-12
    assert np.allclose(S.apply_sqrt(S.apply_sqrt(r)), S.apply(r))
    assert np.allclose(S.apply_inverse(S.apply(r)), r)
    with pytest.raises(InputError):
        S.apply(np.ones(3))


def test_ks_spectrum_examples(rng):
    K, d = _dec(rng)
    assert np.allclose(ks_spectrum(d, Identity(), 5), d.eigenvalues)
    flat = ks_spectrum(d, FlattenTopK(5), 5)
    assert np.allclose(flat[:6], d.eigenvalues[5])
    S = build_preconditioner(d, Power(0.5), 5)
    dense = np.sort(np.linalg.eigvals(K @ S.dense()).real)[::-1]
    assert np.allclose(np.sort(ks_spectrum(d, Power(0.5), 5))[::-1], dense, rtol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 20), st.integers(0, 10_000), st.sampled_from(["flat", "shift", "power"]))
def test_ks_matches_dense_property(n, seed, kind):
    rng = np.random.default_rng(seed)
    K, d = _dec(rng, n)
    k = int(rng.integers(1, n))
    g = {"flat": FlattenTopK(k), "shift": Shift(0.1), "power": Power(0.5)}[kind]
    S = build_preconditioner(d, g, k)
    dense = np.sort(np.linalg.eigvals(K @ S.dense()).real)[::-1]
    assert np.allclose(np.sort(ks_spectrum(d, g, k))[::-1], dense, rtol=1e-9, atol=1e-12)


def test_max_stable_lr():
    assert max_stable_lr([1, 1]) == 1
    assert max_stable_lr([3, 1]) == 0.5
    with pytest.raises(InputError):
        max_stable_lr([1, 0])


def test_linear_dynamics_examples(rng):
    lam = np.array([2.0, 1.0, 0.5])
    p = np.array([1.0, -2.0, 0.5])
    assert np.allclose(linear_dynamics(lam, p, 0.0, 5), np.linalg.norm(p))
    single = linear_dynamics(lam, np.array([1.0, 0, 0]), 0.3, 6)
    assert np.allclose(single, 0.4 ** np.arange(7))


def test_linear_dynamics_matches_matrix_power(rng):
    K, d = _dec(rng)
    S = build_preconditioner(d, FlattenTopK(4), 4)
    spec = ks_spectrum(d, FlattenTopK(4), 4)
    eta = 0.9 * max_stable_lr(spec)
    y = rng.standard_normal(16)
    pred = linear_dynamics(spec, d.eigenvectors.T @ y, eta, 30)
    M = np.eye(16) - eta * K @ S.dense()
    r = y.copy()
    for t in range(31):
        assert abs(np.linalg.norm(r) - pred[t]) <= 1e-10 * max(1.0, pred[0])
        r = M @ r


def _net(width=64, seed=0, n=8):
    cfg = MlpConfig(width=width, depth=2, seed=seed)
    X = sample_sphere(2, n, seed=seed + 1).points
    y = np.sin(2 * np.arctan2(X[:, 1], X[:, 0]))
    return init(cfg), X, y


def test_identity_pgd_is_vanilla_gd():
    st_, X, y = _net()
    eta0 = 0.05
    out, trace = pgd_train(st_, X, y, None, eta0, epsilon=0.0, max_iter=10)
    w = st_
    for _ in range(10):
        r = forward(w, X) - y
        w = MlpState.from_flat(w.config, w.flat() - eta0 / 64 * vjp(w, X, r))
    assert np.max(np.abs(out.flat() - w.flat())) <= 1e-12
    assert trace.iterations == 10


def test_zero_residual_exits():
    st_, X, _ = _net()
    out, trace = pgd_train(st_, X, forward(st_, X), None, 1.0)
    assert trace.iterations_to_threshold == 0
    assert trace.iterations == 0


def test_divergence_reported():
    st_, X, y = _net()
    K = empirical_ntk(st_, X)
    eta = 50 * max_stable_lr(np.linalg.eigvalsh(K))
    with pytest.raises(DivergenceError) as info:
        pgd_train(st_, X, y, None, eta, max_iter=500)
    assert info.value.iteration > 0
    _, trace = pgd_train(st_, X, y, None, eta, max_iter=500, raise_on_divergence=False)
    assert trace.diverged


def test_stability_bracket():
    st_, X, y = _net(width=1024, n=8)
    d = eigh(empirical_ntk(st_, X))
    S = build_preconditioner(d, FlattenTopK(3), 3)
    bound = max_stable_lr(ks_spectrum(d, FlattenTopK(3), 3))
    _, ok = pgd_train(st_, X, y, S, 0.9 * bound, epsilon=1e-3, max_iter=3000)
    assert ok.iterations_to_threshold is not None
    _, bad = pgd_train(st_, X, y, S, 2.5 * bound, max_iter=3000, raise_on_divergence=False)
    assert bad.diverged


def test_loss_grad_is_pgd_direction_and_fd():
    st_, X, y = _net(n=8)
    d = eigh(empirical_ntk(st_, X))
    S = build_preconditioner(d, Power(0.5), 3)
    g = preconditioned_loss_grad(st_, X, y, S)
    r = forward(st_, X) - y
    assert np.allclose(g, vjp(st_, X, S.apply(r)), atol=1e-10)
    w = st_.flat()
    idx = np.random.default_rng(0).choice(w.size, 20, replace=False)
    for i in idx:
        e = np.zeros_like(w)
        e[i] = 1e-5
        fd = (preconditioned_loss(MlpState.from_flat(st_.config, w + e), X, y, S)
              - preconditioned_loss(MlpState.from_flat(st_.config, w - e), X, y, S)) / 2e-5
        assert abs(fd - g[i]) <= 1e-4 * max(1.0, abs(g[i]))
    assert np.allclose(preconditioned_loss_grad(st_, X, forward(st_, X), S), 0)


def test_iterations_to_learn():
    lam = np.array([1.0, 0.25])
    eta = 0.5
    tr = TrainTrace()
    for t in range(200):
        tr.projections.append(np.array([(1 - eta * lam[0]) ** t, (1 - eta * lam[1]) ** t]))
        tr.residual_norms.append(0.0)
    assert iterations_to_learn(tr, 0, 1.0) == 0
    for i in range(2):
        expect = np.ceil(-np.log(0.01) / (eta * lam[i]))
        got = iterations_to_learn(tr, i, 0.01)
        assert abs(got - expect) <= expect * 0.6 + 1
    with pytest.raises(InputError):
        iterations_to_learn(tr, 5, 0.1)


def test_flattened_directions_learned_together(rng):
    K, d = _dec(rng, 20)
    k = 5
    spec = ks_spectrum(d, FlattenTopK(k), k)
    eta = 0.9 * max_stable_lr(spec)
    tr = TrainTrace()
    p0 = np.ones(20)
    for t in range(400):
        tr.projections.append(np.abs(1 - eta * spec) ** t * p0)
        tr.residual_norms.append(0.0)
    counts = [iterations_to_learn(tr, i, 1e-3) for i in range(k + 1)]
    assert max(counts) <= 2 * min(counts)


def test_trace_csv(tmp_path):
    st_, X, y = _net()
    _, trace = pgd_train(st_, X, y, None, 0.05, max_iter=5, epsilon=0.0, track=np.eye(8)[:, :2])
    trace.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iter,residual_norm,proj_1,proj_2"
    assert len(lines) == 7
    assert (tmp_path / "t.json").exists()


def test_minibatch_mode_runs():
    st_, X, y = _net(width=256)
    K = empirical_ntk(st_, X)
    eta = 0.5 * max_stable_lr(np.linalg.eigvalsh(K))
    _, tr = pgd_train(st_, X, y, None, eta, epsilon=0.0, max_iter=200, batch_size=4)
    assert tr.residual_norms[-1] < tr.residual_norms[0]


def test_refresh_called():
    st_, X, y = _net()
    calls = []

    def refresh(Kt):
        calls.append(Kt.shape)
        return Preconditioner.identity(8)

    pgd_train(st_, X, y, None, 0.1, epsilon=0.0, max_iter=25, refresh_every=10, refresh=refresh)
    assert calls == [(8, 8), (8, 8)]
