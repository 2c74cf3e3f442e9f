import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedssl.engine import Tape, Tensor, backward, ops
from fedssl.errors import ConfigError, ContractError, DegenerateBatchError, DimensionError
from fedssl.losses import (FeatureMemory, SslConfig, barlow_loss, info_nce, simsiam_loss, tico_loss,
                           vicreg_loss)

# ---------------------------------------------------------------------------
# brute-force oracles: plain python loops over rows and columns


def _norm(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v] if n > 0 else [0.0] * len(v)


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def info_nce_oracle(z1, z2, tau):
    rows = [_norm(r) for r in list(z1) + list(z2)]
    n2 = len(rows)
    n = n2 // 2
    total = 0.0
    for i in range(n2):
        pos = (i + n) % n2
        denom = sum(math.exp(_dot(rows[i], rows[j]) / tau) for j in range(n2) if j != i)
        total += -math.log(math.exp(_dot(rows[i], rows[pos]) / tau) / denom)
    return total / n2


def simsiam_oracle(p1, p2, z1, z2):
    n = len(p1)
    a = sum(_dot(_norm(p1[i]), _norm(z2[i])) for i in range(n)) / n
    b = sum(_dot(_norm(p2[i]), _norm(z1[i])) for i in range(n)) / n
    return -0.5 * a - 0.5 * b


def _standardized_columns(z, eps):
    n, d = len(z), len(z[0])
    cols = []
    for j in range(d):
        col = [z[i][j] for i in range(n)]
        m = sum(col) / n
        v = sum((x - m) ** 2 for x in col) / n
        cols.append([(x - m) / math.sqrt(v + eps) for x in col])
    return cols


def barlow_oracle(z1, z2, lambd):
    n, d = len(z1), len(z1[0])
    a, b = _standardized_columns(z1, 1e-9), _standardized_columns(z2, 1e-9)
    loss = 0.0
    for i in range(d):
        for j in range(d):
            c = sum(a[i][k] * b[j][k] for k in range(n)) / n
            loss += (1 - c) ** 2 if i == j else lambd * c * c
    return loss


def vicreg_oracle(z1, z2, inv_w, var_w, cov_w, gamma):
    n, d = len(z1), len(z1[0])
    inv = sum((z1[i][j] - z2[i][j]) ** 2 for i in range(n) for j in range(d)) / (n * d)

    def var_cov(z):
        means = [sum(z[i][j] for i in range(n)) / n for j in range(d)]
        var = 0.0
        for j in range(d):
            s = math.sqrt(sum((z[i][j] - means[j]) ** 2 for i in range(n)) / (n - 1) + 1e-4)
            var += max(0.0, gamma - s)
        cov = 0.0
        for a in range(d):
            for b in range(d):
                if a != b:
                    c = sum((z[i][a] - means[a]) * (z[i][b] - means[b]) for i in range(n)) / (n - 1)
                    cov += c * c
        return var / d, cov / d

    v1, c1 = var_cov(z1)
    v2, c2 = var_cov(z2)
    return inv_w * inv + var_w * (v1 + v2) + cov_w * (c1 + c2)


def tico_oracle(z1, z2, mem, beta, rho):
    n, d = len(z1), len(z1[0])
    upd = [[beta * mem[a][b] + (1 - beta) * sum(z1[i][a] * z1[i][b] for i in range(n)) / n
            for b in range(d)] for a in range(d)]
    align = -sum(_dot(z1[i], z2[i]) for i in range(n)) / n
    pen = 0.0
    for i in range(n):
        pen += sum(z1[i][a] * upd[a][b] * z1[i][b] for a in range(d) for b in range(d))
    return align + rho * pen / n, upd


def _unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# oracle agreement, 200 random instances per loss


def test_info_nce_oracle_200():
    rng = np.random.default_rng(10)
    for _ in range(200):
        n, d = rng.integers(2, 6), rng.integers(2, 6)
        z1, z2 = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        tau = rng.uniform(0.1, 1.0)
        assert abs(info_nce(Tensor(z1), Tensor(z2), tau).item() - info_nce_oracle(z1, z2, tau)) < 1e-10


def test_simsiam_oracle_200():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n, d = rng.integers(1, 6), rng.integers(2, 6)
        p1, p2, z1, z2 = (rng.normal(size=(n, d)) for _ in range(4))
        got = simsiam_loss(Tensor(p1), Tensor(p2), Tensor(z1), Tensor(z2)).item()
        assert abs(got - simsiam_oracle(p1, p2, z1, z2)) < 1e-10


def test_barlow_oracle_200():
    rng = np.random.default_rng(12)
    for _ in range(200):
        n, d = rng.integers(2, 9), rng.integers(1, 5)
        z1, z2 = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        lambd = rng.uniform(0, 0.1)
        assert abs(barlow_loss(Tensor(z1), Tensor(z2), lambd).item() - barlow_oracle(z1, z2, lambd)) < 1e-10


def test_vicreg_oracle_200():
    rng = np.random.default_rng(13)
    for _ in range(200):
        n, d = rng.integers(2, 8), rng.integers(1, 5)
        z1, z2 = rng.normal(size=(n, d)) * rng.uniform(0.1, 2), rng.normal(size=(n, d))
        coefs = (25.0, 25.0, 1.0, rng.uniform(0.5, 2.0))
        got = vicreg_loss(Tensor(z1), Tensor(z2), *coefs).item()
        assert abs(got - vicreg_oracle(z1, z2, *coefs)) < 1e-10


def test_tico_oracle_200():
    rng = np.random.default_rng(14)
    for _ in range(200):
        n, d = rng.integers(1, 6), rng.integers(2, 5)
        a = rng.normal(size=(d, d))
        mem = a @ a.T / d
        z1, z2 = _unit_rows(rng, n, d), _unit_rows(rng, n, d)
        beta, rho = rng.uniform(0, 1), rng.uniform(0, 10)
        loss, new = tico_loss(Tensor(z1), Tensor(z2), FeatureMemory(mem), beta, rho)
        want, upd = tico_oracle(z1, z2, mem, beta, rho)
        assert abs(loss.item() - want) < 1e-10
        np.testing.assert_allclose(new.matrix, upd, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# hand examples


def test_info_nce_identical_embeddings_is_ln3():
    z = Tensor(np.ones((2, 4)))
    assert info_nce(z, z, 0.5).item() == pytest.approx(math.log(3), abs=1e-12)


def test_default_temperature():
    assert SslConfig("simclr").temperature == 0.5


def test_info_nce_stable_for_small_tau():
    rng = np.random.default_rng(0)
    z1, z2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert abs(info_nce(Tensor(z1), Tensor(z2), 0.01).item() - info_nce_oracle(z1, z2, 0.01)) < 1e-8


def test_simsiam_aligned_and_orthogonal():
    p = np.array([[1.0, 2.0], [-3.0, 0.5]])
    assert simsiam_loss(Tensor(p), Tensor(p), Tensor(2 * p), Tensor(3 * p)).item() == pytest.approx(-1.0)
    q = np.array([[-2.0, 1.0], [-0.5, -3.0]])
    assert simsiam_loss(Tensor(p), Tensor(p), Tensor(q), Tensor(q)).item() == pytest.approx(0.0, abs=1e-15)


def test_simsiam_gradient_only_through_predictions():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    v = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 3)))
    with Tape():
        z = ops.matmul(x, v)
        p = ops.matmul(x, w)
        backward(simsiam_loss(p, p, z.detach(), z.detach()))
    assert w.grad is not None and np.any(w.grad != 0)
    # the target branch is cut: v never receives a gradient
    assert v.grad is None


def test_simsiam_rejects_live_targets():
    rng = np.random.default_rng(2)
    z = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    with Tape():
        live = ops.scale(z, 1.0)
        with pytest.raises(ContractError):
            simsiam_loss(live, live, live, live)


def test_barlow_whitened_is_zero():
    # columns orthonormal after standardization: C = I exactly
    z = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    assert barlow_loss(Tensor(z), Tensor(z)).item() == pytest.approx(0.0, abs=1e-15)


def test_barlow_negated_4x2():
    z = np.array([[1.0, 2.0], [-1.0, 0.5], [2.0, -1.0], [-2.0, -1.5]])
    got = barlow_loss(Tensor(z), Tensor(-z)).item()
    assert got == pytest.approx(barlow_oracle(z, -z, 5e-3), abs=1e-10)
    # each diagonal entry is -1 (up to the 1e-9 guard): on-diagonal part is 2 * 2 = 4
    assert got >= 4.0 - 1e-6


def test_vicreg_zero_case():
    z = np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 2.0], [0.0, -2.0]])
    assert vicreg_loss(Tensor(z), Tensor(z)).item() == pytest.approx(0.0, abs=1e-15)


def test_vicreg_constant_rows():
    z = np.full((4, 3), 0.7)
    gamma = 1.0
    # hinge on sqrt(0 + 1e-4) = 0.01 per dim and per view
    want = 25.0 * 2 * (gamma - 0.01)
    assert vicreg_loss(Tensor(z), Tensor(z)).item() == pytest.approx(want, abs=1e-12)


def test_tico_pure_alignment():
    z = _unit_rows(np.random.default_rng(3), 5, 4)
    loss, _ = tico_loss(Tensor(z), Tensor(z), FeatureMemory.zeros(4), 0.9, 0.0)
    assert loss.item() == pytest.approx(-1.0, abs=1e-12)


def test_tico_beta_one_keeps_memory():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(3, 3))
    mem = a @ a.T
    z = _unit_rows(rng, 4, 3)
    _, new = tico_loss(Tensor(z), Tensor(z), FeatureMemory(mem), 1.0, 8.0)
    assert np.array_equal(new.matrix, mem)


def test_tico_two_batches_unroll():
    rng = np.random.default_rng(5)
    d, beta, rho = 3, 0.9, 8.0
    mem = FeatureMemory.zeros(d)
    hand = [[0.0] * d for _ in range(d)]
    for _ in range(2):
        z1, z2 = _unit_rows(rng, 4, d), _unit_rows(rng, 4, d)
        loss, mem = tico_loss(Tensor(z1), Tensor(z2), mem, beta, rho)
        want, hand = tico_oracle(z1, z2, hand, beta, rho)
        assert abs(loss.item() - want) < 1e-10
    np.testing.assert_allclose(mem.matrix, hand, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 5), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_tico_memory_stays_psd(n, d, beta, seed):
    rng = np.random.default_rng(seed)
    mem = FeatureMemory.zeros(d)
    for _ in range(3):
        z = _unit_rows(rng, n, d)
        _, mem = tico_loss(Tensor(z), Tensor(z), mem, beta, 8.0)
        assert np.allclose(mem.matrix, mem.matrix.T, atol=1e-12)
        assert np.linalg.eigvalsh(mem.matrix).min() >= -1e-9


def test_tico_rejects_unnormalized_rows():
    with pytest.raises(ContractError):
        tico_loss(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))), FeatureMemory.zeros(2))


# ---------------------------------------------------------------------------
# errors and config


def test_shape_and_batch_errors():
    with pytest.raises(DimensionError):
        info_nce(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 4))))
    with pytest.raises(DegenerateBatchError):
        barlow_loss(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))))
    with pytest.raises(DegenerateBatchError):
        vicreg_loss(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))))


def test_ssl_config_validation():
    with pytest.raises(ConfigError):
        SslConfig("byol")
    with pytest.raises(ConfigError):
        SslConfig("simclr", temperature=0.0)
    with pytest.raises(ConfigError):
        SslConfig("vicreg", vicreg_gamma=0.0)
    with pytest.raises(ConfigError):
        SslConfig("tico", tico_beta=1.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(2, 8)), int(rng.integers(2, 6))
    z1, z2, p1, p2 = (rng.normal(size=(n, d)) for _ in range(4))
    u1, u2 = _unit_rows(rng, n, d), _unit_rows(rng, n, d)
    a = rng.normal(size=(d, d))
    mem = FeatureMemory(a @ a.T / d)
    perm = rng.permutation(n)

    def values(idx):
        t = lambda x: Tensor(x[idx])
        return [
            info_nce(t(z1), t(z2)).item(),
            simsiam_loss(t(p1), t(p2), t(z1), t(z2)).item(),
            barlow_loss(t(z1), t(z2)).item(),
            vicreg_loss(t(z1), t(z2)).item(),
            tico_loss(t(u1), t(u2), mem, 0.9, 8.0)[0].item(),
        ]

    np.testing.assert_allclose(values(perm), values(np.arange(n)), rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 0.5))
def test_minimizers_are_strict(seed, size):
    z = np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 2.0], [0.0, -2.0]])
    w = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    noise = np.random.default_rng(seed).normal(size=z.shape)
    noise *= size / np.linalg.norm(noise)
    assert vicreg_loss(Tensor(z), Tensor(z + noise)).item() > vicreg_loss(Tensor(z), Tensor(z)).item()
    assert barlow_loss(Tensor(w), Tensor(w + noise)).item() > barlow_loss(Tensor(w), Tensor(w)).item()
