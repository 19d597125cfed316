import math

import numpy as np
import pytest

from codac import autodiff as ad
from codac.autodiff import Tensor
from codac.dmcf import (
    AugmentationSpec,
    DmcfConfig,
    apply_weights,
    augment,
    dmcf_forward,
    init_projection,
    init_weight_head,
    loss_inter,
    loss_intra,
    loss_total,
    pool_and_project,
    sample_intra_indices,
    view_weights,
    weight_from_score,
    zero_weight_head,
)
from codac.encoder import EncoderConfig, init_encoder
from codac.nn import ParamStore


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def inter_oracle(z1, z2, tau):
    """Double loop over the batch, one softmax term at a time."""
    n = len(z1)
    cos = lambda a, b: float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    total = 0.0
    for i in range(n):
        den1 = sum(math.exp(cos(z1[i], z2[j]) / tau) for j in range(n))
        den2 = sum(math.exp(cos(z2[i], z1[j]) / tau) for j in range(n))
        total += math.log(math.exp(cos(z1[i], z2[i]) / tau) / den1)
        total += math.log(math.exp(cos(z2[i], z1[i]) / tau) / den2)
    return -total / (2 * n)


# -- augmentation -------------------------------------------------------------
def test_identity_augmentation():
    x = np.random.default_rng(0).normal(size=(32, 2)).astype(np.float32)
    spec = AugmentationSpec(1.0, 0.0, (1.0, 1.0))
    assert spec.is_identity
    out, off = augment(x, spec, 3)
    assert off == 0 and np.array_equal(out, x)


def test_pure_scaling():
    x = np.random.default_rng(1).normal(size=(32, 2))
    out, _ = augment(x, AugmentationSpec(1.0, 0.0, (2.0, 2.0)), 0)
    np.testing.assert_allclose(out, 2 * x)


def test_crop_length_and_offset_uniform():
    x = np.zeros((128, 1))
    spec = AugmentationSpec(0.5, 0.0, (1.0, 1.0))
    counts = np.zeros(65)
    for seed in range(1000):
        out, off = augment(x, spec, seed)
        assert out.shape == (64, 1)
        counts[off] += 1
    # chi-square against uniform over 65 offsets; 0.01 critical value for 64 dof
    exp = 1000 / 65
    chi2 = float(((counts - exp) ** 2 / exp).sum())
    assert chi2 < 93.2


def test_short_crop_rejected():
    with pytest.raises(ValueError):
        augment(np.zeros((10, 1)), AugmentationSpec(0.5, 0.0, (1.0, 1.0)), 0)


def test_bad_spec_rejected():
    with pytest.raises(ValueError):
        AugmentationSpec(0.0)
    with pytest.raises(ValueError):
        AugmentationSpec(0.5, -1.0)
    with pytest.raises(ValueError):
        AugmentationSpec(0.5, 0.1, (2.0, 1.0))


# -- weight head / weighting --------------------------------------------------
def test_zero_head_gives_half():
    w = weight_from_score(zero_weight_head(), np.array([-5.0, 0.0, 3.0, 100.0]))
    np.testing.assert_array_equal(w.data, 0.5)


def test_pass_through_head_saturates():
    head = zero_weight_head(1)
    head["wh.l1.w"].data[...] = 1.0
    head["wh.l2.w"].data[...] = 1.0
    w = weight_from_score(head, np.array([1e3], np.float32))
    assert abs(float(w.data[0]) - 1.0) < 1e-6


def test_default_head_increasing_in_score():
    head = init_weight_head(np.random.default_rng(0))
    w = weight_from_score(head, np.linspace(-3, 3, 25).astype(np.float32)).data
    assert np.all(np.diff(w) >= 0) and w[-1] > w[0]


@pytest.mark.gradcheck
def test_head_grad(kink_probe):
    names = list(init_weight_head(np.random.default_rng(0)))
    s = np.random.default_rng(1).normal(size=6)

    def make(i):
        rng = np.random.default_rng(100 + i)
        return [t64(rng.normal(size=v.shape)) for v in init_weight_head(rng).values()]

    f = lambda i: lambda *ts: ad.sum_(weight_from_score(dict(zip(names, ts)), t64(s)))
    assert max(kink_probe.clean_instances(make, f)) < 1e-4


def test_apply_weights_examples():
    h = t64(np.random.default_rng(0).normal(size=(4, 3)))
    np.testing.assert_array_equal(apply_weights(h, np.ones(4)).data, h.data)
    np.testing.assert_array_equal(apply_weights(h, np.zeros(4)).data, 0)
    assert apply_weights(t64([[2.0, 4.0]]), [0.5]).data.tolist() == [[1.0, 2.0]]
    with pytest.raises(ValueError):
        apply_weights(h, np.ones(3))


def test_pool_and_project_examples():
    c = np.array([1.0, -2.0, 0.5, 3.0])
    proj = init_projection(np.random.default_rng(0), 4, 3)
    pooled, _ = pool_and_project(t64(np.tile(c, (5, 1))), proj)
    np.testing.assert_allclose(pooled.data, c)
    zero = ParamStore({k: np.zeros(v.shape) for k, v in proj.items()})
    _, z = pool_and_project(t64(np.tile(c, (5, 1))), zero)
    np.testing.assert_array_equal(z.data, 0)


@pytest.mark.gradcheck
def test_weight_to_projection_chain_grad(kink_probe):
    rng0 = np.random.default_rng(2)
    h = rng0.normal(size=(6, 3))
    s = rng0.normal(size=6)
    names = list(init_weight_head(rng0)) + list(init_projection(rng0, 3, 2))

    def make(i):
        rng = np.random.default_rng(200 + i)
        return [t64(v.data) for v in init_weight_head(rng).values()] + [
            t64(v.data) for v in init_projection(rng, 3, 2).values()
        ]

    def f(i):
        def loss(*ts):
            p = dict(zip(names, ts))
            w = weight_from_score(p, t64(s))
            _, z = pool_and_project(apply_weights(t64(h), w), p)
            return ad.sum_(ad.mul(z, z))

        return loss

    assert max(kink_probe.clean_instances(make, f)) < 1e-4


def test_weight_alignment_by_offset():
    scores = np.zeros((1, 32))
    scores[0, 20] = 10.0  # delta anomaly
    head = init_weight_head(np.random.default_rng(0))
    w = view_weights(head, scores, np.array([12]), 16, "dynamic", np.float32).data[0]
    assert int(np.argmax(w)) == 8
    assert view_weights(head, scores, np.array([0]), 16, "static", np.float32).data.tolist() == [[0.5] * 16]
    assert np.all(view_weights(head, scores, np.array([0]), 16, "none", np.float32).data == 1)


# -- inter-view loss ----------------------------------------------------------
@pytest.mark.oracle
def test_inter_matches_double_loop_oracle():
    rng = np.random.default_rng(3)
    for n, _ in ((n, k) for n in range(1, 9) for k in range(100)):
        d = int(rng.integers(2, 6))
        tau = float(rng.uniform(0.1, 1.0))
        z1, z2 = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        got = float(loss_inter(t64(z1), t64(z2), tau).data)
        assert abs(got - inter_oracle(z1, z2, tau)) < 1e-6


def test_inter_single_row_is_zero():
    assert float(loss_inter(t64([[1.0, 2.0]]), t64([[-3.0, 1.0]]), 0.2).data) == 0.0


@pytest.mark.oracle
def test_inter_orthogonal_closed_form():
    # sample 1 has both views at e1, sample 2 both at e2
    e1, e2 = [1.0, 0.0], [0.0, 1.0]
    got = float(loss_inter(t64([e1, e2]), t64([e1, e2]), 1.0).data)
    assert abs(got - inter_oracle(np.array([e1, e2]), np.array([e1, e2]), 1.0)) < 1e-12
    assert abs(got - math.log(1 + math.exp(-1))) < 1e-6
    assert abs(got - 0.31326) < 1e-5


def test_inter_zero_norm_errors():
    with pytest.raises(ZeroDivisionError):
        loss_inter(t64([[0.0, 0.0], [1.0, 0.0]]), t64([[1.0, 0.0], [0.0, 1.0]]))


def test_inter_non_increasing_in_positive_similarity():
    rng = np.random.default_rng(4)
    for _ in range(20):
        z1, z2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        base = float(loss_inter(t64(z1), t64(z2), 0.5).data)
        z2b = z2.copy()
        z2b[0] = z2[0] + 0.5 * np.linalg.norm(z2[0]) * z1[0] / np.linalg.norm(z1[0])
        # moving z2[0] towards z1[0] raises their cosine; other terms change too,
        # so only the loss for the pair-0 rows is compared
        lo = lambda a, b: -math.log(
            math.exp(cos(a[0], b[0]) / 0.5) / sum(math.exp(cos(a[0], b[j]) / 0.5) for j in range(4))
        )
        cos = lambda a, b: float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))
        assert cos(z1[0], z2b[0]) > cos(z1[0], z2[0])
        assert lo(z1, z2b) <= lo(z1, z2) + 1e-12
        assert base >= 0


@pytest.mark.gradcheck
def test_inter_grad():
    rng = np.random.default_rng(5)
    for _ in range(10):
        z1, z2 = t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(3, 4)))
        assert ad.grad_check(lambda a, b: loss_inter(a, b, 0.5), [z1, z2])


# -- intra-view loss ----------------------------------------------------------
def test_intra_identical_rows():
    h = t64(np.tile([1.0, 2.0, -1.0], (40, 1)))
    assert abs(float(loss_intra(h, 0.2, 4, 16, 0).data) - math.log(9)) < 1e-9


def test_intra_colinear_positive_orthogonal_negatives():
    T = 36
    anc, pos, _ = sample_intra_indices(T, 4, 1, 8, np.random.default_rng(11))
    h = np.zeros((T, 2))
    h[:, 1] = 1.0
    h[anc[0]] = h[pos[0]] = [1.0, 0.0]
    got = float(loss_intra(t64(h), 1.0, 4, 1, np.random.default_rng(11)).data)
    # positive logit 1, eight negative logits 0
    assert abs(got - math.log(1 + 8 * math.exp(-1.0))) < 1e-12
    assert abs(got - 1.37195) < 1e-5

def test_intra_index_constraints():
    a, p, n = sample_intra_indices(64, 4, 200, 8, np.random.default_rng(1))
    assert np.all((np.abs(a - p) >= 1) & (np.abs(a - p) <= 4))
    assert np.all(np.abs(n - a[:, None]) > 8)


def test_intra_deterministic_and_short_rejected():
    h = t64(np.random.default_rng(2).normal(size=(30, 4)))
    assert float(loss_intra(h, seed=5).data) == float(loss_intra(h, seed=5).data)
    with pytest.raises(ValueError):
        loss_intra(t64(np.ones((9, 2))), delta=4)


@pytest.mark.gradcheck
def test_intra_grad():
    rng = np.random.default_rng(3)
    for i in range(10):
        h = t64(rng.normal(size=(20, 3)))
        assert ad.grad_check(lambda h: loss_intra(h, 0.5, 3, 4, i), h)


# -- total loss ---------------------------------------------------------------
def test_total_examples():
    assert loss_total(0.3, 2.0, 0.0) == 0.3
    assert abs(loss_total(0.3, 2.0, 0.5) - 1.3) < 1e-12
    a, b = loss_total(0.3, 2.0, 0.25), loss_total(0.3, 2.0, 0.75)
    assert abs((a + b) / 2 - loss_total(0.3, 2.0, 0.5)) < 1e-12


def tiny_setup(seed=0, weighting="dynamic", d=4):
    rng = np.random.default_rng(seed)
    ecfg = EncoderConfig(d_in=2, d_hidden=d, conv_layers=[(3, 1, d)], n_attn_blocks=1, n_heads=2, d_ff=d, dropout_rate=0.0)
    cfg = DmcfConfig(d_project=4, tau=0.5, lam=0.5, delta=2, n_pairs=3, n_negatives=2, weighting=weighting,
                     aug=AugmentationSpec(0.8, 0.05, (0.8, 1.25)))
    ps = ParamStore()
    for store in (init_encoder(ecfg, rng), init_weight_head(rng), init_projection(rng, d, 4)):
        for k, v in store.items():
            ps.add(k, v.data, dtype=np.float64)
    X = rng.normal(size=(3, 12, 2))
    S = rng.normal(size=(3, 12)) * 2
    return ecfg, cfg, ps, X, S


@pytest.mark.gradcheck
def test_total_loss_grad_through_weight_head(kink_probe):
    ecfg, cfg, ps0, _, _ = tiny_setup(0)
    names = list(ps0)

    def f(i):
        _, _, _, X, S = tiny_setup(i)
        return lambda *ts: dmcf_forward(dict(zip(names, ts)), ecfg, cfg, X, S, np.random.default_rng(i), train=False).loss

    def make(i):
        ps = tiny_setup(i)[2]
        ts = [ps[n] for n in names]
        try:
            f(i)(*ts)
        except ZeroDivisionError:
            return None  # a projection collapsed to the zero vector; cosine is undefined
        return ts

    assert max(kink_probe.clean_instances(make, f)) < 1e-4


def test_weight_head_receives_gradient():
    ecfg, cfg, ps, X, S = tiny_setup(3)
    vb = dmcf_forward(ps, ecfg, cfg, X, S, np.random.default_rng(0))
    ad.backward(vb.loss)
    assert np.abs(ps["wh.l1.w"].grad).sum() > 0
    assert np.abs(ps["wh.l2.b"].grad).sum() > 0


def test_static_mode_leaves_head_out_of_graph():
    ecfg, cfg, ps, X, S = tiny_setup(4, "static")
    vb = dmcf_forward(ps, ecfg, cfg, X, S, np.random.default_rng(0))
    ad.backward(vb.loss)
    assert ps["wh.l1.w"].grad is None
    assert np.all(vb.views[0].w.data == 0.5)
