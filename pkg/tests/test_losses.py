"""Objective contracts and end-to-end gradient checks through the full
model stack in double precision."""

import numpy as np
import pytest

from fewdiff.diffusion import build_schedule, forward_diffuse, sample_mask
from fewdiff.losses import flc_loss, similarity_probs, umd_loss
from fewdiff.models import Model, ModelConfig, tokenize_patch
from fewdiff.numerics import Tensor, make_rng
from fewdiff.numerics import tensor as T


# --- umd_loss --------------------------------------------------------------

def test_umd_zero_at_equality():
    x = Tensor(np.arange(12.0).reshape(1, 6, 2))
    assert float(umd_loss(x, x.data).data) == 0.0


def test_umd_constant_offset():
    x0 = np.zeros((1, 4, 3))
    x = Tensor(x0 + 0.25)
    assert abs(float(umd_loss(x, x0).data) - 0.0625) < 1e-15


def test_umd_matches_loop_oracle():
    rng = make_rng(0, "data")
    a = rng.standard_normal((1, 3, 2))
    b = rng.standard_normal((1, 3, 2))
    got = float(umd_loss(Tensor(a), b).data)
    acc = 0.0
    for i in range(3):
        for j in range(2):
            acc += (a[0, i, j] - b[0, i, j]) ** 2
    assert abs(got - acc / 6.0) < 1e-12


def test_umd_nonnegative_and_identifies_equality():
    rng = make_rng(1, "data")
    for _ in range(20):
        a = rng.standard_normal((2, 5, 3))
        b = a + rng.standard_normal((2, 5, 3)) * rng.uniform(0, 0.1)
        v = float(umd_loss(Tensor(a), b).data)
        assert v >= 0.0
        assert (v == 0.0) == np.array_equal(a, b)


def test_umd_masked_only_positions():
    rng = make_rng(2, "data")
    a = rng.standard_normal((2, 6, 2))
    b = a.copy()
    b[:, :3] += 100.0     # corrupt only positions 0..2
    masked = np.broadcast_to(np.array([3, 4, 5]), (2, 3))
    assert float(umd_loss(Tensor(b), a, positions=masked).data) == 0.0
    assert float(umd_loss(Tensor(b), a).data) > 0.0


def test_umd_shape_mismatch():
    with pytest.raises(ValueError):
        umd_loss(Tensor(np.zeros((1, 3, 2))), np.zeros((1, 2, 3)))


def test_umd_gradient_vs_fd():
    rng = make_rng(3, "data")
    from fewdiff.numerics import check_gradients
    x0 = rng.standard_normal((2, 4, 3))
    err = check_gradients(lambda x: umd_loss(x, x0), [rng.standard_normal((2, 4, 3))])
    assert err <= 1e-4


# --- similarity_probs ------------------------------------------------------

def test_probs_single_candidate():
    z = np.array([0.0, 1.0])
    Z = np.array([[0.0, 1.0]])
    assert np.allclose(similarity_probs(z, Z, 1.0), [1.0])


def test_probs_closed_form_two():
    z = np.array([1.0, 0.0])
    Z = np.array([[1.0, 0.0], [0.0, 1.0]])    # dots = [1, 0]
    p = similarity_probs(z, Z, 1.0)
    e = np.e
    assert np.allclose(p, [e / (e + 1), 1 / (e + 1)], atol=1e-10)
    assert abs(p[0] - 0.7311) < 1e-4


def test_probs_high_temperature_uniform():
    rng = make_rng(4, "data")
    z = rng.standard_normal(8)
    z /= np.linalg.norm(z)
    Z = rng.standard_normal((5, 8))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    p = similarity_probs(z, Z, 1e3)
    assert np.max(np.abs(p - 0.2)) <= 1e-3


def test_probs_rows_sum_and_shift_invariance():
    rng = make_rng(5, "data")
    z = rng.standard_normal((7, 6))
    Z = rng.standard_normal((4, 6))
    p = similarity_probs(z, Z, 0.3)
    assert np.max(np.abs(p.sum(axis=-1) - 1)) <= 1e-6
    # adding a constant column direction shifts all logits equally
    p2 = similarity_probs(z, Z + 0, 0.3)
    assert np.allclose(p, p2)


def test_probs_requires_positive_tau():
    with pytest.raises(ValueError):
        similarity_probs(np.ones(2), np.ones((2, 2)), 0.0)
    with pytest.raises(ValueError):
        similarity_probs(np.ones(2), np.ones((2, 2)), -1.0)


# --- flc_loss --------------------------------------------------------------

def unit_rows(rng, n, e):
    z = rng.standard_normal((n, e))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def one() :
    return Tensor(np.array([1.0]))


def test_flc_single_pair_zero():
    rng = make_rng(6, "data")
    z = unit_rows(rng, 1, 4)
    t = unit_rows(rng, 1, 4)
    assert float(flc_loss({"a": Tensor(z)}, Tensor(t), one()).data) == 0.0


def test_flc_orthonormal_closed_form():
    eye = np.eye(2)
    loss = flc_loss({"a": Tensor(eye)}, Tensor(eye.copy()), one())
    assert abs(float(loss.data) - np.log(1 + np.exp(-1))) <= 1e-6


def test_flc_swap_symmetry():
    rng = make_rng(7, "data")
    zi = unit_rows(rng, 4, 6)
    zt = unit_rows(rng, 4, 6)
    a = float(flc_loss({"a": Tensor(zi)}, Tensor(zt), one()).data)
    b = float(flc_loss({"a": Tensor(zt)}, Tensor(zi), one()).data)
    assert abs(a - b) <= 1e-12


def test_flc_permutation_invariance():
    rng = make_rng(8, "data")
    zi = unit_rows(rng, 5, 6)
    zt = unit_rows(rng, 5, 6)
    perm = rng.permutation(5)
    a = float(flc_loss({"a": Tensor(zi)}, Tensor(zt), one()).data)
    b = float(flc_loss({"a": Tensor(zi[perm])}, Tensor(zt[perm]), one()).data)
    assert abs(a - b) <= 1e-12


def test_flc_nonnegative_random():
    rng = make_rng(9, "data")
    for _ in range(20):
        zi = unit_rows(rng, 3, 5)
        zt = unit_rows(rng, 3, 5)
        scale = Tensor(np.array([float(rng.uniform(0.5, 20))]))
        assert float(flc_loss({"a": Tensor(zi), "b": Tensor(zi[::-1].copy())},
                              Tensor(zt), scale).data) >= 0.0


def test_flc_rejects_duplicate_texts():
    z = np.eye(3)
    t = np.array([z[0], z[0], z[2]])
    with pytest.raises(ValueError, match="duplicate"):
        flc_loss({"a": Tensor(z)}, Tensor(t), one())


def test_flc_rejects_non_unit_rows():
    z = np.eye(2)
    with pytest.raises(ValueError, match="unit-norm"):
        flc_loss({"a": Tensor(z * 2.0)}, Tensor(z), one())
    with pytest.raises(ValueError, match="unit-norm"):
        flc_loss({"a": Tensor(z)}, Tensor(z * 0.5), one())


def test_flc_fused_mode():
    rng = make_rng(10, "data")
    za = unit_rows(rng, 3, 4)
    zb = unit_rows(rng, 3, 4)
    zt = unit_rows(rng, 3, 4)
    fused = flc_loss({"a": Tensor(za), "b": Tensor(zb)}, Tensor(zt), one(),
                     fusion="fused")
    # oracle: normalize the mean, then the standard two-way CE
    m = (za + zb) / 2
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    ref = flc_loss({"f": Tensor(m)}, Tensor(zt), one())
    assert abs(float(fused.data) - float(ref.data)) <= 1e-12
    with pytest.raises(ValueError):
        flc_loss({"a": Tensor(za)}, Tensor(zt), one(), fusion="nope")


def test_flc_monotone_in_tau_on_dominant_diagonal():
    eye = np.eye(2)
    taus = np.linspace(1.0, 0.05, 12)
    vals = [float(flc_loss({"a": Tensor(eye)}, Tensor(eye.copy()),
                           Tensor(np.array([1.0 / t]))).data)
            for t in taus]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_flc_gradients_vs_fd():
    from fewdiff.numerics import check_gradients
    rng = make_rng(11, "data")

    def build(zi_raw, zt_raw, s):
        return flc_loss(
            {"a": T.l2_normalize(zi_raw)}, T.l2_normalize(zt_raw), T.exp(s))

    err = check_gradients(
        build,
        [rng.standard_normal((3, 5)), rng.standard_normal((3, 5)),
         np.array([0.5])])
    assert err <= 1e-4


# --- end-to-end gradient checks through the model --------------------------

def e2e_config():
    return ModelConfig(channels={"a": 2, "b": 1}, patch_size=3, D=4, heads=2,
                       layers=1, mlp_ratio=2, D_dec=4, layers_dec=1,
                       D_txt=4, heads_txt=2, layers_txt=1, E=3,
                       context_length=6, vocab_size=9, T=5, dtype="float64")


def fd_over_param(loss_fn, tensor, h):
    flat = tensor.data.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn()
        flat[i] = orig - h
        fm = loss_fn()
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(tensor.shape)


def richardson_gradient(loss_fn, tensor, h):
    # cancels the O(h^2) truncation term of the central difference, so a
    # step large enough to stay above roundoff still converges
    gh = fd_over_param(loss_fn, tensor, h)
    gh2 = fd_over_param(loss_fn, tensor, h / 2)
    return (4.0 * gh2 - gh) / 3.0


def assert_grads_match(model, loss_builder, param_names, h=1e-3):
    params = dict(model.parameters())
    model.zero_grad()
    loss_builder().backward()
    for name in param_names:
        t = params[name]
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = richardson_gradient(lambda: float(loss_builder().data), t, h)
        # one relative error per parameter tensor; element-wise quotients
        # are meaningless for entries sitting at the FD noise floor
        num = np.linalg.norm(analytic - numeric)
        den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        rel = num / den
        assert rel <= 1e-4, f"{name}: rel err {rel:.2e}"


def test_umd_end_to_end_gradients():
    cfg = e2e_config()
    model = Model(cfg, seed=20)
    sched = build_schedule(cfg.T, 0.01, 0.3)
    rng = make_rng(21, "data")
    B = 2
    patches = {m: rng.standard_normal((B, 3, 3, c))
               for m, c in cfg.channels.items()}
    plan = sample_mask(cfg.P, 0.5, make_rng(22, "mask"))
    t_vec = np.array([2, 5])
    eps = {m: rng.standard_normal((B, len(plan.visible), c))
           for m, c in cfg.channels.items()}

    def loss_builder():
        total = None
        for m in sorted(cfg.channels):
            tokens = tokenize_patch(patches[m], cfg.channels[m])
            x0v = tokens[:, plan.visible]
            xt = np.stack([
                forward_diffuse(x0v[i], int(t_vec[i]), eps[m][i], sched)
                for i in range(B)])
            vis = np.broadcast_to(plan.visible, (B, len(plan.visible)))
            msk = np.broadcast_to(plan.masked, (B, len(plan.masked)))
            _, tok_feats = model.encoder.encode(xt, vis, t_vec, m)
            x_hat = model.decoder(m)(tok_feats, vis, msk)
            l = umd_loss(x_hat, tokens)
            total = l if total is None else T.add(total, l)
        return total

    assert_grads_match(model, loss_builder, [
        "encoder.embed_a.w", "encoder.embed_b.w", "encoder.cls",
        "encoder.pos", "encoder.t_proj.w",
        "encoder.trunk.block0.attn.wq.w", "encoder.trunk.block0.ln1.gamma",
        "encoder.trunk.block0.fc1.w", "encoder.trunk.ln_f.gamma",
        "decoder_a.proj.w", "decoder_a.mask_token", "decoder_a.pos",
        "decoder_a.head.w", "decoder_b.mask_token",
    ])


def test_flc_end_to_end_gradients():
    cfg = e2e_config()
    model = Model(cfg, seed=23)
    rng = make_rng(24, "data")
    N = 3
    patches = {m: rng.standard_normal((N, 3, 3, c))
               for m, c in cfg.channels.items()}
    ids = np.array([
        [1, 4, 2, 0, 0, 0],
        [1, 5, 2, 0, 0, 0],
        [1, 6, 2, 0, 0, 0],
    ])

    def loss_builder():
        z_imgs = {m: model.embed_image(patches[m], m) for m in sorted(cfg.channels)}
        z_txt = model.text(ids)
        return flc_loss(z_imgs, z_txt, model.temperature.scale())

    assert_grads_match(model, loss_builder, [
        "encoder.embed_a.w", "encoder.cls",
        "encoder.trunk.block0.attn.wv.w", "head.fc.w", "head.fc.b",
        "text.tok", "text.pos", "text.trunk.block0.attn.wq.w",
        "text.proj.w", "temperature.log_scale",
    ])
