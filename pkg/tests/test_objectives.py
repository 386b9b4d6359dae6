"""Losses: adversarial pair, gradient penalty, embedding alignment."""

import numpy as np
import pytest

from tridistill import autodiff as ad
from tridistill import objectives as obj
from tridistill import teacher
from tridistill.config import (Config, DecoderConfig, DiscriminatorConfig,
                               GeneratorConfig, RenderConfig, TriPlaneConfig)
from tridistill.networks import init_discriminator

from fd import central_diff_sampled, rel_err

LN2 = 0.6931471805599453


# ---------------------------------------------------------------------------
# score transform


def test_f_at_zero_is_minus_ln2():
    assert obj.gan_f(0.0) == -LN2


def test_f_identity_at_three():
    assert abs(obj.gan_f(3.0) - obj.gan_f(-3.0) - 3.0) < 1e-12


def test_f_identity_over_range():
    t = np.linspace(-30.0, 30.0, 241)
    gap = obj.gan_f(t) - obj.gan_f(-t) - t
    assert np.abs(gap).max() < 1e-9


def test_f_large_positive_tiny_negative():
    v = obj.gan_f(100.0)
    assert -1e-40 < v < 0.0


def test_f_extreme_inputs_stay_finite():
    with np.errstate(over="raise"):
        assert obj.gan_f(1e6) <= 0.0
        assert obj.gan_f(-1e6) == -1e6
    assert np.isfinite(obj.gan_f(np.array([-1e6, -30.0, 0.0, 30.0, 1e6]))).all()


def test_f_monotone_increasing():
    t = np.linspace(-20, 20, 200)
    assert (np.diff(obj.gan_f(t)) > 0).all()


# ---------------------------------------------------------------------------
# adversarial losses


def test_zero_logits_give_two_ln2():
    l_d, l_g = obj.adversarial_losses([0.0, 0.0], [0.0, 0.0])
    assert abs(l_d - 2 * LN2) < 1e-12
    assert abs(l_g - LN2) < 1e-12


def test_literal_variant_at_zero():
    cfg = obj.LossConfig(g_loss_variant="literal")
    _, l_g = obj.adversarial_losses([0.0], [0.0], cfg)
    assert abs(l_g + LN2) < 1e-12


def test_generator_loss_decreases_in_fake_logit():
    # both variants push fake scores up: dL_G/dlogit < 0 everywhere
    for variant in obj.G_LOSS_VARIANTS:
        fake = ad.leaf("fake", (5, 1))
        loss = obj.build_generator_loss(fake, variant)
        vals = np.array([[-20.0], [-1.0], [0.0], [1.0], [20.0]])
        g = ad.gradient(loss, {"fake": vals})["fake"]
        assert (g < 0).all(), variant


def test_discriminator_loss_direction():
    # raising real logits or lowering fake logits lowers L_D
    real, fake = ad.leaf("real", (3, 1)), ad.leaf("fake", (3, 1))
    loss = obj.build_discriminator_loss(real, fake)
    bind = {"real": np.array([[-1.0], [0.0], [2.0]]),
            "fake": np.array([[1.0], [0.0], [-2.0]])}
    grads = ad.gradient(loss, bind)
    assert (grads["real"] < 0).all()
    assert (grads["fake"] > 0).all()


def test_graph_losses_match_eager():
    rng = np.random.default_rng(11)
    r, f = rng.normal(size=(6, 1)), rng.normal(size=(4, 1))
    want_d, want_g = obj.adversarial_losses(r, f)
    got_d = ad.evaluate(obj.build_discriminator_loss(ad.const(r), ad.const(f)))
    got_g = ad.evaluate(obj.build_generator_loss(ad.const(f)))
    assert abs(float(got_d) - want_d) < 1e-12
    assert abs(float(got_g) - want_g) < 1e-12
    want_lit = obj.adversarial_losses(r, f, obj.LossConfig(g_loss_variant="literal"))[1]
    got_lit = ad.evaluate(obj.build_generator_loss(ad.const(f), "literal"))
    assert abs(float(got_lit) - want_lit) < 1e-12


def test_empty_logits_rejected():
    with pytest.raises(ValueError):
        obj.adversarial_losses([], [1.0])


def test_bad_variant_rejected():
    with pytest.raises(ValueError):
        obj.build_generator_loss(ad.leaf("f", (1, 1)), "wrong")
    with pytest.raises(ValueError):
        obj.LossConfig(g_loss_variant="wrong")


def test_loss_config_invariants():
    for kwargs in ({"lambda_r1": -0.1}, {"lambda_clip": -1.0}, {"r1_interval": 0}):
        with pytest.raises(ValueError):
            obj.LossConfig(**kwargs)


def test_descent_step_on_quadratic_toy_improves_objective():
    # toy score s(x) = a*x^2 + b*x; one small gradient step on (a, b) must
    # lower L_D, i.e. raise the value the critic maximizes
    rng = np.random.default_rng(3)
    xr = rng.normal(loc=1.0, size=(8, 1))
    xf = rng.normal(loc=-1.0, size=(8, 1))
    a, b = ad.leaf("a", ()), ad.leaf("b", ())
    real = ad.broadcast_to(ad.reshape(a, (1, 1)), (8, 1)) * ad.const(xr ** 2) \
        + ad.broadcast_to(ad.reshape(b, (1, 1)), (8, 1)) * ad.const(xr)
    fake = ad.broadcast_to(ad.reshape(a, (1, 1)), (8, 1)) * ad.const(xf ** 2) \
        + ad.broadcast_to(ad.reshape(b, (1, 1)), (8, 1)) * ad.const(xf)
    loss = obj.build_discriminator_loss(real, fake)
    bind = {"a": np.array(0.3), "b": np.array(-0.2)}
    grads = ad.gradient(loss, bind)
    before = float(ad.evaluate(loss, bind))
    stepped = {k: bind[k] - 1e-2 * grads[k] for k in bind}
    after = float(ad.evaluate(loss, stepped))
    assert after < before


# ---------------------------------------------------------------------------
# gradient penalty


def test_linear_discriminator_penalty_is_weight_norm():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(12, 1))
    img = ad.leaf("img", (4, 12))
    logits = ad.matmul(img, ad.const(w))
    penalty = obj.build_r1_penalty(logits, img)
    got = float(ad.evaluate(penalty, {"img": rng.normal(size=(4, 12))}))
    assert abs(got - float(w.ravel() @ w.ravel())) < 1e-12


def test_constant_discriminator_penalty_is_zero():
    # score reads the image only through stop_gradient: input-independent
    img = ad.leaf("img", (3, 5))
    logits = ad.stop_gradient(ad.matmul(img, ad.const(np.ones((5, 1)))))
    penalty = obj.build_r1_penalty(logits, img)
    assert float(ad.evaluate(penalty, {"img": np.ones((3, 5))})) == 0.0


_R1_CFG = Config(
    render=RenderConfig(resolution=4, n_samples=4),
    triplane=TriPlaneConfig(resolution=8, channels=3),
    decoder=DecoderConfig(hidden_width=8, color_channels=4),
    generator=GeneratorConfig(z_dim=6, embed_dim=5, mapping_width=12, mapping_layers=2,
                              seed_resolution=4, synthesis_channels=(8, 7),
                              sr_channels=(6,)),
    discriminator=DiscriminatorConfig(channels=(4, 6), head_width=7),
)


def _r1_setup():
    rng = np.random.default_rng(17)
    params = init_discriminator(_R1_CFG, rng)
    images = rng.uniform(-1, 1, size=(2, 8, 8, 3))
    xi = rng.normal(size=(2, 25))
    t = rng.normal(size=(2, 5))
    return params, images, xi, t


def test_r1_penalty_nonnegative_and_deterministic():
    params, images, xi, t = _r1_setup()
    a = obj.r1_penalty(params, images, xi, t, _R1_CFG)
    b = obj.r1_penalty(params, images, xi, t, _R1_CFG)
    assert a == b
    assert a > 0.0


def test_r1_penalty_gradient_wrt_parameters_matches_fd():
    from tridistill.networks import build_discriminator

    params, images, xi, t = _r1_setup()
    cond = np.concatenate([xi, t], axis=1)
    leaves = {k: ad.leaf(f"p/{k}", v.shape) for k, v in params.items()}
    img = ad.leaf("img", images.shape)
    logits = build_discriminator(img, ad.const(cond), leaves, _R1_CFG)
    penalty = obj.build_r1_penalty(logits, img)
    bind = {f"p/{k}": v for k, v in params.items()}
    bind["img"] = images
    analytic = ad.gradient(penalty, bind, wrt=list(leaves.values()))

    rng = np.random.default_rng(23)
    for name in ("conv0/k", "conv1/b", "head/w", "logit/w", "proj/w"):
        def f(v, _name=name):
            p2 = dict(params)
            p2[_name] = v
            return obj.r1_penalty(p2, images, xi, t, _R1_CFG)

        idx = rng.choice(params[name].size, size=min(4, params[name].size), replace=False)
        num = central_diff_sampled(f, params[name], idx)
        ana = analytic[f"p/{name}"].ravel()[idx]
        assert rel_err(ana, num) < 1e-4, name


# ---------------------------------------------------------------------------
# alignment loss


def _unit(rng, n):
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


def test_alignment_matched_embeddings_near_zero():
    rng = np.random.default_rng(2)
    img = rng.uniform(-1, 1, size=(32, 32, 3))
    e = teacher.encode_image(img, 32)
    loss = obj.clip_align_loss(img, e, 32)
    assert 0.0 <= loss < 1e-6  # clamp keeps the dot at 1 - 1e-7


def test_alignment_orthogonal_embeddings():
    rng = np.random.default_rng(3)
    img = rng.uniform(-1, 1, size=(32, 32, 3))
    e = teacher.encode_image(img, 32)
    v = _unit(rng, 32)
    v = v - (v @ e) * e
    v /= np.linalg.norm(v)
    loss = obj.clip_align_loss(img, v, 32)
    assert abs(loss - (np.pi / 2) ** 2) < 1e-12


def test_alignment_antipodal_embeddings():
    rng = np.random.default_rng(4)
    img = rng.uniform(-1, 1, size=(32, 32, 3))
    e = teacher.encode_image(img, 32)
    loss = obj.clip_align_loss(img, -e, 32)
    want = float(np.arccos(-1.0 + obj.DOT_CLAMP) ** 2)
    assert abs(loss - want) < 1e-12
    assert abs(loss - np.pi ** 2) < 3e-3  # clamp shifts it slightly below pi^2


def test_alignment_range_and_symmetry():
    rng = np.random.default_rng(5)
    img_a = rng.uniform(-1, 1, size=(32, 32, 3))
    img_b = rng.uniform(-1, 1, size=(32, 32, 3))
    e_a = teacher.encode_image(img_a, 32)
    e_b = teacher.encode_image(img_b, 32)
    ab = obj.clip_align_loss(img_a, e_b, 32)
    ba = obj.clip_align_loss(img_b, e_a, 32)
    assert abs(ab - ba) < 1e-12
    assert 0.0 <= ab <= np.pi ** 2


def test_alignment_accepts_prompt_text():
    rng = np.random.default_rng(6)
    img = rng.uniform(-1, 1, size=(32, 32, 3))
    via_text = obj.clip_align_loss(img, "a red sphere, plain", 32)
    via_embed = obj.clip_align_loss(img, teacher.encode_text("a red sphere, plain", 32), 32)
    assert via_text == via_embed


def test_alignment_rejects_bad_embedding_shape():
    with pytest.raises(ValueError, match="embedding"):
        obj.clip_align_loss(np.zeros((32, 32, 3)), np.zeros(7), 32)


def test_graph_embedding_matches_oracle():
    rng = np.random.default_rng(7)
    for res in (8, 16, 64):  # below, at, and above the pooling grid
        imgs = rng.uniform(-1, 1, size=(3, res, res, 3))
        node = obj.build_image_embedding(ad.const(imgs), 32)
        got = ad.evaluate(node)
        want = np.stack([teacher.encode_image(im, 32) for im in imgs])
        assert np.abs(got - want).max() < 1e-12, res


def test_graph_alignment_matches_eager_mean():
    rng = np.random.default_rng(8)
    imgs = rng.uniform(-1, 1, size=(4, 32, 32, 3))
    prompts = np.stack([_unit(rng, 32) for _ in range(4)])
    node = obj.build_alignment_loss(ad.const(imgs), ad.const(prompts), 32)
    got = float(ad.evaluate(node))
    want = np.mean([obj.clip_align_loss(im, p, 32) for im, p in zip(imgs, prompts)])
    assert abs(got - want) < 1e-12


def test_alignment_gradient_wrt_image_matches_fd():
    rng = np.random.default_rng(9)
    imgs = rng.uniform(-1, 1, size=(2, 32, 32, 3))
    prompts = np.stack([_unit(rng, 32) for _ in range(2)])
    img_leaf = ad.leaf("imgs", imgs.shape)
    loss = obj.build_alignment_loss(img_leaf, ad.const(prompts), 32)
    analytic = ad.gradient(loss, {"imgs": imgs})["imgs"]

    def f(v):
        return float(ad.evaluate(loss, {"imgs": v}))

    idx = rng.choice(imgs.size, size=8, replace=False)
    num = central_diff_sampled(f, imgs, idx)
    assert rel_err(analytic.ravel()[idx], num) < 1e-5


def test_embedding_graph_rejects_bad_shapes():
    with pytest.raises(ValueError, match="multiple"):
        obj.build_image_embedding(ad.leaf("x", (1, 30, 30, 3)), 32)
    with pytest.raises(ValueError):
        obj.build_image_embedding(ad.leaf("x", (1, 32, 32, 4)), 32)
