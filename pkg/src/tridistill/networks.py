"""Generator and discriminator networks as differentiable graph builders.

The generator: a mapping perceptron turns (latent, conditioning camera) into a
style vector whose trailing block is the prompt embedding verbatim; a
style-modulated conv stack grows a learned constant seed into the tri-plane
field; a second modulated stack super-resolves the rendered feature image to
the final RGB output.

The discriminator: a conv stack with average-pool downsampling to a feature
vector h, conditioned by projection: logit = fc(h) + <h, W [camera || text]>.

Style modulation scales conv inputs per sample (equivalent to scaling the
kernel's input slices) and demodulates per output channel, so one shared
kernel serves the whole batch.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .config import Config
from .initializers import conv_orthogonal, orthogonal
from .triplane import DECODER_PARAM_KEYS, decoder_shapes, init_decoder

DEMOD_EPS = 1e-8


# ---------------------------------------------------------------------------
# parameter inventories


def generator_param_shapes(cfg: Config) -> dict[str, tuple[int, ...]]:
    g = cfg.generator
    shapes: dict[str, tuple[int, ...]] = {}
    din = g.z_dim + 25
    for i in range(g.mapping_layers):
        shapes[f"map/w{i}"] = (din, g.mapping_width)
        shapes[f"map/b{i}"] = (g.mapping_width,)
        din = g.mapping_width
    w_dim = g.w_dim

    chans = g.synthesis_channels
    shapes["syn/seed"] = (g.seed_resolution, g.seed_resolution, chans[0])
    for i in range(1, len(chans)):
        shapes[f"syn/conv{i}/k"] = (3, 3, chans[i - 1], chans[i])
        shapes[f"syn/conv{i}/b"] = (chans[i],)
        shapes[f"syn/conv{i}/aff_w"] = (w_dim, chans[i - 1])
        shapes[f"syn/conv{i}/aff_b"] = (chans[i - 1],)
    total_c = cfg.triplane.total_channels
    shapes["syn/out/k"] = (1, 1, chans[-1], total_c)
    shapes["syn/out/b"] = (total_c,)
    shapes["syn/out/aff_w"] = (w_dim, chans[-1])
    shapes["syn/out/aff_b"] = (chans[-1],)

    for key, shape in decoder_shapes(cfg.triplane, cfg.decoder).items():
        shapes[f"dec/{key}"] = shape

    prev = cfg.decoder.color_channels
    for i, ch in enumerate(cfg.generator.sr_channels):
        shapes[f"sr/conv{i}/k"] = (3, 3, prev, ch)
        shapes[f"sr/conv{i}/b"] = (ch,)
        shapes[f"sr/conv{i}/aff_w"] = (w_dim, prev)
        shapes[f"sr/conv{i}/aff_b"] = (prev,)
        prev = ch
    shapes["sr/out/k"] = (1, 1, prev, 3)
    shapes["sr/out/b"] = (3,)
    shapes["sr/out/aff_w"] = (w_dim, prev)
    shapes["sr/out/aff_b"] = (prev,)
    return shapes


def discriminator_param_shapes(cfg: Config) -> dict[str, tuple[int, ...]]:
    d = cfg.discriminator
    shapes: dict[str, tuple[int, ...]] = {}
    prev = 3
    res = cfg.image_resolution
    for i, ch in enumerate(d.channels):
        shapes[f"conv{i}/k"] = (3, 3, prev, ch)
        shapes[f"conv{i}/b"] = (ch,)
        prev = ch
        res //= 2
    shapes["head/w"] = (res * res * prev, d.head_width)
    shapes["head/b"] = (d.head_width,)
    shapes["logit/w"] = (d.head_width, 1)
    shapes["logit/b"] = (1,)
    cond_dim = 25 + cfg.generator.embed_dim
    shapes["proj/w"] = (cond_dim, d.head_width)
    return shapes


def _init_from_shapes(shapes: dict[str, tuple[int, ...]],
                      rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for key, shape in shapes.items():
        base = key.rsplit("/", 1)[-1]
        if base == "seed":
            params[key] = rng.normal(size=shape)
        elif base.startswith("aff_w"):
            params[key] = orthogonal(rng, *shape)
        elif base.startswith("aff_b"):
            params[key] = np.ones(shape)  # styles start at identity scaling
        elif base.startswith(("w", "k")) and len(shape) == 4:
            params[key] = conv_orthogonal(rng, *shape)
        elif base.startswith(("w", "k")):
            params[key] = orthogonal(rng, *shape)
        else:
            params[key] = np.zeros(shape)
    return params


def init_generator(cfg: Config, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = _init_from_shapes(generator_param_shapes(cfg), rng)
    dec = init_decoder(cfg.triplane, cfg.decoder, rng)
    for key in DECODER_PARAM_KEYS:
        params[f"dec/{key}"] = dec[key]
    return params


def init_discriminator(cfg: Config, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return _init_from_shapes(discriminator_param_shapes(cfg), rng)


# ---------------------------------------------------------------------------
# graph building blocks


def upsample2x(x: ad.Node) -> ad.Node:
    b, h, w, c = x.shape
    x = ad.reshape(x, (b, h, 1, w, 1, c))
    x = ad.broadcast_to(x, (b, h, 2, w, 2, c))
    return ad.reshape(x, (b, 2 * h, 2 * w, c))


def avgpool2x(x: ad.Node) -> ad.Node:
    b, h, w, c = x.shape
    x = ad.reshape(x, (b, h // 2, 2, w // 2, 2, c))
    return ad.reduce_sum(x, (2, 4)) * 0.25


def modulated_conv(x: ad.Node, w_style: ad.Node, kernel: ad.Node, bias: ad.Node,
                   aff_w: ad.Node, aff_b: ad.Node, demodulate: bool = True) -> ad.Node:
    """Style-modulated convolution.

    Per-sample styles scale the input channels before a shared-kernel conv
    (identical to scaling the kernel per sample); demodulation rescales each
    output channel to unit expected magnitude.
    """
    b, h, wd, cin = x.shape
    cout = kernel.shape[3]
    style = ad.linear(w_style, aff_w, aff_b)  # [B, Cin]
    x = x * ad.reshape(style, (b, 1, 1, cin))
    y = ad.conv2d(x, kernel)
    if demodulate:
        ksq = ad.reduce_sum(kernel * kernel, (0, 1))  # [Cin, Cout]
        denom = ad.matmul(style * style, ksq) + DEMOD_EPS  # [B, Cout]
        y = y * ad.reshape(ad.power(denom, -0.5), (b, 1, 1, cout))
    return y + bias


def build_mapping(z_pose: ad.Node, t_embed: ad.Node,
                  params: dict[str, ad.Node], cfg: Config) -> ad.Node:
    """(latent || camera) through the perceptron, prompt embedding appended."""
    h = z_pose
    for i in range(cfg.generator.mapping_layers):
        h = ad.silu(ad.linear(h, params[f"map/w{i}"], params[f"map/b{i}"]))
    return ad.concat([h, t_embed], axis=1)


def build_synthesis(w_style: ad.Node, params: dict[str, ad.Node], cfg: Config,
                    batch: int) -> ad.Node:
    """Style vector -> tri-plane field [B, R, R, 3C]."""
    g = cfg.generator
    chans = g.synthesis_channels
    r0 = g.seed_resolution
    seed = ad.reshape(params["syn/seed"], (1, r0, r0, chans[0]))
    x = ad.broadcast_to(seed, (batch, r0, r0, chans[0]))
    res = r0
    for i in range(1, len(chans)):
        if res < cfg.triplane.resolution:
            x = upsample2x(x)
            res *= 2
        x = ad.silu(modulated_conv(x, w_style, params[f"syn/conv{i}/k"],
                                   params[f"syn/conv{i}/b"], params[f"syn/conv{i}/aff_w"],
                                   params[f"syn/conv{i}/aff_b"]))
    if res != cfg.triplane.resolution:
        raise ValueError(f"synthesis stack reaches {res}, triplane needs "
                         f"{cfg.triplane.resolution}; adjust channels/seed resolution")
    return modulated_conv(x, w_style, params["syn/out/k"], params["syn/out/b"],
                          params["syn/out/aff_w"], params["syn/out/aff_b"],
                          demodulate=False)


def build_super_res(feat: ad.Node, w_style: ad.Node, params: dict[str, ad.Node],
                    cfg: Config) -> ad.Node:
    """Feature image [B, r, r, C_c] -> RGB [B, 2r, 2r, 3] in [-1, 1]."""
    x = feat
    res = feat.shape[1]
    target = cfg.image_resolution
    for i in range(len(cfg.generator.sr_channels)):
        if res < target:
            x = upsample2x(x)
            res *= 2
        x = ad.silu(modulated_conv(x, w_style, params[f"sr/conv{i}/k"],
                                   params[f"sr/conv{i}/b"], params[f"sr/conv{i}/aff_w"],
                                   params[f"sr/conv{i}/aff_b"]))
    rgb = modulated_conv(x, w_style, params["sr/out/k"], params["sr/out/b"],
                         params["sr/out/aff_w"], params["sr/out/aff_b"],
                         demodulate=False)
    return ad.tanh(rgb)


def build_disc_features(image: ad.Node, params: dict[str, ad.Node],
                        cfg: Config) -> ad.Node:
    """Discriminator trunk: image [B, res, res, 3] -> feature vectors [B, H]."""
    x = image
    for i in range(len(cfg.discriminator.channels)):
        x = ad.silu(ad.conv2d(x, params[f"conv{i}/k"]) + params[f"conv{i}/b"])
        x = avgpool2x(x)
    b = x.shape[0]
    flat = ad.reshape(x, (b, x.shape[1] * x.shape[2] * x.shape[3]))
    return ad.silu(ad.linear(flat, params["head/w"], params["head/b"]))


def build_discriminator(image: ad.Node, cond: ad.Node,
                        params: dict[str, ad.Node], cfg: Config) -> ad.Node:
    """Image [B, res, res, 3] + conditioning [B, 25+E] -> logits [B, 1]."""
    h = build_disc_features(image, params, cfg)
    base = ad.linear(h, params["logit/w"], params["logit/b"])  # [B, 1]
    proj = ad.reduce_sum(h * ad.matmul(cond, params["proj/w"]), (1,), keepdims=True)
    return base + proj


# ---------------------------------------------------------------------------
# eager wrappers


def _nodes_for(params: dict[str, np.ndarray]) -> dict[str, ad.Node]:
    return {k: ad.const(v) for k, v in params.items()}


def map_latent(z: np.ndarray, p_cond: np.ndarray, t_embed: np.ndarray,
               params: dict[str, np.ndarray], cfg: Config) -> np.ndarray:
    """Style vector for one sample or a batch; trailing block is t_embed."""
    single = np.asarray(z).ndim == 1
    z2, p2, t2 = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (z, p_cond, t_embed))
    if z2.shape[1] != cfg.generator.z_dim:
        raise ValueError(f"latent dim {z2.shape[1]}, config wants {cfg.generator.z_dim}")
    if p2.shape[1] != 25:
        raise ValueError(f"camera vector must have 25 entries, got {p2.shape[1]}")
    if t2.shape[1] != cfg.generator.embed_dim:
        raise ValueError(f"embedding dim {t2.shape[1]}, config wants {cfg.generator.embed_dim}")
    zp = np.concatenate([z2, p2], axis=1)
    w = ad.evaluate(build_mapping(ad.const(zp), ad.const(t2), _nodes_for(params), cfg))
    return w[0] if single else w


def synthesize_triplane(w_style: np.ndarray, params: dict[str, np.ndarray],
                        cfg: Config) -> np.ndarray:
    single = np.asarray(w_style).ndim == 1
    w2 = np.atleast_2d(np.asarray(w_style, dtype=np.float64))
    planes = ad.evaluate(build_synthesis(ad.const(w2), _nodes_for(params), cfg, w2.shape[0]))
    return planes[0] if single else planes


def super_resolve(feat: np.ndarray, w_style: np.ndarray,
                  params: dict[str, np.ndarray], cfg: Config) -> np.ndarray:
    single = np.asarray(feat).ndim == 3
    f = np.asarray(feat, dtype=np.float64)
    f = f[None] if single else f
    w2 = np.atleast_2d(np.asarray(w_style, dtype=np.float64))
    if f.shape[1] != cfg.render.resolution:
        raise ValueError(f"feature image is {f.shape[1]}px, renderer produces "
                         f"{cfg.render.resolution}px")
    rgb = ad.evaluate(build_super_res(ad.const(f), ad.const(w2), _nodes_for(params), cfg))
    return rgb[0] if single else rgb


def discriminate(image: np.ndarray, xi: np.ndarray, t_embed: np.ndarray,
                 params: dict[str, np.ndarray], cfg: Config) -> float:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    if img.shape[1] != cfg.image_resolution:
        raise ValueError(f"image is {img.shape[1]}px, discriminator wants "
                         f"{cfg.image_resolution}px")
    cond = np.concatenate([np.atleast_2d(xi), np.atleast_2d(t_embed)], axis=1)
    logits = ad.evaluate(build_discriminator(ad.const(img), ad.const(cond),
                                             _nodes_for(params), cfg))
    return float(logits[0, 0]) if logits.shape[0] == 1 else logits[:, 0]


# ---------------------------------------------------------------------------
# full generator pipeline


def plan_rays(cameras: np.ndarray, cfg: Config,
              rng: np.random.Generator | None = None,
              stratified: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bilinear sampling plan for a batch of render cameras.

    Returns (idx, weights, depths): idx/weights are [3, 4, B*P*n] with rows
    pre-offset so sample b reads block b of a [B*R^2, 3C] table; depths is
    [B*P, n] for the depth read-out.
    """
    from . import camera as cam_mod
    from .triplane import bilinear_indices

    cams = np.atleast_2d(cameras)
    batch = cams.shape[0]
    res = cfg.render.resolution
    n = cfg.render.n_samples
    r = cfg.triplane.resolution
    ccfg = cfg.camera
    rays = res * res
    origins = np.empty((batch, rays, 3))
    dirs = np.empty((batch, rays, 3))
    for b in range(batch):
        origins[b], dirs[b] = cam_mod.generate_rays(cams[b], res, res)
    if stratified:
        if rng is None:
            raise ValueError("stratified ray planning requires an rng")
        depths = cam_mod.stratified_depth_matrix(ccfg.near, ccfg.far, n,
                                                 batch * rays, rng)
    else:
        depths = np.broadcast_to(cam_mod.sample_depths(ccfg.near, ccfg.far, n)[0],
                                 (batch * rays, n))
    points = (origins.reshape(-1, 1, 3)
              + dirs.reshape(-1, 1, 3) * depths[:, :, None])
    idx, w = bilinear_indices(points.reshape(-1, 3), r)
    # offset each sample into its batch item's block of a [B*R^2, 3C] table
    idx += np.repeat(np.arange(batch, dtype=np.int64) * (r * r), rays * n)
    return idx, w, depths


def build_generator(zp: ad.Node, t_embed: ad.Node, idx: ad.Node, wgt: ad.Node,
                    params: dict[str, ad.Node], cfg: Config) -> dict[str, ad.Node]:
    """Latent-to-image graph; returns the named intermediate nodes."""
    from .render import build_field_render

    batch = zp.shape[0]
    res = cfg.render.resolution
    n = cfg.render.n_samples
    r = cfg.triplane.resolution
    cc = cfg.decoder.color_channels
    delta = (cfg.camera.far - cfg.camera.near) / n

    w_style = build_mapping(zp, t_embed, params, cfg)
    planes = build_synthesis(w_style, params, cfg, batch)
    table = ad.reshape(planes, (batch * r * r, cfg.triplane.total_channels))
    dec = {k: params[f"dec/{k}"] for k in DECODER_PARAM_KEYS}
    feature, opacity, _ = build_field_render(table, idx, wgt, dec,
                                             batch * res * res, n, delta, cc)
    feat_img = ad.reshape(feature, (batch, res, res, cc))
    rgb = build_super_res(feat_img, w_style, params, cfg)
    return {"w": w_style, "planes": planes, "feature": feat_img,
            "opacity": ad.reshape(opacity, (batch, res, res)), "rgb": rgb}


def generate(params: dict[str, np.ndarray], z: np.ndarray, xi_cond: np.ndarray,
             xi_render: np.ndarray, t_embed: np.ndarray, cfg: Config):
    """Eager full pipeline for one sample or a batch.

    Returns (rgb, planes, feature_image, opacity): [B?, 2res, 2res, 3] in
    [-1, 1], the tri-plane field(s), the rendered feature image(s), and the
    per-pixel accumulated opacity.
    """
    single = np.asarray(z).ndim == 1
    z2 = np.atleast_2d(np.asarray(z, dtype=np.float64))
    pc = np.atleast_2d(np.asarray(xi_cond, dtype=np.float64))
    pr = np.atleast_2d(np.asarray(xi_render, dtype=np.float64))
    t2 = np.atleast_2d(np.asarray(t_embed, dtype=np.float64))
    batch = z2.shape[0]
    idx, wgt, _ = plan_rays(pr, cfg)
    nodes = build_generator(ad.const(np.concatenate([z2, pc], axis=1)), ad.const(t2),
                            ad.const_int(idx), ad.const(wgt), _nodes_for(params), cfg)
    rgb, planes, feat, opac = ad.evaluate(
        [nodes["rgb"], nodes["planes"], nodes["feature"], nodes["opacity"]])
    if single:
        return rgb[0], planes[0], feat[0], opac[0]
    return rgb, planes, feat, opac
