"""Training losses: softplus adversarial pair, gradient penalty, text alignment.

All losses come in two forms: an eager numpy function for inspection and
testing, and a graph builder that the training loop compiles together with the
networks. The two forms share their formulas, so eager values are oracles for
the compiled path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import teacher
from .config import Config, TrainConfig
from .networks import build_discriminator

DOT_CLAMP = 1e-7  # arccos gradient diverges at +-1; clamp bounds it
G_LOSS_VARIANTS = ("non-saturating", "literal")


@dataclass(frozen=True)
class LossConfig:
    lambda_r1: float = 1.0
    lambda_clip: float = 0.1
    r1_interval: int = 16
    g_loss_variant: str = "non-saturating"

    def __post_init__(self):
        if self.lambda_r1 < 0:
            raise ValueError(f"lambda_r1 must be >= 0, got {self.lambda_r1}")
        if self.lambda_clip < 0:
            raise ValueError(f"lambda_clip must be >= 0, got {self.lambda_clip}")
        if self.r1_interval < 1:
            raise ValueError(f"r1_interval must be >= 1, got {self.r1_interval}")
        if self.g_loss_variant not in G_LOSS_VARIANTS:
            raise ValueError(f"g_loss_variant must be one of {G_LOSS_VARIANTS}, "
                             f"got {self.g_loss_variant!r}")

    @staticmethod
    def from_train(train: TrainConfig) -> "LossConfig":
        return LossConfig(lambda_r1=train.lambda_r1, lambda_clip=train.lambda_clip,
                          r1_interval=train.r1_interval)


def _softplus(t: np.ndarray) -> np.ndarray:
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def gan_f(t):
    """Log-sigmoid score transform -softplus(-t), stable for |t| up to 1e6."""
    t = np.asarray(t, dtype=np.float64)
    out = -_softplus(-t)
    return float(out) if out.ndim == 0 else out


def adversarial_losses(real_logits, fake_logits,
                       cfg: LossConfig | None = None) -> tuple[float, float]:
    """(discriminator base loss, generator loss) from raw logits.

    The discriminator part is mean softplus(-real) + mean softplus(fake).
    The generator part defaults to the non-saturating mean softplus(-fake);
    the 'literal' variant mean(-softplus(fake)) saturates once the
    discriminator is confident, so it is opt-in only.
    """
    cfg = cfg or LossConfig()
    real = np.asarray(real_logits, dtype=np.float64).reshape(-1)
    fake = np.asarray(fake_logits, dtype=np.float64).reshape(-1)
    if real.size == 0 or fake.size == 0:
        raise ValueError("adversarial_losses needs at least one real and one fake logit")
    l_d = float(_softplus(-real).mean() + _softplus(fake).mean())
    if cfg.g_loss_variant == "literal":
        l_g = float(np.mean(gan_f(-fake)))
    else:
        l_g = float(_softplus(-fake).mean())
    return l_d, l_g


# ---------------------------------------------------------------------------
# graph builders


def build_discriminator_loss(real_logits: ad.Node, fake_logits: ad.Node) -> ad.Node:
    """mean softplus(-real) + mean softplus(fake), as a scalar graph node."""
    return ad.mean(ad.softplus(ad.neg(real_logits))) + ad.mean(ad.softplus(fake_logits))


def build_generator_loss(fake_logits: ad.Node,
                         variant: str = "non-saturating") -> ad.Node:
    if variant not in G_LOSS_VARIANTS:
        raise ValueError(f"g_loss_variant must be one of {G_LOSS_VARIANTS}, got {variant!r}")
    if variant == "literal":
        return ad.neg(ad.mean(ad.softplus(fake_logits)))
    return ad.mean(ad.softplus(ad.neg(fake_logits)))


def build_r1_penalty(logits: ad.Node, image: ad.Node) -> ad.Node:
    """Mean over the batch of the squared input-gradient norm of the score.

    Differentiating the returned node w.r.t. discriminator parameters yields
    the second-order gradients the regularized step needs. Batch rows are
    independent, so the gradient of the summed logits stacks per-sample
    gradients and one squared norm covers the whole batch.
    """
    batch = image.shape[0]
    total = ad.grad_penalty(ad.reduce_sum(logits), [image])
    return total * (1.0 / batch)


def build_image_embedding(rgb: ad.Node, embed_dim: int) -> ad.Node:
    """Graph twin of the embedding oracle: [B, H, W, 3] -> unit rows [B, E].

    Matches teacher.encode_image to float rounding (block mean -> fixed seeded
    projection -> normalize) and is differentiable w.r.t. the image.
    """
    b, h, w, c = rgb.shape
    pool = teacher.POOL
    if c != 3 or h != w:
        raise ValueError(f"embedding wants square RGB images, got {rgb.shape}")
    if h < pool:
        if pool % h != 0:
            raise ValueError(f"embedding wants the image side to divide or be "
                             f"a multiple of {pool}, got {h}")
        # nearest-upsample to the pool grid, mirroring the numpy oracle
        up = pool // h
        rgb = ad.reshape(ad.broadcast_to(ad.reshape(rgb, (b, h, 1, w, 1, 3)),
                                         (b, h, up, w, up, 3)),
                         (b, pool, pool, 3))
        h = w = pool
    if h % pool != 0:
        raise ValueError(f"embedding wants the image side to divide or be "
                         f"a multiple of {pool}, got {h}")
    f = h // pool
    x = ad.reshape(rgb, (b, pool, f, pool, f, 3))
    pooled = ad.reduce_sum(x, axes=(2, 4)) * (1.0 / (f * f))
    flat = ad.reshape(pooled, (b, pool * pool * 3))
    e = ad.matmul(flat, ad.const(teacher.embedding_projection(embed_dim)))
    sq = ad.reduce_sum(e * e, (1,), keepdims=True)
    inv = ad.power(sq + 1e-24, -0.5)
    return e * ad.broadcast_to(inv, (b, embed_dim))


def build_alignment_loss(rgb: ad.Node, text_embed: ad.Node, embed_dim: int) -> ad.Node:
    """Mean squared embedding angle between rendered images and their prompts."""
    e = build_image_embedding(rgb, embed_dim)
    dots = ad.reduce_sum(e * text_embed, (1,))
    ang = ad.arccos(ad.clip(dots, -1.0 + DOT_CLAMP, 1.0 - DOT_CLAMP))
    return ad.mean(ang * ang)


# ---------------------------------------------------------------------------
# eager forms


def r1_penalty(params: dict[str, np.ndarray], images: np.ndarray, xi: np.ndarray,
               t_embed: np.ndarray, cfg: Config) -> float:
    """Mean squared input-gradient norm of the discriminator on a real batch."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    cond = np.concatenate([np.atleast_2d(np.asarray(xi, dtype=np.float64)),
                           np.atleast_2d(np.asarray(t_embed, dtype=np.float64))], axis=1)
    img = ad.leaf("r1/image", images.shape)
    nodes = {k: ad.const(v) for k, v in params.items()}
    logits = build_discriminator(img, ad.const(cond), nodes, cfg)
    penalty = build_r1_penalty(logits, img)
    return float(ad.evaluate(penalty, {"r1/image": images}))


def clip_align_loss(image: np.ndarray, prompt, embed_dim: int) -> float:
    """Squared embedding angle between one image and a prompt (or embedding).

    `prompt` may be a PromptSpec, prompt text, or a precomputed unit embedding.
    """
    if isinstance(prompt, (teacher.PromptSpec, str)):
        t = teacher.encode_text(prompt, embed_dim)
    else:
        t = np.asarray(prompt, dtype=np.float64)
        if t.shape != (embed_dim,):
            raise ValueError(f"prompt embedding must have shape ({embed_dim},), "
                             f"got {t.shape}")
    e = teacher.encode_image(image, embed_dim)
    dot = np.clip(e @ t, -1.0 + DOT_CLAMP, 1.0 - DOT_CLAMP)
    return float(np.arccos(dot) ** 2)
