"""Loss families shared by both training phases.

Adversarial terms are least-squares (scores regressed to 1 for real,
0 for fake), reconstruction is mean absolute error, and the contrastive
patch loss is softmax cross-entropy over scaled cosine similarities
with the diagonal as the positive pair. The same graph is built in
ORIGINAL and SEMANTIC phases; only the target stream changes.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    lambda_cycle: float = 10.0
    lambda_nce: float = 1.0
    nce_temperature: float = 0.07
    num_patches: int = 64
    identity_nce: bool = True

    def __post_init__(self):
        if self.lambda_cycle < 0 or self.lambda_nce < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.nce_temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.nce_temperature}")
        if self.num_patches < 2:
            raise ConfigError(f"need at least 2 patches, got {self.num_patches}")


def adversarial_loss(scores, target_is_real):
    """Mean squared error of a patch score map against 1 (real) or 0 (fake)."""
    if scores.data.size == 0:
        raise ContractError("adversarial_loss on an empty score map")
    target = 1.0 if target_is_real else 0.0
    return ad.mean_reduce(ad.square(scores - target))


def discriminator_loss(real_scores, fake_scores):
    """Standard half-sum of the real and fake least-squares terms."""
    real_term = adversarial_loss(real_scores, True)
    fake_term = adversarial_loss(fake_scores, False)
    return (real_term + fake_term) * 0.5


def cycle_loss(original, cycled):
    """Mean absolute reconstruction error."""
    if original.data.shape != cycled.data.shape:
        raise ShapeError(
            f"cycle_loss shapes differ: {original.data.shape} vs {cycled.data.shape}"
        )
    return ad.mean_reduce(ad.absolute(original - cycled))


def patch_nce_loss(query, positive, temperature=0.07):
    """Contrastive loss over [P, d] unit-norm patch embeddings.

    Row i of ``positive`` is the positive for row i of ``query``; every
    other row acts as a negative. Cross-entropy of the similarity
    matrix (divided by the temperature) against the diagonal labels,
    averaged over rows.
    """
    if query.data.shape != positive.data.shape or query.data.ndim != 2:
        raise ShapeError(
            f"patch_nce_loss needs matching [P,d] matrices, got "
            f"{query.data.shape} and {positive.data.shape}"
        )
    p = query.data.shape[0]
    if p < 2:
        raise ContractError(f"patch_nce_loss needs >= 2 patches, got {p}")
    logits = ad.matmul(query, ad.transpose2d(positive)) * (1.0 / temperature)
    # stable log-sum-exp with a constant shift (max has zero gradient a.e.)
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    lse = ad.log(ad.sum_reduce(ad.exp(logits - shift), axes=1, keepdims=True)) + shift
    eye = Tensor(np.eye(p, dtype=logits.data.dtype))
    diag = ad.sum_reduce(logits * eye, axes=1, keepdims=True)
    return ad.mean_reduce(lse - diag)


def compose_total_loss(model_kind, parts, weights: LossWeights):
    """Sum the generator-side components for a model kind.

    Returns (named component map, total). cyclegan needs adv_a, adv_b,
    cycle_a, cycle_b; cut needs adv and nce (plus nce_idt when the
    identity branch is enabled).
    """
    def grab(name):
        if name not in parts:
            raise ContractError(f"{model_kind} total is missing component '{name}'")
        return parts[name]

    if model_kind == "cyclegan":
        components = {name: grab(name) for name in ("adv_a", "adv_b", "cycle_a", "cycle_b")}
        total = (
            components["adv_a"]
            + components["adv_b"]
            + (components["cycle_a"] + components["cycle_b"]) * weights.lambda_cycle
        )
    elif model_kind == "cut":
        components = {"adv": grab("adv"), "nce": grab("nce")}
        nce_sum = components["nce"]
        if weights.identity_nce:
            components["nce_idt"] = grab("nce_idt")
            nce_sum = nce_sum + components["nce_idt"]
        total = components["adv"] + nce_sum * weights.lambda_nce
    else:
        raise ContractError(f"unknown model kind '{model_kind}'")
    return components, total
