import math

import numpy as np
import pytest

from phasegan import autodiff as ad
from phasegan.autodiff import Tape, Tensor
from phasegan.errors import ConfigError, ContractError, ShapeError
from phasegan.losses import (
    LossWeights,
    adversarial_loss,
    compose_total_loss,
    cycle_loss,
    discriminator_loss,
    patch_nce_loss,
)
from phasegan.models import ArchConfig, build_models

from gradcheck import check_grads


def unit_rows(rng, p, d):
    m = rng.normal(size=(p, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


class TestAdversarial:
    def test_exact_target_real(self):
        assert adversarial_loss(Tensor(np.ones((1, 1, 2, 2))), True).item() == 0.0

    def test_unit_error(self):
        assert adversarial_loss(Tensor(np.zeros((1, 1, 2, 2))), True).item() == 1.0

    def test_half_score_fake(self):
        assert adversarial_loss(Tensor([0.5]), False).item() == pytest.approx(0.25)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            adversarial_loss(Tensor(np.zeros((0,))), True)

    def test_discriminator_loss_half_sum(self):
        real = Tensor([0.8])
        fake = Tensor([0.3])
        expected = 0.5 * ((0.8 - 1.0) ** 2 + 0.3**2)
        assert discriminator_loss(real, fake).item() == pytest.approx(expected, rel=1e-6)


class TestCycle:
    def test_identity_zero(self):
        x = Tensor(np.linspace(-1, 1, 12).reshape(3, 4))
        assert cycle_loss(x, Tensor(x.data.copy())).item() == 0.0

    def test_unit_l1(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.ones((2, 3)))
        assert cycle_loss(a, b).item() == 1.0

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(4, 4)))
        b = Tensor(rng.normal(size=(4, 4)))
        assert cycle_loss(a, b).item() == cycle_loss(b, a).item()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cycle_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 3))))


class TestPatchNce:
    def test_hand_computed_identity_case(self):
        eye = np.eye(2)
        loss = patch_nce_loss(Tensor(eye), Tensor(eye.copy()), temperature=1.0)
        expected = -math.log(math.e / (math.e + 1.0))
        assert loss.item() == pytest.approx(expected, abs=1e-4)

    def test_mismatched_pairs_lose_to_matched(self):
        eye = np.eye(2)
        swapped = eye[::-1].copy()  # each query aligned with a negative
        matched = patch_nce_loss(Tensor(eye), Tensor(eye.copy()), 1.0).item()
        crossed = patch_nce_loss(Tensor(eye), Tensor(swapped), 1.0).item()
        assert crossed > matched

    def test_monotone_in_temperature_when_diagonal_dominates(self):
        rng = np.random.default_rng(1)
        q = unit_rows(rng, 6, 8)
        losses = [
            patch_nce_loss(Tensor(q), Tensor(q.copy()), t).item()
            for t in (1.0, 0.5, 0.07)
        ]
        assert losses[0] > losses[1] > losses[2]

    @pytest.mark.parametrize("p", [2, 4, 8])
    def test_uniform_similarities_give_log_p(self, p):
        rows = np.tile(np.eye(1, 8), (p, 1))  # identical rows: all sims equal
        loss = patch_nce_loss(Tensor(rows), Tensor(rows.copy()), 0.5)
        assert loss.item() == pytest.approx(math.log(p), rel=1e-5)

    def test_non_negative(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            q = unit_rows(rng, 5, 4)
            k = unit_rows(rng, 5, 4)
            assert patch_nce_loss(Tensor(q), Tensor(k), 0.07).item() >= 0.0

    def test_single_patch_rejected(self):
        with pytest.raises(ContractError):
            patch_nce_loss(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))), 1.0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        q = Tensor(unit_rows(rng, 4, 6), dtype=np.float64)
        k = Tensor(unit_rows(rng, 4, 6), dtype=np.float64)
        check_grads(lambda q, k: patch_nce_loss(q, k, 0.5), [q, k])


class TestComposeTotal:
    def weights(self, **kw):
        return LossWeights(**kw)

    def scalar(self, v):
        return Tensor(np.float32(v))

    def test_cyclegan_zero_cycle_weight(self):
        parts = {
            "adv_a": self.scalar(0.3),
            "adv_b": self.scalar(0.2),
            "cycle_a": self.scalar(5.0),
            "cycle_b": self.scalar(7.0),
        }
        _, total = compose_total_loss("cyclegan", parts, self.weights(lambda_cycle=0.0))
        assert total.item() == pytest.approx(0.5, rel=1e-6)

    def test_all_zero(self):
        parts = {k: self.scalar(0.0) for k in ("adv_a", "adv_b", "cycle_a", "cycle_b")}
        _, total = compose_total_loss("cyclegan", parts, self.weights())
        assert total.item() == 0.0

    def test_total_equals_manual_sum(self):
        w = self.weights(lambda_nce=2.0)
        parts = {
            "adv": self.scalar(0.25),
            "nce": self.scalar(1.5),
            "nce_idt": self.scalar(0.5),
        }
        components, total = compose_total_loss("cut", parts, w)
        manual = (
            components["adv"].item()
            + w.lambda_nce * (components["nce"].item() + components["nce_idt"].item())
        )
        assert total.item() == pytest.approx(manual, rel=1e-6)

    def test_identity_branch_toggle(self):
        parts = {"adv": self.scalar(1.0), "nce": self.scalar(1.0)}
        w = self.weights(identity_nce=False)
        components, total = compose_total_loss("cut", parts, w)
        assert "nce_idt" not in components
        assert total.item() == pytest.approx(2.0)

    def test_missing_component(self):
        with pytest.raises(ContractError):
            compose_total_loss("cut", {"adv": self.scalar(1.0)}, self.weights())

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            compose_total_loss("pix2pix", {}, self.weights())

    def test_bad_weights(self):
        with pytest.raises(ConfigError):
            LossWeights(lambda_cycle=-1.0)
        with pytest.raises(ConfigError):
            LossWeights(nce_temperature=0.0)


class TestGradientFlow:
    def test_generator_loss_reaches_all_generator_params(self):
        arch = ArchConfig(kind="cut", image_size=16, base_width=4, res_blocks=1, embed_dim=16)
        bundle = build_models(arch, seed=0)
        rng = np.random.default_rng(4)
        src = Tensor(rng.uniform(-1, 1, size=(2, 3, 16, 16)).astype(np.float32))
        tgt = Tensor(rng.uniform(-1, 1, size=(2, 3, 16, 16)).astype(np.float32))
        g, d, f = bundle.generators["g"], bundle.discriminators["d"], bundle.encoder
        weights = LossWeights(num_patches=8)
        with Tape() as tape:
            fake = g(src)
            idx = f.sample_patch_indices(2, 8, rng)
            q = f.extract_patch_features(fake, idx)
            k = f.extract_patch_features(src, idx)
            nce = patch_nce_loss(q[0], k[0], weights.nce_temperature)
            for qt, kt in zip(q[1:], k[1:]):
                nce = nce + patch_nce_loss(qt, kt, weights.nce_temperature)
            idt = g(tgt)
            qi = f.extract_patch_features(idt, idx)
            ki = f.extract_patch_features(tgt, idx)
            nce_idt = patch_nce_loss(qi[0], ki[0], weights.nce_temperature)
            for qt, kt in zip(qi[1:], ki[1:]):
                nce_idt = nce_idt + patch_nce_loss(qt, kt, weights.nce_temperature)
            parts = {
                "adv": adversarial_loss(d(fake), True),
                "nce": nce,
                "nce_idt": nce_idt,
            }
            _, total = compose_total_loss("cut", parts, weights)
        tape.backward(total)
        gen_names = set(bundle.generator_params())
        with_grad = {k for k, p in bundle.generator_params().items() if p.grad is not None}
        assert with_grad == gen_names

    def test_discriminator_loss_reaches_all_discriminator_params(self):
        arch = ArchConfig(kind="cut", image_size=16, base_width=4, res_blocks=1, embed_dim=16)
        bundle = build_models(arch, seed=0)
        rng = np.random.default_rng(5)
        real = Tensor(rng.uniform(-1, 1, size=(2, 3, 16, 16)).astype(np.float32))
        fake = Tensor(rng.uniform(-1, 1, size=(2, 3, 16, 16)).astype(np.float32))
        d = bundle.discriminators["d"]
        with Tape() as tape:
            loss = discriminator_loss(d(real), d(fake))
        tape.backward(loss)
        disc = bundle.discriminator_params()
        assert {k for k, p in disc.items() if p.grad is not None} == set(disc)


def test_phase_parity_component_names():
    """Swapping the target stream must not change the loss graph shape."""
    arch = ArchConfig(kind="cut", image_size=16, base_width=4, res_blocks=1, embed_dim=16)
    bundle = build_models(arch, seed=0)
    rng = np.random.default_rng(6)
    weights = LossWeights(num_patches=4)

    def component_names(target):
        g, d, f = bundle.generators["g"], bundle.discriminators["d"], bundle.encoder
        src = Tensor(rng.uniform(-1, 1, size=(1, 3, 16, 16)).astype(np.float32))
        with Tape():
            fake = g(src)
            idx = f.sample_patch_indices(1, 4, rng)
            q = f.extract_patch_features(fake, idx)
            k = f.extract_patch_features(src, idx)
            qi = f.extract_patch_features(g(target), idx)
            ki = f.extract_patch_features(target, idx)
            parts = {
                "adv": adversarial_loss(d(fake), True),
                "nce": patch_nce_loss(q[0], k[0], weights.nce_temperature),
                "nce_idt": patch_nce_loss(qi[0], ki[0], weights.nce_temperature),
            }
            components, _ = compose_total_loss("cut", parts, weights)
        return set(components)

    rgb_target = Tensor(rng.uniform(-1, 1, size=(1, 3, 16, 16)).astype(np.float32))
    semantic_target = Tensor(rng.choice([-1.0, 0.0, 1.0], size=(1, 3, 16, 16)).astype(np.float32))
    assert component_names(rgb_target) == component_names(semantic_target)
