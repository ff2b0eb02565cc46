import math
import warnings
from collections import OrderedDict

import pytest
import torch
from torch import nn

from mixattack.attacks import (
    accumulate_momentum,
    attack_batch,
    clip_valid,
    cw_attack,
    fgsm,
    ifgsm,
    mix_attack,
    normalized_step,
    run_attack,
    scale_augmented_gradient,
)
from mixattack.attacks.common import tiled_loss_and_gradient
from mixattack.config import AttackMethod, InputSpec, LossKind, LossSpec, Task, make_attack_config
from mixattack.errors import ArgumentError
from mixattack.metrics import success_rate
from mixattack.model_interface import ModelHandle, input_gradient, loss_and_gradient, predict_logits
from mixattack.reference_models import make_toy_classifier
from mixattack.virtual_samples import build_virtual_sample

ALL_METHODS = [m.value for m in AttackMethod]


def linear_softmax_model(weights):
    """Two-class linear softmax on a 1x1 RGB image: logits = W x / 255 + b."""
    network = nn.Sequential(
        OrderedDict(
            [
                ("pool", nn.AdaptiveAvgPool2d(1)),
                ("flatten", nn.Flatten()),
                ("fc", nn.Linear(3, 2)),
            ]
        )
    ).double()
    with torch.no_grad():
        network.fc.weight.copy_(torch.tensor(weights, dtype=torch.float64))
        network.fc.bias.zero_()
    return ModelHandle(network, "linear", Task.classification, InputSpec(height=1, width=1))


@pytest.fixture
def zero_model():
    model = make_toy_classifier(seed=0)
    with torch.no_grad():
        for p in model.network.parameters():
            p.zero_()
    return model


@pytest.fixture(scope="module")
def virtual(virtual_source):
    return build_virtual_sample(virtual_source, "mixcut", 10, seed=42, size=(32, 32))[0]


def test_clip_valid():
    x = torch.tensor([256.3, -1.0, 17.5], dtype=torch.float64)
    assert clip_valid(x).tolist() == [255.0, 0.0, 17.5]
    y = torch.tensor([0.0, 128.0, 255.0], dtype=torch.float64)
    assert torch.equal(clip_valid(y), y)


def test_fgsm_zero_gradient_leaves_image(zero_model, random_image):
    x = random_image()
    for norm in ("sign", "l2", "linf"):
        result = fgsm(zero_model, x, 0, 1.0, norm)
        assert torch.equal(result.adversarial, x)
        assert result.flagged


def test_fgsm_sign_matches_closed_form():
    w = [[0.3, -0.2, 0.5], [-0.4, 0.1, 0.8]]
    model = linear_softmax_model(w)
    x = torch.full((1, 1, 3), 128.0, dtype=torch.float64)
    result = fgsm(model, x, 0, epsilon=1.0)
    # d CE / dx = p_1 (w_1 - w_0) / 255 for true class 0
    expected = torch.sign(torch.tensor(w[1]) - torch.tensor(w[0])).to(torch.float64)
    assert torch.equal(result.perturbation.reshape(-1), expected)


def test_fgsm_budget_is_exact_on_mid_range_image(classifier, random_image):
    # integer pixels keep x + 1 - x exact
    result = fgsm(classifier, torch.round(random_image()), 1, epsilon=1.0)
    assert result.linf == 1.0
    for norm in ("l2", "linf"):
        assert fgsm(classifier, random_image(), 1, 1.0, norm).linf <= 1.0 + 1e-12


def test_ifgsm_single_step_equals_fgsm(classifier, random_image):
    x = random_image()
    assert torch.equal(ifgsm(classifier, x, 2, alpha=1.0, iterations=1).adversarial, fgsm(classifier, x, 2, 1.0).adversarial)


def test_ifgsm_matches_scripted_loop_on_linear_model():
    w = [[0.3, -0.2, 0.5], [-0.4, 0.1, 0.9]]
    model = linear_softmax_model(w)
    x = torch.tensor([[[100.0, 3.0, 250.0]]], dtype=torch.float64)
    direction = torch.sign(torch.tensor(w[1]) - torch.tensor(w[0])).to(torch.float64)
    expected = x.clone()
    for _ in range(5):
        expected = torch.clamp(expected + direction, 0.0, 255.0)
    result = ifgsm(model, x, 0, alpha=1.0, iterations=5)
    assert torch.equal(result.adversarial, expected)
    assert len(result.trace) == 5


def test_cw_without_classification_term_stays_put(classifier, random_image):
    x = random_image()
    result = cw_attack(classifier, x, 0, mu=0.0, alpha=1.0, iterations=5)
    assert result.linf <= 1.0
    distances = [step.loss for step in result.trace]
    assert all(b <= a + 1e-12 for a, b in zip(distances[1:], distances[2:]))


def test_cw_with_large_weight_follows_ifgsm(classifier, random_image):
    x = random_image()
    cw = cw_attack(classifier, x, 3, mu=1e6, alpha=1.0, iterations=1)
    baseline = ifgsm(classifier, x, 3, alpha=1.0, iterations=1)
    agree = (torch.sign(cw.perturbation) == torch.sign(baseline.perturbation)).double().mean()
    assert float(agree) >= 0.99


def test_cw_rejects_negative_weight(classifier, random_image):
    with pytest.raises(ArgumentError):
        cw_attack(classifier, random_image(), 0, mu=-1.0)


def test_scale_augmentation_single_copy_is_plain_gradient(classifier, random_image):
    x = random_image()
    loss = LossSpec(kind=LossKind.ce)
    assert torch.equal(scale_augmented_gradient(classifier, loss, x, 1, m=1), input_gradient(classifier, loss, x, 1))


def test_scale_augmentation_averages_chain_ruled_gradients(classifier, random_image):
    x = random_image()
    loss = LossSpec(kind=LossKind.ce)
    expected = sum(input_gradient(classifier, loss, x / 2**i, 0) / 2**i for i in range(3)) / 3
    got = scale_augmented_gradient(classifier, loss, x, 0, m=3)
    assert got.shape == x.shape
    assert torch.allclose(got, expected, atol=1e-12, rtol=1e-9)


def test_momentum_hand_case():
    g = accumulate_momentum(torch.zeros(2, dtype=torch.float64), torch.tensor([1.0, -1.0], dtype=torch.float64))
    assert g.tolist() == [0.5, -0.5]
    x, skipped = normalized_step(torch.tensor([10.0, 10.0], dtype=torch.float64), g, alpha=1.0)
    assert x.tolist() == [11.0, 9.0] and not skipped


def test_momentum_is_colinear_for_constant_gradient():
    gen = torch.Generator().manual_seed(0)
    grad = torch.randn(50, generator=gen, dtype=torch.float64)
    g = torch.zeros_like(grad)
    plain = grad / grad.abs().max()
    for _ in range(5):
        g = accumulate_momentum(g, grad)
        step = g / g.abs().max()
        cosine = torch.dot(step, plain) / (step.norm() * plain.norm())
        assert float(cosine) == pytest.approx(1.0, abs=1e-9)


def test_zero_gradient_leaves_momentum_and_skips_step():
    g = torch.zeros(3, dtype=torch.float64)
    assert torch.equal(accumulate_momentum(g, torch.zeros(3, dtype=torch.float64)), g)
    x = torch.ones(3, dtype=torch.float64)
    same, skipped = normalized_step(x, g, 1.0)
    assert skipped and torch.equal(same, x)


@pytest.mark.parametrize("method", ["mixup", "mixcut"])
def test_mix_attack_first_step_same_with_and_without_momentum(classifier, random_image, virtual, method):
    x = random_image()
    on = mix_attack(classifier, x, 1, virtual, make_attack_config(method=method, iterations=1))
    off = mix_attack(classifier, x, 1, virtual, make_attack_config(method=method, iterations=1, momentum=False))
    assert torch.allclose(on.adversarial, off.adversarial, atol=1e-9, rtol=0)


def test_mix_attack_is_deterministic_and_within_budget(classifier, random_image, virtual):
    x = random_image()
    config = make_attack_config(method="mixcut")
    a = mix_attack(classifier, x, 0, virtual, config)
    b = mix_attack(classifier, x, 0, virtual, config)
    assert torch.equal(a.adversarial, b.adversarial)
    assert a.linf <= 5.0 + 1e-9
    assert len(a.trace) == 5 and a.final_ce is not None
    assert torch.allclose(a.adversarial, clip_valid(x + a.perturbation), atol=1e-9, rtol=0)


def test_mix_attack_zero_gradient_is_flagged(zero_model, random_image, virtual):
    x = random_image()
    result = mix_attack(zero_model, x, 0, virtual, make_attack_config(method="mixup"))
    assert torch.equal(result.adversarial, x)
    assert result.flagged and all(step.skipped for step in result.trace)


def test_mix_attack_needs_virtual(classifier, random_image):
    with pytest.raises(ArgumentError):
        mix_attack(classifier, random_image(), 0, None, make_attack_config(method="mixup"))


def test_ce_only_mix_attack_needs_no_virtual(classifier, random_image):
    config = make_attack_config(method="mixup", include_mix=False)
    assert mix_attack(classifier, random_image(), 0, None, config).linf <= 5.0


@pytest.mark.parametrize("method", ALL_METHODS)
def test_linf_budget_for_every_method(classifier, virtual, method):
    gen = torch.Generator().manual_seed(ALL_METHODS.index(method))
    config = make_attack_config(method=method)
    for _ in range(50):
        # full range so clipping is active near 0 and 255
        x = 255.0 * torch.rand((32, 32, 3), generator=gen, dtype=torch.float64)
        result = run_attack(classifier, x, int(torch.randint(0, 4, (1,), generator=gen)), config, virtual)
        assert result.linf <= config.budget + 1e-9
        assert float(result.adversarial.min()) >= 0.0 and float(result.adversarial.max()) <= 255.0


def test_segmentation_attacks_respect_budget(segmenter, scenes):
    source = scenes.subset(range(10))
    virtual, _ = build_virtual_sample(source, "mixup", 10, seed=1, size=(32, 32))
    for method in ("ifgsm", "mixup"):
        config = make_attack_config(method=method)
        result = run_attack(segmenter, scenes.images[10], scenes.labels[10], config, virtual, scenes.valid_mask(10))
        assert result.linf <= 5.0 + 1e-9


def test_tiled_gradient_matches_direct_gradient_for_one_tile(segmenter, scenes):
    loss = LossSpec(kind=LossKind.seg_ce)
    image, label, mask = scenes.images[0], scenes.labels[0], scenes.valid_mask(0)
    value, grad = tiled_loss_and_gradient(segmenter, loss, image, label, None, mask, tile=64, overlap=16)
    direct_value, direct = loss_and_gradient(segmenter, loss, image, label, valid_mask=mask)
    assert value == pytest.approx(direct_value, rel=1e-12)
    assert torch.allclose(grad, direct, atol=1e-15)


def test_large_segmentation_image_is_attacked_per_tile(segmenter):
    gen = torch.Generator().manual_seed(8)
    image = 255.0 * torch.rand((48, 48, 3), generator=gen, dtype=torch.float64)
    label = torch.randint(0, 6, (48, 48), generator=gen)
    virtual = 255.0 * torch.rand((48, 48, 3), generator=gen, dtype=torch.float64)
    config = make_attack_config(method="mixcut", tile=32, tile_overlap=16)
    result = mix_attack(segmenter, image, label, virtual, config, label != 5)
    assert result.adversarial.shape == image.shape
    assert result.linf <= 5.0 + 1e-9
    assert all(step.ce is None for step in result.trace)
    assert result.final_ce is None
    untiled = mix_attack(segmenter, image[:32, :32], label[:32, :32], virtual[:32, :32], config, label[:32, :32] != 5)
    assert all(step.ce is not None for step in untiled.trace)


def test_attack_batch_order_determinism_and_jobs(classifier, small_set, virtual_source):
    config = make_attack_config(method="mixup")
    assert attack_batch(classifier, small_set.subset([]), config, virtual_source=virtual_source) == []
    first = attack_batch(classifier, small_set, config, virtual_source=virtual_source)
    second = attack_batch(classifier, small_set, config, virtual_source=virtual_source, jobs=3)
    assert [r.name for r in first] == small_set.names
    assert len(first) == len(small_set)
    for a, b in zip(first, second):
        assert torch.equal(a.adversarial, b.adversarial)


def test_attack_batch_records_failures(classifier, small_set):
    images = list(small_set.images)
    images[1] = torch.zeros((16, 16, 3), dtype=torch.float64)
    broken = small_set.with_images(images)
    results = attack_batch(classifier, broken, make_attack_config(method="ifgsm"))
    assert results[1].error is not None
    assert torch.equal(results[1].adversarial, images[1])
    assert all(r.error is None for i, r in enumerate(results) if i != 1)


def test_attack_batch_resamples_virtual_per_image(classifier, small_set, virtual_source):
    config = make_attack_config(method="mixcut", resample_virtual=True, iterations=2)
    results = attack_batch(classifier, small_set.subset(range(3)), config, virtual_source=virtual_source)
    assert all(r.error is None for r in results)
    with pytest.raises(ArgumentError):
        attack_batch(classifier, small_set, config)


@pytest.mark.slow
def test_white_box_success_rates(trained_classifier, toy_split, virtual_source):
    _, test = toy_split
    assert len(test) == 100

    def sr(config):
        results = attack_batch(trained_classifier, test, config, virtual_source=virtual_source)
        predictions = [int(torch.argmax(predict_logits(trained_classifier, r.adversarial))) for r in results]
        return success_rate(predictions, test.labels)

    assert sr(make_attack_config(method="ifgsm")) >= 0.80
    assert sr(make_attack_config(method="mixup")) >= 0.60
    assert sr(make_attack_config(method="mixcut")) >= 0.60
    cw_rate = sr(make_attack_config(method="cw"))
    if cw_rate < 0.80:
        warnings.warn(f"C&W white-box success rate {cw_rate:.2f} below 0.80")


@pytest.mark.slow
@pytest.mark.advisory
def test_ce_trace_mostly_nondecreasing(trained_classifier, toy_split, virtual_source):
    _, test = toy_split
    monotone = 0
    for seed in range(5):
        virtual, _ = build_virtual_sample(virtual_source, "mixup", 10, seed=seed, size=(32, 32))
        config = make_attack_config(method="mixup", seed=seed)
        result = mix_attack(trained_classifier, test.images[seed], test.labels[seed], virtual, config)
        ces = [step.ce for step in result.trace] + [result.final_ce]
        monotone += all(b >= a - 1e-12 for a, b in zip(ces, ces[1:]))
    if monotone < 4:
        warnings.warn(f"CE trace nondecreasing for {monotone}/5 seeds")
    assert math.isfinite(result.final_ce)
