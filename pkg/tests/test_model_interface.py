import warnings
from concurrent.futures import ThreadPoolExecutor

import pytest
import torch

from mixattack.attacks import cw_attack, mix_attack
from mixattack.attacks.common import scale_augmented_gradient
from mixattack.config import InputSpec, LossKind, LossSpec, ModelRegistry, RegistryEntry, Task, make_attack_config
from mixattack.errors import ArgumentError, ConfigurationError, DimensionError
from mixattack.model_interface import (
    ModelHandle,
    evaluate_loss,
    extract_features,
    input_gradient,
    predict_logits,
    resolve_model,
)
from mixattack.reference_models import (
    finite_diff_gradient,
    make_toy_classifier,
    sample_coordinates,
    save_weights,
    toy_classifier_network,
    train_toy,
)


def assert_matches_finite_differences(model, loss, image, **kwargs):
    analytic = input_gradient(model, loss, image, **kwargs)
    coords = sample_coordinates(image.shape, 100, seed=11)
    numeric = finite_diff_gradient(model, loss, image, step=1e-3, coords=coords, **kwargs)
    for c in coords:
        a, n = float(analytic[c]), float(numeric[c])
        assert abs(a - n) <= 1e-4 * abs(n) + 1e-6, (c, a, n)
    assert analytic.shape == image.shape


def test_predict_logits_shapes_and_determinism(classifier, segmenter):
    zero = torch.zeros((32, 32, 3), dtype=torch.float64)
    logits = predict_logits(classifier, zero)
    assert logits.shape == (4,)
    assert torch.isfinite(logits).all()
    assert torch.equal(logits, predict_logits(classifier, zero))
    assert predict_logits(segmenter, zero).shape == (8, 8, 6)


def test_softmax_of_logits_sums_to_one(classifier, random_image):
    p = torch.softmax(predict_logits(classifier, random_image()), dim=-1)
    assert float(p.sum()) == pytest.approx(1.0, abs=1e-6)


def test_wrong_input_size_is_dimension_error(classifier, segmenter):
    with pytest.raises(DimensionError):
        predict_logits(classifier, torch.zeros((28, 28, 3)))
    with pytest.raises(DimensionError):
        predict_logits(classifier, torch.zeros((32, 32, 1)))
    with pytest.raises(DimensionError):
        predict_logits(segmenter, torch.zeros((30, 30, 3)))


def test_feature_tap_defaults_to_first_pooling_layer(classifier, random_image):
    assert classifier.feature_tap == "pool1"
    features = extract_features(classifier, random_image())
    assert features.shape == (16, 16, 8)
    assert (features >= 0).all()


def test_zero_image_with_zero_biases_gives_zero_features():
    model = make_toy_classifier(seed=3)
    with torch.no_grad():
        for module in model.network.modules():
            if getattr(module, "bias", None) is not None:
                module.bias.zero_()
    features = extract_features(model, torch.zeros((32, 32, 3), dtype=torch.float64))
    assert torch.count_nonzero(features) == 0


def test_unknown_feature_tap():
    network = toy_classifier_network().double()
    with pytest.raises(ConfigurationError):
        ModelHandle(network, "bad", Task.classification, InputSpec(height=32, width=32), feature_tap="pool9")


def test_named_feature_tap(random_image):
    model = make_toy_classifier(seed=0, feature_tap="pool2")
    assert extract_features(model, random_image()).shape == (8, 8, 16)


def test_handle_is_safe_across_threads(classifier, random_image):
    images = [random_image() for _ in range(8)]
    serial = [extract_features(classifier, x) for x in images]
    with ThreadPoolExecutor(max_workers=4) as pool:
        parallel = list(pool.map(lambda x: extract_features(classifier, x), images))
    for a, b in zip(serial, parallel):
        assert torch.equal(a, b)


def test_ce_gradient_matches_finite_differences(classifier, random_image):
    assert_matches_finite_differences(classifier, LossSpec(kind=LossKind.ce), random_image(), label=1)


def test_mix_and_total_gradients_match_finite_differences(classifier, random_image):
    image, other = random_image(), random_image()
    virtual = extract_features(classifier, other)
    assert_matches_finite_differences(classifier, LossSpec(kind=LossKind.mix), image, virtual_features=virtual)
    assert_matches_finite_differences(
        classifier, LossSpec(kind=LossKind.total, beta=0.005), image, label=2, virtual_features=virtual
    )


def test_segmentation_gradients_match_finite_differences(segmenter, scenes):
    image = scenes.images[0]
    label, mask = scenes.labels[0], scenes.valid_mask(0)
    virtual = extract_features(segmenter, scenes.images[1])
    assert_matches_finite_differences(segmenter, LossSpec(kind=LossKind.seg_ce), image, label=label, valid_mask=mask)
    assert_matches_finite_differences(
        segmenter,
        LossSpec(kind=LossKind.total_seg, beta=0.0005),
        image,
        label=label,
        virtual_features=virtual,
        valid_mask=mask,
    )


def test_gradcheck_agrees_on_small_segmenter_input(segmenter, scenes):
    image = scenes.images[2][:8, :8].clone().requires_grad_(True)
    label = scenes.labels[2][:8, :8]
    loss = LossSpec(kind=LossKind.seg_ce, mask_background=False)
    assert torch.autograd.gradcheck(lambda x: evaluate_loss(segmenter, loss, x, label), (image,), eps=1e-4, atol=1e-6)


def test_total_gradient_is_weighted_sum(classifier, random_image):
    image = random_image()
    virtual = extract_features(classifier, random_image())
    beta = 0.0005
    g_total = input_gradient(classifier, LossSpec(kind=LossKind.total, beta=beta), image, 0, virtual)
    g_mix = input_gradient(classifier, LossSpec(kind=LossKind.mix), image, virtual_features=virtual)
    g_ce = input_gradient(classifier, LossSpec(kind=LossKind.ce), image, 0)
    assert torch.allclose(g_total, g_mix + beta * g_ce, atol=1e-6)


def test_mix_loss_is_stationary_at_own_features(classifier, random_image):
    image = random_image()
    own = extract_features(classifier, image)
    grad = input_gradient(classifier, LossSpec(kind=LossKind.mix), image, virtual_features=own)
    assert float(grad.abs().max()) < 1e-10


def test_missing_inputs_are_argument_errors(classifier, random_image):
    image = random_image()
    with pytest.raises(ArgumentError):
        input_gradient(classifier, LossSpec(kind=LossKind.mix), image)
    with pytest.raises(ArgumentError):
        input_gradient(classifier, LossSpec(kind=LossKind.ce), image)
    with pytest.raises(ArgumentError):
        input_gradient(classifier, LossSpec(kind=LossKind.seg_ce), image, 0)


def test_resolve_builtin_and_registry_models(tmp_path):
    a = resolve_model("toy:cls:5")
    b = make_toy_classifier(seed=5)
    x = torch.full((32, 32, 3), 100.0, dtype=torch.float64)
    assert torch.equal(predict_logits(a, x), predict_logits(b, x))
    assert resolve_model("toy:seg:1").task == Task.segmentation

    trained = make_toy_classifier(seed=9, width=4)
    save_weights(trained, tmp_path / "models" / "m.bin")
    registry_path = tmp_path / "registry.json"
    registry = ModelRegistry(
        models={"victim": RegistryEntry(architecture="toy_classifier", seed=0, width=4, weights="models/m.bin")}
    )
    registry_path.write_text(registry.model_dump_json())
    loaded = resolve_model("victim", ModelRegistry.load(registry_path))
    assert loaded.model_id == "victim"
    assert torch.equal(predict_logits(loaded, x), predict_logits(trained, x))


@pytest.mark.parametrize("model_id", ["resnet18", "toy:cls:x", "toy:mlp:0"])
def test_unknown_model_ids(model_id):
    with pytest.raises(ConfigurationError):
        resolve_model(model_id)


def test_scalar_reads_of_graph_tensors_do_not_warn(classifier, random_image, small_set):
    image, other = random_image(), random_image()
    virtual = extract_features(classifier, other)
    total = LossSpec(kind=LossKind.total, beta=0.005)
    with warnings.catch_warnings():
        warnings.simplefilter("error", UserWarning)
        input_gradient(classifier, total, image, 1, virtual)
        scale_augmented_gradient(classifier, total, image, 1, virtual, m=3)
        cw_attack(classifier, image, 1, iterations=2)
        mix_attack(classifier, image, 1, other, make_attack_config(method="mixup", iterations=2))
        train_toy(make_toy_classifier(seed=5), small_set, epochs=1, seed=0)
