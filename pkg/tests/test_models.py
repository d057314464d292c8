import numpy as np
import pytest

from ansguard.datasets import synthetic_gaussians
from ansguard.detector import Detector, save_detector
from ansguard.errors import CheckpointError, ConfigError, DivergenceError, ShapeError
from ansguard.models import (
    SCHEDULES,
    Schedule,
    accuracy_on,
    build,
    capture_activations,
    evaluate_accuracy,
    forward_capture,
    inspect_header,
    load_model,
    save_model,
    train,
)
from ansguard.tensor import no_grad


def test_lenet_layer_dimensions():
    model = build("lenet", seed=0)
    assert model.conv_count == 2
    assert model.activation_dims(1) == (6, 24, 24)
    assert model.activation_dims(2) == (16, 8, 8)
    with no_grad():
        logits = model.forward(np.zeros((3, 1, 28, 28)))
    assert logits.shape == (3, 10)


def test_cifar_architectures_without_parameters():
    vgg = build("vgg19_cifar", materialize=False)
    assert vgg.conv_count == 16
    assert not vgg.materialized
    assert vgg.activation_dims(16) == (512, 2, 2)
    with pytest.raises(ConfigError):
        vgg.forward(np.zeros((1, 3, 32, 32)))

    resnet = build("resnet18_cifar", materialize=False)
    assert resnet.conv_count == 17
    assert resnet.activation_dims(5) == (64, 32, 32)
    assert resnet.activation_dims(6) == (128, 16, 16)
    assert resnet.activation_dims(17) == (512, 4, 4)
    shortcuts = [n for n in resnet.layers if n.kind == "conv" and n.conv_index is None]
    assert len(shortcuts) == 3


def test_build_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        build("alexnet")
    with pytest.raises(ConfigError):
        build("tiny_cnn", classes=1)
    with pytest.raises(ConfigError):
        build("tiny_cnn").capture_node(3)


def test_input_shape_is_checked():
    model = build("tiny_cnn", classes=2)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 1, 9, 9)))


def test_split_forward_equals_full_forward(rng):
    model = build("lenet", seed=3)
    x = rng.uniform(0, 1, (4, 1, 28, 28)).astype(np.float32)
    with no_grad():
        full, acts = model.forward_all(x)
        for layer in (1, 2):
            logits, act = forward_capture(model, x, layer)
            np.testing.assert_array_equal(logits.data, full.data)
            np.testing.assert_array_equal(act.data, acts[layer - 1].data)


def test_resnet_residual_capture_resumes_exactly(rng):
    model = build("resnet18_cifar", seed=1)
    x = rng.uniform(0, 1, (1, 3, 32, 32)).astype(np.float32)
    with no_grad():
        full = model.forward(x)
        partial = model.run_until(x, 3)
        resumed = model.resume(partial)
    np.testing.assert_array_equal(resumed.data, full.data)
    assert partial.activation.shape == (1, 64, 32, 32)


def test_prefix_and_suffix_partition_layers():
    model = build("lenet", materialize=False)
    prefix, suffix = model.prefix_layers(1), model.suffix_layers(1)
    assert prefix + suffix == tuple(n.id for n in model.layers)
    assert model.node(prefix[-1]).kind == "relu"


def test_channel_masks_zero_the_capture(rng):
    model = build("tiny_cnn", classes=2, seed=2)
    x = rng.uniform(0, 1, (2, 1, 8, 8))
    with no_grad():
        _, acts = model.forward_all(x, masks={1: np.zeros(4)})
    assert not np.any(acts[0].data)


def test_capture_activations_flattens_rows(synthetic):
    model = build("tiny_cnn", classes=2)
    rows = capture_activations(model, synthetic.images, 2, batch_size=10)
    assert rows.shape == (len(synthetic), 8 * 8 * 8)


def test_training_fits_separable_data(trained_tiny, synthetic_test):
    assert evaluate_accuracy(trained_tiny, synthetic_test) >= 0.9
    assert trained_tiny.epoch == SCHEDULES["tiny_cnn"].epochs


def test_training_is_reproducible(synthetic):
    schedule = Schedule(epochs=2, lr=0.05, momentum=0.9, batch=16)
    a, b = build("tiny_cnn", classes=2, seed=4), build("tiny_cnn", classes=2, seed=4)
    history = train(a, synthetic, schedule, seed=8).history
    train(b, synthetic, schedule, seed=8)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
    assert [h.epoch for h in history] == [1, 2]


def test_divergence_restores_last_good_state(synthetic):
    model = build("tiny_cnn", classes=2, seed=4)
    model.layers[-1].params["bias"].data[0] = np.nan
    before = model.state_arrays()
    with pytest.raises(DivergenceError) as err:
        train(model, synthetic, Schedule(epochs=2, lr=0.05, batch=16))
    assert err.value.last_good_epoch == 0
    for (_, old), (_, new) in zip(before, model.state_arrays()):
        np.testing.assert_array_equal(old, new)


def test_schedule_decay_and_validation():
    schedule = Schedule(lr=0.1, lr_decay=0.1, step_size=70)
    assert schedule.lr_at(69) == pytest.approx(0.1)
    assert schedule.lr_at(70) == pytest.approx(0.01)
    assert schedule.lr_at(140) == pytest.approx(0.001)
    with pytest.raises(ConfigError):
        Schedule(epochs=0).validate()


def test_save_and_load_model(tmp_path, trained_tiny, synthetic_test):
    path = tmp_path / "model.ckpt"
    save_model(trained_tiny, path, metrics={"test_accuracy": 1.0})
    loaded = load_model(path)
    assert loaded.epoch == trained_tiny.epoch
    assert inspect_header(path)["metrics"]["test_accuracy"] == 1.0
    before = accuracy_on(trained_tiny, synthetic_test.images, synthetic_test.labels)
    assert accuracy_on(loaded, synthetic_test.images, synthetic_test.labels) == before
    with no_grad():
        np.testing.assert_array_equal(
            loaded.forward(synthetic_test.images[:5]).data,
            trained_tiny.forward(synthetic_test.images[:5]).data,
        )


def test_load_model_rejects_other_artifacts(tmp_path):
    path = tmp_path / "det.ckpt"
    save_detector(Detector(16, 4, 1), path)
    with pytest.raises(CheckpointError):
        load_model(path)


def test_load_state_arrays_checks_names():
    model = build("tiny_cnn", classes=2)
    with pytest.raises(CheckpointError):
        model.load_state_arrays({"1.weight": np.zeros(1)})


def test_clone_is_independent():
    model = build("tiny_cnn", classes=2)
    twin = model.clone()
    twin.parameters()[0].data += 1
    assert not np.array_equal(twin.parameters()[0].data, model.parameters()[0].data)


def test_synthetic_helper_shape_matches_tiny_cnn():
    data = synthetic_gaussians(n=4)
    assert data.input_shape == build("tiny_cnn", classes=2).in_shape
