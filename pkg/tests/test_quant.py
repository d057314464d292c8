import numpy as np
import pytest

from ansguard.attacks import AttackSpec, attack_dataset
from ansguard.detector import DetectorSchedule, build_activation_dataset, train_detector
from ansguard.errors import ConfigError
from ansguard.quant import (
    DetectionPipeline,
    QuantConfig,
    SweepRow,
    find_knee,
    quant_sweep,
    quantization_step,
    quantize_tensor,
    quantized_copy,
    quantized_forward,
    write_sweep_csv,
)
from ansguard.tensor import Tensor, no_grad


def test_quantization_is_idempotent_and_bounded():
    rng = np.random.default_rng(7)
    for trial in range(10_000):
        bits = int(rng.integers(1, 17))
        dtype = np.float64 if trial % 2 else np.float32
        t = (rng.normal(size=int(rng.integers(1, 12))) * rng.uniform(0.01, 10)).astype(dtype)
        q = quantize_tensor(t, bits)
        np.testing.assert_array_equal(quantize_tensor(q, bits), q)
        if bits > 1 and dtype == np.float64:
            step = quantization_step(t, bits)
            assert np.max(np.abs(q - t)) <= step / 2 * (1 + 1e-9) + 1e-12


def test_one_bit_keeps_sign_times_max():
    q = quantize_tensor(np.array([-0.5, 0.25, 0.0, 2.0]), 1)
    np.testing.assert_array_equal(q, [-2.0, 2.0, 0.0, 2.0])


def test_zero_tensor_and_bad_width():
    np.testing.assert_array_equal(quantize_tensor(np.zeros(3), 4), np.zeros(3))
    with pytest.raises(ConfigError):
        quantize_tensor(np.ones(3), 0)
    assert isinstance(quantize_tensor(Tensor(np.ones(2)), 4), Tensor)


def test_quant_config_parsing():
    assert QuantConfig.parse("12:1") == QuantConfig(12, 1)
    assert QuantConfig.parse("float:8") == QuantConfig(None, 8)
    for bad in ("12", "a:b", "17:1"):
        with pytest.raises(ConfigError):
            QuantConfig.parse(bad)
    assert QuantConfig.for_case("det_only", 4) == QuantConfig(None, 4)
    with pytest.raises(ConfigError):
        QuantConfig.for_case("weights", 4)


def test_quantized_copy_leaves_original(trained_tiny, synthetic_test):
    before = [p.data.copy() for p in trained_tiny.parameters()]
    twin = quantized_copy(trained_tiny, 2)
    for old, p in zip(before, trained_tiny.parameters()):
        np.testing.assert_array_equal(old, p.data)
    assert any(not np.array_equal(a.data, b.data) for a, b in zip(twin.parameters(), trained_tiny.parameters()))
    with no_grad():
        full = trained_tiny.forward(synthetic_test.images).data
        sixteen = quantized_forward(trained_tiny, synthetic_test.images, QuantConfig(16, None))
        unchanged = quantized_forward(trained_tiny, synthetic_test.images, QuantConfig())
    np.testing.assert_array_equal(unchanged, full)
    np.testing.assert_allclose(sixteen, full, atol=1e-2)


@pytest.fixture(scope="module")
def pipeline(trained_tiny, synthetic_train, synthetic_test):
    spec = AttackSpec.create("fgsm", 0.3)
    train_set, _ = build_activation_dataset(
        trained_tiny, synthetic_train.images, synthetic_train.labels, 1, spec, 128, 16, seed=1
    )
    detector = train_detector(train_set, DetectorSchedule(phases=((10, 0.03),), batch=32), seed=1, hidden=16).detector
    x, y = synthetic_test.images[:48], synthetic_test.labels[:48]
    return DetectionPipeline(trained_tiny, detector, 1, x, y, attack_dataset(trained_tiny, x, y, spec, seed=2))


def test_sweep_keeps_requested_order(pipeline):
    rows = quant_sweep(pipeline, [8, 4, 1], cases=("det_only", "both"))
    assert [(r.case, r.bits) for r in rows] == [
        ("det_only", 8), ("det_only", 4), ("det_only", 1),
        ("both", 8), ("both", 4), ("both", 1),
    ]
    reference_auc, reference_acc = pipeline.evaluate(QuantConfig())
    det16 = pipeline.evaluate(QuantConfig(None, 16))
    assert det16[0] == pytest.approx(reference_auc, abs=0.01)
    assert det16[1] == reference_acc
    assert all(0.0 <= r.auc <= 1.0 for r in rows)


def test_find_knee():
    aucs = [0.99, 0.99, 0.985, 0.7, 0.5]
    rows = [SweepRow("det_only", b, a, 1.0) for b, a in zip([8, 6, 4, 2, 1], aucs)]
    assert find_knee(rows, "det_only", "auc", 0.99) == 4
    assert find_knee(rows, "det_only", "auc", 0.5, tolerance=0.1) == 1
    assert find_knee(rows, "det_only", "auc", 1.5) is None


def test_sweep_csv(tmp_path):
    path = tmp_path / "sweep.csv"
    write_sweep_csv(path, [SweepRow("both", 3, 0.8, 0.9)])
    assert path.read_text().splitlines() == ["case,bits,auc,clean_acc", "both,3,0.8,0.9"]
