import numpy as np
import pytest

from src.attacks.dispatch import (AttackSpec, apply_attack, load_attacked, parse_attack, parse_sweep,
                                  save_attacked, sidecar_path)
from src.attacks.finetune import FinetuneConfig, finetune, transfer
from src.attacks.jpeg import (JpegFilteredModel, LUMA_TABLE, block_dct, block_idct, jpeg_filter,
                              quality_scale, scaled_table)
from src.attacks.pruning import prune
from src.attacks.quantization import (QuantizedModel, affine_params, calibrate, quantize,
                                      symmetric_params)
from src.models.layers import Dense, Softmax
from src.models.network import Model
from src.utils.errors import ConfigurationError, DataError, DomainError


def kernels(model):
    return [v for _, name, v in model.parameters() if name == "kernel"]


def ten_weight_model():
    return Model([Dense(2, None), Softmax()], (5,), 2).build(np.random.default_rng(0))


# ---------- 剪枝 ----------

def test_prune_zero_rate_is_identity(tiny_mlp):
    pruned = prune(tiny_mlp, 0.0, np.random.default_rng(0))
    for a, b in zip(kernels(tiny_mlp), kernels(pruned)):
        assert np.array_equal(a, b)


def test_prune_counts_round_half_up():
    model = ten_weight_model()
    assert np.count_nonzero(kernels(model)[0]) == 10
    half = prune(model, 0.5, np.random.default_rng(1))
    assert np.count_nonzero(kernels(half)[0] == 0) == 5
    quarter = prune(model, 0.25, np.random.default_rng(1))
    assert np.count_nonzero(kernels(quarter)[0] == 0) == 3
    # 偏置不参与剪枝，源模型不变
    assert np.array_equal(half.layers[0].params["bias"], model.layers[0].params["bias"])
    assert np.count_nonzero(kernels(model)[0]) == 10


def test_prune_everything_gives_constant_predictions(tiny_mlp, tiny_split):
    pruned = prune(tiny_mlp, 1.0, np.random.default_rng(0))
    assert all(np.all(k == 0) for k in kernels(pruned))
    probs = pruned.predict(tiny_split.test.images)
    assert np.allclose(probs, probs[0])


def test_prune_rate_domain(tiny_mlp):
    with pytest.raises(DomainError):
        prune(tiny_mlp, 1.2, np.random.default_rng(0))
    with pytest.raises(DomainError):
        AttackSpec("prune", rate=-0.1)


def test_prune_is_reproducible_per_rate(tiny_mlp):
    a = apply_attack(tiny_mlp, AttackSpec("prune", rate=0.3, seed=4))
    b = apply_attack(tiny_mlp, AttackSpec("prune", rate=0.3, seed=4))
    for x, y in zip(kernels(a), kernels(b)):
        assert np.array_equal(x, y)


# ---------- 量化 ----------

@pytest.mark.parametrize("mode", ["dynamic", "full_uint8", "full_int8"])
def test_weight_quantization_error_is_at_most_half_a_step(tiny_mlp, tiny_split, mode):
    quantized = quantize(tiny_mlp, mode, tiny_split.validation)
    assert len(quantized.weight_tables) == 2
    for (index, name), table in quantized.weight_tables.items():
        original = tiny_mlp.layers[index].params[name].astype(np.float64)
        error = np.abs(table.dequantize() - original)
        assert error.max() <= table.params.scale / 2 * (1 + 1e-9)
        assert table.codes.min() >= table.params.qmin and table.codes.max() <= table.params.qmax
    # 偏置保持浮点
    assert np.array_equal(quantized.model.layers[1].params["bias"], tiny_mlp.layers[1].params["bias"])


def test_float16_rounds_to_half_precision(tiny_mlp):
    tiny_mlp.layers[1].params["kernel"][0, 0] = 0.1
    tiny_mlp.layers[1].params["kernel"][0, 1] = 1.0
    rounded = quantize(tiny_mlp, "float16").model.layers[1].params["kernel"]
    assert float(rounded[0, 0]) == 0.0999755859375
    assert float(rounded[0, 1]) == 1.0
    assert float(tiny_mlp.layers[1].params["kernel"][0, 0]) == pytest.approx(0.1)


def test_quantization_parameter_helpers():
    p = affine_params(0.5, 2.0, 0, 255)
    assert p.zero_point == 0 and p.scale == pytest.approx(2.0 / 255)
    assert affine_params(0.0, 0.0, 0, 255).scale == 1.0
    s = symmetric_params(np.array([-0.5, 0.125]))
    assert (s.zero_point, s.qmin, s.qmax) == (0, -127, 127)
    assert s.quantize(np.array([-0.5, 0.125])).tolist() == [-127, 32]


def test_full_modes_need_calibration(tiny_mlp):
    with pytest.raises(ConfigurationError):
        quantize(tiny_mlp, "full_int8")
    with pytest.raises(ConfigurationError):
        quantize(tiny_mlp, "int4")
    with pytest.raises(DataError):
        apply_attack(tiny_mlp, parse_attack("uint8"))
    with pytest.raises(ConfigurationError):
        calibrate(tiny_mlp, np.zeros((0, 8, 8, 1)))


def test_calibration_covers_every_boundary_but_the_output(tiny_mlp, tiny_split):
    images = tiny_split.validation.images
    ranges = calibrate(tiny_mlp, images)
    assert sorted(ranges) == list(range(len(tiny_mlp.layers)))
    assert ranges[0] == (float(images.min()), float(images.max()))


def test_uint8_stays_close_to_float(tiny_mlp, tiny_split):
    quantized = quantize(tiny_mlp, "full_uint8", tiny_split.validation)
    images = tiny_split.test.images
    assert np.abs(quantized.predict(images) - tiny_mlp.predict(images)).mean() < 0.05


def test_int8_overflow_policy_changes_outputs(tiny_mlp, tiny_split):
    calibration = tiny_split.validation.images
    wrapped = quantize(tiny_mlp, "full_int8", calibration, overflow="wrap")
    saturated = quantize(tiny_mlp, "full_int8", calibration, overflow="saturate")
    images = tiny_split.test.images
    assert not np.allclose(wrapped.predict(images), saturated.predict(images))
    with pytest.raises(ConfigurationError):
        quantize(tiny_mlp, "full_int8", calibration, overflow="ignore")


def test_int8_activations_clip_by_default():
    model = Model([Dense(2, None), Softmax()], (2,), 2).build(np.random.default_rng(0))
    calibration = np.array([[0.0, 0.0], [1.0, 1.0]])
    quantized = quantize(model, "full_int8", calibration)
    assert quantized.overflow == "saturate"
    table = quantized.activation_tables[0]
    # 仿射参数的步长，零点强制为0
    assert table.zero_point == 0 and table.scale == pytest.approx(1.0 / 255.0)
    x = np.array([[0.2, 1.0]])
    assert quantized._fake_quant(0, x) == pytest.approx(np.array([[51.0, 127.0]]) / 255.0)


def identity_relu_model(num_classes):
    """隐藏层与输出层都是单位矩阵，类别证据全部位于输入范围的上半段"""
    model = Model([Dense(num_classes, "relu"), Dense(num_classes, None), Softmax()],
                  (num_classes,), num_classes).build(np.random.default_rng(0))
    eye = np.eye(num_classes, dtype=np.float32)
    model.layers[0].params["kernel"][...] = eye
    model.layers[1].params["kernel"][...] = 10.0 * eye
    for layer in model.layers[:2]:
        layer.params["bias"][...] = 0.0
    return model


def test_int8_clipping_collapses_a_relu_network_to_chance():
    c = 4
    labels = np.repeat(np.arange(c), 5)
    images = np.full((len(labels), c), 0.6)
    images[np.arange(len(labels)), labels] = 1.0
    model = identity_relu_model(c)

    def accuracy(m):
        return float(np.mean(m.predict(images).argmax(axis=1) == labels))

    assert accuracy(model) == 1.0
    assert accuracy(quantize(model, "float16")) == 1.0
    assert accuracy(quantize(model, "full_uint8", images)) == 1.0
    # 上半段被截断后所有输入都变成同一个向量，预测退化为常数类
    collapsed = quantize(model, "full_int8", images)
    probs = collapsed.predict(images)
    assert np.allclose(probs, probs[0])
    assert accuracy(collapsed) == pytest.approx(1.0 / c)


def test_quantized_model_survives_save_and_load(tiny_mlp, tiny_split, tmp_path):
    spec = parse_attack("int8")
    attacked = apply_attack(tiny_mlp, spec, tiny_split)
    path = str(tmp_path / "int8.mxwm")
    save_attacked(attacked, path, spec)
    loaded = load_attacked(path)
    assert isinstance(loaded, QuantizedModel) and loaded.mode == "full_int8"
    images = tiny_split.test.images[:20]
    np.testing.assert_array_equal(loaded.predict(images), attacked.predict(images))


# ---------- JPEG ----------

def test_block_dct_is_orthonormal_and_invertible():
    blocks = np.random.default_rng(0).uniform(-128, 127, size=(5, 8, 8))
    coefficients = block_dct(blocks)
    assert np.abs(block_idct(coefficients) - blocks).max() < 1e-10
    np.testing.assert_allclose((coefficients ** 2).sum(), (blocks ** 2).sum())


def test_quality_scaling():
    assert quality_scale(55) == 90
    assert quality_scale(10) == 500
    assert quality_scale(50) == 100
    assert scaled_table(LUMA_TABLE, 55)[0, 0] == 14
    assert np.all(scaled_table(LUMA_TABLE, 100) == 1)
    assert scaled_table(LUMA_TABLE, 1).max() == 255


def test_quality_100_is_nearly_lossless():
    image = np.random.default_rng(1).uniform(0, 1, size=(3, 28, 28, 1))
    out = jpeg_filter(image, 100)
    assert out.shape == image.shape
    assert np.abs(out - image).max() <= 2 / 255


@pytest.mark.parametrize("shape", [(16, 16, 1), (32, 32, 3), (28, 28, 3)])
def test_mid_gray_is_a_fixed_point(shape):
    gray = np.full(shape, 128 / 255)
    np.testing.assert_allclose(jpeg_filter(gray, 55), gray, atol=1e-9)


def test_low_quality_is_lossy_but_in_range():
    image = np.random.default_rng(2).uniform(0, 1, size=(2, 32, 32, 3))
    out = jpeg_filter(image, 10)
    assert out.shape == image.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.abs(out - image).mean() > 0.01


def test_jpeg_rejects_bad_quality_and_channels():
    image = np.zeros((8, 8, 1))
    for quality in (0, 101, 55.5):
        with pytest.raises(DomainError):
            jpeg_filter(image, quality)
    with pytest.raises(ConfigurationError):
        jpeg_filter(np.zeros((8, 8, 2)), 55)


def test_jpeg_wrapper_filters_queries(tiny_mlp, tiny_split):
    attacked = apply_attack(tiny_mlp, parse_attack("jpeg:55"))
    assert isinstance(attacked, JpegFilteredModel)
    images = tiny_split.test.images[:10]
    np.testing.assert_allclose(attacked.predict(images), tiny_mlp.predict(jpeg_filter(images, 55)))


# ---------- 微调 / 迁移 ----------

def test_finetune_with_zero_learning_rate_changes_nothing(tiny_mlp, tiny_split):
    tuned = finetune(tiny_mlp, tiny_split, FinetuneConfig(learning_rate=0.0, epochs=1, batch_size=16))
    for (_, _, a), (_, _, b) in zip(tiny_mlp.parameters(), tuned.parameters()):
        assert np.array_equal(a, b)


def test_finetune_works_on_a_copy(tiny_mlp, tiny_split):
    before = [v.copy() for _, _, v in tiny_mlp.parameters()]
    tuned = finetune(tiny_mlp, tiny_split, FinetuneConfig(learning_rate=0.01, epochs=1, batch_size=16))
    assert any(not np.array_equal(a, b) for a, (_, _, b) in zip(before, tuned.parameters()))
    for a, (_, _, b) in zip(before, tiny_mlp.parameters()):
        assert np.array_equal(a, b)


def test_transfer_resets_and_retrains_the_head(tiny_mlp, tiny_split):
    before = tiny_mlp.layers[-2].params["kernel"].copy()
    moved = transfer(tiny_mlp, tiny_split, epochs=1)
    assert moved.layers[-2].params["kernel"].shape == before.shape
    assert not np.array_equal(moved.layers[-2].params["kernel"], before)
    assert np.array_equal(tiny_mlp.layers[-2].params["kernel"], before)


def test_finetune_needs_the_split(tiny_mlp):
    with pytest.raises(DataError):
        apply_attack(tiny_mlp, parse_attack("finetune"))


@pytest.mark.parametrize("second", ["prune:0.3", "f16", "jpeg:90", "finetune"])
@pytest.mark.parametrize("first", ["dyn", "jpeg:55"])
def test_attacked_models_cannot_be_attacked_again(tiny_mlp, tiny_split, first, second):
    attacked = apply_attack(tiny_mlp, parse_attack(first), tiny_split)
    with pytest.raises(ConfigurationError):
        apply_attack(attacked, parse_attack(second), tiny_split)


# ---------- 解析 ----------

@pytest.mark.parametrize("text,kind,label", [
    ("prune:0.3", "prune", "prune:0.3"),
    ("dyn", "quant_dynamic", "dyn"),
    ("uint8", "quant_full_uint8", "uint8"),
    ("int8", "quant_full_int8", "int8"),
    ("float16", "quant_float16", "f16"),
    ("jpeg", "jpeg", "jpeg:55"),
    ("jpeg:30", "jpeg", "jpeg:30"),
    ("finetune", "finetune", "finetune"),
    ("transfer", "transfer", "transfer"),
])
def test_parse_attack(text, kind, label):
    spec = parse_attack(text, seed=3)
    assert (spec.kind, spec.label, spec.seed) == (kind, label, 3)
    assert spec.modifies_inputs == (kind == "jpeg")


@pytest.mark.parametrize("text,error", [
    ("prune:abc", ConfigurationError),
    ("prune:1.5", DomainError),
    ("jpeg:101", DomainError),
    ("finetune:3", ConfigurationError),
    ("gaussian", ConfigurationError),
])
def test_parse_attack_errors(text, error):
    with pytest.raises(error):
        parse_attack(text)


def test_parse_sweep_grid_is_inclusive():
    rates = parse_sweep("prune:0.0..0.9:0.05")
    assert len(rates) == 19
    assert rates[0] == 0.0 and rates[-1] == 0.9
    assert rates[3] == 0.15
    assert parse_sweep("prune:0.2..0.2:0.1") == [0.2]
    with pytest.raises(ConfigurationError):
        parse_sweep("quant:0..1:0.1")
    with pytest.raises(ConfigurationError):
        parse_sweep("prune:0..1:0")
    with pytest.raises(DomainError):
        parse_sweep("prune:0..2:0.5")


def test_plain_models_are_saved_with_a_sidecar(tiny_mlp, tmp_path):
    spec = parse_attack("prune:0.5")
    path = str(tmp_path / "p.mxwm")
    save_attacked(apply_attack(tiny_mlp, spec), path, spec)
    assert (tmp_path / "p.mxwm.attack.json").exists()
    assert sidecar_path(path).endswith(".attack.json")
    loaded = load_attacked(path)
    assert isinstance(loaded, Model)
    assert np.count_nonzero(loaded.layers[1].params["kernel"] == 0) > 0
