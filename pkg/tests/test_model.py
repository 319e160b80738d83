import struct

import numpy as np
import pytest

from kdinterp.distill import TrainConfig, evaluate, train
from kdinterp.errors import ContractError, FormatError, ShapeError
from kdinterp.model import (
    ArchSpec,
    Layer,
    check_weights,
    conv_net,
    forward,
    init_weights,
    load_model,
    predict_logits,
    save_model,
    student_arch,
    teacher_arch,
)


def test_default_architectures():
    s, t = student_arch(), teacher_arch()
    assert s.tap_shape("layer3") == (32, 16, 16)
    assert t.tap_shape("layer3") == (64, 16, 16)
    assert s.param_count() < t.param_count()
    assert s.layer_output_shapes()[-1] == (10,)


def test_arch_validation():
    with pytest.raises(ContractError, match="linear"):
        ArchSpec((Layer("conv", "c", 1, 4, 3, 1, 1), Layer("relu", "r")), {"layer1": 1})
    arch = conv_net((2, 2), image_size=8)
    with pytest.raises(ContractError):
        arch.tap_shape("nope")
    assert ArchSpec.from_dict(arch.to_dict()) == arch


def test_init_is_deterministic_with_zero_bias():
    a, b = init_weights(student_arch(), 3), init_weights(student_arch(), 3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
        if k.endswith(".bias"):
            assert not a.params[k].any()
    c = init_weights(student_arch(), 4)
    assert not np.array_equal(a.params["conv1.weight"], c.params["conv1.weight"])


def test_zero_conv_weights_give_bias_maps():
    arch = conv_net((2, 3), image_size=8)
    w = init_weights(arch, 0)
    w.params["conv2.weight"][:] = 0
    w.params["conv2.bias"][:] = [0.5, 0.0, 2.0]
    _, acts = forward(arch, w.params, np.random.default_rng(0).uniform(size=(2, 1, 8, 8)).astype(np.float32), taps=("layer2",))
    np.testing.assert_array_equal(acts["layer2"][:, 0], 0.5)
    np.testing.assert_array_equal(acts["layer2"][:, 2], 2.0)


def test_model_roundtrip_is_byte_identical(tmp_path):
    arch = conv_net((2, 3), image_size=8)
    w = init_weights(arch, 1)
    w.history = [(1.25, 0.5), (0.75, 0.625)]
    p1, p2 = tmp_path / "a.kdm", tmp_path / "b.kdm"
    save_model(p1, arch, w, meta={"seed": 1})
    arch2, w2, meta = load_model(p1)
    assert arch2 == arch and meta == {"seed": 1}
    assert w2.history == w.history
    for k in w.params:
        np.testing.assert_array_equal(w.params[k], w2.params[k])
    save_model(p2, arch2, w2, meta=meta)
    assert p1.read_bytes() == p2.read_bytes()


def _saved(tmp_path):
    arch = conv_net((2, 3), image_size=8)
    path = tmp_path / "m.kdm"
    save_model(path, arch, init_weights(arch, 0))
    return path


def test_load_rejects_bad_magic(tmp_path):
    path = _saved(tmp_path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic") as info:
        load_model(path)
    assert info.value.offset == 0


def test_load_rejects_param_count_mismatch(tmp_path):
    path = _saved(tmp_path)
    blob = path.read_bytes()
    hlen = struct.unpack_from("<I", blob, 8)[0]
    header = blob[12 : 12 + hlen].replace(b'"param_count":', b'"param_count":1')
    fixed = blob[:8] + struct.pack("<I", len(header)) + header + blob[12 + hlen :]
    path.write_bytes(fixed)
    with pytest.raises(FormatError, match="param_count"):
        load_model(path)


def test_load_rejects_truncation(tmp_path):
    path = _saved(tmp_path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError, match="payload length"):
        load_model(path)


def test_check_weights_detects_shape_mismatch():
    arch = conv_net((2, 3), image_size=8)
    w = init_weights(arch, 0)
    w.params["fc.weight"] = np.zeros((3, 3), np.float32)
    with pytest.raises(ShapeError):
        check_weights(arch, w)


def test_predict_logits_batches_consistently():
    arch = conv_net((2, 3), image_size=8)
    w = init_weights(arch, 0)
    x = np.random.default_rng(0).uniform(size=(7, 1, 8, 8)).astype(np.float32)
    np.testing.assert_allclose(predict_logits(arch, w, x, batch_size=3), predict_logits(arch, w, x, batch_size=7), rtol=1e-6)


def test_random_weight_accuracy_near_chance(small_data):
    _, test_d = small_data
    arch = conv_net((4, 8, 8), image_size=32)
    accs = [evaluate(arch, init_weights(arch, s), test_d) for s in range(5)]
    assert all(0.02 <= a <= 0.25 for a in accs)


def test_reloaded_teacher_gives_identical_kd_run(tmp_path, small_data):
    train_d, _ = small_data
    sub = train_d.subset(np.arange(40))
    t_arch = conv_net((4, 8, 8), image_size=32)
    teacher = train(t_arch, sub, TrainConfig(epochs=1, batch_size=8, seed=2))
    save_model(tmp_path / "t.kdm", t_arch, teacher)
    t_arch2, teacher2, _ = load_model(tmp_path / "t.kdm")
    s_arch = conv_net((2, 4, 4), image_size=32)
    cfg = TrainConfig(epochs=1, batch_size=8, mode="KD", seed=3)
    a = train(s_arch, sub, cfg, teacher=(t_arch, teacher))
    b = train(s_arch, sub, cfg, teacher=(t_arch2, teacher2))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert a.history == b.history
