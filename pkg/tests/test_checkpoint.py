import numpy as np
import pytest

import numerics as nx
from backbone import CounterBackbone, TinyTransformer, forward_default
from checkpoint import MAGIC, load_checkpoint, load_router_stack, read_container, save_checkpoint
from config import RouterConfig
from errors import FormatError, InputError
from routing import init_router_stack, routed_forward
from tasks import gen_numeric


def _random_weights(model, seed):
    rng = np.random.default_rng(seed)
    for t in model.params.values():
        t.data = rng.normal(0.0, 0.3, size=t.data.shape).astype(t.data.dtype)
    return model


def test_transformer_roundtrip_gives_identical_logits(tiny_model, tmp_path):
    model = _random_weights(tiny_model, 0)
    path = save_checkpoint(model, tmp_path / "model.ckpt")
    loaded = load_checkpoint(path)
    assert isinstance(loaded, TinyTransformer)
    assert (loaded.num_layers, loaded.hidden_dim, loaded.heads, loaded.ffn_dim) == (2, 8, 2, 16)
    rng = np.random.default_rng(1)
    for _ in range(10):
        tokens = rng.integers(0, 64, size=int(rng.integers(1, 12))).tolist()
        np.testing.assert_array_equal(forward_default(model, tokens)[1], forward_default(loaded, tokens)[1])


def test_header_starts_with_magic(tiny_model, tmp_path):
    path = save_checkpoint(tiny_model, tmp_path / "model.ckpt")
    assert MAGIC == b"DRLLMCK1"
    assert path.read_bytes()[:8] == b"DRLLMCK1"
    assert path.read_bytes()[8:12] == (1).to_bytes(4, "little")
    header, blocks = read_container(path)
    assert header["num_layers"] == 2 and header["vocab"] == 64
    assert all(b.dtype == np.float32 for b in blocks.values())


def test_corrupted_magic_is_a_format_error(tiny_model, tmp_path):
    path = save_checkpoint(tiny_model, tmp_path / "model.ckpt")
    raw = bytearray(path.read_bytes())
    raw[0:8] = b"NOTACKPT"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_truncated_file_is_a_format_error(tiny_model, tmp_path):
    path = save_checkpoint(tiny_model, tmp_path / "model.ckpt")
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_missing_file_is_an_input_error(tmp_path):
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_float64_checkpoint_loads_in_float32(tiny_config, tmp_path):
    with nx.precision(np.float64):
        model = _random_weights(TinyTransformer(tiny_config, seed=3), 4)
        path = save_checkpoint(model, tmp_path / "wide.ckpt")
    loaded = load_checkpoint(path)
    for name, value in model.parameters().items():
        restored = loaded.parameters()[name]
        assert restored.dtype == np.float32
        np.testing.assert_allclose(restored, value, atol=1e-6)


def test_counter_roundtrip(counter6, tmp_path):
    loaded = load_checkpoint(save_checkpoint(counter6, tmp_path / "counter.ckpt"))
    assert isinstance(loaded, CounterBackbone)
    assert loaded.spec.roles == counter6.spec.roles
    assert loaded.spec.modulus == counter6.spec.modulus
    for instance in gen_numeric("D3", seed=5, count=5, roles="NFRFFF"):
        np.testing.assert_array_equal(forward_default(counter6, instance.tokens)[1],
                                      forward_default(loaded, instance.tokens)[1])
    assert load_router_stack(tmp_path / "counter.ckpt") is None


def test_router_stack_roundtrip(counter6, tmp_path):
    stack = init_router_stack(6, 16, RouterConfig(windows=4, hidden=8, input_mode="first"), seed=2)
    path = save_checkpoint(counter6, tmp_path / "routers.ckpt", stack)
    loaded = load_router_stack(path)
    assert loaded.windows == 4 and loaded.input_mode == "first" and loaded.num_layers == 6
    for instance in gen_numeric("D2", seed=1, count=5, roles="NFRFFF"):
        a = routed_forward(counter6, stack, instance.tokens)
        b = routed_forward(counter6, loaded, instance.tokens)
        assert a.decisions == b.decisions
        np.testing.assert_allclose(a.probabilities, b.probabilities, atol=1e-6)


@pytest.mark.parametrize("magic", [b"LPATHCK1", b"DRLLMCK2", b"drllmck1"])
def test_near_miss_magic_is_rejected(counter6, tmp_path, magic):
    path = save_checkpoint(counter6, tmp_path / "counter.ckpt")
    path.write_bytes(magic + path.read_bytes()[8:])
    with pytest.raises(FormatError, match="magic"):
        read_container(path)


def test_unknown_version_is_a_format_error(counter6, tmp_path):
    path = save_checkpoint(counter6, tmp_path / "counter.ckpt")
    raw = path.read_bytes()
    path.write_bytes(raw[:8] + (2).to_bytes(4, "little") + raw[12:])
    with pytest.raises(FormatError, match="version"):
        read_container(path)
