import math

import numpy as np
import pytest

from ctxlab.attention import AttentionStats, GlobalPattern, ShiftShortPattern, attention_stats
from ctxlab.checkpoint import FP32_SUFFIX, KIND_NF4, load_checkpoint, read_checkpoint, save_checkpoint
from ctxlab.errors import ConfigError, ContractError, DataError, DimensionError, FormatError, LengthError, StateError
from ctxlab.model import Model, ModelConfig, build_model, masked_cross_entropy, sequence_loss, token_nll
from ctxlab.quant import dequantize_array
from ctxlab.tensor import Tensor, backward

from conftest import randomize_adapters, tiny_config


def tokens(n, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=n)


def test_logit_shapes(tiny_model):
    assert tiny_model.forward(tokens(1)).shape == (1, 257)
    assert tiny_model.forward(tokens(32), ShiftShortPattern(8)).shape == (32, 257)


def test_overlong_and_bad_inputs(tiny_model):
    with pytest.raises(LengthError):
        tiny_model.forward(tokens(33))
    with pytest.raises(DataError):
        tiny_model.forward(np.array([0, 257]))
    with pytest.raises(DimensionError):
        tiny_model.forward(np.zeros((2, 2), dtype=int))


@pytest.mark.parametrize("changes", [dict(d_model=18), dict(d_model=12, n_heads=4), dict(attention="sparse"),
                                     dict(target_ctx=8)])
def test_invalid_configs(changes):
    with pytest.raises(ConfigError):
        tiny_config(**changes)


def test_group_size_defaults_to_quarter_target():
    assert ModelConfig(pretrained_ctx=4096, target_ctx=8192).group_size == 2048
    assert ModelConfig().group_size == 32


def test_same_seed_same_parameters():
    a, b = build_model(tiny_config()), build_model(tiny_config())
    for name in a.base:
        assert a.base[name].tobytes() == b.base[name].tobytes()
        assert a.quantized[name].same_bytes(b.quantized[name])
    for name in a.adapters:
        assert a.adapters[name].A.data.tobytes() == b.adapters[name].A.data.tobytes()


def test_all_base_matrices_quantized(tiny_model):
    assert set(tiny_model.quantized) == set(tiny_model.base)
    w = tiny_model.dense_weight("layer0.q_proj")
    np.testing.assert_array_equal(w, dequantize_array(tiny_model.quantized["layer0.q_proj"]).T)


def test_zero_adapters_do_not_change_logits(tiny_model):
    x = tokens(16)
    stripped = tiny_model.fork(adapters={})
    np.testing.assert_array_equal(tiny_model.forward(x).data, stripped.forward(x).data)


def test_single_group_matches_global_through_model():
    model = randomize_adapters(build_model(tiny_config()))
    x = tokens(16, seed=4)
    np.testing.assert_allclose(model.forward(x, ShiftShortPattern(16)).data, model.forward(x, GlobalPattern()).data,
                               atol=1e-6)


@pytest.mark.parametrize("pattern", [GlobalPattern(), ShiftShortPattern(8)])
def test_appending_a_token_keeps_earlier_logits(pattern):
    model = randomize_adapters(build_model(tiny_config()))
    x = tokens(32, seed=5)
    for n in range(1, 32):
        if isinstance(pattern, ShiftShortPattern) and n == pattern.group_size:
            continue  # crossing from one group (exactly global) into grouped attention
        np.testing.assert_allclose(model.forward(x[: n + 1], pattern).data[:n], model.forward(x[:n], pattern).data,
                                   atol=1e-5, err_msg=f"n={n}")


def test_one_group_boundary_is_the_only_change():
    model = randomize_adapters(build_model(tiny_config()))
    x = tokens(9, seed=6)
    short = model.forward(x[:8], ShiftShortPattern(8)).data
    longer = model.forward(x, ShiftShortPattern(8)).data[:8]
    # shifted heads of the longer sequence no longer see across the half-group seam
    assert not np.allclose(short, longer, atol=1e-5)


def test_stats_through_model(tiny_model):
    stats = AttentionStats()
    tiny_model.forward(tokens(32), ShiftShortPattern(8), stats=stats)
    per_layer = attention_stats(32, 8, 4)
    assert stats.score_elements == 2 * per_layer.score_elements
    assert stats.peak_score_buffer == per_layer.peak_score_buffer


def test_uniform_logits_cross_entropy():
    logits = Tensor(np.zeros((5, 256)))
    loss = masked_cross_entropy(logits, np.arange(5), np.ones(5, bool))
    assert loss.item() == pytest.approx(math.log(256), abs=1e-12)


def test_mask_selects_positions():
    rng = np.random.default_rng(6)
    logits = Tensor(rng.normal(size=(6, 10)))
    targets = rng.integers(0, 10, size=6)
    mask = np.array([0, 1, 0, 1, 1, 0], bool)
    nll = token_nll(logits, targets)
    assert masked_cross_entropy(logits, targets, mask).item() == pytest.approx(nll[mask].mean(), abs=1e-12)


def test_all_masked_loss_rejected():
    with pytest.raises(ContractError):
        masked_cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], [False, False])


def test_loss_gradients_reach_only_adapters(tiny_model):
    loss = sequence_loss(tiny_model, tokens(17), pattern=ShiftShortPattern(8))
    backward(loss)
    assert all(p.grad is not None for p in tiny_model.adapter_parameters())
    assert all(t.grad is None for t in tiny_model.norms.values())


def test_merge_matches_adapted_forward():
    model = randomize_adapters(build_model(tiny_config()))
    x = tokens(16, seed=7)
    before = model.forward(x).data
    model.merge_adapters()
    np.testing.assert_allclose(model.forward(x).data, before, atol=1e-4)
    with pytest.raises(StateError):
        model.merge_adapters()
    model.unmerge_adapters()
    np.testing.assert_array_equal(model.forward(x).data, before)


def test_with_context_rescales_positions(tiny_model):
    longer = tiny_model.with_context(16, 64)
    assert longer.rope.scale == 0.25
    assert longer.config.group_size == 16
    assert longer.base is not tiny_model.base or longer.base == tiny_model.base


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    model = randomize_adapters(build_model(tiny_config()))
    first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, first)
    loaded = load_checkpoint(first)
    save_checkpoint(loaded, second)
    assert first.read_bytes() == second.read_bytes()
    x = tokens(32, seed=8)
    np.testing.assert_array_equal(loaded.forward(x, ShiftShortPattern(8)).data,
                                  model.forward(x, ShiftShortPattern(8)).data)


def test_checkpoint_sections(tmp_path):
    model = build_model(tiny_config())
    save_checkpoint(model, tmp_path / "m.ckpt")
    cfg, sections = read_checkpoint(tmp_path / "m.ckpt")
    names = {s.name for s in sections}
    assert {s.name for s in sections if s.kind == KIND_NF4} == set(model.base)
    assert all(n + FP32_SUFFIX in names for n in model.base)
    assert "layer1.down_proj.A" in names and "final_norm" in names
    assert cfg["target_ctx"] == "32"


def test_corrupt_checkpoint(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_model(tiny_config()), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(path)
