"""The ten acceptance criteria, each at its stated tolerance and time budget.

Every criterion prints one ``PASS`` / ``FAIL`` line (also collected in the
pytest terminal summary).  Run alone with ``pytest tests/test_acceptance.py``.
"""

import contextlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from ctxlab.attention import GlobalPattern, ShiftShortPattern, attend
from ctxlab.checkpoint import load_checkpoint, save_checkpoint
from ctxlab.cli import RunConfig, _base_model, _corpora, _extended, _training_samples, main, parse_config_text
from ctxlab.data import VOCAB_SIZE
from ctxlab.evaluate import ablate_steps, sliding_window_perplexity, trailing_medians
from ctxlab.model import ModelConfig, build_model, sequence_loss
from ctxlab.quant import (
    NF4, dequantize_array, pack_nibbles, planned_storage, quantize_tensor, quantized_from_bytes, storage_report,
    unpack_nibbles,
)
from ctxlab.rope import build_rope_table, interpolation_equivalence_check, rope_angles
from ctxlab.tensor import Tensor, finite_difference_check
from ctxlab.trainer import TrainConfig, Trainer, snapshot

from conftest import ACCEPTANCE_LINES, randomize_adapters
from oracles import nf4_levels_oracle, shift_short_allowed

ROOT = Path(__file__).resolve().parents[1]
TOY_CFG = ROOT / "configs" / "toy.cfg"
CORPUS = ROOT / "corpus" / "shakespeare.txt"


@contextlib.contextmanager
def criterion(number: int, title: str, budget_s: float):
    start = time.perf_counter()
    status, detail = "FAIL", ""
    try:
        yield
        status = "PASS"
    except AssertionError as exc:
        detail = f" ({str(exc).splitlines()[0][:120]})" if str(exc) else ""
        raise
    finally:
        elapsed = time.perf_counter() - start
        if status == "PASS" and elapsed > budget_s:
            status, detail = "FAIL", f" (over the {budget_s:g} s budget)"
        line = f"{status} criterion {number}: {title} [{elapsed:.2f} s / {budget_s:g} s]{detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    assert elapsed <= budget_s, f"criterion {number} took {elapsed:.1f} s, budget {budget_s} s"


def toy_run_config(**overrides) -> RunConfig:
    items = parse_config_text(TOY_CFG.read_text())
    items["corpus"] = str(CORPUS)
    items.update({k: str(v) for k, v in overrides.items()})
    return RunConfig.from_mapping(items)


@pytest.fixture(scope="module")
def toy_base(tmp_path_factory):
    """Short-context base pretrained in full precision, shared by criteria 8 and 9."""
    cfg = toy_run_config()
    train_ids, eval_ids = _corpora(cfg)
    start = time.perf_counter()
    base = _base_model(cfg, train_ids)
    path = tmp_path_factory.mktemp("toy") / "base.ckpt"
    save_checkpoint(base, path)
    return cfg, base, path, train_ids, eval_ids, time.perf_counter() - start


def test_criterion_1_double_quantization_saving():
    with criterion(1, "double-quantization bits/param 4.5 -> 4.1289, saving 0.371", 1.0):
        n = 64 * 256 * 64
        plain = planned_storage(n, 64, False)
        dq = planned_storage(n, 64, True, 256)
        assert plain.bits_per_parameter == 4.5
        assert abs(dq.bits_per_parameter - 4.1289) <= 0.001
        assert abs((plain.bits_per_parameter - dq.bits_per_parameter) - 0.371) <= 0.01
        x = np.random.default_rng(0).standard_normal(64 * 256 * 4).astype(np.float32)
        for double, expected in ((False, plain), (True, dq)):
            q = quantize_tensor(x, 64, double, 256)
            rep = storage_report(q)
            assert rep.bits_per_parameter == expected.bits_per_parameter
            assert 8 * (len(q.to_bytes()) - 13) == rep.total_bits


def test_criterion_2_attention_degeneracy():
    with criterion(2, "shift short with G = n equals global through the full model (20 inputs)", 10.0):
        worst = 0.0
        for seed in range(20):
            g = np.random.default_rng(seed)
            n = int(g.integers(1, 33)) * 2
            model = randomize_adapters(build_model(ModelConfig(target_ctx=64, seed=seed)), seed=seed)
            toks = g.integers(0, 256, size=n)
            a = model.forward(toks, ShiftShortPattern(n)).data
            b = model.forward(toks, GlobalPattern()).data
            worst = max(worst, float(np.max(np.abs(a - b))))
        print(f"max elementwise difference {worst:.3g}")
        assert worst <= 1e-6, f"max elementwise difference {worst:.3g}"


def test_criterion_3_causality_and_locality():
    with criterion(3, "no future dependence; exact shift-short receptive fields (n <= 16)", 30.0):
        g = np.random.default_rng(3)
        for n, group in ((8, 4), (12, 4), (16, 4), (16, 8), (10, 4), (16, 16)):
            heads = 4
            q, k, v = (g.normal(size=(n, heads, 8)) for _ in range(3))
            for pattern in (GlobalPattern(), ShiftShortPattern(group)):
                base = attend(Tensor(q), Tensor(k), Tensor(v), pattern).data
                for j in range(n):
                    k2, v2 = k.copy(), v.copy()
                    k2[j] += g.normal(size=(heads, 8))
                    v2[j] += g.normal(size=(heads, 8))
                    out = attend(Tensor(q), Tensor(k2), Tensor(v2), pattern).data
                    changed = np.any(out != base, axis=-1)  # (n, heads)
                    for h in range(heads):
                        if isinstance(pattern, GlobalPattern) or group == n:
                            expected = np.arange(n) >= j
                        else:
                            shifted = h >= heads - heads // 2
                            expected = shift_short_allowed(n, group, shifted)[:, j]
                        assert np.array_equal(changed[:, h], expected), (n, group, pattern, j, h)
        model = randomize_adapters(build_model(ModelConfig(d_model=32, d_ff=64, target_ctx=16, pretrained_ctx=16)))
        toks = g.integers(0, 256, size=16)
        for pattern in (GlobalPattern(), ShiftShortPattern(4)):
            base = model.forward(toks, pattern).data
            for p in range(16):
                alt = toks.copy()
                alt[p] = (alt[p] + 1) % 256
                assert np.array_equal(model.forward(alt, pattern).data[:p], base[:p])


def test_criterion_4_position_interpolation():
    with criterion(4, "angles(m; s) == angles(m*s; 1) exactly; effective positions < pretrained_ctx", 1.0):
        g = np.random.default_rng(4)
        for _ in range(1000):
            pre = int(g.integers(1, 8193))
            target = pre * int(g.integers(1, 5)) + int(g.integers(0, pre))
            s = pre / target
            m = int(g.integers(0, target))
            assert np.array_equal(rope_angles([m], s, 128), rope_angles([m * s], 1.0, 128))
        for pre, target in ((4096, 8192), (4096, 12288)):
            table = build_rope_table(128, pretrained_ctx=pre, target_ctx=target)
            ref = build_rope_table(128, pretrained_ctx=pre, target_ctx=pre)
            assert table.effective_positions(target - 1) < pre
            for m in g.integers(0, target, size=50):
                assert interpolation_equivalence_check(int(m), table, ref)


def test_criterion_5_gradients_and_freezing():
    with criterion(5, "adapter gradients vs finite differences < 1e-4; frozen tensors bit-identical", 120.0):
        model = randomize_adapters(build_model(ModelConfig()), seed=5, dtype=np.float64)
        toks = np.random.default_rng(5).integers(0, 256, size=33)
        pattern = ShiftShortPattern(8)
        checked = [("layer0.q_proj", "A"), ("layer0.v_proj", "B"), ("layer0.o_proj", "A"),
                   ("layer1.gate_proj", "B"), ("layer1.up_proj", "A"), ("layer1.down_proj", "B"),
                   ("layer1.k_proj", "A")]
        worst = 0.0
        for name, which in checked:
            adapter = model.adapters[name]
            original = getattr(adapter, which)

            def loss_of(t, adapter=adapter, which=which):
                setattr(adapter, which, t)
                return sequence_loss(model, toks, pattern=pattern)

            worst = max(worst, finite_difference_check(loss_of, original, step=1e-5))
            setattr(adapter, which, original)
        assert worst < 1e-4, f"max relative error {worst:.3g}"

        frozen = build_model(ModelConfig())
        before = (snapshot(frozen.base.values()), snapshot(q.to_bytes() for q in frozen.quantized.values()),
                  snapshot(t.data for t in frozen.norms.values()))
        trainer = Trainer(frozen, TrainConfig(base_lr=1e-2, warmup_steps=1, grad_accum_steps=1))
        g = np.random.default_rng(6)
        from ctxlab.data import TrainingSample
        for step in range(50):
            trainer.train_step([TrainingSample(g.integers(0, 256, size=65), np.ones(65, bool))], step)
        after = (snapshot(frozen.base.values()), snapshot(q.to_bytes() for q in frozen.quantized.values()),
                 snapshot(t.data for t in frozen.norms.values()))
        assert trainer.updates == 50
        assert after == before
        assert all(t.grad is None for t in frozen.norms.values())
        assert any(np.any(a.B.data != 0) for a in frozen.adapters.values())


def test_criterion_6_quantizer_round_trip():
    with criterion(6, "NF4 codebook vs quantile oracle; error bound over 1e6 values; packing exact", 10.0):
        assert np.max(np.abs(NF4.values - np.array(nf4_levels_oracle()))) <= 1e-4
        x = np.random.default_rng(6).standard_normal(1_000_000).astype(np.float32)
        q = quantize_tensor(x, 64)
        err = np.abs(dequantize_array(q).astype(np.float64) - x)
        bound = np.repeat(q.absmax.astype(np.float64), 64)[: x.size] * NF4.max_half_gap
        assert np.all(err <= bound), f"worst excess {np.max(err - bound):.3g}"
        codes = q.codes()
        assert np.array_equal(unpack_nibbles(pack_nibbles(codes), codes.size), codes)
        for double in (False, True):
            qq = quantize_tensor(x, 64, double)
            assert quantized_from_bytes(qq.to_bytes(), x.shape).to_bytes() == qq.to_bytes()


class _UniformLogits:
    config = ModelConfig(target_ctx=64, pretrained_ctx=64)

    def forward(self, tokens, pattern=None, quantized=True):
        return Tensor(np.zeros((len(tokens), VOCAB_SIZE)))


def test_criterion_7_perplexity_oracle():
    with criterion(7, "sliding-window PPL equals brute-force NLL sum; uniform logits give PPL = vocab", 10.0):
        model = randomize_adapters(build_model(ModelConfig(d_model=32, d_ff=64, target_ctx=16, pretrained_ctx=16)))
        g = np.random.default_rng(7)
        for size in (256, 203, 37, 9):
            toks = g.integers(0, 256, size=size)
            for ctx in (4, 8, 16):
                total, count, start = 0.0, 0, 0
                while start < size:
                    window = toks[start:start + ctx]
                    start += ctx
                    if len(window) < 2:
                        continue
                    # windows shorter than the pretrained context run on full-precision weights
                    logits = model.forward(window[:-1], quantized=ctx >= 16).data.astype(np.float64)
                    for t in range(len(window) - 1):
                        row = logits[t]
                        peak = row.max()
                        total += peak + math.log(sum(math.exp(z - peak) for z in row)) - row[window[t + 1]]
                        count += 1
                entry = sliding_window_perplexity(model, toks, ctx)
                assert entry.tokens == count
                assert abs(entry.ppl - math.exp(total / count)) <= 1e-6
                assert abs(entry.nll - total) <= 1e-6 * count
        uniform = sliding_window_perplexity(_UniformLogits(), g.integers(0, 257, size=250), 16)
        assert abs(uniform.ppl - VOCAB_SIZE) <= 1e-3


def test_criterion_8_toy_finetuning_convergence(toy_base):
    cfg, base, _, train_ids, eval_ids, pretrain_s = toy_base
    with criterion(8, "toy 64 -> 128 finetune: PPL drops >= 20% and 50-step medians never rise", 900.0 - pretrain_s):
        model = _extended(cfg, base)
        assert (model.config.group_size, model.config.lora_rank, model.rope.scale) == (32, 8, 0.5)
        curve = ablate_steps(model, _training_samples(cfg, train_ids), cfg.train, eval_ids, 20, 200)
        steps = [r[0] for r in curve.rows]
        ppl = [r[1] for r in curve.rows]
        print("steps-ablation curve:", ", ".join(f"{s}:{p:.3f}" for s, p in zip(steps, ppl)))
        assert steps == list(range(0, 201, 20))
        assert ppl[-1] <= 0.8 * ppl[0], f"PPL {ppl[0]:.3f} -> {ppl[-1]:.3f}"
        smooth = trailing_medians(steps, ppl, 50)
        assert all(b <= a for a, b in zip(smooth, smooth[1:])), f"smoothed curve rises: {smooth}"


def test_criterion_9_ablation_harness(toy_base, tmp_path):
    _, _, base_path, *_ = toy_base
    with criterion(9, "ablate rank / steps / attention emit complete tables with embedded configs", 1800.0):
        common = ["--config", str(TOY_CFG), "--corpus", str(CORPUS), "--base-checkpoint", str(base_path),
                  "--out-dir", str(tmp_path)]
        assert main(["ablate", "rank", "--ranks", "8,16,32,64", *common]) == 0
        assert main(["ablate", "steps", "--every", "20", "--max", "200", *common]) == 0
        trained = tmp_path / "tuned.ckpt"
        cfg = toy_run_config(base_checkpoint=base_path)
        model = _extended(cfg, load_checkpoint(base_path))
        from ctxlab.trainer import train_loop
        train_loop(model, _training_samples(cfg, _corpora(cfg)[0]), cfg.train)
        save_checkpoint(model, trained)
        assert main(["ablate", "attention", "--checkpoint", str(trained), *common]) == 0
        tables = {k: json.loads((tmp_path / f"ablate_{k}.json").read_text()) for k in ("rank", "steps", "attention")}
        assert [r[0] for r in tables["rank"]["rows"]] == [8, 16, 32, 64]
        assert [r[0] for r in tables["steps"]["rows"]] == list(range(0, 201, 20))
        assert [r[0] for r in tables["attention"]["rows"]] == ["global", "shift_short"]
        for table in tables.values():
            assert table["config"]["target_ctx"] == "128" and table["config"]["seed"] == "0"
            assert all(all(v is not None for v in row) for row in table["rows"])
            assert all(math.isfinite(row[-1]) for row in table["rows"])
        diff = tables["attention"]["notes"]["ppl_difference_shift_minus_global"]
        print(f"rank table: {tables['rank']['rows']}")
        print(f"attention: {tables['attention']['rows']}; shift - global = {diff:+.4f}")


def test_criterion_10_determinism_and_persistence(tmp_path):
    with criterion(10, "same seed gives identical logs/checkpoints; save -> load -> eval within 1e-6", 300.0):
        args = ["train", "--config", str(TOY_CFG), "--corpus", str(CORPUS), "--set", "pretrain_steps=30",
                "--max-steps", "6", "--grad-accum", "2", "--set", "checkpoint_every=3"]
        for run in ("a", "b"):
            assert main([*args, "--out-dir", str(tmp_path / run)]) == 0
        for rel in ("train.log", "base.ckpt", "final.ckpt", "checkpoints/step_000003.ckpt", "run_config.cfg"):
            if rel == "run_config.cfg":
                continue  # differs only by out_dir
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
        cfg = toy_run_config()
        eval_ids = _corpora(cfg)[1][:2048]
        model = load_checkpoint(tmp_path / "a" / "final.ckpt")
        save_checkpoint(model, tmp_path / "again.ckpt")
        reloaded = load_checkpoint(tmp_path / "again.ckpt")
        for ctx in (32, 64, 128):
            a = sliding_window_perplexity(model, eval_ids, ctx).ppl
            b = sliding_window_perplexity(reloaded, eval_ids, ctx).ppl
            assert abs(a - b) <= 1e-6
