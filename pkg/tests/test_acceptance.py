"""Acceptance suite: one test per criterion, each at its stated tolerance.

The conftest hook prints a PASS/FAIL line per criterion at the end of the run.
Run alone with ``pytest tests/test_acceptance.py -s``.
"""

import json
import time

import numpy as np
import pytest
from scipy import stats

from tasnet.autograd import Tensor, conv1d, conv1d_transposed
from tasnet.checkpoint import save_checkpoint
from tasnet.data import Manifest, materialize, measured_snr, overfit_examples, synth_corpus
from tasnet.dsp import AudioBuffer, StftConfig, frame, overlap_add, stft_magnitude
from tasnet.evaluation import evaluate, probe_gates, summary_table
from tasnet.gradcheck import run_suite
from tasnet.losses import LossConfig, combined_loss, p_law, pit_si_snr, si_snr
from tasnet.model import ModelConfig, SeparationModel, param_count, preset_config
from tasnet.training import (TrainConfig, TrainState, clip_gradients, global_norm, lr_schedule, overfit, resume,
                             train)
from tasnet.wavio import wav_read, wav_write

from oracles import naive_stft_magnitude, pit_exhaustive, schedule_oracle


def within(value, target, frac):
    return abs(value - target) <= frac * target


def test_criterion_01_param_counts():
    linear = param_count(preset_config("paper", "linear"))
    deep = param_count(preset_config("paper", "prelu", 4))
    print(f"\nlinear {linear}, deep prelu {deep}, delta {deep - linear}")
    assert within(linear, 5.0e6, 0.05)
    assert within(deep, 9.7e6, 0.05)
    assert within(deep - linear, 2 * 3 * (512 * 512 * 3 + 512), 0.05)


def test_criterion_02_gradcheck_suite():
    start = time.time()
    results = run_suite(instances=5, seed=0)
    elapsed = time.time() - start
    for r in results:
        print(f"{'ok ' if r.ok else 'BAD'} {r.name:28s} {r.worst:.2e} < {r.tol:g}")
    assert all(r.instances >= 5 for r in results)
    assert {r.tol for r in results if r.name.startswith("end_to_end")} == {1e-3}
    assert {r.tol for r in results if not r.name.startswith("end_to_end")} == {1e-4}
    assert [r.name for r in results if not r.ok] == []
    assert elapsed < 300, f"suite took {elapsed:.0f} s"


def test_criterion_03_loss_invariants():
    rng = np.random.default_rng(0)
    for _ in range(5):
        est, ref = rng.standard_normal(400), rng.standard_normal(400)
        base = si_snr(est, ref).item()
        for a in (0.1, 1.0, 10.0):
            assert abs(si_snr(a * est, ref).item() - base) <= 1e-6
    for C in (2, 3):
        for seed in range(5):
            r = np.random.default_rng(seed)
            refs = r.standard_normal((C, 200))
            ests = refs[r.permutation(C)] + 0.7 * r.standard_normal((C, 200))
            loss, perm = pit_si_snr(ests, refs)
            want, want_perm = pit_exhaustive(ests, refs)
            assert perm == want_perm and abs(loss.item() - want) <= 1e-9
    x = rng.standard_normal(1000)
    assert p_law(x, x).item() == 0.0
    ests, refs = rng.standard_normal((2, 500)), rng.standard_normal((2, 500))
    assert combined_loss(ests, refs, LossConfig(beta=0.0))[0].item() == pit_si_snr(ests, refs)[0].item()
    ref = np.array([1.0, -1.0, 1.0, -1.0])
    assert abs(si_snr(ref + 0.1 * np.array([1.0, 1.0, -1.0, -1.0]), ref).item() - 20.0) <= 1e-6


def test_criterion_04_dsp_oracles(tmp_path):
    rng = np.random.default_rng(1)
    cfg = StftConfig()
    for T in (256, 1000, 4001):
        x = rng.standard_normal(T)
        got = stft_magnitude(x, cfg).data
        want = naive_stft_magnitude(x, cfg.window_length, cfg.hop)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) <= 1e-6 * np.max(want)
    for L, S in ((16, 8), (32, 8), (8, 8)):
        T = 500
        x = rng.standard_normal(T)
        frames = frame(x, L, S).data
        y = overlap_add(frames, S, T).samples
        np.testing.assert_allclose(y[L:T - L] * S / L, x[L:T - L], rtol=0, atol=1e-6)
        F = rng.standard_normal(frames.shape)
        lhs, rhs = np.sum(frames * F), np.dot(x, overlap_add(F, S, T).samples)
        assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))
    # the conv pair is adjoint too, on the 8x4x32 shape
    a = Tensor(rng.standard_normal((8, 4, 32)))
    k = Tensor(rng.standard_normal((6, 4, 3)))
    fa = conv1d(a, k)
    b = rng.standard_normal(fa.shape)
    lhs, rhs = np.sum(fa.data * b), np.sum(a.data * conv1d_transposed(Tensor(b), k).data)
    assert abs(lhs - rhs) <= 1e-6 * abs(lhs)
    audio = AudioBuffer(rng.uniform(-1, 1, 3001).astype(np.float32))
    wav_write(tmp_path / "a.wav", audio)
    back = wav_read(tmp_path / "a.wav")
    assert back.samples.dtype == np.float32 and back.samples.tobytes() == audio.samples.tobytes()


def test_criterion_05_mixing_protocol(tmp_path):
    manifests = synth_corpus(tmp_path, 1000, seed=11, seconds=0.05)
    records = [(m, r) for m in manifests.values() for r in m.records]
    assert len(records) == 1000
    snr_err = sum_err = 0.0
    for m, r in records:
        ex = materialize(m, r)
        snr_err = max(snr_err, abs(measured_snr(ex) - r.snr_db))
        sum_err = max(sum_err, np.max(np.abs(ex.mixture.samples - sum(s.samples for s in ex.sources))))
    counts, _ = np.histogram([r.snr_db for _, r in records], bins=10, range=(-5, 5))
    p = stats.chisquare(counts).pvalue
    print(f"\nworst SNR error {snr_err:.2e} dB, worst sum error {sum_err:.2e}, chi-square p {p:.3f}")
    assert snr_err < 0.01 and sum_err <= 1e-6 and p > 0.01


@pytest.mark.slow
@pytest.mark.parametrize("variant", ["linear", "prelu", "dilated", "glu"])
def test_criterion_06_overfit(variant):
    cfg = preset_config("desk", variant)
    assert (cfg.N, cfg.B, cfg.H, cfg.X, cfg.R) == (64, 32, 64, 4, 2)
    train_cfg = TrainConfig(batch_size=8)
    assert (train_cfg.loss.beta, train_cfg.loss.alpha) == (0.01, 0.5)
    result = overfit(SeparationModel(cfg, seed=0), overfit_examples(8, 0.5, seed=0), train_cfg,
                     target_db=15.0, max_steps=2000, max_seconds=1800.0)
    print(f"\n{variant}: I={cfg.I}, {result.steps} steps, {result.si_snr:.2f} dB, {result.seconds:.0f} s")
    assert result.reached and result.si_snr >= 15.0
    assert result.steps <= 2000 and result.seconds <= 1800.0


def test_criterion_07_schedule_and_clipping():
    def run(losses):
        state, cfg, lrs = TrainState(lr=1e-3), TrainConfig(), []
        for v in losses:
            lr_schedule(state, v, cfg)
            lrs.append(state.lr)
        return state, lrs

    state, lrs = run([5, 4, 4, 4, 4])
    assert lrs == [1e-3, 1e-3, 1e-3, 5e-4, 5e-4] and state.halvings == 1
    seq = [5, 4, 4, 4, 3.9, 3.9, 3.9, 3.9]
    state, lrs = run(seq)
    assert state.halvings == 2 and lrs == schedule_oracle(seq)
    rng = np.random.default_rng(0)
    for _ in range(500):
        grads = [rng.standard_normal(rng.integers(1, 40)) * 10 ** rng.uniform(-3, 4) for _ in range(3)]
        out, _ = clip_gradients(grads, 7.0)
        assert global_norm(out) <= 7.0 + 1e-6


TINY = ModelConfig(N=8, L=16, S=8, B=4, H=8, Sc=4, X=2, R=1, encoder_variant="prelu", I=2)


def _run(out, epochs, state=None, model=None, max_epochs=None):
    ex = overfit_examples(8, seconds=0.2, seed=1)
    cfg = TrainConfig(batch_size=3, epochs=epochs, segment_seconds=0.1, seed=5, dtype="float64")
    model = model or SeparationModel(TINY, seed=2, dtype=np.float64)
    train(model, ex[:6], ex[6:], cfg, out, state, max_epochs=max_epochs)
    return model


def _metrics(path):
    return [{k: v for k, v in json.loads(line).items() if k != "wall_time"}
            for line in path.read_text().splitlines()]


def test_criterion_08_determinism_and_resume(tmp_path):
    a = _run(tmp_path / "a", 3)
    _run(tmp_path / "b", 3)
    assert _metrics(tmp_path / "a" / "metrics.jsonl") == _metrics(tmp_path / "b" / "metrics.jsonl")
    _run(tmp_path / "c", 3, max_epochs=1)
    model, state, _ = resume(tmp_path / "c" / "epoch_0000.ckpt")
    _run(tmp_path / "c", 3, state=state, model=model)
    assert _metrics(tmp_path / "a" / "metrics.jsonl") == _metrics(tmp_path / "c" / "metrics.jsonl")
    assert all(np.array_equal(p.data, q.data) for (_, p), (_, q) in zip(a.named_parameters(),
                                                                        model.named_parameters()))


def test_criterion_09_cross_dataset_harness(tmp_path):
    sets = []
    for tag, kind, seed in (("tones-a", "tones", 1), ("noise", "noise-band", 2), ("tones-b", "tones", 3)):
        synth_corpus(tmp_path / tag, 30, seed=seed, kind=kind, seconds=(0.2, 0.4))
        sets.append((tag, Manifest.load(tmp_path / tag / "test.jsonl")))
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, SeparationModel(ModelConfig(N=8, L=16, S=8, B=4, H=8, Sc=4, X=2, R=1,
                                                      encoder_variant="glu", I=2), seed=0))
    reports = evaluate(ckpt, sets)
    assert list(reports) == [tag for tag, _ in sets]
    out = tmp_path / "reports"
    for rep in reports.values():
        rep.write(out)
        assert rep.records and not rep.missing
    assert all((out / f"{tag}.summary.json").exists() for tag, _ in sets)
    table = summary_table(reports)
    assert table.splitlines()[0].split() == ["metric"] + [tag for tag, _ in sets]
    for rep in evaluate(None, sets, identity=True).values():
        assert abs(rep.aggregates["si_snri"]["mean"]) <= 1e-9


def test_criterion_10_gate_probe(tmp_path):
    cfg = preset_config("desk", "glu")
    x = AudioBuffer(0.3 * np.random.default_rng(7).standard_normal(1600).astype(np.float32))
    means = [float(np.mean(probe_gates(SeparationModel(cfg, seed=s), x)[0]["channel_mean"])) for s in range(100)]
    print(f"\nchannel means over 100 seeds: [{min(means):.3f}, {max(means):.3f}], mean {np.mean(means):.3f}")
    assert 0.3 <= min(means) and max(means) <= 0.7
    ckpt = tmp_path / "glu.ckpt"
    save_checkpoint(ckpt, SeparationModel(cfg, seed=0))
    a, b = probe_gates(ckpt, x), probe_gates(ckpt, x)
    assert a == b
    assert all(0.0 <= s["min"] and s["max"] <= 1.0 for s in a)
