"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test prints one ``[PASS]`` / ``[FAIL]`` line; the lines are also
collected into an "acceptance criteria" section at the end of the run.
"""
import math
import random
import time

import mpmath
import numpy as np
import pytest

from attentivemos import checkpoint
from attentivemos.cli import EXIT_OK, PARAM_BOUNDS, gradcheck_report, main
from attentivemos.data import SynthConfig, synth_generate
from attentivemos.metrics import pcc, srcc
from attentivemos.model import AttentiveMOS, ModelConfig
from attentivemos.numerics import Tensor, no_grad
from attentivemos.training import (
    DEFAULT_SCHEDULE,
    Dataset,
    LossConfig,
    TrainConfig,
    evaluate,
    loss_ours,
    sustain_labels,
    train,
)
from attentivemos.errors import ScheduleError

from conftest import ACCEPTANCE_LINES

DESK = ModelConfig.desk()
TRAIN_SEED, TEST_SEED = 11, 12


def report(number: int, title: str, ok: bool, detail: str, elapsed: float) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {number}: {title}: {detail} ({elapsed:.1f} s)"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture(scope="module")
def synth_splits(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    synth_generate(SynthConfig(n_samples=200, seed=TRAIN_SEED), root / "train")
    synth_generate(SynthConfig(n_samples=50, seed=TEST_SEED), root / "test")
    return root


# -- 1 -------------------------------------------------------------------

def test_01_parameter_count():
    t0 = time.perf_counter()
    total = AttentiveMOS(ModelConfig()).param_count()
    elapsed = time.perf_counter() - t0
    lo, hi = PARAM_BOUNDS
    ok = lo <= total <= hi and elapsed < 1.0
    report(1, "parameter count", ok, f"{total} in [{lo}, {hi}]", elapsed)
    assert lo <= total <= hi
    assert elapsed < 1.0


# -- 2 -------------------------------------------------------------------

def test_02_shape_ladder():
    t0 = time.perf_counter()
    cfg = ModelConfig()
    model = AttentiveMOS(cfg)
    x = np.random.default_rng(0).uniform(-1, 1, size=(1, 327680))
    assert cfg.num_samples == 327680
    with no_grad():
        y = model.forward(model.frames_from_waveforms(x))
    elapsed = time.perf_counter() - t0
    expected = [20480, 4096, 2048, 1024, 512, 256, 128]
    ok = model.token_ladder == expected and y.shape == (1,) and elapsed < 60
    report(2, "shape ladder", ok, "->".join(map(str, model.token_ladder)) + f", output shape {y.shape}", elapsed)
    assert model.token_ladder == expected
    assert y.shape == (1,) and np.isfinite(y.data).all()
    assert elapsed < 60


# -- 3 -------------------------------------------------------------------

def test_03_gradient_oracle():
    t0 = time.perf_counter()
    tiny = ModelConfig.tiny()
    n_groups = len(AttentiveMOS(tiny).parameters())
    results = {}
    for bits in (32, 64):
        rep = gradcheck_report(tiny, LossConfig(), seed=0, precision=bits)
        results[bits] = rep
    elapsed = time.perf_counter() - t0
    ok = True
    parts = []
    for bits, rep in results.items():
        covered = len({c.name for c in rep.smooth}) == n_groups
        enough = len(rep.smooth) >= 200
        ok &= rep.passed and covered and enough
        parts.append(f"{bits}-bit max rel {rep.max_rel_error:.1e} < {rep.tol:.0e} over {len(rep.smooth)} coords"
                     f" / {n_groups} groups ({len(rep.kinks)} at kinks)")
    ok &= elapsed < 120
    report(3, "gradient oracle", ok, "; ".join(parts), elapsed)
    for rep in results.values():
        assert rep.passed, rep.summary()
        assert len(rep.smooth) >= 200
        assert len({c.name for c in rep.smooth}) == n_groups
    assert elapsed < 120


# -- 4 -------------------------------------------------------------------

def test_04_mask_correctness():
    t0 = time.perf_counter()
    checked, worst = 0, 0.0
    for cfg in (DESK, ModelConfig()):
        model = AttentiveMOS(cfg, seed=3)
        model.recorder = []
        x = np.random.default_rng(4).uniform(-1, 1, size=(2, cfg.num_samples))
        with no_grad():
            model.forward(model.frames_from_waveforms(x))
        shifted = [r for r in model.recorder if r["layer"].endswith(".l2")]
        assert len(shifted) == len(cfg.context_sizes)
        for r in shifted:
            probs = r["probs"]  # (B, G, heads, c, c)
            c = probs.shape[-1]
            h = c // 2
            last = probs[:, -1]
            cross = np.concatenate([last[..., :h, h:].ravel(), last[..., h:, :h].ravel()])
            worst = max(worst, float(np.abs(cross).max()))
            assert probs.shape[2] == cfg.heads
            checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst == 0.0 and elapsed < 10
    report(4, "mask correctness", ok, f"{checked} shifted layers, max wrapped cross-attention {worst!r}", elapsed)
    assert worst == 0.0
    assert elapsed < 10


# -- 5 -------------------------------------------------------------------

def test_05_global_permutation_invariance():
    t0 = time.perf_counter()
    cfg = ModelConfig()
    assert cfg.positional_encoding == "none"
    model = AttentiveMOS(cfg, seed=5)
    x = np.random.default_rng(6).uniform(-1, 1, size=(1, cfg.num_samples))
    rng = np.random.default_rng(7)
    with no_grad():
        tokens = model.local_features(model.frames_from_waveforms(x))
        assert tokens.shape == (1, 128, cfg.embed_dim)
        base = model.global_forward(tokens).item()
        deltas = [abs(model.global_forward(Tensor(tokens.data[:, rng.permutation(128)])).item() - base)
                  for _ in range(20)]
    elapsed = time.perf_counter() - t0
    worst = max(deltas)
    ok = worst < 1e-5 and elapsed < 60
    report(5, "global permutation invariance", ok, f"max |dy| {worst:.2e} over 20 permutations", elapsed)
    assert worst < 1e-5
    assert elapsed < 60


# -- 6 -------------------------------------------------------------------

@pytest.mark.slow
def test_06_overfit_sanity(tmp_path):
    t0 = time.perf_counter()
    manifest = synth_generate(SynthConfig(n_samples=8, seed=6), tmp_path)
    data = Dataset.from_manifest(manifest, DESK)
    cfg = TrainConfig(epochs=500, batch_size=8)  # one step per epoch
    losses = []
    train(AttentiveMOS(DESK, seed=0), data, LossConfig("mse"), cfg, step_callback=lambda s, l: losses.append(l))
    elapsed = time.perf_counter() - t0
    # each step's loss is the MSE over all 8 utterances before that update
    hit = next((i + 1 for i, l in enumerate(losses) if l < 0.01), None)
    ok = hit is not None and elapsed < 300
    detail = (f"MSE < 0.01 at step {hit}" if hit else
              f"best MSE {min(losses):.4f}, final {losses[-1]:.4f} after {len(losses)} steps at lr 1e-4")
    report(6, "overfit sanity", ok, detail, elapsed)
    assert len(losses) == 500
    assert hit is not None, detail
    assert elapsed < 300


# -- 7 -------------------------------------------------------------------

@pytest.mark.slow
def test_07_ranking_capability(synth_splits):
    t0 = time.perf_counter()
    from attentivemos.data import parse_manifest
    train_set = Dataset.from_manifest(parse_manifest(synth_splits / "train" / "manifest.csv"), DESK)
    test_set = Dataset.from_manifest(parse_manifest(synth_splits / "test" / "manifest.csv"), DESK)
    cfg = TrainConfig(epochs=40)
    result = train(AttentiveMOS(DESK, seed=0), train_set, LossConfig(), cfg)
    rep = evaluate(result.model, test_set)
    elapsed = time.perf_counter() - t0
    ok = rep.srcc is not None and rep.srcc >= 0.8 and elapsed < 900
    report(7, "ranking capability", ok, f"test {rep} after {cfg.epochs} epochs", elapsed)
    assert rep.srcc is not None and rep.srcc >= 0.8
    assert elapsed < 900


# -- 8 -------------------------------------------------------------------

def test_08_loss_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    n = 1000
    y = rng.uniform(-1, 7, n)
    mu = rng.uniform(1, 5, n)
    sigma = rng.uniform(0, 2, n)
    sigma[:50] = 0.0
    y[50:100] = mu[50:100]
    eps = 0.01
    got = loss_ours(Tensor(y, dtype=np.float64), mu, sigma, eps).data
    mpmath.mp.dps = 50
    ref = np.array([float(mpmath.log(1 + abs(mpmath.mpf(a) - mpmath.mpf(b)) / (mpmath.mpf(s) + mpmath.mpf(eps))))
                    for a, b, s in zip(y, mu, sigma)])
    err = float(np.max(np.abs(got - ref) / np.maximum(1.0, np.abs(ref))))

    # monotone in |y - mu| (fixed sigma) and decreasing in sigma (y != mu)
    step = rng.uniform(0.01, 1.0, n)
    away = np.where(y >= mu, y + step, y - step)
    grows = loss_ours(Tensor(away, dtype=np.float64), mu, sigma, eps).data > got
    off = y != mu
    shrinks = loss_ours(Tensor(y, dtype=np.float64), mu, sigma + step, eps).data[off] < got[off]
    zero_at_label = np.all(got[~off] == 0.0) and np.all(got[off] > 0)
    elapsed = time.perf_counter() - t0
    ok = err <= 1e-9 and grows.all() and shrinks.all() and zero_at_label
    report(8, "variance-weighted loss oracle", ok,
           f"max error {err:.1e} vs 50-digit reference on {n} triples; monotonicity "
           f"{'holds' if grows.all() and shrinks.all() and zero_at_label else 'violated'}", elapsed)
    assert err <= 1e-9
    assert grows.all() and shrinks.all() and zero_at_label


# -- 9 -------------------------------------------------------------------

def test_09_self_teaching_label_oracle():
    t0 = time.perf_counter()
    rng = random.Random(9)
    worst = 0.0
    for alpha in DEFAULT_SCHEDULE:
        m = len(alpha) - 1
        for _ in range(500):
            mu = rng.uniform(1, 5)
            preds = [rng.uniform(0, 6) for _ in range(m)]
            ref = math.fsum([alpha[0] * mu] + [a * p for a, p in zip(alpha[1:], preds)])
            worst = max(worst, abs(sustain_labels(mu, preds, alpha) - ref))
    rejected = 0
    perturbed = []
    for alpha in DEFAULT_SCHEDULE:
        for i in range(len(alpha)):
            for d in (1e-6, -1e-6, 0.1):
                bad = list(alpha)
                bad[i] += d
                perturbed.append(bad)
    for bad in perturbed:
        try:
            sustain_labels(3.0, [3.0] * (len(bad) - 1), bad)
        except ScheduleError:
            rejected += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and rejected == len(perturbed)
    report(9, "self-teaching label oracle", ok,
           f"max error {worst:.1e} over 3 schedules; {rejected}/{len(perturbed)} perturbed schedules rejected", elapsed)
    assert worst <= 1e-12
    assert rejected == len(perturbed)


# -- 10 ------------------------------------------------------------------

def _naive_ranks(x):
    return [1 + sum(v < xi for v in x) + (sum(v == xi for v in x) - 1) / 2 for xi in x]


def _naive_pcc(a, b):
    n = len(a)
    ma, mb = math.fsum(a) / n, math.fsum(b) / n
    cov = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = math.fsum((x - ma) ** 2 for x in a)
    vb = math.fsum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def test_10_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    worst_p = worst_s = 0.0
    tied_pairs = 0
    for _ in range(100):
        n = int(rng.integers(5, 60))
        a = rng.normal(size=n)
        b = 0.5 * a + rng.normal(size=n)
        # inject ties: rounding plus copied values
        a = np.round(a, 1)
        a[1] = a[0]
        b[rng.choice(np.arange(1, n), size=max(1, n // 3), replace=False)] = b[0]
        tied_pairs += len(set(a)) < n and len(set(b)) < n
        worst_p = max(worst_p, abs(pcc(a, b) - _naive_pcc(list(a), list(b))))
        worst_s = max(worst_s, abs(srcc(a, b) - _naive_pcc(_naive_ranks(list(a)), _naive_ranks(list(b)))))
    elapsed = time.perf_counter() - t0
    ok = worst_p <= 1e-10 and worst_s <= 1e-10 and tied_pairs == 100
    report(10, "metric oracles", ok, f"PCC max error {worst_p:.1e}, SRCC max error {worst_s:.1e}, "
           f"{tied_pairs}/100 pairs with ties on both sides", elapsed)
    assert worst_p <= 1e-10 and worst_s <= 1e-10
    assert tied_pairs == 100


# -- 11 ------------------------------------------------------------------

def test_11_checkpoint_round_trip(tmp_path):
    t0 = time.perf_counter()
    model = AttentiveMOS(DESK, seed=11)
    rng = np.random.default_rng(11)
    for p in model.parameters():  # move away from the init so every tensor carries information
        p.data[...] += rng.normal(0, 0.05, size=p.shape).astype(p.dtype)
    x = rng.uniform(-1, 1, size=(10, DESK.num_samples))
    before = model.predict_waveforms(x)
    checkpoint.save(model, tmp_path / "m.amos")
    after = checkpoint.load(tmp_path / "m.amos", expected=DESK).predict_waveforms(x)
    elapsed = time.perf_counter() - t0
    same = before.tobytes() == after.tobytes()
    report(11, "checkpoint round-trip", same, f"10 predictions {'bit-identical' if same else 'differ'}", elapsed)
    assert same


# -- 12 ------------------------------------------------------------------

@pytest.mark.slow
def test_12_self_teaching_end_to_end(synth_splits, tmp_path):
    t0 = time.perf_counter()
    stages = ";".join(",".join(repr(a) for a in s) for s in DEFAULT_SCHEDULE)
    cfg_path = tmp_path / "run.txt"
    cfg_path.write_text(
        DESK.canonical()
        + "train.epochs=40\n"
        + f"sustain.stages={stages}\n"
        + f"paths.train_manifest={synth_splits / 'train' / 'manifest.csv'}\n"
        + f"paths.test_manifest={synth_splits / 'test' / 'manifest.csv'}\n"
        + f"paths.out_dir={tmp_path / 'out'}\n"
    )
    code = main(["selfteach", "--config", str(cfg_path), "--quiet"])
    elapsed = time.perf_counter() - t0
    out = tmp_path / "out"
    ckpts = sorted(p.name for p in out.glob("stage*.amos"))
    rows = {line.split(",")[0]: line.split(",") for line in (out / "stage_metrics.csv").read_text().splitlines()[1:]}
    base_mse, m2_mse = float(rows["base"][2]), float(rows["m=2"][2])
    trend = "holds" if m2_mse <= base_mse else "reversed (warning only)"
    ok = code == EXIT_OK and len(ckpts) == 4 and elapsed < 2700
    report(12, "self-teaching end-to-end", ok,
           f"{len(ckpts)} checkpoints; test MSE base {base_mse:.4f}, m=2 {m2_mse:.4f}: trend {trend}", elapsed)
    if m2_mse > base_mse:
        import warnings
        warnings.warn(f"stage m=2 test MSE {m2_mse:.4f} above base {base_mse:.4f}")
    assert code == EXIT_OK
    assert ckpts == [f"stage{m}.amos" for m in range(4)]
    assert elapsed < 2700
