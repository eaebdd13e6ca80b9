"""Acceptance criteria 1-10, each printing one PASS/FAIL line.

Criteria 6-8 share three pretrained backbones (seeds 0, 1, 2), built once
per session.  Expect this module to take several minutes per seed.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

import oracles
from dsd import data_synth as ds
from dsd.adapt import TuneConfig, evaluate, few_shot_tune, init_prompts, loss
from dsd.diffusion import ModelConfig, PretrainConfig, init_model, make_schedule, noise_latent, pretrain
from dsd.errors import FormatError
from dsd.harness import load_checkpoint, main, save_checkpoint, strict_subsets
from dsd.numerics import (
    Tensor,
    add,
    amax,
    clamp,
    concat,
    divide,
    enable_grad,
    exp,
    finite_diff_check,
    numeric_grad,
    getitem,
    log,
    logsumexp,
    logsumexp_over_rows,
    matmul,
    mean,
    multiply,
    no_grad,
    power,
    reshape,
    rms_norm,
    scale,
    sigmoid,
    silu,
    softmax,
    sqrt,
    stack,
    sub,
    sum_,
    swapaxes,
    take_rows,
    tanh,
)
from dsd.scoring import (
    ENSEMBLE_LEVELS,
    ScoreConfig,
    pool_lse,
    pool_max,
    run_pass,
    score_matrices,
    score_matrix,
    score_single_pass,
    score_tensor,
)

SEEDS = (0, 1, 2)
N_TRAIN = 5000
N_EVAL = 300
PRETRAIN = PretrainConfig(log_every=0)
TIME_BUDGET_S = 30 * 60


def report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[acceptance] criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")


# -- 1. gradient correctness ---------------------------------------------------------------

W = np.random.default_rng(0).standard_normal((3, 4))
POS = np.random.default_rng(1).uniform(0.5, 2.0, (3, 4))

OPS = {
    "add": (lambda x: add(x, Tensor(W)), None),
    "sub": (lambda x: sub(Tensor(W), x), None),
    "multiply": (lambda x: multiply(x, x), None),
    "divide": (lambda x: divide(Tensor(W), x), POS),
    "scale": (lambda x: scale(x, -2.5), None),
    "matmul": (lambda x: matmul(x, Tensor(W.T)), None),
    "sum": (lambda x: sum_(x, axis=0), None),
    "mean": (lambda x: mean(x, axis=1), None),
    "reshape": (lambda x: reshape(x, (4, 3)), None),
    "swapaxes": (lambda x: swapaxes(x, 0, 1), None),
    "concat": (lambda x: concat([x, multiply(x, x)], axis=1), None),
    "stack": (lambda x: stack([x, exp(x)], axis=0), None),
    "getitem": (lambda x: getitem(x, (slice(0, 2), 1)), None),
    "take_rows": (lambda x: take_rows(x, [2, 0, 2]), None),
    "exp": (exp, None),
    "log": (log, POS),
    "sigmoid": (sigmoid, None),
    "tanh": (tanh, None),
    "silu": (silu, None),
    "rms_norm": (rms_norm, None),
    "power": (lambda x: power(x, 3.0), None),
    "sqrt": (sqrt, POS),
    "clamp": (lambda x: clamp(x, -0.5, 0.5), None),
    "softmax": (lambda x: softmax(x, axis=-1, scale=0.7), None),
    "logsumexp": (lambda x: logsumexp(x, axis=0, lam=3.0), None),
    "lse_over_rows": (lambda x: logsumexp_over_rows(x, 5.0), None),
    "amax": (lambda x: amax(x, axis=1), None),
}


def _weighted(f):
    def g(x):
        y = f(x)
        return sum_(multiply(y, Tensor(np.cos(np.arange(y.data.size)).reshape(y.shape) + 1.5)))

    return g


def _end_to_end_error() -> tuple[float, float]:
    """Prompt key offset -> denoiser -> maps -> uniform-head score; (error, max |grad|)."""
    cfg = ModelConfig(n_text=6, d_text=4, image_hw=(8, 8), patch=4, d=4, heads=2, layers=2, ff_hidden=6)
    m = init_model(cfg, seed=3).freeze()
    p = init_prompts(m, seed=1)
    rng = np.random.default_rng(2)
    z0, eps = rng.standard_normal((2, 2, 4, 4))
    toks = np.array([[1, 2, 7, 10, 3, 8], [1, 4, 6, 11, 5, 9]])

    def f(bk):
        p.base_k[0] = bk
        with enable_grad():
            recs = run_pass(m, z0, toks, 40, eps, prompts=p)
            return sum_(score_tensor(recs, ScoreConfig(head_mode="uniform"))[0])

    x = Tensor(0.3 * rng.standard_normal(p.base_k[0].shape))
    return finite_diff_check(f, x, eps=1e-5), float(np.abs(numeric_grad(f, x, 1e-5)).max())


def test_criterion_1_gradients(capsys):
    t0 = time.perf_counter()
    errs = {}
    for name, (f, x) in OPS.items():
        x = np.random.default_rng(len(name)).standard_normal((3, 4)) if x is None else x
        errs[name] = finite_diff_check(_weighted(f), Tensor(x))
    worst = max(errs, key=errs.get)
    e2e, gmax = _end_to_end_error()
    elapsed = time.perf_counter() - t0
    ok = errs[worst] <= 1e-6 and e2e <= 1e-4 and elapsed < 60
    report(capsys, 1, ok, f"{len(errs)} ops, worst {worst} {errs[worst]:.2e} (<=1e-6); end-to-end {e2e:.2e} (<=1e-4, max |grad| {gmax:.1e}); {elapsed:.1f}s")
    assert ok


# -- 2. pooling sandwich and lambda monotonicity ----------------------------------------------------

_violations: list[str] = []


@settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(1, 64), st.integers(1, 8), st.integers(0, 2**32 - 1), st.floats(0.05, 50.0), st.floats(1.0, 4.0))
def _sandwich_property(n, m, seed, lam, factor):
    A = np.random.default_rng(seed).dirichlet(np.ones(m), size=n) if m > 1 else np.ones((n, 1))
    mx = pool_max(Tensor(A)).data
    lo = pool_lse(Tensor(A), lam).data
    hi = pool_lse(Tensor(A), lam * factor).data
    if not np.all(mx <= lo + 1e-12):
        _violations.append("max > lse")
    if not np.all(lo <= mx + math.log(n) / lam + 1e-12):
        _violations.append("lse > max + ln n / lambda")
    if not np.all(hi <= lo + 1e-12):
        _violations.append("lse increased with lambda")
    assert not _violations


def test_criterion_2_pooling_properties(capsys):
    t0 = time.perf_counter()
    _violations.clear()
    try:
        _sandwich_property()
        ok = True
    except AssertionError:
        ok = False
    report(capsys, 2, ok, f"1000 random maps; violations: {sorted(set(_violations)) or 'none'}; {time.perf_counter() - t0:.1f}s")
    assert ok


# -- 3. forward-noising statistics ---------------------------------------------------------------------


def test_criterion_3_noising_statistics(capsys):
    """Per t, one mean and one variance check, pooled over the latent's coordinates."""
    s = make_schedule()
    n = 10_000
    worst = 0.0
    for t in (10, 50, 90):
        rng = np.random.default_rng(100 + t)
        z0 = rng.standard_normal((4, 3))
        eps = rng.standard_normal((n, 4, 3))
        zt = noise_latent(np.broadcast_to(z0, eps.shape), t, eps, s)
        ab = s.alpha_bar[t]
        var = 1 - ab
        resid = (zt - math.sqrt(ab) * z0).reshape(-1)
        k = resid.size
        z_mean = abs(resid.mean()) / math.sqrt(var / k)
        z_var = abs(resid.var(ddof=1) - var) / (var * math.sqrt(2.0 / (k - 1)))
        worst = max(worst, z_mean, z_var)
    ok = worst <= 3.0
    report(capsys, 3, ok, f"t in (10, 50, 90), 10k draws, worst deviation {worst:.2f} sigma (<=3)")
    assert ok


# -- 4. micro-oracle equivalence ----------------------------------------------------------------------------


def test_criterion_4_micro_oracle(capsys):
    cfg = ModelConfig(n_text=2, d_text=4, image_hw=(4, 8), patch=4, d=4, heads=1, layers=1, ff_hidden=6)
    worst_map = worst_score = 0.0
    for seed in range(5):
        m = init_model(cfg, seed=seed).freeze()
        rng = np.random.default_rng(seed)
        z0, eps = rng.standard_normal((2, 1, 2, 4))
        toks = np.array([[1, 2 + seed]])
        with no_grad():
            recs = run_pass(m, z0, toks, 25, eps)
        score = score_single_pass(recs, ScoreConfig()).raw
        ab = m.schedule.alpha_bar[25]
        zt = math.sqrt(ab) * z0[0] + math.sqrt(1 - ab) * eps[0]
        params = {k: v.data for k, v in m.named_parameters().items()}
        _, maps = oracles.forward(params, cfg, zt, 25, toks[0])
        worst_map = max(worst_map, float(np.abs(recs[0].attention.data[0] - np.array(maps[0][0])).max()))
        worst_score = max(worst_score, abs(score - oracles.score(maps)))
    ok = worst_map <= 1e-10 and worst_score <= 1e-10
    report(capsys, 4, ok, f"2-patch/2-token/1-layer/1-head; map error {worst_map:.1e}, score error {worst_score:.1e} (<=1e-10)")
    assert ok


# -- 5. zero-prompt no-op ----------------------------------------------------------------------------------------


def test_criterion_5_zero_prompt_noop(capsys):
    m = init_model(seed=4).freeze()
    _, ev = ds.build_dataset(0, 100, 2, 55)
    plain = score_matrix(m, ev, ScoreConfig())
    prompted = score_matrix(m, ev, ScoreConfig(), prompts=init_prompts(m, seed=2))
    ok = np.array_equal(plain, prompted)
    report(capsys, 5, ok, f"100 instances, {plain.size} scores, bit-identical: {ok}")
    assert ok


# -- shared pretrained backbones --------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def backbones():
    out = {}
    for seed in SEEDS:
        train, _ = ds.build_dataset(N_TRAIN, 0, 2, seed)
        t0 = time.perf_counter()
        model, losses = pretrain(train, replace(PRETRAIN, seed=seed))
        out[seed] = {"model": model, "seconds": time.perf_counter() - t0, "loss": float(np.mean(losses[-100:]))}
        out[seed]["eval"] = ds.build_dataset(0, N_EVAL, 4, 1000 + seed)[1]
    return out


AXIS_CONFIGS = {
    "all": ScoreConfig(),
    "uniform": ScoreConfig(head_mode="uniform"),
    "max": ScoreConfig(pooling="max"),
    "cosine": ScoreConfig(pooling="cosine"),
    "ensemble": ScoreConfig.ensembled(),
    **{f"nu={nu}": ScoreConfig(noise_levels=(nu,)) for nu in ENSEMBLE_LEVELS},
    **{"layers=" + ",".join(map(str, s)): ScoreConfig(layer_set=s) for s in strict_subsets(4)},
}


@pytest.fixture(scope="module")
def ablation_top1(backbones):
    table = {}
    for seed, b in backbones.items():
        mats = score_matrices(b["model"], b["eval"], list(AXIS_CONFIGS.values()))
        truth = np.array([inst.true_index for inst in b["eval"]])
        table[seed] = {name: float((np.argmax(S, 1) == truth).mean()) for name, S in zip(AXIS_CONFIGS, mats)}
    return table


def test_criterion_6_zero_shot_signal(backbones, ablation_top1, capsys):
    accs = [ablation_top1[s]["all"] for s in SEEDS]
    secs = [backbones[s]["seconds"] for s in SEEDS]
    mean_acc = float(np.mean(accs))
    ok = mean_acc >= 0.5 and max(secs) <= TIME_BUDGET_S and PRETRAIN.steps <= 50_000 and N_TRAIN >= 5000
    report(
        capsys,
        6,
        ok,
        f"C=4 zero-shot top-1 per seed {[round(a, 3) for a in accs]}, mean {mean_acc:.3f} (>=0.5, chance 0.25); "
        f"{PRETRAIN.steps} steps on {N_TRAIN} pairs, slowest pretraining {max(secs):.0f}s",
    )
    assert ok


def test_criterion_7_few_shot_gain(backbones, capsys):
    gains = []
    for seed in SEEDS:
        model = backbones[seed]["model"]
        train, ev = ds.build_dataset(64, N_EVAL, 10, 2000 + seed)
        zero = evaluate(model, None, ev, ScoreConfig())["top1"]
        tuned = few_shot_tune(model, train, TuneConfig(shots=64, seed=seed))
        after = evaluate(model, tuned.params, ev, ScoreConfig())["top1"]
        gains.append(after - zero)
    mean_gain = float(np.mean(gains))
    ok = mean_gain >= 0.02
    report(capsys, 7, ok, f"C=10, 64 shots: top-1 gain per seed {[round(g, 3) for g in gains]}, mean {mean_gain:+.3f} (>=+0.02)")
    assert ok


def test_criterion_8_ablation_directions(ablation_top1, capsys):
    def inverted(seed, lhs, rhs, tol):
        return ablation_top1[seed][lhs] < rhs(seed) - tol

    subsets = [k for k in AXIS_CONFIGS if k.startswith("layers=")]
    singles = [f"nu={nu}" for nu in ENSEMBLE_LEVELS]
    checks = {
        "all layers >= best strict subset - 1pt": ("all", lambda s: max(ablation_top1[s][k] for k in subsets), 0.01),
        "dynamic >= uniform - 0.5pt": ("all", lambda s: ablation_top1[s]["uniform"], 0.005),
        "lse >= max - 1pt": ("all", lambda s: ablation_top1[s]["max"], 0.01),
        "max >= cosine - 1pt": ("max", lambda s: ablation_top1[s]["cosine"], 0.01),
        "ensemble >= best single level - 1pt": ("ensemble", lambda s: max(ablation_top1[s][k] for k in singles), 0.01),
    }
    failed = []
    lines = []
    for name, (lhs, rhs, tol) in checks.items():
        inv = [inverted(s, lhs, rhs, tol) for s in SEEDS]
        margin = np.mean([ablation_top1[s][lhs] - rhs(s) for s in SEEDS])
        lines.append(f"{name}: mean margin {margin:+.3f}, inverted on {sum(inv)}/3 seeds")
        if all(inv):
            failed.append(name)
    with capsys.disabled():
        for line in lines:
            print(f"\n[acceptance]   {line}", end="")
        means = {k: round(float(np.mean([ablation_top1[s][k] for s in SEEDS])), 3) for k in AXIS_CONFIGS}
        print(f"\n[acceptance]   mean top-1 by setting: {json.dumps(means)}", end="")
    report(capsys, 8, not failed, f"directions inverted on all seeds: {failed or 'none'}")
    assert not failed


# -- 9. determinism and persistence ------------------------------------------------------------------------------------------


def test_criterion_9_determinism_and_persistence(tmp_path, capsys):
    reports = []
    ckpts = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["gen-data", "--out", str(d), "--n-train", "16", "--n-eval", "8", "--candidates", "4", "--seed", "3"]) == 0
        assert main(["pretrain", "--data", str(d), "--steps", "5", "--batch-size", "4", "--seed", "7", "--out", str(d / "m.dsd")]) == 0
        assert main(["eval", "--ckpt", str(d / "m.dsd"), "--data", str(d), "--report", str(d / "r.json")]) == 0
        reports.append((d / "r.json").read_bytes())
        ckpts.append((d / "m.dsd").read_bytes())
    capsys.readouterr()
    identical = reports[0] == reports[1] and ckpts[0] == ckpts[1]

    model = load_checkpoint(tmp_path / "a" / "m.dsd").model()
    save_checkpoint(model, None, tmp_path / "again.dsd")
    again = load_checkpoint(tmp_path / "again.dsd").model()
    ev = ds.load_split(tmp_path / "a", "eval")
    delta = float(np.abs(score_matrix(again, ev, ScoreConfig()) - score_matrix(model, ev, ScoreConfig())).max())

    detected = 0
    buf = (tmp_path / "again.dsd").read_bytes()
    positions = np.random.default_rng(0).integers(0, len(buf), 20)
    for pos in positions:
        bad = bytearray(buf)
        bad[pos] ^= 0x10
        (tmp_path / "bad.dsd").write_bytes(bytes(bad))
        try:
            load_checkpoint(tmp_path / "bad.dsd")
        except FormatError:
            detected += 1
    ok = identical and delta == 0.0 and detected == len(positions)
    report(capsys, 9, ok, f"byte-identical reruns: {identical}; round-trip score delta {delta}; corruptions detected {detected}/{len(positions)}")
    assert ok


# -- 10. loss closed forms --------------------------------------------------------------------------------------------------------


def test_criterion_10_loss_closed_forms(capsys):
    errs = []
    for C in (2, 4, 10, 37):
        errs.append(abs(loss(Tensor(np.full((5, C), -0.3)), np.arange(5) % C, "multiclass").item() - math.log(C)))
    errs.append(abs(loss(Tensor([0.5]), [1], "binary").item() - math.log(2)))
    errs.append(abs(loss(Tensor([0.5]), [0], "binary").item() - math.log(2)))
    worst = max(errs)
    ok = worst <= 1e-12
    report(capsys, 10, ok, f"uniform multiclass = ln C and binary closed forms; worst error {worst:.1e} (<=1e-12)")
    assert ok
