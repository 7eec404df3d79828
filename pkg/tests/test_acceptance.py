"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Lines are printed as they happen and repeated in the terminal summary, so a
plain ``pytest -v`` run shows all of them.
"""

import math
import time

import numpy as np
import pytest
from helpers import FD_TOL, check_grad, sctm_end_to_end_errors
from test_tensor import GRAD_CASES

from sct import container
from sct.benchmark import run_erasing_diagnostic, run_toy_benchmark
from sct.cli import main
from sct.data import SyntheticSpec, load_dataset, make_synthetic_dataset, save_dataset
from sct.errors import BadMagicError, TruncatedFileError
from sct.finetune import AdamW, TrainConfig, lr_at, train
from sct.rng import Rng
from sct.sctm import (
    InjectionPlan,
    Position,
    inject,
    load_tuned,
    save_tuned,
    sctm_forward,
)
from sct.select import (
    ChannelSelection,
    ClassPartition,
    ImportanceScores,
    ScoringMode,
    Strategy,
    importance_scores,
    load_selection,
    save_selection,
    select_channels,
    top_k,
)
from sct.tensor import Tensor
from sct.vit import (
    PRESETS,
    VisionTransformer,
    init_toy_checkpoint,
    load_checkpoint,
    save_checkpoint,
)

RESULTS: list[str] = []

# pinned tolerances
REL_TOL_SCORES = 1e-6
LINEARITY_TOL = 1e-6
ADAMW_TOL = 1e-7
BENCH_MARGIN = 0.03
BENCH_PARAM_FRACTION = 0.01
BUDGET_S = {1: 1, 2: 1, 3: 10, 4: 10, 5: 10, 6: 30, 7: 300, 8: 600, 9: 120, 10: 5, 11: 5}


def report(n: int, ok: bool, detail: str, started: float) -> None:
    took = time.perf_counter() - started
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}  ({took:.1f}s, budget {BUDGET_S[n]}s)"
    RESULTS.append(line)
    print(line)
    assert ok, line


def scalar_scores(feats, labels, mode):
    """Brute-force oracle: per-group sqrt of summed squares per channel, averaged over groups."""
    groups = [0] * len(labels) if mode is ScoringMode.GLOBAL else list(labels)
    b, n, d = feats.shape
    out = []
    for ch in range(d):
        norms = []
        for g in sorted(set(groups)):
            s = 0.0
            for i in range(b):
                if groups[i] == g:
                    for t in range(n):
                        s += float(feats[i, t, ch]) ** 2
            norms.append(math.sqrt(s))
        out.append(sum(norms) / len(norms))
    return np.asarray(out)


def test_c01_parameter_accounting(capsys, tmp_path):
    t0 = time.perf_counter()
    got = {}
    for k in (96, 192, 32):
        assert main(["params", "--preset", "vit-b16", "--k", str(k), "--position", "attn", "--out", str(tmp_path)]) == 0
        lines = dict(l.split(" ", 1) for l in capsys.readouterr().out.splitlines() if " " in l)
        got[k] = (int(lines["sctm_weights"]), int(lines["backbone"]))
    ok = got[96][0] == 110_592 and got[192][0] == 442_368 and got[32][0] == 12_288
    ok &= (round(got[96][0] / 1e6, 2), round(got[192][0] / 1e6, 2), round(got[32][0] / 1e6, 2)) == (0.11, 0.44, 0.01)
    # rounded figures: backbone in millions to 1 decimal over SCTM weights to 2 decimals
    quoted = round(got[96][1] / 1e6, 1) / round(got[96][0] / 1e6, 2)
    ok &= round(got[96][1] / 1e6, 1) == 85.8 and round(quoted) == 780
    ok &= time.perf_counter() - t0 < BUDGET_S[1]
    report(1, ok, f"K=96/192/32 -> {got[96][0]}/{got[192][0]}/{got[32][0]}, backbone {got[96][1]}, ratio 85.8M/0.11M = {quoted:.1f}", t0)


def test_c02_comparator_inequality(capsys, tmp_path):
    t0 = time.perf_counter()
    assert main(["flops", "--preset", "vit-b16", "--k", "96", "--compare", "ssf:74", "--out", str(tmp_path)]) == 0
    table = capsys.readouterr().out.split("method,params,flops\n")[1].splitlines()
    rows = {r.split(",")[0]: tuple(int(v) for v in r.split(",")[1:]) for r in table}
    d, l, n = 768, 12, 197
    ok = rows["sct"] == (12 * l * d, 12 * n * l * d) and rows["ssf"] == (74 * l * d, 74 * n * l * d)
    ok &= rows["sct"][0] < rows["ssf"][0] and rows["sct"][1] < rows["ssf"][1]
    ok &= time.perf_counter() - t0 < BUDGET_S[2]
    report(2, ok, f"params {rows['sct'][0]} < {rows['ssf'][0]}, flops {rows['sct'][1]} < {rows['ssf'][1]}", t0)


def test_c03_importance_oracle():
    t0 = time.perf_counter()
    gen = np.random.default_rng(2024)
    worst, count = 0.0, 0
    for _ in range(120):
        m = int(gen.integers(1, 6))
        sizes = gen.integers(1, 5, size=m)
        labels = np.repeat(np.arange(m), sizes)
        gen.shuffle(labels)
        n, d = int(gen.integers(1, 7)), int(gen.integers(1, 17))
        feats = (gen.standard_normal((labels.size, n, d)) * gen.uniform(0.1, 10)).astype(np.float32)
        part = ClassPartition.from_labels(labels)
        for mode in ScoringMode:
            got = importance_scores({1: feats}, part, mode)[1].astype(np.float64)
            want = scalar_scores(feats, labels, mode)
            worst = max(worst, float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-30))))
            count += 1
    ok = worst < REL_TOL_SCORES and time.perf_counter() - t0 < BUDGET_S[3]
    report(3, ok, f"{count} instance-modes, worst relative error {worst:.2e}", t0)


def test_c04_selection_properties():
    t0 = time.perf_counter()
    failures = []
    for seed in range(120):
        gen = np.random.default_rng(seed)
        # top-k against a full sort; small integer scores force ties
        d = int(gen.integers(2, 24))
        k = int(gen.integers(1, d + 1))
        z = gen.integers(0, 4, size=d).astype(np.float32)
        want = sorted(sorted(range(d), key=lambda i: (-z[i], i))[:k])
        if top_k(z, k).tolist() != want or top_k(z, k).tolist() != top_k(z.copy(), k).tolist():
            failures.append(f"topk seed {seed}")

        # scaling and duplication invariance on real scores
        m = int(gen.integers(1, 4))
        labels = np.repeat(np.arange(m), gen.integers(1, 4, size=m))
        feats = gen.standard_normal((labels.size, 3, d)).astype(np.float32)
        part = ClassPartition.from_labels(labels)
        base = select_channels(importance_scores({1: feats}, part), k)[1].tolist()
        c = np.float32(gen.uniform(0.1, 10.0))
        scaled = select_channels(importance_scores({1: feats * c}, part), k)[1].tolist()
        doubled = select_channels(
            importance_scores({1: np.concatenate([feats, feats])}, ClassPartition.from_labels(np.r_[labels, labels])), k
        )[1].tolist()
        if scaled != base or doubled != base:
            failures.append(f"invariance seed {seed}")

        # salient and inconspicuous are disjoint when 2K <= D and no tie sits on a boundary
        kk = int(gen.integers(1, d // 2 + 1))
        zs = ImportanceScores({1: gen.permutation(d).astype(np.float32)})
        sc = select_channels(zs, kk, Strategy.SALIENT)[1]
        ic = select_channels(zs, kk, Strategy.INCONSPICUOUS)[1]
        if np.intersect1d(sc, ic).size:
            failures.append(f"disjoint seed {seed}")
    ok = not failures and time.perf_counter() - t0 < BUDGET_S[4]
    report(4, ok, f"120 seeds x (top-k, ties, scale, duplicate, disjoint); failures: {failures[:3] or 'none'}", t0)


def test_c05_sctm_invariants():
    t0 = time.perf_counter()
    tiny = PRESETS["tiny"]
    vit = VisionTransformer(tiny, init_toy_checkpoint(tiny, Rng(0)))
    images = np.random.default_rng(0).random((3, 3, 8, 8)).astype(np.float32)
    sel = ChannelSelection({1: np.array([0, 5, 9]), 2: np.array([2, 3, 15])})
    frozen = vit.features(images).data.tobytes()
    ok = True
    for position in Position:
        model = inject(vit, sel, InjectionPlan.all_layers(2, position), 0.7, 4)
        ok &= vit.features(images, hooks=model.hooks()).data.tobytes() == frozen
    gen = np.random.default_rng(1)
    worst_lin = 0.0
    for seed in range(50):
        d = int(gen.integers(2, 16))
        idx = np.sort(gen.choice(d, size=int(gen.integers(1, d + 1)), replace=False))
        rest = np.setdiff1d(np.arange(d), idx)
        x = Tensor(gen.standard_normal((2, 4, d)))
        w, b = Tensor(gen.standard_normal((idx.size, idx.size))), Tensor(gen.standard_normal(idx.size))
        ok &= sctm_forward(x, idx, w, b, 0.0).data.tobytes() == x.data.tobytes()
        out = sctm_forward(x, idx, w, b, float(gen.uniform(0.1, 2)))
        ok &= out.data[..., rest].tobytes() == x.data[..., rest].tobytes()
        unit = sctm_forward(x, idx, w, b, 1.0).data[..., idx].astype(np.float64) - x.data[..., idx]
        s = float(gen.uniform(0.0, 1.0))
        delta = sctm_forward(x, idx, w, b, s).data[..., idx].astype(np.float64) - x.data[..., idx]
        worst_lin = max(worst_lin, float(np.max(np.abs(delta - s * unit)) / max(1.0, float(np.max(np.abs(unit))))))
    ok &= worst_lin < LINEARITY_TOL and time.perf_counter() - t0 < BUDGET_S[5]
    report(5, ok, f"identity at init (3 positions), s=0, freeze bitwise; linearity error {worst_lin:.1e}", t0)


def test_c06_gradients():
    t0 = time.perf_counter()
    errs = {name: max(check_grad(fn, inputs).values()) for name, fn, inputs in GRAD_CASES}
    e2e = sctm_end_to_end_errors()
    worst = max(list(errs.values()) + list(e2e.values()))
    ok = worst < FD_TOL and time.perf_counter() - t0 < BUDGET_S[6]
    report(6, ok, f"{len(errs)} primitives + end-to-end ({len(e2e)} leaves), worst relative error {worst:.1e}", t0)


def test_c07_freeze_contract(tmp_path):
    t0 = time.perf_counter()
    cfg = PRESETS["toy"]
    vit = VisionTransformer(cfg, init_toy_checkpoint(cfg, Rng(7)))
    save_checkpoint(tmp_path / "before.sctw", vit.ckpt)
    spec = SyntheticSpec(train_per_class=2, val_per_class=1)
    ds = make_synthetic_dataset(spec, cfg, Rng(8))
    sel = ChannelSelection({l: np.arange(16) * 8 for l in range(1, 13)})
    model = inject(vit, sel, InjectionPlan.all_layers(12), 0.5, 8)
    expected = set(model.params)
    bad_steps = []
    res = train(model, ds, TrainConfig(lr=0.01, epochs=100, warmup_epochs=10, batch_size=64),
                on_step=lambda step, grads: bad_steps.append(step) if set(grads) != expected else None)
    save_checkpoint(tmp_path / "after.sctw", vit.ckpt)
    same = (tmp_path / "before.sctw").read_bytes() == (tmp_path / "after.sctw").read_bytes()
    ok = same and not bad_steps and len(res.metrics) == 100 and time.perf_counter() - t0 < BUDGET_S[7]
    report(7, ok, f"100 epochs, backbone bytes identical: {same}, steps with wrong gradient keys: {len(bad_steps)}", t0)


@pytest.fixture(scope="module")
def toy_benchmark():
    t0 = time.perf_counter()
    return run_toy_benchmark(), time.perf_counter() - t0


def test_c08_toy_benchmark(toy_benchmark):
    r, took = toy_benchmark
    t0 = time.perf_counter() - took
    ok = r.sct_val >= r.probe_val + BENCH_MARGIN and r.trainable_fraction < BENCH_PARAM_FRACTION
    ok &= took < BUDGET_S[8]
    report(8, ok, f"SCT val {r.sct_val:.3f} vs probe val {r.probe_val:.3f} (lr {r.probe_lr}), "
           f"margin {100 * r.margin:+.1f} pts, trainable {r.sct_trainable} = {100 * r.trainable_fraction:.3f}%", t0)


def test_toy_sct_train_accuracy_not_below_probe(toy_benchmark):
    r, _ = toy_benchmark
    assert r.sct_train >= r.probe_train, (r.sct_train, r.probe_train)


def test_c09_erasing_diagnostic():
    t0 = time.perf_counter()
    rows = {r.layers: r for r in run_erasing_diagnostic(trials=10)}
    plain, erased = rows["none"].salient_acc, rows["all"]
    ok = erased.salient_acc <= erased.random_mean and time.perf_counter() - t0 < BUDGET_S[9]
    report(9, ok, f"plain {plain:.3f}; salient-erased {erased.salient_acc:.3f} <= mean random-erased {erased.random_mean:.3f} "
           f"(random acc {erased.random_min:.3f}..{erased.random_max:.3f})", t0)


def test_c10_format_round_trips(tmp_path):
    t0 = time.perf_counter()
    tiny = PRESETS["tiny"]
    vit = VisionTransformer(tiny, init_toy_checkpoint(tiny, Rng(1)))
    ds = make_synthetic_dataset(SyntheticSpec(num_classes=4, train_per_class=3, val_per_class=1), tiny, Rng(2))
    sel = ChannelSelection({1: np.array([1, 4]), 2: np.array([0, 7])}, model_fingerprint=vit.ckpt.fingerprint())
    model = inject(vit, sel, InjectionPlan.all_layers(2, Position.BOTH), 0.4, 4)
    for name in model.params:
        model.params[name] = np.random.default_rng(len(name)).standard_normal(model.params[name].shape).astype(np.float32)

    checks = {}
    save_checkpoint(tmp_path / "c1", vit.ckpt)
    save_checkpoint(tmp_path / "c2", load_checkpoint(tmp_path / "c1", tiny))
    checks["checkpoint"] = (tmp_path / "c1").read_bytes() == (tmp_path / "c2").read_bytes()
    save_dataset(tmp_path / "d1", ds)
    save_dataset(tmp_path / "d2", load_dataset(tmp_path / "d1"))
    checks["dataset"] = (tmp_path / "d1").read_bytes() == (tmp_path / "d2").read_bytes()
    save_selection(tmp_path / "s1", sel)
    save_selection(tmp_path / "s2", load_selection(tmp_path / "s1"))
    checks["selection"] = (tmp_path / "s1").read_bytes() == (tmp_path / "s2").read_bytes()
    save_tuned(tmp_path / "a1", model, "0011223344556677")
    back, fp = load_tuned(tmp_path / "a1", vit)
    save_tuned(tmp_path / "a2", back, fp)
    checks["artifact"] = (tmp_path / "a1").read_bytes() == (tmp_path / "a2").read_bytes()

    raw = (tmp_path / "c1").read_bytes()
    (tmp_path / "bad_magic").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short").write_bytes(raw[: len(raw) // 2])
    for path, err in ((tmp_path / "bad_magic", BadMagicError), (tmp_path / "short", TruncatedFileError)):
        try:
            container.load(path)
            checks[path.name] = False
        except err:
            checks[path.name] = True
    (tmp_path / "config.json").write_text('{"image_size": 8, "patch_size": 4, "embed_dim": 16, "num_layers": 2, '
                                          '"num_heads": 2, "num_classes": 4}')
    for bad in ("bad_magic", "short"):
        code = main(["select", "--checkpoint", str(tmp_path / bad), "--vit-config", str(tmp_path / "config.json"),
                     "--dataset", str(tmp_path / "d1"), "--k", "2", "--out", str(tmp_path / f"o_{bad}")])
        checks[f"exit code {bad}"] = code == 3
    ok = all(checks.values()) and time.perf_counter() - t0 < BUDGET_S[10]
    failed = [k for k, v in checks.items() if not v]
    report(10, ok, f"4 byte-identical round trips, bad magic and truncation rejected (exit 3); failed: {failed or 'none'}", t0)


def test_c11_trainer_unit():
    t0 = time.perf_counter()
    a, lr, wd, p0 = 3.0, 0.05, 0.1, 0.8
    params = {"p": np.array([p0], np.float32)}
    AdamW(wd).step(params, {"p": np.array([a * p0])}, lr)
    g = a * p0
    want = p0 * (1 - lr * wd) - lr * (g / (1 - 0.9)) * (1 - 0.9) / (math.sqrt(g * g) + 1e-8)
    err = abs(float(params["p"][0]) - want)
    sched_ok = True
    for warm in (0, 1, 2, 5, 10):
        for extra in (1, 2, 7, 50, 300):
            total = warm + extra
            vals = [lr_at(t, 1.0, warm, total) for t in range(total + 1)]
            sched_ok &= (not warm or abs(vals[0] - 1.0 / warm) < 1e-12) and abs(vals[warm] - 1.0) < 1e-12
            sched_ok &= abs(vals[total]) < 1e-12
            sched_ok &= all(x <= y for x, y in zip(vals[:warm], vals[1 : warm + 1]))
            sched_ok &= all(x >= y for x, y in zip(vals[warm:], vals[warm + 1 :]))
    ok = err < ADAMW_TOL and sched_ok and time.perf_counter() - t0 < BUDGET_S[11]
    report(11, ok, f"AdamW step error {err:.1e}; schedule endpoints/monotonicity on 25 (warmup, total) pairs: {sched_ok}", t0)
