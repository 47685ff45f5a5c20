"""Acceptance criteria 1-11.  Each test records a PASS/FAIL line printed at the end of the session."""
import itertools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from mantis_cd.ftnmt import FTConfig, closed_form_numpy, ftnmt_avg, ftnmt_complement, tanimoto_d, tanimoto_recursive_oracle
from mantis_cd.blocks import CEECNetUnit
from mantis_cd.gradsuite import run_suite
from mantis_cd.inference import InferenceConfig, landscape_emit, mean_gradient_near, padding, parse_landscape, sliding_inference, window_origins
from mantis_cd.mantis import Mantis, MantisConfig
from mantis_cd.pipeline import synth_dataset
from mantis_cd.substrate import Tensor, no_grad
from mantis_cd.trainer import CheckpointRecord, EvolveSchedule, TrainConfig, dominates, metrics, pareto_front, train

OVERFIT_STAGES = ((1e-3, 0), (1e-4, 5), (1e-5, 10))
OVERFIT_PATIENCE = 3
OVERFIT_TIME_LIMIT = 28 * 60.0
IMPROVE_WINDOW = 20


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_01_closed_form_matches_recursion():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    dims = rng.integers(1, 65, size=1000)
    for dim in np.unique(dims):
        n = int((dims == dim).sum())
        p = rng.uniform(1e-3, 1.0, size=(n, dim))
        l = rng.uniform(1e-3, 1.0, size=(n, dim))
        for d in range(9):
            closed = closed_form_numpy(p, l, d)
            rec = tanimoto_recursive_oracle(p, l, d)
            lib = tanimoto_d(p, l, FTConfig(d, (-1,), smooth=0.0)).data[:, 0]
            worst = max(worst, np.abs(closed - rec).max(), np.abs(lib - rec).max())
    elapsed = time.perf_counter() - start
    record(1, worst <= 1e-10 and elapsed < 10, f"max |closed - recursive| = {worst:.2e}, {elapsed:.2f} s")


def test_criterion_02_gradient_suite():
    start = time.perf_counter()
    results = run_suite(seed=0, full_network=True)
    elapsed = time.perf_counter() - start
    failed = [name for name, rep in results if not rep.passed]
    worst = max(rep.max_rel_error for _, rep in results)
    record(2, not failed and elapsed < 300,
           f"{len(results)} checks, failed={failed}, worst rel err {worst:.1e}, {elapsed:.0f} s")


def test_criterion_03_depth_monotone_and_range():
    rng = np.random.default_rng(103)
    n = 10_000
    dims = rng.integers(1, 65, size=n)
    live = np.arange(64)[None, :] < dims[:, None]
    p = rng.uniform(size=(n, 64)) * live
    l = rng.uniform(size=(n, 64)) * live
    same = rng.uniform(size=n) < 0.1
    l[same] = p[same]
    ok, worst_mono, worst_range = True, 0.0, 0.0
    prev = None
    for d in range(11):
        cfg = FTConfig(d, (-1,))
        t = tanimoto_d(p, l, cfg).data[:, 0]
        for v in (t, ftnmt_complement(p, l, cfg).data, ftnmt_avg(p, l, cfg).data):
            worst_range = max(worst_range, -v.min(), v.max() - 1.0)
        if prev is not None:
            worst_mono = max(worst_mono, (t - prev).max())
        prev = t
        ones = np.abs(t - 1.0) <= 1e-12
        ok &= bool(np.array_equal(ones, same | np.all(p == l, axis=1)))
    ok &= worst_mono <= 0.0 and worst_range <= 0.0
    record(3, ok, f"max T^(d+1) - T^d = {worst_mono:.1e}, range excess {worst_range:.1e}, "
                  f"{int(same.sum())} identical pairs at exactly 1")


def test_criterion_04_gamma_init_identity():
    rng = np.random.default_rng(104)
    full = Mantis(MantisConfig(depth=4, nf=8, seed=11))
    ablated = Mantis(MantisConfig(depth=4, nf=8, seed=11, attention=False))
    equal = 0
    for _ in range(10):
        a, b = rng.uniform(size=(2, 1, 3, 64, 64))
        with no_grad():
            out_f, out_a = full(a, b), ablated(a, b)
        equal += all(np.array_equal(out_f[k].data, out_a[k].data) for k in out_f)
    record(4, equal == 10, f"{equal}/10 random pairs bit-equal")


def expected_ledger(cfg, size):
    """Encoder outputs at every depth; fusions and decoder outputs at every depth but the bottom one."""
    shapes = {}
    for i in range(cfg.depth):
        shapes[f"enc{i}"] = (1, cfg.channels(i), size >> i, size >> i)
        if i < cfg.depth - 1:
            shapes[f"fused{i}"] = shapes[f"dec{i}"] = shapes[f"enc{i}"]
    shapes["psp"] = shapes[f"enc{cfg.depth - 1}"]
    return shapes


def test_criterion_05_shape_ledger():
    checked, bad = 0, []
    for depth, nf in itertools.product((4, 5, 6), (8, 16, 32)):
        cfg = MantisConfig(depth=depth, nf=nf, seed=0)
        model = Mantis(cfg)
        size = cfg.min_size()
        log = []
        model.set_shape_log(log)
        x = np.random.default_rng(depth * nf).uniform(size=(1, 3, size, size))
        with no_grad():
            out = model(x, x)
        model.set_shape_log(None)
        want = expected_ledger(cfg, size)
        got = {}
        for name, shape in log:
            got.setdefault(name, shape)
        for name, shape in want.items():
            checked += 1
            if got.get(name) != shape:
                bad.append((depth, nf, name, got.get(name), shape))
        if out["segmentation"].shape != (1, 2, size, size):
            bad.append((depth, nf, "segmentation"))
    # CEECNet unit volumes: the compress path halves the input volume, the expand path doubles it
    for variant in ("ceecnet_v1", "ceecnet_v2"):
        unit = CEECNetUnit(32, variant=variant, rng=0)
        unit.shape_log = []
        unit(Tensor(np.random.default_rng(5).standard_normal((1, 32, 16, 16))))
        vol = {k: int(np.prod(v)) for k, v in unit.shape_log}
        checked += 2
        if vol["ce_bottom"] * 2 != vol["ce_in"] or vol["ec_top"] != 2 * vol["ec_in"]:
            bad.append((variant, vol))
    record(5, not bad, f"{checked} ledger entries over D in 4,5,6 x nf in 8,16,32 plus CEECNet volumes, mismatches {bad}")


def brute_metrics(pred, gt):
    tp = tn = fp = fn = 0
    for a, b in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        tp += a and b
        tn += (not a) and (not b)
        fp += a and not b
        fn += b and not a
    den = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return {
        "precision": tp / (tp + fp) if tp + fp else 0.0,
        "recall": tp / (tp + fn) if tp + fn else 0.0,
        "f1": 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0,
        "mcc": (tp * tn - fp * fn) / den if den else 0.0,
        "iou": tp / (tp + fp + fn) if tp + fp + fn else 0.0,
    }


def test_criterion_06_metrics_oracle():
    rng = np.random.default_rng(106)
    exact, identity = 0, 0
    for _ in range(100):
        pred = rng.uniform(size=(32, 32)) < rng.uniform()
        gt = rng.uniform(size=(32, 32)) < rng.uniform()
        m = metrics(pred, gt)
        exact += m == brute_metrics(pred, gt)
        identity += abs(m["f1"] - 2 * m["iou"] / (1 + m["iou"])) <= 1e-12
    record(6, exact == 100 and identity == 100, f"{exact}/100 exact oracle matches, {identity}/100 F1-IoU identity")


def _improved_after(run, k):
    """Epochs after switch k (before the next switch, within the window) whose val 1 - <FT> beats the baseline."""
    s = run.switches[k]
    end = run.switches[k + 1].epoch if k + 1 < len(run.switches) else math.inf
    return [r.epoch for r in run.records
            if s.epoch < r.epoch <= min(s.epoch + IMPROVE_WINDOW, end) and 1.0 - r.ftnmt < s.baseline]


def _switch_settled(run, k, epoch):
    s = run.switches[k]
    return bool(_improved_after(run, k)) or epoch - s.epoch >= IMPROVE_WINDOW


@pytest.fixture(scope="module")
def overfit_run():
    train_chips = synth_dataset(32, 64, seed=0)
    val_chips = synth_dataset(8, 64, seed=1)
    model = Mantis(MantisConfig(depth=4, nf=8, ft_depth=5, variant="fractal_resnet", seed=0))
    schedule = EvolveSchedule(OVERFIT_STAGES, patience=OVERFIT_PATIENCE)

    def stop(rec, run):
        if rec.elapsed > OVERFIT_TIME_LIMIT:
            return "time limit"
        f1_reached = any(r.train_f1 >= 0.95 for r in run.records)
        switches_done = len(run.switches) == len(OVERFIT_STAGES) - 1 and all(
            _switch_settled(run, k, rec.epoch) for k in range(len(run.switches)))
        if f1_reached and switches_done:
            return "criteria observed"
        return None

    start = time.perf_counter()
    run = train(model, train_chips, val_chips, schedule, TrainConfig(epochs=200, batch_size=4, seed=0), stop=stop)
    return run, time.perf_counter() - start


def test_criterion_07_desk_scale_overfit(overfit_run):
    run, elapsed = overfit_run
    best = max(r.train_f1 for r in run.records)
    first = next((r.epoch for r in run.records if r.train_f1 >= 0.95), None)
    finite = all(math.isfinite(v) for r in run.records for v in (r.train_loss, r.val_loss, r.mcc, r.ftnmt))
    stages = sorted({r.stage for r in run.records})
    record(7, first is not None and first < 200 and elapsed <= 30 * 60 and finite,
           f"train F1 >= 0.95 first at epoch {first} (best {best:.3f}), {len(run)} epochs in {elapsed / 60:.1f} min, "
           f"stages visited {stages}, all losses finite: {finite}")


def test_criterion_08_evolving_loss_improves_after_switch(overfit_run):
    run, _ = overfit_run
    details, ok = [], len(run.switches) == len(OVERFIT_STAGES) - 1
    for k, s in enumerate(run.switches):
        hits = _improved_after(run, k)
        ok &= bool(hits)
        best = min((1.0 - r.ftnmt for r in run.records if r.epoch > s.epoch and r.depth == s.depth), default=math.nan)
        details.append(f"d={s.depth} at epoch {s.epoch}: baseline {s.baseline:.4f}, best after {best:.4f}, "
                       f"first improvement epoch {hits[0] if hits else None}")
    record(8, ok, f"{len(run.switches)} switches; " + "; ".join(details))


class Ramp:
    def __call__(self, a, b):
        return 0.5 + 0.5 * np.tanh(a[:, 0] - b[:, 2] + 0.1 * np.arange(a.shape[-2])[None, :, None] / a.shape[-2])


def test_criterion_09_sliding_inference():
    model = Mantis(MantisConfig(depth=4, nf=8, seed=9))
    rng = np.random.default_rng(109)
    a, b = rng.uniform(size=(2, 3, 64, 64))
    single = sliding_inference(model, a, b, InferenceConfig(window=64, stride=64))
    err_single = np.abs(single - model.predict(a[None], b[None])[0]).max()

    ra, rb = rng.uniform(size=(2, 3, 48, 56))
    F, s = 16, 4
    out = sliding_inference(Ramp(), ra, rb, InferenceConfig(window=F, stride=s))
    pads = (padding(48, F, s), padding(56, F, s))
    pa = np.pad(ra, ((0, 0),) + pads, mode="reflect")
    pb = np.pad(rb, ((0, 0),) + pads, mode="reflect")
    total = np.zeros(pa.shape[1:])
    count = np.zeros(pa.shape[1:])
    for y in range(0, pa.shape[1] - F + 1, s):
        for x in range(0, pa.shape[2] - F + 1, s):
            prob = Ramp()(pa[None, :, y : y + F, x : x + F], pb[None, :, y : y + F, x : x + F])[0]
            for i in range(F):
                for j in range(F):
                    total[y + i, x + j] += prob[i, j]
                    count[y + i, x + j] += 1
    ref = (total / count)[pads[0][0] : pads[0][0] + 48, pads[1][0] : pads[1][0] + 56]
    err_avg = np.abs(out - ref).max()
    n_windows = len(window_origins(512, 512, 256, 64))
    record(9, err_single <= 1e-12 and err_avg <= 1e-12 and n_windows == 25,
           f"single window err {err_single:.1e}, overlap-average err {err_avg:.1e}, 512/256/64 windows {n_windows}")


def test_criterion_10_landscape():
    l = (0.4, 0.6)
    parsed = parse_landscape(landscape_emit(l, (0, 3, 5), 101))
    at_l, grads = [], []
    for d in (0, 3, 5):
        axis, grid = parsed[d]
        i, j = np.argmin(np.abs(axis - l[0])), np.argmin(np.abs(axis - l[1]))
        at_l.append(grid[i, j])
        grads.append(mean_gradient_near(axis, grid, l, radius=0.05))
    ok = all(abs(v - 1.0) <= 1e-12 for v in at_l) and grads[0] < grads[1] < grads[2]
    record(10, ok, f"value at l {[float(v) for v in at_l]}, mean |grad| near l {[round(float(g), 4) for g in grads]}")


def brute_front(points):
    return sorted(i for i, p in enumerate(points) if not any(dominates(q, p) for j, q in enumerate(points) if j != i))


def test_criterion_11_pareto():
    rng = np.random.default_rng(111)
    pts = [(float(m), float(f)) for m, f in zip(rng.uniform(-1, 1, 100), rng.uniform(0, 1, 100))]
    records = [CheckpointRecord(i, m, f) for i, (m, f) in enumerate(pts)]
    random_ok = sorted(r.epoch for r in pareto_front(records)) == brute_front(pts)
    # two metrics that disagree late in training: MCC peaks at one epoch, <FT> at another,
    # every other checkpoint is dominated by one of them
    epochs = np.arange(300)
    mcc = 0.80 + 0.05 * (1 - np.exp(-epochs / 60)) + 0.004 * np.sin(epochs / 7)
    ft = 0.90 + 0.04 * (1 - np.exp(-epochs / 80)) + 0.003 * np.cos(epochs / 11)
    top_m, top_f = mcc.max(), ft.max()
    mcc[270], ft[270] = top_m + 0.010, top_f + 0.002
    mcc[250], ft[250] = top_m + 0.004, top_f + 0.008
    front = pareto_front([CheckpointRecord(int(e), float(m), float(f)) for e, m, f in zip(epochs, mcc, ft)])
    two_point = sorted(r.epoch for r in front) == [250, 270]
    record(11, random_ok and two_point,
           f"100-point front equals O(n^2) oracle: {random_ok}; two-point front at epochs {[r.epoch for r in front]}")
