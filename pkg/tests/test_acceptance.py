"""End-to-end acceptance criteria, one test per criterion.

Each test records a single ``PASS``/``FAIL`` line through the ``verdict``
fixture (see ``conftest.py``); the lines are repeated in a summary block at
the end of the pytest run. Criteria 5 and 8 train the desk-scale model from
``configs/desk.cfg`` and take the bulk of the suite's runtime.
"""

import csv
import itertools
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

import gradcheck
from petseg import cli, metrics, phantom, training, unet
from petseg import tensor as T
from petseg import volume_io as vio
from petseg.regions import default_table
from petseg.tensor import Tensor
from petseg.training import TrainConfig
from petseg.volume_io import LabelMap, Volume

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.cfg"
DESK_SUBJECTS, DESK_SEED = 60, 2024
FIXTURE = Path(__file__).parent / "data" / "bigendian_int16.nii"
TABLE = default_table()


# ----------------------------------------------------------- 1. gradients


def _op_cases(rng):
    """(name, loss_fn, params) for every differentiable primitive."""
    n = rng.normal
    cases = []
    ps = {"x": Tensor(n(size=(2, 4, 3, 5))), "w": Tensor(n(size=(3, 2, 3, 3, 3))), "b": Tensor(n(size=3))}
    r = n(size=(3, 4, 3, 5))
    cases.append(("conv3d", lambda ps=ps, r=r: gradcheck.weighted_sum(T.conv3d(ps["x"], ps["w"], ps["b"]), r), ps))
    ps = {"x": Tensor(n(size=(3, 2, 3, 2))), "w": Tensor(n(size=(3, 2, 2, 2, 2))), "b": Tensor(n(size=2))}
    r = n(size=(2, 4, 6, 4))
    cases.append(
        ("conv3d_transposed", lambda ps=ps, r=r: gradcheck.weighted_sum(T.conv3d_transposed(ps["x"], ps["w"], ps["b"]), r), ps)
    )
    ps = {"x": Tensor(n(size=(2, 4, 4, 4)))}
    r = n(size=(2, 2, 2, 2))
    cases.append(("maxpool3d", lambda ps=ps, r=r: gradcheck.weighted_sum(T.maxpool3d(ps["x"])[0], r), ps))
    ps = {"x": Tensor(n(size=(2, 3, 3, 3)))}
    r = n(size=(2, 3, 3, 3))
    cases.append(("relu", lambda ps=ps, r=r: gradcheck.weighted_sum(T.relu(ps["x"]), r), ps))
    ps = {"a": Tensor(n(size=(2, 2, 2, 2))), "b": Tensor(n(size=(1, 2, 2, 2)))}
    r = n(size=(3, 2, 2, 2))
    cases.append(("concat_channels", lambda ps=ps, r=r: gradcheck.weighted_sum(T.concat_channels(ps["a"], ps["b"]), r), ps))
    ps = {"z": Tensor(n(size=(5, 2, 2, 2)))}
    r = n(size=(5, 2, 2, 2))
    cases.append(("softmax_channels", lambda ps=ps, r=r: gradcheck.weighted_sum(T.softmax_channels(ps["z"]), r), ps))
    ps = {"z": Tensor(n(size=(4, 2, 2, 2)))}
    target = rng.integers(0, 4, size=(2, 2, 2))
    weights = rng.uniform(0.5, 2.0, 4)
    cases.append(
        ("cross_entropy", lambda ps=ps, t=target, w=weights: T.cross_entropy_loss(T.softmax_channels(ps["z"]), t, w), ps)
    )
    ps = {"a": Tensor(n(size=(3, 3))), "b": Tensor(n(size=(3, 3)))}
    cases.append(("add/mul/sum", lambda ps=ps: T.sum_all(T.mul(T.add(ps["a"], ps["b"]), ps["a"])), ps))
    return cases


def test_criterion_1_gradient_oracle(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = {}
    for name, loss_fn, params in _op_cases(rng):
        probes, _ = gradcheck.check(loss_fn, params, 100, rng)
        worst[name] = max(p.rel_error for p in probes)

    model = unet.build(unet.UNetConfig(base_channels=2), seed=0, dtype=np.float64)
    for p in model.parameters():
        p.data += rng.normal(0, 0.05, p.shape)
    x = Tensor(rng.normal(size=(1, 8, 8, 8)))
    y = rng.integers(0, 31, size=(8, 8, 8))
    probes, _ = gradcheck.check(lambda: T.cross_entropy_loss(unet.forward(model, x), y), model.params, 100, rng)
    worst["unet(base=2, 8^3)"] = max(p.rel_error for p in probes)
    elapsed = time.perf_counter() - start

    overall = max(worst.values())
    ok = overall < 1e-6 and elapsed < 60
    detail = f"max rel err {overall:.2e} over {len(worst)} checks, {elapsed:.1f}s"
    verdict("criterion 1 gradient oracle", ok, detail)
    assert overall < 1e-6, worst
    assert elapsed < 60


# ------------------------------------------------------------- 2. adjoint


def _conv_stride2_brute(z: np.ndarray, w: np.ndarray) -> np.ndarray:
    """out[ci, i, j, k] = sum over co, a, b, c of w[ci, co, a, b, c] * z[co, 2i+a, 2j+b, 2k+c]."""
    cin, cout = w.shape[:2]
    _, d, h, wd = z.shape
    out = np.zeros((cin, d // 2, h // 2, wd // 2))
    for a, b, c in itertools.product(range(2), repeat=3):
        patch = z[:, a::2, b::2, c::2]
        out += np.einsum("io,odhw->idhw", w[:, :, a, b, c], patch)
    return out


def test_criterion_2_adjoint(verdict):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        cin, cout = rng.integers(1, 5, size=2)
        d, h, wd = rng.integers(1, 5, size=3)
        x = rng.normal(size=(cin, d, h, wd))
        w = rng.normal(size=(cin, cout, 2, 2, 2))
        y = rng.normal(size=(cout, 2 * d, 2 * h, 2 * wd))
        with T.no_grad():
            up = T.conv3d_transposed(Tensor(x), Tensor(w)).data
        lhs = float(np.vdot(up, y))
        rhs = float(np.vdot(x, _conv_stride2_brute(y, w)))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    verdict("criterion 2 adjoint", worst <= 1e-5, f"max rel err {worst:.2e} over 50 pairs")
    assert worst <= 1e-5


# ------------------------------------------------------- 3. metric oracles


def _dice_brute(p, t, rid):
    inter = sp = st = 0
    for a, b in zip(p.ravel().tolist(), t.ravel().tolist()):
        sp += a == rid
        st += b == rid
        inter += a == rid and b == rid
    return math.nan if sp + st == 0 else 2 * inter / (sp + st)


def _masked_mean_brute(pet, lab, ids):
    vals = [v for v, l in zip(pet.ravel().tolist(), lab.ravel().tolist()) if l in ids]
    return math.fsum(vals) / len(vals)


def _auc_brute(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def _close(a, b, tol=1e-12):
    if math.isnan(a) or math.isnan(b):
        return math.isnan(a) and math.isnan(b)
    return abs(a - b) <= tol * max(1.0, abs(b))


def test_criterion_3_metric_oracles(verdict):
    rng = np.random.default_rng(3)
    failures = []
    for trial in range(1000):
        shape = tuple(rng.integers(1, 6, size=3))
        k = int(rng.integers(2, 8))
        p = rng.integers(0, k, shape)
        t = rng.integers(0, k, shape)
        rid = int(rng.integers(1, k + 1))  # rid == k is absent from both maps
        if not _close(metrics.dice(p, t, rid), _dice_brute(p, t, rid)):
            failures.append(("dice", trial))

        pet = rng.uniform(0.1, 3.0, shape)
        ids = {int(i) for i in rng.choice(k, size=int(rng.integers(1, k + 1)), replace=False)}
        if np.isin(t, list(ids)).any():
            if not _close(metrics.region_mean_suv(pet, t, ids), _masked_mean_brute(pet, t, ids)):
                failures.append(("mean", trial))

        n = int(rng.integers(2, 30))
        scores = (rng.integers(0, 10, n) / 4.0).tolist()  # coarse grid forces ties
        labels = rng.permutation([True] + [False] + list(rng.random(n - 2) < 0.5)).tolist()
        if not _close(metrics.roc(scores, labels).auc, _auc_brute(scores, labels)):
            failures.append(("auc", trial))
    verdict("criterion 3 metric oracles", not failures, f"{len(failures)} mismatches in 1000 instances")
    assert not failures, failures[:10]


# ------------------------------------------------------ 4. early stopping


def _reference_stop(losses, patience=10):
    best, best_epoch = math.inf, 0
    for epoch, loss in enumerate(losses, 1):
        if loss < best:
            best, best_epoch = loss, epoch
        if epoch - best_epoch >= patience:
            return best_epoch, epoch, "early"
    return best_epoch, len(losses), "max_epochs"


def test_criterion_4_early_stopping(monkeypatch, verdict):
    rng = np.random.default_rng(4)
    pet = Volume(rng.uniform(0.5, 1.5, (8, 8, 8)).astype(np.float32))
    subject = phantom.SubjectRecord("s", pet, LabelMap(rng.integers(0, 31, (8, 8, 8)).astype(np.uint8)), False)
    model_cfg = unet.UNetConfig(base_channels=1)
    mismatches = []
    for trial in range(100):
        length = int(rng.integers(1, 40))
        # small integer losses give frequent ties and plateaus
        losses = [float(v) for v in rng.integers(0, 8, length)]
        it = iter(losses)
        monkeypatch.setattr(training, "validation_loss", lambda *a, **k: next(it))
        _, hist = training.train(
            unet.build(model_cfg), [subject], [subject], TrainConfig(max_epochs=length, patience=10, seed=trial)
        )
        got = (hist.best_epoch, hist.stopped_epoch, hist.stop_reason)
        if got != _reference_stop(losses):
            mismatches.append((losses, got))
    verdict("criterion 4 early stopping", not mismatches, f"{100 - len(mismatches)}/100 sequences match")
    assert not mismatches, mismatches[:3]


# --------------------------------------------------------- 6. nifti i/o


def test_criterion_6_nifti_round_trip(tmp_path, verdict):
    rng = np.random.default_rng(6)
    bad = []
    samples = {
        np.uint8: rng.integers(0, 256, (8, 9, 10)),
        np.int16: rng.integers(-32768, 32768, (8, 9, 10)),
        np.int32: rng.integers(-(2**31), 2**31, (8, 9, 10)),
        np.float32: rng.normal(0, 1e3, (8, 9, 10)),
        np.float64: rng.normal(0, 1e3, (8, 9, 10)),
    }
    for dtype, values in samples.items():
        data = values.astype(dtype)
        data.flat[0] = 255  # outside 0..30, so this is read back as a Volume
        path = tmp_path / f"{np.dtype(dtype).name}.nii"
        vio.write_nifti(Volume(data, (1.0, 2.0, 3.0)), path, dtype=dtype)
        back = vio.read_nifti(path)
        if back.data.dtype != np.dtype(dtype) or back.data.tobytes() != data.tobytes():
            bad.append(np.dtype(dtype).name)
    swapped = vio.read_nifti(FIXTURE)
    vio.write_nifti(swapped, tmp_path / "swapped.nii", dtype=np.int16)
    expected = (np.arange(720).reshape(8, 9, 10) * 7 - 300).astype(np.int16)
    again = vio.read_nifti(tmp_path / "swapped.nii")
    if swapped.data.tobytes() != expected.tobytes() or again.data.tobytes() != expected.tobytes():
        bad.append("byte-swapped fixture")
    verdict("criterion 6 nifti round trip", not bad, f"5 dtypes + swapped fixture, failures: {bad or 'none'}")
    assert not bad


# --------------------------------------------------------- 7. invariance


def test_criterion_7_invariance(verdict):
    rng = np.random.default_rng(8)
    spec = phantom.PhantomSpec(dims=(32, 32, 32))
    cohort = phantom.generate_cohort(6, 0.5, spec, seed=8)
    worst_scale = 0.0
    for scale in (1e-3, 0.37, 2.5, 1e3):
        for s in cohort:
            a = metrics.suvr(s.pet, s.labels, TABLE)
            b = metrics.suvr(s.pet.data.astype(np.float64) * scale, s.labels, TABLE)
            worst_scale = max(worst_scale, abs(b - a) / abs(a))
        for ids in TABLE.composites.values():
            # perturbed predictions so the NRMSE is non-zero
            triples = [(s.pet.data.astype(np.float64), np.roll(s.labels.data, 1, axis=0), s.labels.data) for s in cohort]
            n0 = metrics.nrmse_region(triples, ids).value
            n1 = metrics.nrmse_region([(p * scale, q, t) for p, q, t in triples], ids).value
            worst_scale = max(worst_scale, abs(n1 - n0) / max(abs(n0), 1e-300))

    worst_sum, labels_ok = 0.0, True
    model = unet.build(unet.UNetConfig(base_channels=2), seed=3)
    with T.no_grad():
        for _ in range(5):
            x = Tensor(rng.normal(0, 3, (1, 16, 16, 16)).astype(np.float32))
            probs = unet.forward(model, x).data
            worst_sum = max(worst_sum, float(np.abs(probs.astype(np.float64).sum(axis=0) - 1).max()))
    for s in cohort[:2]:
        pred = training.predict(model, s.pet).data
        labels_ok &= bool(pred.min() >= 0 and pred.max() <= 30)

    ok = worst_scale < 1e-12 and worst_sum <= 1e-5 and labels_ok
    detail = f"scale rel err {worst_scale:.1e}, softmax sum err {worst_sum:.1e}, labels in 0..30: {labels_ok}"
    verdict("criterion 7 invariance", ok, detail)
    assert ok


# ------------------------------------------------- 5 & 8. desk-scale runs


def _desk_run(root: Path) -> dict:
    """generate -> train -> evaluate through the CLI; returns paths and timings."""
    cfg = str(DESK_CONFIG)
    start = time.perf_counter()
    rc = cli.main(["generate", "--n", str(DESK_SUBJECTS), "--prevalence", "0.5", "--seed", str(DESK_SEED),
                   "--out", str(root / "cohort"), "--config", cfg])
    assert rc == 0
    manifest = str(root / "cohort" / "manifest.tsv")
    assert cli.main(["train", "--manifest", manifest, "--out", str(root / "run"), "--config", cfg]) == 0
    rc = cli.main(["evaluate", "--weights", str(root / "run" / "model.weights"), "--manifest", manifest,
                   "--split", "test", "--out-dir", str(root / "eval"), "--config", cfg])
    return {"root": root, "rc": rc, "seconds": time.perf_counter() - start}


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    return _desk_run(tmp_path_factory.mktemp("desk_a"))


@pytest.mark.slow
def test_criterion_5_desk_scale(desk_run, verdict):
    root = desk_run["root"]
    split = dict(line.split("\t") for line in (root / "run" / "split.tsv").read_text().splitlines())
    sizes = tuple(sum(v == k for v in split.values()) for k in ("train", "val", "test"))
    if desk_run["rc"] != 0:
        verdict("criterion 5 desk-scale", False, f"evaluate exited {desk_run['rc']}")
        pytest.fail(f"evaluate exited {desk_run['rc']}")

    dice = {int(r[0]): float(r[2]) for r in _read_csv(root / "eval" / "dice.csv")[1:]}
    defined = [v for v in dice.values() if not math.isnan(v)]
    macro = sum(defined) / len(defined)

    def group(name):
        vals = [dice[i] for i in TABLE.composites[name] if not math.isnan(dice[i])]
        return sum(vals) / len(vals)

    sub, cort = group("subcortical"), group("cortical")
    nrmse = {r[0]: float(r[1]) for r in _read_csv(root / "eval" / "nrmse.csv")[1:]}
    summary = dict(_read_csv(root / "eval" / "summary.csv")[1:])
    auc, acc = float(summary["auc"]), float(summary["accuracy"])
    cores = os.cpu_count() or 1
    parts = {
        "split 40/8/12": sizes == (40, 8, 12),
        "macro dice >= 0.70": macro >= 0.70,
        "subcortical > cortical": sub > cort,
        "nrmse <= 0.05": max(nrmse.values()) <= 0.05,
        "auc >= 0.95": auc >= 0.95,
        "accuracy >= 0.90": acc >= 0.90,
    }
    if cores >= 4:
        parts["runtime <= 30 min"] = desk_run["seconds"] <= 1800
    detail = (
        f"macro dice {macro:.3f} (sub {sub:.3f}, cort {cort:.3f}), max nrmse {max(nrmse.values()):.4f}, "
        f"auc {auc:.3f}, accuracy {acc:.3f}, {desk_run['seconds'] / 60:.1f} min on {cores} core(s)"
    )
    failed = [k for k, v in parts.items() if not v]
    verdict("criterion 5 desk-scale", not failed, detail + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed, detail


@pytest.mark.slow
def test_criterion_8_determinism(desk_run, tmp_path_factory, verdict):
    second = _desk_run(tmp_path_factory.mktemp("desk_b"))
    a, b = desk_run["root"], second["root"]
    same_history = (a / "run" / "history.csv").read_bytes() == (b / "run" / "history.csv").read_bytes()
    same_summary = desk_run["rc"] == second["rc"] == 0 and (
        (a / "eval" / "summary.csv").read_bytes() == (b / "eval" / "summary.csv").read_bytes()
    )
    verdict("criterion 8 determinism", same_history and same_summary,
            f"history identical: {same_history}, summary identical: {same_summary}")
    assert same_history and same_summary
