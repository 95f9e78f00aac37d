"""Acceptance suite: one test, and one summary line, per criterion.

The three 2000-iteration training runs are shared through a session fixture
and run through the command-line interface in subprocesses, so the reported
wall-clock times cover data loading and checkpoint writing too.
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from hmseg import phantom as ph
from hmseg import tensor as T
from hmseg.evaluation import dsc, evaluate
from hmseg.gradcheck import run_gradcheck_suite
from hmseg.io import load_tensor, save_tensor
from hmseg.labels import DEFAULT_TAXONOMY, one_hot
from hmseg.losses import default_weights, exhaustive_triangle, fuzz_triangle, jaccard_loss, split_loss
from hmseg.network import ModalityMask, NetworkConfig, forward, fuse_modalities, init_params, project_t1
from hmseg.phantom import PhantomConfig, PhantomDataset
from hmseg.risk import bound_audit
from hmseg.sampling import read_split
from hmseg.tensor import Tensor
from hmseg.trainer import TrainConfig, encode_checkpoint, load_checkpoint, save_checkpoint, train

SEED = 0
ITERATIONS = 2000
RUN_LIMIT_S = 15 * 60
AUDIT_LIMIT_S = 120
GRADCHECK_LIMIT_S = 60
GRAD_TOL = 1e-4
SPLIT_TOL = 1e-12
TRIANGLE_TRIALS = 100_000
BOUND_TOL = 1e-9
DSC_MARGIN = 0.05
SOUNDNESS_TOL = 1e-12
N_AUDIT = 100
W = default_weights()
TISSUE_NAMES = [DEFAULT_TAXONOMY.name(c) for c in DEFAULT_TAXONOMY.tissue_ids]
LESION_NAME = DEFAULT_TAXONOMY.name(7)


def _cli(*args):
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "hmseg", *args], capture_output=True, text=True, env=env)
    elapsed = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stderr
    return elapsed


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance") / "data"
    _cli("gen", "--seed", str(SEED), "--out", str(root))
    _cli("split", "--seed", str(SEED), "--data", str(root))
    return root


@pytest.fixture(scope="session")
def runs(dataset):
    out = {}
    for mode in ("joint", "tissue-only", "lesion-only"):
        run_dir = dataset.parent / mode
        elapsed = _cli("train", "--mode", mode, "--seed", str(SEED), "--iterations", str(ITERATIONS),
                       "--data", str(dataset), "--out", str(run_dir))
        params, _ = load_checkpoint(run_dir / "best", NetworkConfig())
        out[mode] = (params, elapsed)
    return out


@pytest.fixture(scope="session")
def test_split(dataset):
    split = read_split(dataset / "split.csv")["test"]
    controls = list(PhantomDataset(dataset, "control").subset(split))
    lesions = list(PhantomDataset(dataset, "lesion").subset(split))
    return controls, lesions


def test_gradient_integrity(criterion):
    t0 = time.perf_counter()
    results = run_gradcheck_suite(seed=SEED, tol=GRAD_TOL)
    elapsed = time.perf_counter() - t0
    worst = max(rep.max_rel_error for _, rep in results)
    failed = [name for name, rep in results if not rep.passed]
    ok = not failed and elapsed <= GRADCHECK_LIMIT_S
    criterion(1, ok, f"gradient check over {len(results)} ops/networks, max rel err {worst:.2e} "
                     f"(<= {GRAD_TOL:g}), {elapsed:.1f} s (<= {GRADCHECK_LIMIT_S} s)")
    assert not failed, failed
    assert elapsed <= GRADCHECK_LIMIT_S


def test_loss_decomposition(criterion):
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for i in range(1000):
        h, w = rng.integers(1, 9, size=2)
        z = rng.normal(size=(8, h, w)) * 3
        pred = Tensor(np.exp(z) / np.exp(z).sum(axis=0))
        if i % 2:
            target = one_hot(rng.integers(0, 8, size=(h, w)))
        else:
            zt = rng.normal(size=(8, h, w)) * 3
            target = Tensor(np.exp(zt) / np.exp(zt).sum(axis=0))
        with T.no_grad():
            lt, ll = split_loss(pred, target, W)
            full = jaccard_loss(pred, target, W)
        worst = max(worst, abs(full.item() - (lt.item() + ll.item())))
    criterion(2, worst <= SPLIT_TOL, f"|L - (L_t + L_l)| max {worst:.2e} over 1000 pairs (<= {SPLIT_TOL:g})")
    assert worst <= SPLIT_TOL


def test_triangle_inequality(criterion, tmp_path):
    one = fuzz_triangle(TRIANGLE_TRIALS, "one-hot", SEED, out_dir=tmp_path / "one-hot")
    ex_violations, ex_worst = exhaustive_triangle(2, 3)
    soft = fuzz_triangle(TRIANGLE_TRIALS, "soft", SEED, out_dir=tmp_path / "soft")
    ok = one.violations == 0 and ex_violations == 0
    criterion(3, ok, f"one-hot fuzz {one.violations} violations / {one.trials}, exhaustive 2px/3cls "
                     f"{ex_violations} violations (worst margin {ex_worst:.1e}); soft mode (informative) "
                     f"violation rate {soft.violation_rate:.2e}")
    assert ok


def test_upper_bound_audit(criterion, runs):
    params, _ = runs["joint"]
    held_out = PhantomConfig(seed=SEED + 1000)
    lesions = [s.with_image(ph.normalize(s.image)) for s in ph.generate_samples(held_out, "lesion", N_AUDIT)]
    t0 = time.perf_counter()
    res = bound_audit(params, lesions, W)
    elapsed = time.perf_counter() - t0
    passing = res.passing()
    min_slack = min(r.slack for r in passing)
    lhs, rhs = res.aggregate(only_passing=True)
    ok = (len(res.rows) >= 100 and min_slack >= -BOUND_TOL and lhs <= rhs + BOUND_TOL
          and elapsed <= AUDIT_LIMIT_S)
    criterion(4, ok, f"{len(passing)}/{len(res.rows)} held-out samples pass the triangle check, min slack "
                     f"{min_slack:.3e} (>= -{BOUND_TOL:g}), R_t {lhs:.4f} <= R_t1 + R_t2 {rhs:.4f}, "
                     f"{elapsed:.1f} s (<= {AUDIT_LIMIT_S} s)")
    assert ok


def test_h4_audit(criterion, dataset):
    controls = list(PhantomDataset(dataset, "control", normalise=False))
    lesions = list(PhantomDataset(dataset, "lesion", normalise=False))
    rows = ph.h4_audit(controls, lesions)
    worst = max(r.ks / r.ks_critical for r in rows)
    ok = len(controls) >= 50 and len(lesions) >= 50 and all(r.ks_ok for r in rows)
    criterion(5, ok, f"KS on {len(rows)} class/modality pairs, {len(controls)}+{len(lesions)} samples, "
                     f"max KS/critical(1%) {worst:.3f} (< 1); means within 3 SE: "
                     f"{sum(r.mean_ok for r in rows)}/{len(rows)}")
    assert ok


def _mean_tissue(table, tag):
    return table.mean(tag[0], tag[1], TISSUE_NAMES)


def test_joint_matches_task_specific(criterion, runs, test_split):
    controls, lesions = test_split
    joint, t_joint = runs["joint"]
    tissue, t_tissue = runs["tissue-only"]
    lesion, t_lesion = runs["lesion-only"]
    tj = _mean_tissue(evaluate(joint, controls, model_tag="joint", dataset_tag="c"), ("joint", "c"))
    tt = _mean_tissue(evaluate(tissue, controls, model_tag="tissue", dataset_tag="c"), ("tissue", "c"))
    lj = evaluate(joint, lesions, class_ids=(7,), model_tag="joint", dataset_tag="l").get("joint", "l", LESION_NAME)
    ll = evaluate(lesion, lesions, class_ids=(7,), model_tag="lesion", dataset_tag="l").get("lesion", "l",
                                                                                            LESION_NAME)
    slowest = max(t_joint, t_tissue, t_lesion)
    ok = abs(tj - tt) <= DSC_MARGIN and abs(lj - ll) <= DSC_MARGIN and slowest <= RUN_LIMIT_S
    criterion(6, ok, f"tissue DSC joint {tj:.4f} vs tissue-only {tt:.4f}; lesion DSC joint {lj:.4f} vs "
                     f"lesion-only {ll:.4f} (|diff| <= {DSC_MARGIN}); run times {t_joint:.0f}/{t_tissue:.0f}/"
                     f"{t_lesion:.0f} s (<= {RUN_LIMIT_S} s)")
    assert ok


def test_cross_modal_generalisation(criterion, runs, test_split):
    _, lesions = test_split
    joint, _ = runs["joint"]
    tissue, _ = runs["tissue-only"]
    tj = _mean_tissue(evaluate(joint, lesions, "native", model_tag="joint", dataset_tag="l"), ("joint", "l"))
    tt = _mean_tissue(evaluate(tissue, lesions, "t1", model_tag="tissue", dataset_tag="l"), ("tissue", "l"))
    ok = tj >= tt - DSC_MARGIN
    criterion(7, ok, f"joint tissue DSC on T1+Flair lesion scans {tj:.4f} >= tissue-only on T1 input "
                     f"{tt:.4f} - {DSC_MARGIN}")
    assert ok


def test_hetero_modal_soundness(criterion):
    rng = np.random.default_rng(SEED)
    params = init_params(NetworkConfig(), SEED)
    t1 = ModalityMask.of(0)
    bitwise = True
    for _ in range(3):
        img = rng.normal(size=(2, 16, 16))
        other = img.copy()
        other[1] = rng.normal(size=(16, 16)) * 50
        bitwise &= forward(params, img, t1).data.tobytes() == forward(params, other, t1).data.tobytes()
    f = Tensor(rng.normal(size=(16, 12, 12)))
    fuse_err = float(np.abs(fuse_modalities([f, f], ModalityMask.all()).data - f.data).max())
    img = rng.normal(size=(2, 16, 16))
    pimg, pmask = project_t1(img, ModalityMask.all())
    proj_err = float(np.abs(forward(params, pimg, pmask).data - forward(params, img, t1).data).max())
    ok = bitwise and fuse_err <= SOUNDNESS_TOL and proj_err <= SOUNDNESS_TOL
    criterion(8, ok, f"masked Flair bitwise irrelevant: {bitwise}; fuse(dup) err {fuse_err:.1e}; "
                     f"forward(p(x)) vs masked err {proj_err:.1e} (<= {SOUNDNESS_TOL:g})")
    assert ok


def test_determinism_and_formats(criterion, dataset, test_split, runs, tmp_path):
    checks = {}
    # generation
    again = ph.generate_dataset(PhantomConfig(seed=SEED), tmp_path / "regen")
    checks["generation"] = all((dataset / "samples" / p.name).read_bytes() == p.read_bytes()
                               for p in (again / "samples").iterdir())
    # training: a short run of the default network twice from the same seed
    c = PhantomDataset(dataset, "control")
    l_ = PhantomDataset(dataset, "lesion")
    cfg = TrainConfig(max_iterations=20, warmup=10, eval_every=10, seed=SEED)
    a = train(cfg, c.subset(c.ids[:5]), l_.subset(l_.ids[:5]), c.subset(c.ids[5:7]), l_.subset(l_.ids[5:7]))
    b = train(cfg, c.subset(c.ids[:5]), l_.subset(l_.ids[:5]), c.subset(c.ids[5:7]), l_.subset(l_.ids[5:7]))
    checks["training"] = encode_checkpoint(a.params) == encode_checkpoint(b.params) and a.log == b.log
    # evaluation, including across worker counts
    joint, _ = runs["joint"]
    controls, lesions = test_split
    e1 = evaluate(joint, controls + lesions, workers=1)
    e2 = evaluate(joint, controls + lesions, workers=4)
    checks["evaluation"] = [r.dsc for r in e1.rows] == [r.dsc for r in e2.rows]
    # formats
    arr = np.random.default_rng(SEED).normal(size=(3, 4, 5))
    save_tensor(tmp_path / "t.hmt", arr)
    checks["HMT1"] = load_tensor(tmp_path / "t.hmt").tobytes() == arr.tobytes()
    raw = (dataset / "samples" / "l0000.hms").read_bytes()
    checks["HMS1"] = ph.encode_sample(ph.decode_sample(raw)) == raw
    save_checkpoint(tmp_path / "ck", joint)
    reloaded, _ = load_checkpoint(tmp_path / "ck")
    save_checkpoint(tmp_path / "ck2", reloaded)
    checks["checkpoint"] = (tmp_path / "ck").read_bytes() == (tmp_path / "ck2").read_bytes()
    ok = all(checks.values())
    criterion(9, ok, "bit-reproducible / round-trip: " + ", ".join(f"{k} {'ok' if v else 'FAILED'}"
                                                                   for k, v in checks.items()))
    assert ok, checks


def _counting_dsc(pred, truth, c):
    inter = a = b = 0
    for p, t in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        a += p == c
        b += t == c
        inter += p == c and t == c
    return 1.0 if a + b == 0 else 2.0 * inter / (a + b)


def test_dsc_oracle(criterion):
    rng = np.random.default_rng(SEED)
    mismatches = 0
    for _ in range(20):
        shape = tuple(rng.integers(4, 33, size=2))
        pred = rng.integers(0, 8, size=shape)
        truth = rng.integers(0, 8, size=shape)
        mismatches += sum(dsc(pred, truth, c) != _counting_dsc(pred, truth, c) for c in range(8))
    criterion(10, mismatches == 0, f"DSC vs per-pixel counting oracle on 20 pairs x 8 classes: "
                                   f"{mismatches} mismatches (exact equality)")
    assert mismatches == 0
