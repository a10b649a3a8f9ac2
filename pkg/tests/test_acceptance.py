"""Acceptance gate: one test per criterion, one printed verdict line each.

Criterion 4 trains two full toy models and dominates the runtime (about
four minutes on one core); everything else is seconds.  Verdict lines
are printed straight to the terminal, bypassing capture, so the gate
reads as a checklist even in quiet runs.
"""

import os
import time

import numpy as np
import pytest

from irisft.data import SynthSpec, generate_synthetic
from irisft.evaluate import cross_evaluate, evaluate, iou
from irisft.geometry import mask_to_bbox
from irisft.kernels import ACTIVE_BACKEND
from irisft.losses import (FocalParams, PixelBatch, TripletSpec, ce_loss,
                           dice_loss, focal_loss, triplet_loss)
from irisft.model import load_checkpoint
from irisft.train import TrainConfig, train

# Toy end-to-end protocol: 80 images at 128x128 -> 64 train / 16 test,
# high-contrast distractor-free rendering, focal vs cross-entropy at
# identical seeds.  The IoU bars below were frozen after the one pilot
# run of this exact protocol on the numpy backend (focal 0.8788, CE
# 0.9375): the absolute bar keeps a 0.029 margin and the relative bar a
# 0.021 margin for accumulation-order drift across backends.
CALIBRATION_SPEC = SynthSpec(count=80, image_size=128,
                             images_per_identity=4,
                             iris_radius_range=(0.17, 0.22),
                             sclera_intensity=(0.70, 0.92),
                             iris_intensity=(0.12, 0.30),
                             occluder_prob=0.1, distractor_count=(0, 0),
                             noise_sigma=0.005, seed=0)
TOY_CONFIG = dict(alpha=0.25, gamma=2.0, lr=1e-2, epochs=30, batch_size=4,
                  momentum=0.98, seed=0, input_resolution=128, perturb=True)
MIN_FOCAL_IOU = 0.85
MAX_CE_LEAD = 0.08
TOY_BUDGET_SECONDS = 600.0


def _announce(capsys, number, name, ok, detail):
    verdict = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
    with capsys.disabled():
        print(f"ACCEPTANCE {number} ({name}): {verdict} - {detail}")


def _fd_grad(fn, logits, h=1e-6):
    grad = np.empty_like(logits)
    for i in range(logits.size):
        bumped = logits.copy()
        bumped[i] += h
        up = fn(bumped)
        bumped[i] -= 2 * h
        down = fn(bumped)
        grad[i] = (up - down) / (2 * h)
    return grad


def test_criterion_1_loss_correctness(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    half_params = FocalParams(alpha=0.5, gamma=0.0)
    worst_equiv = 0.0
    for _ in range(100):
        n = int(rng.integers(8, 96))
        batch = PixelBatch(rng.normal(0, 3, n), (rng.random(n) < 0.4)
                           .astype(np.float64))
        fv, fg = focal_loss(batch, half_params)
        cv, cg = ce_loss(batch)
        worst_equiv = max(worst_equiv, abs(fv - 0.5 * cv) / abs(0.5 * cv))
        denom = np.maximum(np.abs(0.5 * cg), 1e-30)
        worst_equiv = max(worst_equiv, float(np.max(np.abs(fg - 0.5 * cg)
                                                    / denom)))
    equiv_ok = worst_equiv <= 1e-10

    params = FocalParams(0.25, 2.0)
    tspec = TripletSpec(margin=1.0, samples_per_image=64, seed=9)
    worst = {"ce": 0.0, "focal": 0.0, "dice": 0.0, "triplet": 0.0}
    for k in range(20):
        brng = np.random.default_rng(200 + k)
        logits = brng.normal(0.0, 2.0, 64)
        targets = (brng.random(64) < 0.35).astype(np.float64)
        if not targets.any():
            targets[0] = 1.0
        cases = {
            "ce": lambda z: ce_loss(PixelBatch(z, targets))[0],
            "focal": lambda z: focal_loss(PixelBatch(z, targets),
                                          params)[0],
            "dice": lambda z: dice_loss(PixelBatch(z, targets))[0],
        }
        grads = {
            "ce": ce_loss(PixelBatch(logits, targets))[1],
            "focal": focal_loss(PixelBatch(logits, targets), params)[1],
            "dice": dice_loss(PixelBatch(logits, targets))[1],
        }
        mask = targets.reshape(8, 8).astype(bool)
        if mask.sum() >= 2 and (~mask).sum() >= 1:
            emb = brng.normal(0.0, 1.0, (2, 8, 8))
            cases["triplet"] = lambda e: triplet_loss(
                e.reshape(2, 8, 8), mask, tspec)[0]
            grads["triplet"] = triplet_loss(emb, mask, tspec)[1].ravel()
            logits_by = {"triplet": emb.ravel()}
        else:
            logits_by = {}
        for name, fn in cases.items():
            z = logits_by.get(name, logits)
            fd = _fd_grad(fn, z)
            tol = 1e-4 if name == "dice" else 1e-5
            # violation ratio of |g - fd| <= 1e-9 + tol*|fd|; 1.0 is the
            # pass boundary
            ratio = float(np.max(np.abs(grads[name] - fd)
                                 / (1e-9 + tol * np.abs(fd))))
            worst[name] = max(worst[name], ratio)
    grads_ok = all(v <= 1.0 for v in worst.values())
    seconds = time.perf_counter() - t0
    ok = equiv_ok and grads_ok and seconds < 60.0
    _announce(capsys, 1, "loss correctness", ok,
              f"focal(g=0,a=.5) vs 0.5*ce rel err {worst_equiv:.2e}; "
              f"fd tolerance use (<=1 passes) ce {worst['ce']:.2f} "
              f"focal {worst['focal']:.2f} dice {worst['dice']:.2f} "
              f"triplet {worst['triplet']:.2f}; {seconds:.1f}s")
    assert equiv_ok and grads_ok
    assert seconds < 60.0


def test_criterion_2_scalar_anchors(capsys):
    v_ce, _ = ce_loss(PixelBatch(np.array([0.0]), np.array([1.0])))
    err_ce = abs(v_ce - np.log(2.0))
    p = 0.9
    logit = np.log(p / (1 - p))
    v_f, _ = focal_loss(PixelBatch(np.array([logit]), np.array([1.0])),
                        FocalParams(0.25, 2.0))
    want = 0.25 * 0.01 * (-np.log(0.9))
    err_f = abs(v_f - want)
    ok = err_ce <= 1e-9 and err_f <= 1e-9
    _announce(capsys, 2, "scalar anchors", ok,
              f"ce(y=1,p=.5) off ln2 by {err_ce:.2e}; "
              f"focal(y=1,p=.9) off by {err_f:.2e}")
    assert err_ce <= 1e-9
    assert err_f <= 1e-9


def _bbox_oracle(mask):
    xs, ys = [], []
    for y in range(mask.shape[0]):
        for x in range(mask.shape[1]):
            if mask[y, x]:
                xs.append(x)
                ys.append(y)
    if not xs:
        return None
    return min(xs), min(ys), max(xs), max(ys)


def _iou_oracle(a, b):
    inter = union = 0
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            inter += bool(a[y, x] and b[y, x])
            union += bool(a[y, x] or b[y, x])
    return 1.0 if union == 0 else inter / union


def test_criterion_3_geometry_oracles(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(300)
    checked_boxes = 0
    for _ in range(1000):
        mask = rng.random((16, 16)) < rng.uniform(0.0, 0.4)
        want = _bbox_oracle(mask)
        if want is None:
            continue
        got = mask_to_bbox(mask)
        assert (got.x_min, got.y_min, got.x_max, got.y_max) == want
        checked_boxes += 1
    for _ in range(1000):
        a = rng.random((16, 16)) < rng.uniform(0.0, 0.5)
        b = rng.random((16, 16)) < rng.uniform(0.0, 0.5)
        assert iou(a, b) == _iou_oracle(a, b)
    m = rng.random((16, 16)) < 0.3
    empty = np.zeros((16, 16), dtype=bool)
    identities_ok = (iou(m, m) == 1.0 and iou(empty, empty) == 1.0
                     and iou(m & ~m, m | ~m) == 0.0)
    seconds = time.perf_counter() - t0
    ok = identities_ok and seconds < 60.0 and checked_boxes > 900
    _announce(capsys, 3, "geometry oracles", ok,
              f"{checked_boxes} bbox + 1000 iou oracle matches exact; "
              f"identities hold; {seconds:.1f}s")
    assert identities_ok
    assert checked_boxes > 900
    assert seconds < 60.0


def test_criterion_4_toy_end_to_end(capsys, tmp_path):
    t0 = time.perf_counter()
    manifest = generate_synthetic(CALIBRATION_SPEC, tmp_path / "data")
    assert len(manifest.split("train")) == 64
    assert len(manifest.split("test")) == 16
    assert not (manifest.identities("train") & manifest.identities("test"))

    scores = {}
    logs = {}
    for loss in ("focal", "ce"):
        config = TrainConfig(loss=loss, **TOY_CONFIG)
        ckpt, logs[loss] = train(manifest, config, tmp_path / loss)
        model, _ = load_checkpoint(ckpt)
        report = evaluate(model, manifest, split="test",
                          prompt_mode="two-pass",
                          checkpoint_id=os.path.basename(ckpt))
        scores[loss] = report.mean_iou

    # determinism given the seed: a fresh shorter run must reproduce the
    # loss sequence prefix exactly
    config3 = TrainConfig(loss="focal", **{**TOY_CONFIG, "epochs": 3})
    _, log3 = train(manifest, config3, tmp_path / "focal_replay")
    deterministic = log3.mean_losses == logs["focal"].mean_losses[:3]

    seconds = time.perf_counter() - t0
    absolute_ok = scores["focal"] >= MIN_FOCAL_IOU
    relative_ok = scores["focal"] >= scores["ce"] - MAX_CE_LEAD
    budget_ok = seconds < TOY_BUDGET_SECONDS
    ok = absolute_ok and relative_ok and deterministic and budget_ok
    _announce(capsys, 4, "toy end-to-end", ok,
              f"focal {scores['focal']:.4f} (bar {MIN_FOCAL_IOU}), "
              f"ce {scores['ce']:.4f} (lead cap {MAX_CE_LEAD}), "
              f"deterministic={deterministic}, {seconds:.0f}s "
              f"on {ACTIVE_BACKEND}")
    assert absolute_ok, f"focal mean IoU {scores['focal']:.4f} < {MIN_FOCAL_IOU}"
    assert relative_ok, (f"focal {scores['focal']:.4f} trails ce "
                         f"{scores['ce']:.4f} by more than {MAX_CE_LEAD}")
    assert deterministic
    assert budget_ok


def test_criterion_5_protocol_shape(capsys, tmp_path):
    from irisft.train import sweep_gamma
    micro = SynthSpec(count=8, image_size=32, images_per_identity=2,
                      seed=4, distractor_count=(0, 0))
    manifest = generate_synthetic(micro, tmp_path / "micro")
    base = TrainConfig(loss="focal", lr=1e-3, epochs=1, batch_size=4,
                       seed=0, input_resolution=32)
    results = sweep_gamma(manifest, base, gammas=(1, 2, 5),
                          out_dir=tmp_path / "sweep")
    rows_ok = ([r["gamma"] for r in results] == [1.0, 2.0, 5.0]
               and all(r["error"] is None for r in results))

    manifests, checkpoints = {}, {}
    for k in range(3):
        spec = SynthSpec(count=6, image_size=32, images_per_identity=2,
                         seed=40 + k, distractor_count=(0, 0))
        name = f"variant{k}"
        manifests[name] = generate_synthetic(spec, tmp_path / name)
        ckpt, _ = train(manifests[name], base, tmp_path / f"run_{name}")
        checkpoints[name] = ckpt
    cells = cross_evaluate(checkpoints, manifests, out_dir=tmp_path / "x")
    pairs = {(c["train"], c["test"]) for c in cells}
    cells_ok = (len(cells) == 6 and len(pairs) == 6
                and all(t != e for t, e in pairs)
                and all(c["error"] is None for c in cells))
    ok = rows_ok and cells_ok
    _announce(capsys, 5, "protocol shape", ok,
              f"gamma sweep rows {[r['gamma'] for r in results]}; "
              f"cross-eval cells {len(cells)} (all off-diagonal)")
    assert rows_ok
    assert cells_ok


def _loss_columns(csv_path):
    lines = open(csv_path, "rb").read().splitlines()
    return [b",".join(line.split(b",")[:2]) for line in lines]


def test_criterion_6_reproducibility(capsys, tmp_path):
    micro = SynthSpec(count=8, image_size=32, images_per_identity=2,
                      seed=4, distractor_count=(0, 0))
    manifest = generate_synthetic(micro, tmp_path / "micro")
    config = TrainConfig(loss="focal", lr=1e-3, epochs=2, batch_size=4,
                         seed=0, input_resolution=32)
    reports = []
    columns = []
    for tag in ("a", "b"):
        ckpt, _ = train(manifest, config, tmp_path / tag)
        model, _ = load_checkpoint(ckpt)
        report = evaluate(model, manifest, split="test",
                          prompt_mode="two-pass", checkpoint_id="fixed")
        path = report.save(tmp_path / f"report_{tag}.json")
        reports.append(open(path, "rb").read())
        columns.append(_loss_columns(tmp_path / tag / "train_log.csv"))
    losses_ok = columns[0] == columns[1]
    reports_ok = reports[0] == reports[1]
    ok = losses_ok and reports_ok
    _announce(capsys, 6, "reproducibility", ok,
              f"train-log loss columns bit-identical={losses_ok}; "
              f"eval report bytes identical={reports_ok}")
    assert losses_ok
    assert reports_ok


def test_criterion_7_full_scale_path(capsys):
    _announce(capsys, 7, "full-scale fine-tune", "SKIP",
              "optional manual check: needs a foundation checkpoint "
              "and a licensed dataset (see README)")
    pytest.skip("manual full-scale check; requires external checkpoint "
                "and dataset")
