"""Acceptance suite: one test per numbered criterion, each recording a PASS/FAIL line.

Criteria 1-4 are pure numerics and take seconds. Criteria 5-8 share a session
workspace holding a synthetic corpus, a pretrained codec and a trained model;
on one CPU core the whole module takes about two hours. Set
``FORGELOC_ACCEPTANCE_DIR`` to keep that workspace between sessions, so the
codec and the full model are reused when already present.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from forgeloc.cli import dispatch
from forgeloc.codec import CodecConfig, LatentCodec, decode, encode, encode_mask, pretrain_codec
from forgeloc.data import DatasetManifest, ForgeryRecord, load_image, load_mask, synthesize_dataset
from forgeloc.mapping import MappingNets
from forgeloc.metrics import binarize, complement_f1, confusion, metric_record, scores
from forgeloc.objective import DICE_EPS, dice_loss, latent_matching_loss, total_loss
from forgeloc.robustness import parse_grid, run_suite
from forgeloc.srm import extract_residuals, residuals_torch, srm_kernels
from forgeloc.theory import theory_report
from forgeloc.train import ModelCheckpoint, TrainConfig, evaluate, load_arrays, run_ablation, train

from .fd import central_diff, rel_err
from .test_codec import checker_witness
from .test_mapping import TINY, _randomize

SIZE = 64
N_PRISTINE = 2000
N_MASKS_FOR_CODEC = 1000
N_TRAIN = 2000
N_TEST = 300
N_HELDOUT_PRISTINE = 200
FORGED = ("copy-move", "splice", "inpaint")

# default mapping sizes and optimizer recipe (AdamW, lr 1e-4, 5 warm-up epochs, batch 4)
ACCEPT_MAPPING: dict = {}
ACCEPT_EPOCHS = 30
ROBUSTNESS_GRID = "jpeg=90,80,70;noise=0.1,0.3,0.5;resize=0.9,0.8,0.7;osn=light,medium,heavy"


# ------------------------------------------------------------ 1-4: numerics

def test_criterion_1_theory_suite(criterion):
    t0 = time.perf_counter()
    rep = theory_report(n_images=50, n_toys=1000, n_joints=100, seed=0)
    elapsed = time.perf_counter() - t0
    ok = (rep["fold_max_err"] <= 1e-9 and rep["jensen_gap_min"] >= -1e-12
          and rep["jensen_equality_max_abs"] <= 1e-12 and rep["mi_gain_min"] >= -1e-12
          and rep["xor"]["i_zf"] - rep["xor"]["i_z"] == 1.0 and elapsed < 60)
    criterion(1, "theory suite", ok,
              f"fold err {rep['fold_max_err']:.2e}, jensen gap min {rep['jensen_gap_min']:.2e}, "
              f"equality {rep['jensen_equality_max_abs']:.2e}, MI gain min {rep['mi_gain_min']:.2e}, "
              f"XOR gain {rep['xor']['i_zf'] - rep['xor']['i_z']}, {elapsed:.1f}s")


def test_criterion_2_residual_suite(criterion):
    k1, k2, k3 = srm_kernels()
    expected = {
        "k1": ([[0, 0, 0, 0, 0], [0, -1, 2, -1, 0], [0, 2, -4, 2, 0], [0, -1, 2, -1, 0], [0, 0, 0, 0, 0]], 4),
        "k2": ([[-1, 2, -2, 2, -1], [2, -6, 8, -6, 2], [-2, 8, -12, 8, -2], [2, -6, 8, -6, 2],
                [-1, 2, -2, 2, -1]], 12),
        "k3": ([[0] * 5, [0] * 5, [0, 1, -2, 1, 0], [0] * 5, [0] * 5], 2),
    }
    taps_ok = all(
        [list(r) for r in k.taps] == taps and k.scale.denominator == den and k.scale.numerator == 1
        for k, (taps, den) in zip((k1, k2, k3), expected.values())
    )
    rng = np.random.default_rng(7)
    const_err = max(np.abs(extract_residuals(np.full((32, 32, 3), v))).max() for v in rng.random(10))
    img = np.zeros((16, 16, 3))
    img[:, 8:] = 1.0
    r3 = extract_residuals(img)[..., 2]
    edge_ok = np.allclose(r3[:, 7], 0.5, atol=1e-12) and np.allclose(r3[:, 8], -0.5, atol=1e-12)
    criterion(2, "residual suite", taps_ok and const_err <= 1e-12 and edge_ok,
              f"taps exact {taps_ok}, constant response {const_err:.1e}, step edge ±0.5 {edge_ok}")


def _pipeline_grad_err():
    torch.manual_seed(0)
    codec = LatentCodec(s=4, c_latent=12, widths=(4, 8)).double().freeze()
    nets = _randomize(MappingNets(TINY).double(), seed=3, scale=0.2)
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    mask = (torch.rand(1, 8, 8, dtype=torch.float64) > 0.5).double()
    with torch.no_grad():
        z_i = codec.encode_t(x)
        z_m = codec.encode_t(mask[:, None].expand(-1, 3, -1, -1))
        res = residuals_torch(x)

    def loss_of(params_flat):
        torch.nn.utils.vector_to_parameters(params_flat, nets.parameters())
        z_hat = nets(z_i, res)
        return total_loss(z_m, z_hat, mask, codec.decode_t(z_hat).mean(dim=1)).total

    theta = torch.nn.utils.parameters_to_vector(nets.parameters()).detach().clone()
    params = list(nets.parameters())
    z_hat = nets(z_i, res)
    loss = total_loss(z_m, z_hat, mask, codec.decode_t(z_hat).mean(dim=1)).total
    grad = torch.cat([g.reshape(-1) for g in torch.autograd.grad(loss, params)]).numpy()
    idx = np.random.default_rng(0).choice(theta.numel(), size=200, replace=False)
    with torch.no_grad():
        num = central_diff(loss_of, theta, indices=idx)
        torch.nn.utils.vector_to_parameters(theta, nets.parameters())
    return rel_err(grad[idx], num)


def test_criterion_3_objective_suite(criterion):
    rng = np.random.default_rng(3)
    lo, hi = np.inf, -np.inf
    for _ in range(1000):
        m = rng.random((8, 8))
        if rng.random() < 0.5:
            m = (m > 0.5).astype(float)
        v = float(dice_loss(m, rng.random((8, 8))))
        lo, hi = min(lo, v), max(hi, v)
    range_ok = lo >= 0.0 and hi <= 1.0 + 2 * DICE_EPS

    ones = np.ones((2, 2))
    one_px = np.zeros((2, 2))
    one_px[0, 0] = 1
    half = np.zeros((4, 4))
    half[:2] = 1
    eps = DICE_EPS
    hand = [
        (float(dice_loss(half, half)), 1 - (16 + eps) / (16 + eps)),  # perfect overlap: 0
        (float(dice_loss(half, 1 - half)), 1 - eps / (16 + eps)),  # disjoint: 1 up to eps
        (float(dice_loss(ones, one_px)), 1 - (2 + eps) / (5 + eps)),  # 0.6 up to eps
    ]
    hand_err = max(abs(a - b) for a, b in hand)

    m = torch.from_numpy((rng.random((8, 8)) > 0.5).astype(float))
    p = torch.from_numpy(rng.uniform(0.05, 0.95, (8, 8))).requires_grad_(True)
    dice_loss(m, p).backward()
    dice_err = rel_err(p.grad.numpy(), central_diff(lambda x: dice_loss(m, x), p))
    a = torch.from_numpy(rng.normal(size=(4, 4, 16)))
    b = torch.from_numpy(rng.normal(size=(4, 4, 16))).requires_grad_(True)
    latent_matching_loss(a, b).backward()
    lm_err = rel_err(b.grad.numpy(), central_diff(lambda x: latent_matching_loss(a, x), b))
    pipe_err = _pipeline_grad_err()
    ok = range_ok and hand_err <= 1e-9 and max(dice_err, lm_err, pipe_err) <= 1e-4
    criterion(3, "objective suite", ok,
              f"dice range [{lo:.4f}, {hi:.4f}], hand-case err {hand_err:.1e}, grad rel err dice {dice_err:.1e} "
              f"lm {lm_err:.1e} pipeline {pipe_err:.1e}")


def test_criterion_4_metrics_suite(criterion):
    rng = np.random.default_rng(4)
    mismatches, order_violations = 0, 0
    for _ in range(1000):
        m = (rng.random((8, 8)) > rng.random()).astype(np.uint8)
        p = (rng.random((8, 8)) > rng.random()).astype(np.uint8)
        tp = int(sum(1 for a, b in zip(m.ravel(), p.ravel()) if a and b))
        fp = int(sum(1 for a, b in zip(m.ravel(), p.ravel()) if b and not a))
        fn = int(sum(1 for a, b in zip(m.ravel(), p.ravel()) if a and not b))
        if tp + fp + fn == 0:
            ref_iou = ref_f1 = 1.0
        else:
            ref_iou = tp / (tp + fp + fn)
            ref_f1 = 2 * tp / (2 * tp + fp + fn)
        ref_p = tp / (tp + fp) if tp + fp else 0.0
        ref_r = tp / (tp + fn) if tp + fn else 0.0
        got = scores(confusion(m, p))
        if (abs(got["iou"] - ref_iou) > 1e-12 or abs(got["f1"] - ref_f1) > 1e-12
                or abs(got["precision"] - ref_p) > 1e-12 or abs(got["recall"] - ref_r) > 1e-12):
            mismatches += 1
        if got["iou"] > got["f1"] + 1e-15:
            order_violations += 1
    m = (rng.random((8, 8)) > 0.5).astype(np.uint8)
    comp = complement_f1(m, 1 - m)
    criterion(4, "metrics suite", mismatches == 0 and order_violations == 0 and comp == 1.0,
              f"oracle mismatches {mismatches}/1000, iou>f1 cases {order_violations}, complement F1 {comp}")


# ------------------------------------------------------ 5-8: shared workspace

def _merged(*manifests, split="train") -> DatasetManifest:
    recs = [ForgeryRecord(str(m.resolve(r.image_path)), str(m.resolve(r.mask_path)), r.forgery_kind, r.seed)
            for m in manifests for r in m.records]
    return DatasetManifest(records=recs, split=split)


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    env = os.environ.get("FORGELOC_ACCEPTANCE_DIR")
    root = Path(env) if env else tmp_path_factory.mktemp("acceptance")
    root.mkdir(parents=True, exist_ok=True)

    def corpus(name, seeds, kinds, split):
        path = root / name / "manifest.jsonl"
        if path.exists():
            from forgeloc.data import read_manifest

            return read_manifest(path)
        return synthesize_dataset(root / name, seeds, kinds, SIZE, split)

    # disjoint seed ranges per split
    return {
        "root": root,
        "pristine": corpus("pristine", range(0, N_PRISTINE), ["pristine"], "train"),
        "train": corpus("train", range(100_000, 100_000 + N_TRAIN), FORGED, "train"),
        "test": corpus("test", range(200_000, 200_000 + N_TEST), FORGED, "test"),
        "heldout_pristine": corpus("heldout", range(300_000, 300_000 + N_HELDOUT_PRISTINE), ["pristine"], "test"),
    }


@pytest.fixture(scope="session")
def codec_run(workspace):
    path = workspace["root"] / "codec"
    if (path / "manifest.json").exists():
        meta = json.loads((path / "manifest.json").read_text())
        return LatentCodec.load(path), meta["curve"], path
    pre = _merged(workspace["pristine"], workspace["train"].head(N_MASKS_FOR_CODEC))
    result = pretrain_codec(pre, CodecConfig())
    result.codec.save(path, {"curve": result.curve})
    return result.codec, result.curve, path


def _accept_config(codec_path, **kw) -> TrainConfig:
    return TrainConfig(epochs=ACCEPT_EPOCHS, mapping=ACCEPT_MAPPING, codec_checkpoint=str(codec_path), **kw)


@pytest.fixture(scope="session")
def full_model(workspace, codec_run):
    codec, _, codec_path = codec_run
    out = workspace["root"] / "full"
    config = _accept_config(codec_path)
    if (out / "manifest.json").exists():
        model = ModelCheckpoint.load(out, codec=codec)
        if model.config == config:
            return model, out / "train_log.jsonl"
    out.mkdir(parents=True, exist_ok=True)
    model = train(config, workspace["train"], codec=codec, log_path=out / "train_log.jsonl")
    model.save(out)
    return model, out / "train_log.jsonl"


@pytest.fixture(scope="session")
def full_report(workspace, full_model):
    return evaluate(full_model[0], workspace["test"])


def test_criterion_5_end_to_end_learning(criterion, workspace, codec_run, full_model, full_report):
    codec = codec_run[0]
    maes = [np.abs(decode(encode(x, codec), codec) - x).mean()
            for x in (load_image(workspace["heldout_pristine"].resolve(r.image_path))
                      for r in workspace["heldout_pristine"].records)]
    accs = []
    for r in workspace["test"].records:
        m = load_mask(workspace["test"].resolve(r.mask_path))
        accs.append((binarize(decode(encode_mask(m, codec), codec)) == m).mean())
    mae, acc = float(np.mean(maes)), float(np.mean(accs))
    rows = [json.loads(line) for line in full_model[1].read_text().splitlines()]
    finite = all(np.isfinite(r["total"]) for r in rows)
    f1 = full_report.summary["none"]["f1_complement_max"]
    ok = mae <= 0.08 and acc >= 0.98 and f1 >= 0.70 and finite
    criterion(5, "end-to-end learning", ok,
              f"codec MAE {mae:.4f} (<= 0.08), mask accuracy {acc:.4f} (>= 0.98), "
              f"complement-F1 {f1:.4f} (>= 0.70) after {ACCEPT_EPOCHS} epochs, finite losses {finite}")


def test_pretrained_codec_separates_blank_masks(codec_run):
    codec = codec_run[0]
    z0 = encode_mask(np.zeros((SIZE, SIZE), dtype=np.uint8), codec)
    z1 = encode_mask(np.ones((SIZE, SIZE), dtype=np.uint8), codec)
    assert np.linalg.norm(z0 - z1) > 0


def test_pretrained_codec_loses_period_two_checker(codec_run):
    d_witness, d_ref = checker_witness(codec_run[0])
    assert d_witness <= 0.1 * d_ref


def test_codec_pretrain_best_loss_monotone(codec_run):
    best = [r["best"] for r in codec_run[1]]
    assert all(b <= a for a, b in zip(best, best[1:]))


def test_trained_model_beats_all_zero_predictor(workspace, full_report):
    _, masks = load_arrays(workspace["test"])
    zero = np.mean([metric_record(m, np.zeros_like(m)).f1_complement_max for m in masks])
    assert full_report.summary["none"]["f1_complement_max"] > zero


def test_codec_unchanged_by_training(codec_run, full_model):
    assert full_model[0].codec_hash == LatentCodec.load(codec_run[2]).content_hash()


@pytest.fixture(scope="session")
def ablation_rows(workspace, codec_run, full_report):
    path = workspace["root"] / f"ablation_{ACCEPT_EPOCHS}.json"
    if path.exists():
        return json.loads(path.read_text())
    rows = run_ablation(_accept_config(codec_run[2]), workspace["train"], workspace["test"],
                        variants=("no_srm_flmm", "no_vae_lmm", "no_lmm", "no_codec_pretrain"), codec=codec_run[0])
    path.write_text(json.dumps(rows, indent=2))
    return rows


def test_criterion_6_ablation_orderings(criterion, full_report, ablation_rows):
    full = full_report.summary["none"]["f1_complement_max"]
    gaps = {r["variant"]: full - r["f1"] for r in ablation_rows}
    ok = len(gaps) == 4 and all(g >= 0.02 for g in gaps.values())
    criterion(6, "ablation orderings", ok,
              f"full {full:.4f}; gaps " + ", ".join(f"{k} {v:+.4f}" for k, v in gaps.items()) + " (each >= 0.02)")


def _inversions(values):
    """Amounts by which a sequence that should not increase goes up."""
    return [b - a for a, b in zip(values, values[1:]) if b > a]


def test_criterion_7_robustness_trend(criterion, workspace, full_model):
    report = run_suite(full_model[0], workspace["test"], parse_grid(ROBUSTNESS_GRID), seed=0)
    f1 = {tag: row["f1_complement_max"] for tag, row in report.summary.items()}
    jpeg = [f1["jpeg90"], f1["jpeg80"], f1["jpeg70"]]
    noise = [f1["noise0.1"], f1["noise0.3"], f1["noise0.5"]]
    inv = _inversions(jpeg) + _inversions(noise)
    ok = (len(inv) == 0 or (len(inv) == 1 and inv[0] <= 0.01)) and f1["none"] >= f1["osn_heavy"]
    criterion(7, "robustness trend", ok,
              "jpeg 90/80/70 " + "/".join(f"{v:.4f}" for v in jpeg)
              + ", noise 0.1/0.3/0.5 " + "/".join(f"{v:.4f}" for v in noise)
              + f", none {f1['none']:.4f} vs osn_heavy {f1['osn_heavy']:.4f}, inversions {inv}")


def test_criterion_8_determinism(criterion, workspace, codec_run, tmp_path):
    from forgeloc.data import write_manifest

    subset = workspace["train"].head(200)
    sub_path = tmp_path / "train_subset.jsonl"
    write_manifest(_merged(subset), sub_path)
    test_path = workspace["test"].root / "manifest.jsonl"
    sets = ["--set", "epochs=2", "--set", "warmup_epochs=1", "--set", f"mapping={json.dumps(ACCEPT_MAPPING)}"]
    blobs = []
    for run in ("a", "b"):
        rc_train = dispatch(["train", "--codec", str(codec_run[2]), "--manifest", str(sub_path),
                             "--out", str(tmp_path / run / "ckpt"), *sets])
        rc_eval = dispatch(["eval", "--checkpoint", str(tmp_path / run / "ckpt"), "--manifest", str(test_path),
                            "--out", str(tmp_path / run / "eval")])
        assert rc_train == 0 and rc_eval == 0
        blobs.append(((tmp_path / run / "eval" / "eval_report.json").read_bytes(),
                      (tmp_path / run / "ckpt" / "weights.bin").read_bytes()))
    same_report = blobs[0][0] == blobs[1][0]
    same_weights = blobs[0][1] == blobs[1][1]
    criterion(8, "determinism", same_report and same_weights,
              f"eval_report.json byte-identical {same_report}, weights.bin byte-identical {same_weights}")
