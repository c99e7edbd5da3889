"""End-to-end acceptance checks. Each test prints one PASS/FAIL line; the
lines are also collected into the pytest terminal summary.

Run alone with ``pytest tests/test_acceptance.py -v`` or as a script with
``python3 tests/test_acceptance.py``.
"""
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import conftest  # noqa: E402
from oracles import dense_graph_conv, knn_all_k, set_metrics  # noqa: E402
from reference_scores import REFERENCE_IOU  # noqa: E402
from test_tensor_core import OPS  # noqa: E402
from toy import composite_case  # noqa: E402
from unet_gnn import checkpoint as ck  # noqa: E402
from unet_gnn import graph_bottleneck as gb  # noqa: E402
from unet_gnn import harness  # noqa: E402
from unet_gnn import losses_metrics as lm  # noqa: E402
from unet_gnn import segnet as sn  # noqa: E402
from unet_gnn import tensor_core as tc  # noqa: E402
from unet_gnn.config import RunConfig  # noqa: E402
from unet_gnn.data_pipeline import parse_manifest, synth_shapes  # noqa: E402
from unet_gnn.tensor_core import Tensor  # noqa: E402

SEEDS = range(20)


def verdict(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} -- {detail}"
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    assert ok, line


# -- 1. gradients -------------------------------------------------------------
def _graph_case(r):
    g = gb.build_knn_graph(gb.warp_coordinates(gb.sinusoidal_encoding(
        3, 4, 8, Tensor(r.normal(scale=1.5, size=(2, 8)), dtype=np.float64))), 3)
    f = lambda h, w, b: (gb.graph_conv(h, g, gb.GraphConvParams(w, b)) * 0.25).mean()  # noqa: E731
    return f, [r.normal(size=(12, 3)), 0.5 * r.normal(size=(3, 3)), r.normal(size=3)]


def _ce_case(r):
    t = r.integers(0, 3, (4, 4))
    return (lambda z: lm.cross_entropy(tc.softmax_channels(z), t)), [r.normal(size=(3, 4, 4))]


def _gwd_case(r):
    m = lm.CostMatrix(r.uniform(0.1, 2, (3, 3)) * (1 - np.eye(3)))
    t = r.integers(0, 3, (4, 4))
    return (lambda z: lm.gwd_loss(tc.softmax_channels(z), t, m)), [r.normal(size=(3, 4, 4))]


GRAD_CASES = dict(OPS, graph_conv=_graph_case, cross_entropy=_ce_case, gwd_loss=_gwd_case)


def gradient_suite():
    worst = {}
    for mode, eps, tol in (("float64", 1e-6, 1e-5), ("float32", 1e-3, 1e-3)):
        with tc.precision(mode):
            for name, make in GRAD_CASES.items():
                for seed in SEEDS:
                    f, arrays = make(np.random.default_rng(seed))
                    err = tc.check_gradients(f, [Tensor(a) for a in arrays], eps=eps)
                    worst[(mode, name)] = max(worst.get((mode, name), 0.0), err)
            for seed in SEEDS:
                f, tensors = composite_case(seed)
                err = tc.check_gradients(f, tensors, eps=eps)
                worst[(mode, "unet_gnn")] = max(worst.get((mode, "unet_gnn"), 0.0), err)
    return worst


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = gradient_suite()
    elapsed = time.perf_counter() - t0
    tol = {"float64": 1e-5, "float32": 1e-3}
    bad = {k: v for k, v in worst.items() if v > tol[k[0]]}
    w64 = max(v for k, v in worst.items() if k[0] == "float64")
    w32 = max(v for k, v in worst.items() if k[0] == "float32")
    verdict(1, "finite-difference gradients", not bad and elapsed < 120,
            f"{len(GRAD_CASES) + 1} cases x {len(SEEDS)} seeds; worst f64 {w64:.1e}, worst f32 {w32:.1e}; "
            f"{elapsed:.1f}s" + (f"; over tolerance: {sorted(bad)}" if bad else ""))


# -- 2. graph oracle ----------------------------------------------------------
def test_criterion_2_graph_oracle():
    t0 = time.perf_counter()
    checked = mismatches = 0
    for warp in range(50):
        r = np.random.default_rng(warp)
        for h in range(1, 9):
            for w in range(1, 9):
                proj = None if warp == 0 else Tensor(r.normal(scale=1.5, size=(2, 8)), dtype=np.float64)
                coords = gb.warp_coordinates(gb.sinusoidal_encoding(h, w, 8, proj))
                expected = knn_all_k(coords.tolist(), range(1, 6))
                for k, rows in expected.items():
                    checked += 1
                    if gb.build_knn_graph(coords, k).neighbor_table().tolist() != rows:
                        mismatches += 1
    elapsed = time.perf_counter() - t0
    verdict(2, "k-NN graph vs sorted-distance oracle", mismatches == 0 and elapsed < 30,
            f"{checked} graphs (50 warps incl. identity, H,W<=8, k=1..5), {mismatches} mismatches, {elapsed:.1f}s")


# -- 3. graph convolution exactness -------------------------------------------
def test_criterion_3_graph_conv():
    worst_dense = worst_perm = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        proj = Tensor(r.normal(scale=1.5, size=(2, 8)), dtype=np.float64)
        g = gb.build_knn_graph(gb.warp_coordinates(gb.sinusoidal_encoding(4, 4, 8, proj)), int(r.integers(1, 9)))
        h = r.normal(size=(16, 6)).astype(np.float32)
        w, b = r.normal(size=(6, 6)).astype(np.float32), r.normal(size=6).astype(np.float32)
        params = gb.GraphConvParams(Tensor(w), Tensor(b))
        for mode in ("sum", "mean"):
            out = gb.graph_conv(Tensor(h), g, params, mode).data
            ref = dense_graph_conv(h.astype(np.float64), g.neighbor_table().tolist(), w, b, mean=(mode == "mean"))
            worst_dense = max(worst_dense, float(np.abs(out - ref).max()))
        perm = r.permutation(16)
        table = g.neighbor_table()
        new = np.empty_like(table)
        new[perm] = perm[table]
        gp = gb.GridGraph(16, g.k, g.csr_offsets.copy(), new.reshape(-1))
        hp = np.empty_like(h)
        hp[perm] = h
        outp = gb.graph_conv(Tensor(hp), gp, params).data
        worst_perm = max(worst_perm, float(np.abs(outp[perm] - gb.graph_conv(Tensor(h), g, params).data).max()))
    verdict(3, "graph_conv exactness and permutation equivariance", worst_dense <= 1e-5 and worst_perm <= 1e-5,
            f"20 random 4x4 grids; dense-oracle max abs err {worst_dense:.1e}, permutation max abs err {worst_perm:.1e}")


# -- 4. shape / normalisation -------------------------------------------------
def test_criterion_4_shape_contract():
    cfg = sn.ModelConfig()
    params = sn.init_params(cfg, seed=0)
    x = Tensor(np.random.default_rng(0).uniform(size=(3, 256, 256)))
    with tc.no_grad():
        bott, skips = sn.encoder_forward(x, params, cfg)
        y = sn.segment(x, params, cfg).data
    dev = float(np.abs(y.sum(axis=0) - 1).max())
    ok = y.shape == (cfg.num_classes, 256, 256) and bott.shape[-2:] == (16, 16) and dev <= 1e-6
    verdict(4, "segment shape and per-pixel normalisation", ok,
            f"output {list(y.shape)}, bottleneck {list(bott.shape)}, max |sum-1| {dev:.1e}")


# -- 5. overfit ---------------------------------------------------------------
OVERFIT_SCRIPT = r"""
import json, time
import numpy as np
from unet_gnn import harness
from unet_gnn.config import RunConfig
from unet_gnn.data_pipeline import synth_shapes
from unet_gnn.segnet import init_params, predict_labels

t0 = time.perf_counter()
samples = synth_shapes(7, 16, 64, num_classes=2)
cfg = RunConfig(in_channels=3, num_classes=2, depth=3, base_channels=8, k=8, num_gnn_layers=2,
                epochs=300, batch_size=4, lr=1e-3, seed=7, image_size=64)
params = init_params(cfg.model_config(), seed=cfg.seed)
trace = []

def after_epoch(entry):
    fg = harness.foreground_miou(harness.evaluate(params, cfg, samples))
    trace.append((entry["epoch"], entry["loss"], fg))
    return fg >= 0.95

harness.train(cfg, samples, params=params, write_checkpoints=False, on_epoch=after_epoch)
labels = predict_labels(harness.predict_probs(params, cfg, np.stack([s.image for s in samples])))
agreement = float((labels[0] == samples[0].mask).mean())
print(json.dumps({"trace": trace, "seconds": time.perf_counter() - t0, "agreement": agreement}))
"""


def test_criterion_5_overfit():
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1",
               NUMBA_NUM_THREADS="1")
    proc = subprocess.run([sys.executable, "-c", OVERFIT_SCRIPT], capture_output=True, text=True, env=env,
                          timeout=900)
    assert proc.returncode == 0, proc.stderr
    out = json.loads(proc.stdout.strip().splitlines()[-1])
    epochs, losses, fgs = zip(*out["trace"])
    ok = fgs[-1] >= 0.95 and epochs[-1] <= 300 and out["seconds"] <= 600 and losses[-1] < losses[0]
    verdict(5, "single-threaded overfit run", ok,
            f"foreground IoU {fgs[-1]:.4f} after {epochs[-1]} epochs, loss {losses[0]:.4f} -> {losses[-1]:.4f}, "
            f"mask agreement {out['agreement']:.4f}, {out['seconds']:.1f}s")


# -- 6. ablation determinism --------------------------------------------------
def test_criterion_6_ablation_determinism():
    t0 = time.perf_counter()
    a = json.dumps(harness.run_ablation(), sort_keys=True)
    b = json.dumps(harness.run_ablation(), sort_keys=True)
    rep = json.loads(a)
    g = rep["variants"]["unet_gnn"]["test"]["macro_miou"]
    base = rep["variants"]["unet_baseline"]["test"]["macro_miou"]
    verdict(6, "fisheye ablation report reproducible", a == b,
            f"bitwise identical={a == b}; test macro mIoU unet_gnn {g:.4f}, unet_baseline {base:.4f}, "
            f"observed delta {rep['macro_miou_delta_gnn_minus_baseline']:+.4f} (recorded, not asserted); "
            f"{time.perf_counter() - t0:.1f}s")


# -- 7. metric oracle ---------------------------------------------------------
def test_criterion_7_metrics():
    exact = 0
    for seed in range(100):
        r = np.random.default_rng(10_000 + seed)
        c = int(r.integers(1, 6))
        h, w = int(r.integers(1, 9)), int(r.integers(1, 9))
        p, t = r.integers(0, c, (h, w)), r.integers(0, c, (h, w))
        conf = lm.accumulate(lm.ConfusionMatrix(c), p, t)
        iou, acc = set_metrics(p, t, c)
        got_i, got_a = lm.per_class_iou(conf), lm.per_class_accuracy(conf)
        same_i = np.array_equal(got_i, iou, equal_nan=True)
        same_a = np.array_equal(got_a, acc, equal_nan=True)
        macro_ok = lm.miou(conf) == float(np.mean(iou[~np.isnan(iou)]))
        exact += same_i and same_a and macro_ok
    ref = lm.macro_mean(REFERENCE_IOU)
    verdict(7, "confusion-matrix metrics vs set arithmetic", exact == 100 and abs(ref - 0.611) <= 1e-3,
            f"{exact}/100 pairs exact; reference column macro mean {ref:.4f}")


# -- 8. format round trips ----------------------------------------------------
def test_criterion_8_round_trips(tmp_path):
    checks = {}
    cfg = RunConfig(in_channels=3, num_classes=2, depth=2, base_channels=4, k=4, d_pe=8, image_size=32,
                    epochs=2, batch_size=4, seed=3)
    samples = synth_shapes(11, 4, 32)
    res = harness.train(cfg, samples, out_dir=tmp_path / "run")
    raw = res.checkpoint.read_bytes()
    back = ck.load_checkpoint(res.checkpoint)
    ck.save_checkpoint(back, tmp_path / "again.ugnn")
    named = res.params.named_tensors()
    checks["checkpoint"] = (raw == (tmp_path / "again.ugnn").read_bytes()
                            and all(back.tensors[k].tobytes() == t.data.astype(np.float32).tobytes()
                                    for k, t in named.items()))

    text = "@num_classes\t3\n@classes\tbg\ta\tb\n@ignore_index\t255\nimg/x.png\tmask/x.png\tx\nimg/y.png\tmask/y.png\ty\n"
    m1 = parse_manifest(text, check_paths=False)
    m2 = parse_manifest(m1.dumps(), check_paths=False)
    checks["manifest"] = m1.dumps() == m2.dumps() == text

    cm = lm.CostMatrix(np.array([[0, 0.1, 2.5], [1 / 3, 0, 1e-9], [7, 2, 0]]))
    cm2 = lm.CostMatrix.loads(cm.dumps())
    checks["cost_matrix"] = cm2.dumps() == cm.dumps() and cm2.M.tobytes() == cm.M.tobytes()

    # retrain from scratch with the same seed, then predict from both runs
    res2 = harness.train(cfg, samples, out_dir=tmp_path / "run2")
    for k, t in res.params.named_tensors().items():
        assert t.data.tobytes() == res2.params.named_tensors()[k].data.tobytes()
    from unet_gnn.data_pipeline import write_image_png
    img = tmp_path / "probe.png"
    write_image_png(samples[0].image, img)
    outs = []
    for i, r in enumerate((res, res2)):
        _, p = harness.params_from_checkpoint(ck.load_checkpoint(r.checkpoint))
        written, errors = harness.predict_files(p, cfg, [img], tmp_path / f"pred{i}", save_probs=True)
        outs.append([w.read_bytes() for w in written])
    checks["png_masks"] = outs[0] == outs[1] and len(outs[0]) == 3
    verdict(8, "format round trips", all(checks.values()),
            ", ".join(f"{k} {'ok' if v else 'MISMATCH'}" for k, v in checks.items()))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
