"""Acceptance criteria, one test each.  Every test prints a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from offnet import core
from offnet.cli import main
from offnet.core import Tensor, conv_output_size, grad_check
from offnet.dataset import (
    decode_ground_truth,
    encode_ground_truth,
    encode_prediction,
    png_bytes,
    scan_dataset,
)
from offnet.evaluation import ConfusionCounts, metrics
from offnet.geometry import (
    DepthMap,
    NormalMap,
    PointCloud,
    back_project,
    decode_depth_png,
    decode_normal_png,
    densify_depth,
    encode_depth_png,
    encode_normal_png,
    estimate_normals,
    format_calibration,
    parse_calibration,
    project_camera,
    read_point_cloud,
    write_point_cloud,
)
from offnet.model import (
    ModelConfig,
    OFFNet,
    bce_loss,
    build_model,
    checkpoint_bytes,
    cross_attention_fuse,
    efficient_self_attention,
    encode,
    forward,
    load_checkpoint,
    save_checkpoint,
    toy_config,
)
from offnet.model.config import PATCH_KERNELS, PATCH_PADDINGS, PATCH_STRIDES
from offnet.model.network import CrossAttentionFuse, EfficientSelfAttention
from offnet.synthetic import make_synthetic_dataset
from offnet.training import SampleCache, TrainConfig, evaluate_model, train_epoch

from conftest import pinhole


@pytest.fixture
def verdict(capsys):
    def emit(number: int, title: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  criterion {number:>2} {title}: {detail}")
        assert ok, detail

    return emit


# 1 --------------------------------------------------------------------------------------

def primitive_cases(rng):
    def weighted(out_fn, shape):
        w = rng.normal(size=shape)
        return lambda: (out_fn() * w).sum()

    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)))
    other = Tensor(rng.uniform(0.5, 2.0, (3, 4)))
    a, b = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(5, 2)))
    g, beta = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    img = Tensor(rng.normal(size=(1, 4, 6, 6)))
    kern = Tensor(rng.normal(size=(4, 2, 3, 3)))
    bias = Tensor(rng.normal(size=4))
    probs = Tensor(rng.uniform(0.05, 0.95, (2, 3, 3)))
    labels = rng.random((3, 3)) > 0.5
    return {
        "add": (weighted(lambda: pos + other, (3, 4)), pos),
        "sub": (weighted(lambda: pos - other, (3, 4)), other),
        "mul": (weighted(lambda: pos * other, (3, 4)), pos),
        "div": (weighted(lambda: pos / other, (3, 4)), other),
        "power": (weighted(lambda: pos**2.5, (3, 4)), pos),
        "exp": (weighted(lambda: core.exp(pos), (3, 4)), pos),
        "log": (weighted(lambda: core.log(pos), (3, 4)), pos),
        "clip": (weighted(lambda: core.clip(pos, 0.9, 1.6), (3, 4)), pos),
        "sum/mean": (lambda: pos.sum() * 0.3 + core.mean(pos * pos), pos),
        "reshape/transpose": (weighted(lambda: pos.reshape(2, 6).transpose() * 2.0, (6, 2)), pos),
        "concat": (weighted(lambda: core.concat([pos, other], axis=0), (6, 4)), pos),
        "matmul (left)": (weighted(lambda: a @ b, (3, 2)), a),
        "matmul (right)": (weighted(lambda: a @ b, (3, 2)), b),
        "softmax": (weighted(lambda: core.softmax(a, axis=-1), (3, 5)), a),
        "gelu": (weighted(lambda: core.gelu(a), (3, 5)), a),
        "sigmoid": (weighted(lambda: core.sigmoid(a * 3.0), (3, 5)), a),
        "layer_norm (x)": (weighted(lambda: core.layer_norm(pos, g, beta), (3, 4)), pos),
        "layer_norm (gamma)": (weighted(lambda: core.layer_norm(pos, g, beta), (3, 4)), g),
        "layer_norm (beta)": (weighted(lambda: core.layer_norm(pos, g, beta), (3, 4)), beta),
        "linear": (weighted(lambda: core.linear(a, b), (3, 2)), b),
        "conv2d (input)": (weighted(lambda: core.conv2d(img, kern, bias, 2, 1, groups=2), (1, 4, 3, 3)), img),
        "conv2d (kernel)": (weighted(lambda: core.conv2d(img, kern, bias, 2, 1, groups=2), (1, 4, 3, 3)), kern),
        "conv2d (bias)": (weighted(lambda: core.conv2d(img, kern, bias, 2, 1, groups=2), (1, 4, 3, 3)), bias),
        "resize_bilinear": (weighted(lambda: core.resize_bilinear(img, 9, 4), (1, 4, 9, 4)), img),
        "gather_class": (weighted(lambda: core.gather_class(probs, labels, axis=0), (3, 3)), probs),
        "bce_loss": (lambda: bce_loss(probs, labels), probs),
    }


def test_criterion_01_gradient_fidelity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    worst_prim, failures = 0.0, []
    cases = primitive_cases(rng)
    for name, (f, target) in cases.items():
        rep = grad_check(f, target)
        worst_prim = max(worst_prim, rep.max_rel_error)
        if not rep.passed:
            failures.append(name)

    model = build_model(toy_config(), seed=0)
    for p in model.parameters():
        p.data = p.data.astype(np.float64)
    image = Tensor(rng.normal(size=(3, 64, 64)))
    normals = Tensor(rng.normal(size=(3, 64, 64)))
    labels = rng.random((64, 64)) > 0.5
    loss = lambda: bce_loss(forward(model, image, normals), labels)
    worst_model, checked = 0.0, 0
    for name, p in list(model.named_parameters()) + [("input image", image), ("input normals", normals)]:
        rep = grad_check(loss, p, max_checks=2, rng=np.random.default_rng(checked))
        checked += rep.checked
        worst_model = max(worst_model, rep.max_rel_error)
        if not rep.passed:
            failures.append(name)
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed <= 300
    verdict(
        1,
        "gradient fidelity",
        ok,
        f"{len(cases)} primitive cases worst rel. err {worst_prim:.1e}; toy network {checked} coordinates over "
        f"{len(model.parameters()) + 2} tensors worst {worst_model:.1e}; {elapsed:.0f} s"
        + (f"; failed: {failures}" if failures else ""),
    )


# 2 -----------------------------------------------------------------------------------------

def test_criterion_02_attention_oracle(verdict):
    attn = EfficientSelfAttention(2, 1, 1)
    for lin in (attn.q, attn.k, attn.v, attn.proj):
        lin.weight.data = np.eye(2)
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    q = k = v = x
    logits = q @ k.T / math.sqrt(2)
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    want = (w / w.sum(axis=1, keepdims=True)) @ v
    err = float(np.abs(efficient_self_attention(Tensor(x), attn).data - want).max())
    verdict(2, "attention oracle", err <= 1e-6, f"max abs. deviation {err:.1e}")


# 3 ------------------------------------------------------------------------------------------

def test_criterion_03_gate_identities(verdict):
    rng = np.random.default_rng(3)
    fuse = CrossAttentionFuse(6, rng)
    fuse.mlp.weight.data = rng.normal(size=(6, 6))
    fuse.mlp.bias.data = rng.normal(size=6)
    out = cross_attention_fuse(Tensor(rng.normal(size=(9, 6))), Tensor(rng.normal(size=(9, 6))), fuse)
    complementary = bool(np.all(out.gate_sn.data == 1.0 - out.gate_img.data))

    zero = cross_attention_fuse(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), CrossAttentionFuse(3))
    origin = bool(np.all(zero.gate_img.data == 0.5) and not zero.fused.data.any() and not zero.img.data.any() and not zero.sn.data.any())

    unit = CrossAttentionFuse(1)
    unit.mlp.weight.data = np.ones((1, 1))
    s = cross_attention_fuse(Tensor(np.array([[2.0]])), Tensor(np.array([[0.0]])), unit)
    a = 1 / (1 + math.exp(-2))
    scalar_err = max(abs(s.gate_img.data[0, 0] - a), abs(s.img.data[0, 0] - (2 * a + 2)), abs(s.sn.data[0, 0]))
    ok = complementary and origin and scalar_err <= 1e-6
    verdict(3, "gate identities", ok, f"complementary={complementary} origin={origin} sigma(2) case err {scalar_err:.1e}")


# 4 -------------------------------------------------------------------------------------------

def test_criterion_04_loss(verdict):
    labels = np.eye(4, dtype=bool)
    uniform = bce_loss(np.full((2, 4, 4), 0.5), labels).item()
    onehot = np.stack([~labels, labels]).astype(np.float64)
    perfect = bce_loss(onehot, labels).item()
    worst = bce_loss(1.0 - onehot, labels).item()
    ok = abs(uniform - math.log(2)) <= 1e-6 and perfect == 0.0 and math.isfinite(worst)
    verdict(4, "loss", ok, f"uniform {uniform:.7f} (ln 2 = {math.log(2):.7f}), perfect {perfect + 0.0}, clamped worst {worst:.3f}")


# 5 ---------------------------------------------------------------------------------------------

def test_criterion_05_metrics(verdict):
    r = metrics(ConfusionCounts(3, 1, 1, 5))
    exact = (r.accuracy, r.precision, r.recall, r.f_score, r.iou) == (0.8, 0.75, 0.75, 0.75, 0.6)
    rng = np.random.default_rng(5)
    jaccard_err, f1_err = 0.0, 0.0
    for _ in range(1000):
        c = ConfusionCounts(*(int(v) for v in rng.integers(0, 10**6, 4)))
        m = metrics(c)
        jaccard_err = max(jaccard_err, abs(m.iou - m.f_score / (2 - m.f_score)))
        if c.tp > 0:
            f1_err = max(f1_err, abs(m.f_score - 2 * m.precision * m.recall / (m.precision + m.recall)))
    ok = exact and jaccard_err <= 1e-9 and f1_err <= 1e-9
    verdict(5, "metrics oracle", ok, f"(3,1,1,5) exact={exact}; F1-Jaccard max err {jaccard_err:.1e}; F vs 2PR/(P+R) max err {f1_err:.1e}")


# 6 ---------------------------------------------------------------------------------------------

def test_criterion_06_geometry(verdict):
    rng = np.random.default_rng(6)
    calib = parse_calibration(
        "P2: 721.5 0 609.6 44.86 0 721.5 172.9 0.2164 0 0 1 0.002746\n"
        "Tr_velo_to_cam: 0 -1 0 0 0 0 -1 -0.08 1 0 0 -0.27\n"
    )
    z = rng.uniform(0.5, 80, 1000)
    pts = np.column_stack([rng.uniform(-0.8, 0.8, 1000) * z, rng.uniform(-0.4, 0.4, 1000) * z, z])
    u, v, d = project_camera(pts, calib)
    u2, v2, _ = project_camera(back_project(u, v, d, calib), calib)
    px_err = float(max(np.abs(u2 - u).max(), np.abs(v2 - v).max()))

    plane_cam = pinhole(f=100, cx=15.5, cy=11.5)
    vv, uu = np.mgrid[0:24, 0:32].astype(np.float64)
    depth = 10.0 / (1 - 0.5 * (uu - 15.5) / 100)
    nm = estimate_normals(DepthMap(depth, np.ones_like(depth, bool)), plane_cam)
    want = np.array([0.5, 0.0, -1.0]) / math.sqrt(1.25)
    cos_dist = float((1 - nm.normal[3:-3, 3:-3] @ want).max())

    sparse = rng.uniform(1, 60, (40, 50))
    valid = rng.random((40, 50)) < 0.05
    dense = densify_depth(DepthMap(np.where(valid, sparse, 0), valid))
    preserved = bool(np.array_equal(dense.depth[valid], sparse[valid]))
    ok = px_err <= 1e-4 and cos_dist <= 1e-2 and preserved
    verdict(6, "geometry", ok, f"round-trip max {px_err:.1e} px; slanted plane cosine distance {cos_dist:.1e}; densify preserves measurements={preserved}")


# 7 ----------------------------------------------------------------------------------------------

def overfit_run(samples, epochs=200):
    model = build_model(toy_config(), seed=0)
    cfg = TrainConfig(learning_rate=0.001, momentum=0.9, batch_size=2, seed=0)
    f_scores, losses = [], []
    for epoch in range(1, epochs + 1):
        losses.append(train_epoch(model, samples, cfg, epoch).mean_loss)
        f_scores.append(evaluate_model(model, samples).report.f_score)
    return model, f_scores, losses


def test_criterion_07_overfit(tmp_path, verdict):
    root = make_synthetic_dataset(tmp_path / "ds", {"training": 4})
    samples = SampleCache(64, 64).many(scan_dataset(root).train)
    start = time.perf_counter()
    model, f_scores, losses = overfit_run(samples)
    elapsed = time.perf_counter() - start
    _, f_again, losses_again = overfit_run(samples)
    reproducible = f_scores == f_again and losses == losses_again
    best = max(f_scores)
    first = next((i + 1 for i, f in enumerate(f_scores) if f >= 0.99), None)
    ok = best >= 0.99 and elapsed <= 600 and reproducible
    verdict(
        7,
        "end-to-end overfit",
        ok,
        f"train F {f_scores[-1]:.4f} at epoch 200, best {best:.4f}, first >= 0.99 at epoch {first}; "
        f"{elapsed:.1f} s per run; bit-identical rerun={reproducible}",
    )


# 8 ------------------------------------------------------------------------------------------------

def test_criterion_08_ablation_direction(tmp_path, verdict, capsys):
    root = make_synthetic_dataset(tmp_path / "ds", {"training": 4, "validation": 2})
    code = main(["ablate", "--root", str(root), "--out", str(tmp_path / "out")])
    capsys.readouterr()
    text = (tmp_path / "out" / "ablation.md").read_text()
    rows = [[c.strip() for c in ln.strip("|").split("|")] for ln in text.splitlines() if ln.startswith("| ") and not ln.startswith("| Encoder")]
    cells = {(r[0], r[1]): float(r[6]) for r in rows}
    f_on4, f_off1 = cells.get(("4", "yes")), cells.get(("1", "no"))
    ok = code == 0 and len(rows) == 8 and f_on4 is not None and f_on4 >= f_off1
    verdict(8, "ablation harness", ok, f"{len(rows)} rows; F-score fusion-on depth 4 = {f_on4} vs fusion-off depth 1 = {f_off1}")


# 9 --------------------------------------------------------------------------------------------------

def shape_only_resolutions(h, w):
    out = []
    for k, s, p in zip(PATCH_KERNELS, PATCH_STRIDES, PATCH_PADDINGS):
        h, w = conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)
        out.append((h, w))
    return out


def test_criterion_09_resolution_schedule(verdict):
    mismatches = []
    legal = [(h, w) for h in range(32, 257, 32) for w in range(32, 257, 32)] + [(704, 1280), (352, 1216)]
    for h, w in legal:
        ModelConfig(input_h=h, input_w=w)  # config-legal
        want = [(h // f, w // f) for f in (4, 8, 16, 32)]
        if shape_only_resolutions(h, w) != want:
            mismatches.append((h, w))
    rng = np.random.default_rng(9)
    executed = [(32, 32), (64, 96), (128, 64), (96, 160)]
    for h, w in executed:
        model = build_model(toy_config(input_h=h, input_w=w, decoder_dim=8), 0)
        feats = encode(Tensor(rng.normal(size=(3, h, w))), Tensor(rng.normal(size=(3, h, w))), model)
        got = [(f.height, f.width) for f in feats]
        if got != [(h // f, w // f) for f in (4, 8, 16, 32)] or got != shape_only_resolutions(h, w):
            mismatches.append((h, w))
    full_size = shape_only_resolutions(704, 1280)
    ok = not mismatches and full_size == ModelConfig().stage_resolutions() == [(176, 320), (88, 160), (44, 80), (22, 40)]
    verdict(9, "resolution schedule", ok, f"{len(legal)} legal sizes by shape, {len(executed)} executed; 1280x704 -> {full_size}")


# 10 -------------------------------------------------------------------------------------------------

def test_criterion_10_serialization(tmp_path, verdict, capsys):
    rng = np.random.default_rng(10)
    checks = {}

    model = build_model(toy_config(decoder_dim=16), seed=2)
    save_checkpoint(tmp_path / "a.offn", model)
    again = load_checkpoint(tmp_path / "a.offn", OFFNet(toy_config(decoder_dim=16)))
    checks["checkpoint"] = checkpoint_bytes(again) == (tmp_path / "a.offn").read_bytes()

    depth = DepthMap(np.where(rng.random((9, 11)) < 0.5, rng.uniform(0.5, 200, (9, 11)), 0.0), rng.random((9, 11)) < 0.5)
    raw = encode_depth_png(depth)
    checks["depth png"] = encode_depth_png(decode_depth_png(raw)) == raw
    n = rng.normal(size=(9, 11, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    n[..., 2] = -np.abs(n[..., 2])
    raw = encode_normal_png(NormalMap(n, rng.random((9, 11)) < 0.8))
    checks["normal png"] = encode_normal_png(decode_normal_png(raw)) == raw
    levels = np.array([0, 128, 255], np.uint8)[rng.integers(0, 3, (9, 11))]
    checks["label png"] = png_bytes(encode_ground_truth(decode_ground_truth(png_bytes(levels)))) == png_bytes(levels)
    mask = encode_prediction(rng.random((9, 11)))
    checks["prediction png"] = png_bytes(encode_prediction(decode_ground_truth(png_bytes(mask)).binary.astype(float))) == png_bytes(mask)
    write_point_cloud(tmp_path / "p.bin", PointCloud(rng.normal(size=(30, 4))))
    write_point_cloud(tmp_path / "q.bin", read_point_cloud(tmp_path / "p.bin"))
    checks["point cloud"] = (tmp_path / "p.bin").read_bytes() == (tmp_path / "q.bin").read_bytes()
    text = format_calibration(pinhole(f=721.5377, cx=609.5593, cy=172.854))
    checks["calibration"] = format_calibration(parse_calibration(text)) == text

    root = make_synthetic_dataset(tmp_path / "ds", {"training": 2, "validation": 1, "testing": 2})
    cfg = tmp_path / "m.cfg"
    cfg.write_text(toy_config(decoder_dim=16).to_text())
    main(["train", "--root", str(root), "--out", str(tmp_path / "ck"), "--model-config", str(cfg), "--epochs", "2", "--batch-size", "2"])
    ck = ["--root", str(root), "--checkpoint", str(tmp_path / "ck" / "best.offn")]
    main(["infer", *ck, "--out", str(tmp_path / "pred")])
    main(["eval", *ck, "--out", str(tmp_path / "mem")])
    main(["eval", "--root", str(root), "--predictions", str(tmp_path / "pred"), "--out", str(tmp_path / "files")])
    capsys.readouterr()
    checks["infer->eval"] = all(
        (tmp_path / "mem" / f).read_bytes() == (tmp_path / "files" / f).read_bytes() for f in ("metrics.txt", "per_frame.csv")
    )
    failed = [k for k, v in checks.items() if not v]
    verdict(10, "serialization", not failed, f"{len(checks) - len(failed)}/{len(checks)} byte-exact" + (f"; failed: {failed}" if failed else ""))
