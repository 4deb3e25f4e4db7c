"""Built-in consistency checks: gradients, attention and gating oracles, geometry, metrics.

Each check returns ``(passed, detail)``; ``run_selftest`` collects them so a
broken build is caught without the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import core
from .core import Tensor, grad_check
from .evaluation import ConfusionCounts, metrics
from .geometry import Calibration, DepthMap, back_project, decode_depth_png, encode_depth_png, estimate_normals, project_camera
from .model import network


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def _rng(i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(0, spawn_key=(0x5E1F, i)))


def _primitive_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable[[], Tensor], Tensor]]]:
    def matmul(rng):
        a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
        w = rng.normal(size=(3, 2))
        return (lambda: ((a @ b) * w).sum()), a

    def softmax(rng):
        x, w = Tensor(rng.normal(size=(2, 5))), rng.normal(size=(2, 5))
        return (lambda: (core.softmax(x, axis=-1) * w).sum()), x

    def layer_norm(rng):
        x, w = Tensor(rng.normal(size=(3, 6))), rng.normal(size=(3, 6))
        g, b = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
        return (lambda: (core.layer_norm(x, g, b) * w).sum()), x

    def gelu(rng):
        x, w = Tensor(rng.normal(size=(7,))), rng.normal(size=7)
        return (lambda: (core.gelu(x) * w).sum()), x

    def sigmoid(rng):
        x, w = Tensor(rng.normal(size=(7,)) * 3), rng.normal(size=7)
        return (lambda: (core.sigmoid(x) * w).sum()), x

    def conv2d(rng):
        x = Tensor(rng.normal(size=(1, 2, 6, 6)))
        k = Tensor(rng.normal(size=(3, 2, 3, 3)))
        w = rng.normal(size=(1, 3, 3, 3))
        return (lambda: (core.conv2d(x, k, stride=2, padding=1) * w).sum()), k

    def resize(rng):
        x, w = Tensor(rng.normal(size=(1, 2, 3, 4))), rng.normal(size=(1, 2, 6, 8))
        return (lambda: (core.resize_bilinear(x, 6, 8) * w).sum()), x

    return {
        "matmul": matmul,
        "softmax": softmax,
        "layer_norm": layer_norm,
        "gelu": gelu,
        "sigmoid": sigmoid,
        "conv2d": conv2d,
        "resize_bilinear": resize,
    }


def check_gradients() -> tuple[bool, str]:
    worst, worst_name = 0.0, ""
    for i, (name, make) in enumerate(_primitive_cases().items()):
        f, x = make(_rng(i))
        rep = grad_check(f, x)
        if rep.max_rel_error >= worst:
            worst, worst_name = rep.max_rel_error, name
        if not rep.passed:
            return False, f"{name} max rel. error {rep.max_rel_error:.2e}"
    return True, f"{len(_primitive_cases())} primitives, worst {worst:.2e} ({worst_name})"


def attention_oracle_case():
    """Two tokens, one head, identity projections, no spatial reduction."""
    dim = 2
    attn = network.EfficientSelfAttention(dim, heads=1, reduction=1)
    for lin in (attn.q, attn.k, attn.v, attn.proj):
        lin.weight.data = np.eye(dim, dtype=np.float64)
        lin.bias.data = np.zeros(dim)
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    return attn, x


def brute_force_attention(x: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    scores = x @ x.T / math.sqrt(d)
    w = np.exp(scores - scores.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    return w @ x


def check_attention() -> tuple[bool, str]:
    attn, x = attention_oracle_case()
    got = network.efficient_self_attention(Tensor(x), attn).data
    err = float(np.abs(got - brute_force_attention(x)).max())
    return err <= 1e-6, f"max abs. deviation {err:.2e}"


def check_gate() -> tuple[bool, str]:
    rng = _rng(100)
    dim = 4
    fuse = network.CrossAttentionFuse(dim, rng)
    fuse.mlp.weight.data = rng.normal(size=(dim, dim)).astype(np.float32)
    fuse.mlp.bias.data = rng.normal(size=dim).astype(np.float32)
    x_img, x_sn = rng.normal(size=(5, dim)), rng.normal(size=(5, dim))
    out = network.cross_attention_fuse(Tensor(x_img), Tensor(x_sn), fuse)
    w, b = fuse.mlp.weight.data.astype(np.float64), fuse.mlp.bias.data.astype(np.float64)
    a = 1.0 / (1.0 + np.exp(-((x_img + x_sn) @ w + b)))
    complementary = bool(np.all(out.gate_img.data + out.gate_sn.data == 1.0))
    img_ok = np.allclose(out.img.data, a * x_img + x_img, atol=1e-5)
    sn_ok = np.allclose(out.sn.data, (1 - a) * x_sn + x_sn, atol=1e-5)
    fused_ok = np.allclose(out.fused.data, out.img.data + out.sn.data, atol=1e-6)
    ok = complementary and img_ok and sn_ok and fused_ok
    return ok, f"complementary={complementary} image-gate={img_ok} normal-gate={sn_ok} sum={fused_ok}"


def check_loss() -> tuple[bool, str]:
    probs = Tensor(np.full((2, 4, 4), 0.5))
    labels = np.arange(16).reshape(4, 4) % 2
    loss = network.bce_loss(probs, labels).item()
    err = abs(loss - math.log(2))
    return err <= 1e-6, f"uniform prediction loss {loss:.7f}"


def _calib() -> Calibration:
    p2 = np.array([[100.0, 0, 640, 0], [0, 100.0, 360, 0], [0, 0, 1, 0]])
    return Calibration(p2, np.hstack([np.eye(3), np.zeros((3, 1))]))


def check_geometry() -> tuple[bool, str]:
    calib = _calib()
    rng = _rng(200)
    pts = np.column_stack([rng.uniform(-20, 20, 1000), rng.uniform(-5, 5, 1000), rng.uniform(1, 80, 1000)])
    u, v, z = project_camera(pts, calib)
    back = back_project(u, v, z, calib)
    u2, v2, _ = project_camera(back, calib)
    px_err = float(max(np.abs(u2 - u).max(), np.abs(v2 - v).max()))

    dm = DepthMap(rng.uniform(0.5, 200, (8, 8)), rng.random((8, 8)) > 0.3)
    rt = decode_depth_png(encode_depth_png(dm))
    png_ok = encode_depth_png(rt) == encode_depth_png(dm)

    # plane z = 10 + 0.5 x rendered into a small image
    h, w = 24, 32
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    small = Calibration(np.array([[100.0, 0, 16, 0], [0, 100.0, 12, 0], [0, 0, 1, 0]]), calib.lidar_to_camera)
    xn = (uu - 16) / 100.0
    depth = 10.0 / (1.0 - 0.5 * xn)
    nm = estimate_normals(DepthMap(depth, np.ones((h, w), bool)), small)
    expected = np.array([0.5, 0.0, -1.0]) / math.sqrt(1.25)
    interior = nm.normal[4:-4, 4:-4].reshape(-1, 3)
    cos_dist = float((1.0 - interior @ expected).max())
    ok = px_err <= 1e-4 and png_ok and cos_dist <= 1e-2
    return ok, f"round-trip {px_err:.1e} px, depth PNG stable={png_ok}, plane normal cos. dist. {cos_dist:.1e}"


def check_metrics() -> tuple[bool, str]:
    r = metrics(ConfusionCounts(3, 1, 1, 5))
    want = (0.8, 0.75, 0.75, 0.75, 0.6)
    got = (r.accuracy, r.precision, r.recall, r.f_score, r.iou)
    ok = all(abs(g - x) < 1e-12 for g, x in zip(got, want))
    return ok, "(3,1,1,5) -> " + ", ".join(f"{g:.4f}" for g in got)


def check_model_gradient() -> tuple[bool, str]:
    """Sampled finite-difference check through a tiny two-stream model."""
    from .model import build_model, toy_config

    cfg = toy_config(input_h=32, input_w=32, decoder_dim=16)
    model = build_model(cfg, 0)
    rng = _rng(300)
    img = Tensor(rng.normal(size=(3, 32, 32)))
    sn = Tensor(rng.normal(size=(3, 32, 32)))
    labels = rng.random((32, 32)) > 0.5
    target = model.fuse[0].mlp.weight
    rep = grad_check(lambda: network.bce_loss(network.forward(model, img, sn), labels), target, max_checks=12, rng=rng)
    return rep.passed, f"fusion weights, max rel. error {rep.max_rel_error:.2e}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "gradients": check_gradients,
    "model-gradient": check_model_gradient,
    "attention-oracle": check_attention,
    "gate-complementarity": check_gate,
    "loss": check_loss,
    "geometry": check_geometry,
    "metrics": check_metrics,
}


def run_selftest() -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - a crash is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail))
    return results
