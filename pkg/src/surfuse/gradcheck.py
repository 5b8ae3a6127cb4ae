"""Central finite-difference checks of the tape gradients (64-bit).

Errors are norm-wise: ``||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||, floor)``
over the checked coordinates, with a 1e-6 floor against all-zero gradients. Primitives
compare the gradient of every input at once; the composed model compares each parameter
tensor on a sample of its coordinates.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .model import SurformerModel, TactileBranchConfig, VisionBranchConfig
from .tensor import Tape, Tensor, make_rng, precision
from .training import composite_loss

H = 1e-5
PRIMITIVE_TOL = 1e-4
COMPOSED_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


ERROR_FLOOR = 1e-6


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = ERROR_FLOOR) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / den)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, coords=None, h: float = H) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def check_function(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator) -> float:
    """Error of the gradient of ``sum(fn(*inputs) * R)``, R a random projection.

    The analytic and numeric gradients of all inputs are concatenated before the
    norm-wise comparison, so an input whose true gradient is zero contributes its
    finite-difference noise rather than a ratio of two noise terms.
    """
    with Tape():
        probe = fn(*[Tensor._wrap(a.copy()) for a in inputs])
    proj = rng.standard_normal(probe.shape) if probe.shape else np.float64(1.0)

    def loss_value() -> float:
        return float(np.sum(fn(*[Tensor._wrap(a) for a in inputs]).data * proj))

    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in inputs]
    with Tape() as tape:
        y = fn(*leaves)
        loss = ops.sum(ops.mul(y, Tensor._wrap(np.asarray(proj, dtype=np.float64))))
    tape.backward(loss)
    analytic = np.concatenate([leaf.grad.ravel() for leaf in leaves])
    numeric = np.concatenate([numeric_grad(loss_value, a) for a in inputs])
    return rel_error(analytic, numeric)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _mha_params(rng, d):
    out = []
    for _ in range(4):
        out += [rng.standard_normal((d, d)) / np.sqrt(d), rng.standard_normal(d) * 0.1]
    return out


def primitive_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]]:
    """name -> builder(rng) returning (fn, inputs)."""

    def dropout_case(rng):
        seed = int(rng.integers(1 << 31))
        return (lambda x: ops.dropout(x, 0.3, True, make_rng(seed))), [rng.standard_normal((4, 6))]

    def ce_case(rng):
        t = rng.integers(0, 5, 6)
        return (lambda z: ops.cross_entropy(z, t)), [rng.standard_normal((6, 5)) * 2]

    def index_case(rng):
        idx = rng.integers(0, 5, 7)
        return (lambda x: ops.index(x, idx)), [rng.standard_normal((5, 3))]

    def conv_case(rng):
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        return (
            (lambda x, k, b: ops.conv2d(x, k, b, stride=stride, pad=pad)),
            [rng.standard_normal((2, 3, 6, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)],
        )

    def conv_nhwc_case(rng):
        return (
            (lambda x, k, b: ops.conv2d(x, k, b, stride=2, pad=1, channels_last=True)),
            [rng.standard_normal((2, 6, 6, 3)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)],
        )

    def gn_case(rng):
        return (
            (lambda x, g, b: ops.group_norm(x, g, b, groups=2)),
            [rng.standard_normal((2, 4, 3, 3)), rng.standard_normal(4), rng.standard_normal(4)],
        )

    def gn_nhwc_case(rng):
        return (
            (lambda x, g, b: ops.group_norm(x, g, b, groups=2, channels_last=True)),
            [rng.standard_normal((2, 3, 3, 4)), rng.standard_normal(4), rng.standard_normal(4)],
        )

    def mha_case(rng):
        return (
            (lambda x, *p: ops.multi_head_attention(x, *p, heads=2)),
            [rng.standard_normal((2, 3, 8))] + _mha_params(rng, 8),
        )

    return {
        "add": lambda r: (ops.add, [r.standard_normal((3, 4)), r.standard_normal(4)]),
        "sub": lambda r: (ops.sub, [r.standard_normal((3, 4)), r.standard_normal((3, 1))]),
        "mul": lambda r: (ops.mul, [r.standard_normal((3, 4)), r.standard_normal((1, 4))]),
        "scale": lambda r: ((lambda x: ops.scale(x, 0.37)), [r.standard_normal((3, 4))]),
        "relu": lambda r: (ops.relu, [_away_from_zero(r, (3, 5))]),
        "sigmoid": lambda r: (ops.sigmoid, [r.standard_normal((3, 4)) * 2]),
        "exp": lambda r: (ops.exp, [r.standard_normal((3, 4))]),
        "dropout": dropout_case,
        "reshape": lambda r: ((lambda x: ops.reshape(x, (6, 2))), [r.standard_normal((3, 4))]),
        "transpose": lambda r: ((lambda x: ops.transpose(x, (2, 0, 1))), [r.standard_normal((2, 3, 4))]),
        "index": index_case,
        "sum": lambda r: ((lambda x: ops.sum(x, axis=1)), [r.standard_normal((3, 4))]),
        "mean": lambda r: ((lambda x: ops.mean(x, axis=(0, 2), keepdims=True)), [r.standard_normal((2, 3, 4))]),
        "matmul": lambda r: (ops.matmul, [r.standard_normal((2, 3, 4)), r.standard_normal((2, 4, 5))]),
        "linear": lambda r: (ops.linear, [r.standard_normal((4, 5)), r.standard_normal((3, 5)), r.standard_normal(3)]),
        "conv2d": conv_case,
        "conv2d_channels_last": conv_nhwc_case,
        "layer_norm": lambda r: (ops.layer_norm, [r.standard_normal((3, 6)), r.standard_normal(6), r.standard_normal(6)]),
        "group_norm": gn_case,
        "group_norm_channels_last": gn_nhwc_case,
        "softmax": lambda r: (ops.softmax, [r.standard_normal((3, 5))]),
        "simplex_weights": lambda r: (ops.simplex_weights, [r.standard_normal(2)]),
        "log_softmax": lambda r: (ops.log_softmax, [r.standard_normal((3, 5))]),
        "cross_entropy": ce_case,
        "multi_head_attention": mha_case,
        "global_avg_pool": lambda r: (ops.global_avg_pool, [r.standard_normal((2, 3, 4, 4))]),
    }


def check_primitives(trials: int = 10, seed: int = 0, names=None) -> list[CheckResult]:
    cases = primitive_cases()
    results = []
    with precision(np.float64):
        for i, (name, build) in enumerate(cases.items()):
            if names is not None and name not in names:
                continue
            rngs = [make_rng(s) for s in np.random.SeedSequence([seed, i]).spawn(trials)]
            t0 = time.perf_counter()
            worst = 0.0
            for rng in rngs:
                fn, inputs = build(rng)
                worst = max(worst, check_function(fn, inputs, rng))
            results.append(CheckResult(name, trials, worst, PRIMITIVE_TOL, time.perf_counter() - t0))
    return results


def tiny_model(seed: int = 0, n_classes: int = 3) -> SurformerModel:
    """A small but structurally complete model: SE, group norm, all tensors trainable."""
    vision = VisionBranchConfig(
        n_classes=n_classes,
        input_size=16,
        backbone_channels=(4, 8, 16),
        feature_dim=16,
        se_reduction=2,
        norm_groups=2,
        head_hidden=8,
        n_unfrozen_tensors=10_000,
    )
    tactile = TactileBranchConfig(n_classes=n_classes, d_model=8, heads=2, d_ffn=16, head_hidden=6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return SurformerModel(vision, tactile, seed=seed)


def check_composed(trials: int = 10, seed: int = 0, coords_per_tensor: int = 3, batch: int = 3) -> CheckResult:
    """Whole-model forward + composite loss, training mode with a replayed dropout mask."""
    t0 = time.perf_counter()
    worst = 0.0
    with precision(np.float64):
        for ss in np.random.SeedSequence(seed).spawn(trials):
            s_model, s_data, s_drop, s_coord = ss.spawn(4)
            model = tiny_model(int(s_model.generate_state(1)[0]))
            model.train()
            # fusion logits off zero so their gradient is generic
            rng = make_rng(s_data)
            model.fusion.w.data[:] = rng.standard_normal(2)
            n = model.n_classes
            images = rng.standard_normal((batch, 3, 16, 16))
            feats = rng.standard_normal((batch, 7))
            y = rng.integers(0, n, batch)

            def loss_tensor():
                out = model(images, feats, make_rng(s_drop))
                return composite_loss(out.fused_logits, out.vision_logits, out.tactile_logits, y)[0]

            model.zero_grad()
            with Tape() as tape:
                loss = loss_tensor()
            tape.backward(loss)
            pick = make_rng(s_coord)
            for _, p in model.named_parameters():
                k = min(coords_per_tensor, p.data.size)
                coords = pick.choice(p.data.size, size=k, replace=False)
                num = numeric_grad(lambda: loss_tensor().item(), p.data, coords)
                worst = max(worst, rel_error(p.grad.reshape(-1)[coords], num))
    return CheckResult("surformer_composite_loss", trials, worst, COMPOSED_TOL, time.perf_counter() - t0)


def run_all(trials: int = 10, seed: int = 0) -> list[CheckResult]:
    return check_primitives(trials, seed) + [check_composed(trials, seed)]
