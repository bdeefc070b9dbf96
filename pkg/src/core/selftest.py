"""
Self-Test Registry Module

Named invariant checks that can be run from the command line on a fresh
checkout or against a trained checkpoint. Checks register themselves with
SelfTestRegistry; each one raises SelfTestFailure (or any package error)
when its invariant does not hold.

Usage:
    results = run_selftest(quick=True)
    failed = [r for r in results if not r.passed]
"""

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..analysis.spectral import directional_energy, energy_logratio
from ..metrics.losses import LossConfig, loss_terms, pseudo_huber
from ..metrics.quality import psnr, rmse, size_group, ssim
from ..models.backbone import MARMamba, NetConfig
from ..models.module import Parameter
from ..models.msmamba import FlipMambaBlock, FmbConfig
from ..models.ssm import reference_scan, selective_scan
from ..synth.dataset import CorruptionConfig, simulate_pair
from ..synth.phantom import MetalSpec, disk_centers, make_phantom, metal_pair_spec, random_phantom_spec
from ..synth.tomography import SinogramConfig, corrupt_metal, directional_streak_ratio, disk_mask, fbp, radon
from ..tensor import ops
from ..tensor.tensor import Tensor, no_grad
from ..utils.errors import ConfigurationError, MarError
from ..utils.logger import get_logger
from .optim import Adam, ScheduleConfig, cosine_lr
from .verification import gradcheck_model, micro_network

logger = get_logger(__name__)


class SelfTestFailure(MarError):
    """An invariant check did not hold."""


@dataclass
class SelfTestContext:
    quick: bool = False
    seed: int = 0
    net: Optional[MARMamba] = None


@dataclass
class CheckResult:
    name: str
    passed: bool
    seconds: float
    detail: str = ""
    metrics: Dict[str, float] = field(default_factory=dict)


CheckFunction = Callable[[SelfTestContext], Dict[str, float]]


class SelfTestRegistry:
    """Registry of named invariant checks, run in registration order."""

    _checks: Dict[str, CheckFunction] = {}

    @classmethod
    def register(cls, name: str) -> Callable[[CheckFunction], CheckFunction]:
        def decorator(func: CheckFunction) -> CheckFunction:
            cls._checks[name] = func
            return func
        return decorator

    @classmethod
    def get(cls, name: str) -> CheckFunction:
        if name not in cls._checks:
            available = ", ".join(cls._checks)
            raise ConfigurationError(f"Unknown self-test '{name}'. Available: {available}")
        return cls._checks[name]

    @classmethod
    def available(cls) -> List[str]:
        return list(cls._checks)


def expect(condition: bool, message: str, **details) -> None:
    if not condition:
        raise SelfTestFailure(message, **details)


def _max_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


# =============================================================================
# Checks
# =============================================================================

@SelfTestRegistry.register("scan_oracle")
def check_scan_oracle(ctx: SelfTestContext) -> Dict[str, float]:
    rng = np.random.default_rng(ctx.seed)
    worst = 0.0
    for length in (1, 2, 3, 7, 64, 257):
        x = rng.standard_normal((1, length, 3))
        delta = np.log1p(np.exp(rng.standard_normal((1, length, 3))))
        a = -np.exp(rng.standard_normal((3, 4)))
        b = rng.standard_normal((1, length, 4))
        c = rng.standard_normal((1, length, 4))
        d = rng.standard_normal(3)
        with no_grad():
            chunked = selective_scan(*(Tensor(v) for v in (x, delta, a, b, c, d)), chunk=16).numpy()
            sequential = selective_scan(*(Tensor(v) for v in (x, delta, a, b, c, d)),
                                        method="sequential").numpy()
        oracle = reference_scan(x, delta, a, b, c, d)
        worst = max(worst, _max_diff(chunked, sequential), _max_diff(chunked, oracle))
    expect(worst < 1e-10, "chunked scan disagrees with the sequential recurrence", max_diff=worst)
    return {"max_diff": worst}


@SelfTestRegistry.register("residual_identity")
def check_residual_identity(ctx: SelfTestContext) -> Dict[str, float]:
    rng = np.random.default_rng(ctx.seed)
    net = MARMamba(NetConfig(base_channels=4, stage_blocks=(1,) * 8), seed=ctx.seed)
    worst = 0.0
    for _ in range(3 if ctx.quick else 10):
        x = rng.standard_normal((1, 1, 16, 16))
        with no_grad():
            worst = max(worst, _max_diff(net(Tensor(x)).numpy(), x))
    expect(worst <= 1e-12, "zero-initialized head does not give the identity", max_diff=worst)
    return {"max_diff": worst}


def _conjugation_error(fmb: FlipMambaBlock, x: np.ndarray) -> float:
    with no_grad():
        original = fmb.forward_branches(Tensor(x))
        swapped = fmb.with_swapped_roles("vertical").forward_branches(
            ops.flip_spatial(Tensor(x), "vertical"))
    flipped_m1 = ops.flip_spatial(original["vertical"], "vertical").numpy()
    flipped_m0 = ops.flip_spatial(original["normal"], "vertical").numpy()
    return max(_max_diff(swapped["normal"].numpy(), flipped_m1),
               _max_diff(swapped["vertical"].numpy(), flipped_m0))


@SelfTestRegistry.register("flip_algebra")
def check_flip_algebra(ctx: SelfTestContext) -> Dict[str, float]:
    rng = np.random.default_rng(ctx.seed)
    x = rng.standard_normal((2, 4, 8, 6))
    for axis in ("vertical", "horizontal"):
        twice = ops.flip_spatial(ops.flip_spatial(Tensor(x), axis), axis).numpy()
        expect(np.array_equal(twice, x), "flip is not an involution", axis=axis)

    fmb = FlipMambaBlock(FmbConfig(4), rng)
    worst = _conjugation_error(fmb, x)
    if ctx.net is not None:
        for name, block in ctx.net.named_blocks():
            if block.fmb.mamba_vertical is None:
                continue
            features = rng.standard_normal((1, block.channels, 8, 8))
            worst = max(worst, _conjugation_error(block.fmb, features))
    expect(worst <= 1e-9, "FMB conjugation identity violated", max_diff=worst)

    single = FlipMambaBlock(FmbConfig(4, branches=("normal",)), rng)
    with no_grad():
        out = single(Tensor(x)).numpy()
        expected = single.project(single.forward_branches(Tensor(x))["normal"]).numpy()
    expect(np.array_equal(out, expected), "disabled branches changed the FMB output")
    return {"conjugation_max_diff": worst}


@SelfTestRegistry.register("loss_contracts")
def check_loss_contracts(ctx: SelfTestContext) -> Dict[str, float]:
    y = np.zeros((1, 1, 1, 2))
    value = pseudo_huber(y, np.array([[[[0.024, 0.032]]]]), c=0.03, normalize=False).item()
    expect(abs(value - 0.02) < 1e-12, "pseudo-Huber value mismatch", value=value)

    rng = np.random.default_rng(ctx.seed)
    image = rng.random((1, 1, 16, 16))
    prediction = Tensor(image.copy(), requires_grad=True)
    pseudo_huber(image, prediction).backward()
    gradient = float(np.max(np.abs(prediction.grad)))
    expect(gradient < 1e-8, "pseudo-Huber gradient at zero residual is not zero", gradient=gradient)

    other = rng.random((1, 1, 16, 16))
    cfg = LossConfig()
    with no_grad():
        terms = loss_terms(image, other, cfg)
    total, phuber, perceptual = terms.values()
    linearity = abs(total - (cfg.alpha * phuber + cfg.beta * perceptual))
    expect(linearity <= 1e-12, "combined loss is not the weighted sum of its terms", diff=linearity)
    return {"phuber": value, "zero_residual_gradient": gradient, "linearity": linearity}


@SelfTestRegistry.register("schedule_optimizer")
def check_schedule_optimizer(ctx: SelfTestContext) -> Dict[str, float]:
    cfg = ScheduleConfig()
    expect(abs(cosine_lr(0, cfg) - 2e-4) < 1e-15, "schedule does not start at lr_max", lr=cosine_lr(0, cfg))
    expect(cosine_lr(1000, cfg) == 1e-8, "schedule does not reach lr_min", lr=cosine_lr(1000, cfg))

    p = Parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -0.25])
    Adam([("p", p)]).step(0.1)
    expected = np.array([1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 0.25 / (0.25 + 1e-8)])
    diff = _max_diff(p.data, expected)
    expect(diff < 1e-9, "single Adam step disagrees with the closed form", max_diff=diff)
    return {"adam_diff": diff}


@SelfTestRegistry.register("ct_pipeline")
def check_ct_pipeline(ctx: SelfTestContext) -> Dict[str, float]:
    n = 64 if ctx.quick else 128
    rng = np.random.default_rng(ctx.seed)
    sinogram = SinogramConfig(n_angles=180)
    tissue = make_phantom(random_phantom_spec(n, rng))
    expect(not fbp(np.zeros((180, n)), sinogram).any(), "zero sinogram does not give a zero image")

    interior = disk_mask(n, 0.8)
    roundtrip = rmse(tissue, fbp(radon(tissue, sinogram), sinogram), interior)
    expect(roundtrip < 0.05, "radon/fbp round trip is too lossy", rmse=roundtrip)

    clean = radon(tissue, sinogram)
    untouched = corrupt_metal(clean, np.zeros_like(clean), rng=rng)
    expect(np.array_equal(untouched, clean), "corruption without metal changed the sinogram")

    image, gt, _ = simulate_pair(tissue, MetalSpec(), sinogram, CorruptionConfig(), rng)
    no_metal = rmse(gt, image, interior)
    expect(no_metal < 0.05, "metal-free corruption pipeline drifted", rmse=no_metal)

    pair = metal_pair_spec(n, "large")
    image, gt, _ = simulate_pair(tissue, pair, sinogram, CorruptionConfig(), np.random.default_rng(ctx.seed))
    ratio = directional_streak_ratio(image - gt, disk_centers(pair), support=disk_mask(n, 0.9))
    expect(ratio >= 2.0, "metal streaks are not directional", ratio=ratio)
    return {"roundtrip_rmse": roundtrip, "no_metal_rmse": no_metal, "streak_ratio": ratio}


@SelfTestRegistry.register("metric_oracles")
def check_metric_oracles(ctx: SelfTestContext) -> Dict[str, float]:
    rng = np.random.default_rng(ctx.seed)
    x = rng.random((32, 32))
    value = psnr(x, x + 0.1)
    expect(abs(value - 20.0) < 1e-9, "PSNR of a uniform 0.1 offset is not 20 dB", psnr=value)
    expect(ssim(x, x) == 1.0, "SSIM(x, x) is not 1")

    mask = np.ones((32, 32), dtype=bool)
    mask[10:14, 10:14] = False
    disturbed = x.copy()
    disturbed[~mask] += 5.0
    y = x + 0.05 * rng.standard_normal(x.shape)
    for metric in (psnr, rmse):
        expect(metric(x, y, mask) == metric(disturbed, np.where(mask, y, y + 3.0), mask),
               "masked metric depends on excluded pixels", metric=metric.__name__)

    groups = [size_group(c).value for c in (80, 81, 180, 181, 650, 651)]
    expect(groups == ["tiny", "small", "small", "medium", "medium", "large"], "size-group bounds", groups=groups)
    return {"psnr": value}


@SelfTestRegistry.register("directional_analysis")
def check_directional_analysis(ctx: SelfTestContext) -> Dict[str, float]:
    n = 64
    rows = np.arange(n)[:, None] * np.ones((1, n))
    stripes = np.cos(2 * np.pi * 8 * rows / n)
    spectrum = directional_energy(stripes).power
    peak = int(np.argmax(spectrum))
    others = np.delete(spectrum, peak)
    concentration = float(spectrum[peak] / max(others.max(), 1e-300))
    expect(concentration >= 10.0, "stripe energy is not concentrated in one bin", concentration=concentration)
    rotated = int(np.argmax(directional_energy(stripes.T).power))
    expect(abs(peak - rotated) == spectrum.size // 2, "rotating the stripes did not move the peak by 90 degrees",
           peak=peak, rotated=rotated)

    expect(not energy_logratio(spectrum, spectrum).any(), "log-ratio of identical spectra is not zero")
    noise = np.random.default_rng(ctx.seed).standard_normal((n, n))
    base = directional_energy(noise).power
    offset = directional_energy(noise + 0.7).power
    drift = _max_diff(base, offset) / base.max()
    expect(drift <= 1e-9, "directional energy depends on the DC level", drift=drift)
    return {"concentration": concentration, "dc_drift": drift}


@SelfTestRegistry.register("gradient_integrity")
def check_gradient_integrity(ctx: SelfTestContext) -> Dict[str, float]:
    net = micro_network(seed=ctx.seed)
    x = np.random.default_rng(ctx.seed).random((1, 1, 16, 16))
    # quick mode samples a fixed handful of coordinates instead of 5% per tensor
    report = gradcheck_model(net, x, cap=60 if ctx.quick else None, seed=ctx.seed)
    expect(report.max_error < 1e-4, "backpropagated gradients disagree with finite differences",
           max_error=report.max_error, failing=report.failures()[:5])
    return {"max_error": report.max_error, "checked": float(report.checked)}


# =============================================================================
# Runner
# =============================================================================

def run_selftest(names: Optional[Sequence[str]] = None, quick: bool = False, seed: int = 0,
                 net: Optional[MARMamba] = None,
                 on_check: Optional[Callable[[CheckResult], None]] = None) -> List[CheckResult]:
    """Run the named checks (all by default); failures are reported, not raised."""
    ctx = SelfTestContext(quick=quick, seed=seed, net=net)
    results = []
    for name in names or SelfTestRegistry.available():
        check = SelfTestRegistry.get(name)
        start = time.perf_counter()
        try:
            metrics = check(ctx)
            result = CheckResult(name, True, time.perf_counter() - start, metrics=metrics)
        except MarError as e:
            result = CheckResult(name, False, time.perf_counter() - start, detail=str(e))
            logger.error("Self-test failed", check=name, exception=e)
        results.append(result)
        logger.info("Self-test finished", check=name, passed=result.passed, seconds=f"{result.seconds:.2f}")
        if on_check is not None:
            on_check(result)
    return results
