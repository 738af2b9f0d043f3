#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
Invariant suites run by ``hybridmask verify``.

- ``mask``: pyramid consistency across scales, replication round trips and
  keep ratio preservation.
- ``sparse``: sparse operations and the sparse encoder against the dense
  oracles, mask preservation and the erosion control.
- ``grad``: autodiff gradients of the primitives against central
  differences.
- ``pipeline``: the end-to-end gradient of a tiny pretraining model, loss
  masking and checkpoint round trips.

A failing check is reported in the JSON report, never raised.
"""

import logging
from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence

import attr
import numpy as np
from pydantic import BaseModel
from pydantic import Extra
from pydantic import Field

from hybridmask import functional as F
from hybridmask.checkpoint import decode_checkpoint
from hybridmask.checkpoint import encode_checkpoint
from hybridmask.cnn import encode_cnn
from hybridmask.config import CnnConfig
from hybridmask.config import ModelConfig
from hybridmask.config import VitConfig
from hybridmask.errors import ConfigError
from hybridmask.masking import MaskGrid
from hybridmask.masking import downsample_mask
from hybridmask.masking import pyramid_violations
from hybridmask.masking import upsample_mask
from hybridmask.model import init_pretrain_params
from hybridmask.model import pretrain_forward
from hybridmask.objectives import masked_mse_loss
from hybridmask.objectives import normalize_targets
from hybridmask.objectives import seg_loss
from hybridmask.oracle import brute_force_conv3d
from hybridmask.oracle import check_gradients
from hybridmask.oracle import dense_masked_forward
from hybridmask.oracle import nonzero_sites
from hybridmask.pretrain import make_pyramid
from hybridmask.pretrain import reconstruction_loss
from hybridmask.sparse import SparseFeatureMap
from hybridmask.sparse import densify
from hybridmask.sparse import densify_with_mask_embedding
from hybridmask.sparse import sparse_conv3d
from hybridmask.sparse import sparse_norm
from hybridmask.sparse import sparsify
from hybridmask.tensor import Tensor
from hybridmask.tensor import default_dtype
from hybridmask.tensor import no_grad
from hybridmask.tensor import parameter

logger = logging.getLogger(__name__)

SUITES = ("mask", "sparse", "grad", "pipeline")

GRAD_TOLERANCE = 1e-4
EXACT_TOLERANCE = 1e-12


class CheckReport(BaseModel):
    class Config:
        extra = Extra.forbid

    name: str
    passed: bool
    detail: str = Field("", description="What was measured, or why the check failed.")


class SuiteReport(BaseModel):
    class Config:
        extra = Extra.forbid

    name: str = Field(..., description="mask, sparse, grad or pipeline.")
    passed: bool
    checks: List[CheckReport] = Field(default_factory=list)


class VerifyReport(BaseModel):
    """Machine readable outcome of ``hybridmask verify``."""

    class Config:
        extra = Extra.forbid

    passed: bool = Field(..., description="True if every check of every suite passed.")
    suites: List[SuiteReport] = Field(default_factory=list, description="One entry per suite run.")
    settings: Dict[str, Any] = Field(default_factory=dict, description="Settings of the run.")


def report_schema() -> Dict[str, Any]:
    """Return the JSON Schema of :class:`VerifyReport`."""
    return VerifyReport.schema()


class CheckFailure(AssertionError):
    """A verification check measured a violation."""


def expect(condition: bool, message: str) -> None:
    if not condition:
        raise CheckFailure(message)


@attr.attributes(frozen=True)
class VerifySettings:
    """How hard the suites work."""

    seeds = attr.ib(default=20, metadata=dict(help="Random masks per property check."))
    grad_samples = attr.ib(default=200, metadata=dict(help="Coordinates of the end-to-end gradient check."))
    no_bottom_up = attr.ib(default=False, metadata=dict(help="Use independently sampled stage masks."))
    crop = attr.ib(default=(32, 32, 32), converter=tuple)
    mask_ratio = attr.ib(default=0.75)
    oracle_configs = attr.ib(
        default=25, metadata=dict(help="Random encoder configurations compared with the dense oracle.")
    )


def tiny_model_config(num_stages: int = 2) -> ModelConfig:
    """Return a model small enough for finite difference checks."""
    channels = [4 * 2**i for i in range(num_stages)]
    return ModelConfig(
        cnn=CnnConfig(num_stages=num_stages, channels=channels),
        vit=VitConfig(embed_dim=8, depth=1, heads=2, mlp_ratio=2),
    )


SWEEP_RATIOS = (0.25, 0.5, 0.75)
SWEEP_MAX_EXTENT = 32


def oracle_sweep(count: int, seed: int = 0) -> List[tuple]:
    """
    Return ``count`` ``(num_stages, shape, mask_ratio)`` encoder configurations
    with 2 or 3 stages, extents up to 32 and at least two junction cells per
    axis. The first two are a 32^3 cube and a non-cubic 16x32x16 volume.

    >>> [c[2] for c in oracle_sweep(4)]
    [0.25, 0.5, 0.75, 0.25]
    """
    rng = np.random.default_rng(seed)
    sweep = []
    for index in range(count):
        ratio = SWEEP_RATIOS[index % len(SWEEP_RATIOS)]
        if index == 0:
            sweep.append((3, (32, 32, 32), ratio))
            continue
        if index == 1:
            sweep.append((2, (16, 32, 16), ratio))
            continue
        num_stages = int(rng.integers(2, 4))
        stride = 2**num_stages
        extents = np.arange(2 * stride, SWEEP_MAX_EXTENT + 1, stride)
        shape = tuple(int(e) for e in rng.choice(extents, size=3))
        sweep.append((num_stages, shape, ratio))
    return sweep


def _random_mask(shape, ratio, seed, scale_id=1) -> MaskGrid:
    rng = np.random.default_rng(seed)
    bits = np.zeros(int(np.prod(shape)), dtype=bool)
    active = max(1, int(round((1 - ratio) * bits.size)))
    bits[rng.choice(bits.size, size=active, replace=False)] = True
    return MaskGrid(bits=bits.reshape(shape), scale_id=scale_id)


################################################################################
# mask
################################################################################


def _mask_checks(settings: VerifySettings) -> Dict[str, Callable[[], str]]:
    cnn = CnnConfig()

    def pyramid_consistency():
        model = ModelConfig(cnn=cnn)
        for seed in range(settings.seeds):
            pyramid = make_pyramid(
                settings.crop, model, settings.mask_ratio, seed, bottom_up=not settings.no_bottom_up
            )
            violations = pyramid_violations(pyramid)
            expect(not violations, f"seed {seed}: {'; '.join(violations)}")
        return f"{settings.seeds} pyramids consistent"

    def replication_round_trip():
        for seed in range(settings.seeds):
            mask = _random_mask((2, 2, 2), 0.5, seed)
            for factor in (2, 4, 8, 16):
                back = downsample_mask(upsample_mask(mask, factor), factor)
                expect(back.same_bits(mask), f"seed {seed}: factor {factor} round trip differs")
        return "factors 2, 4, 8, 16"

    def keep_ratio():
        model = ModelConfig(cnn=cnn)
        for seed in range(settings.seeds):
            pyramid = make_pyramid(settings.crop, model, settings.mask_ratio, seed)
            ratios = {grid.keep_ratio for grid in pyramid.stages + (pyramid.voxel,)}
            expect(len(ratios) == 1, f"seed {seed}: keep ratios differ across scales {sorted(ratios)}")
        return "identical at every scale"

    return {
        "pyramid_consistency": pyramid_consistency,
        "replication_round_trip": replication_round_trip,
        "keep_ratio": keep_ratio,
    }


################################################################################
# sparse
################################################################################


def _sparse_checks(settings: VerifySettings) -> Dict[str, Callable[[], str]]:
    def submanifold_conv():
        worst = 0.0
        with default_dtype("float64"):
            for seed in range(min(settings.seeds, 10)):
                rng = np.random.default_rng(seed)
                mask = _random_mask((8, 8, 8), 0.75, seed)
                dense = rng.normal(size=(2, 8, 8, 8)) * mask.bits
                weight = rng.normal(size=(3, 2, 3, 3, 3))
                bias = rng.normal(size=3)
                fast = sparse_conv3d(sparsify(Tensor(dense), mask), mask, Tensor(weight), Tensor(bias))
                slow = brute_force_conv3d(dense[None], weight, bias, 1, 1)[0]
                worst = max(worst, float(np.max(np.abs(fast.features.data - slow[:, mask.bits].T))))
        expect(worst < EXACT_TOLERANCE, f"max abs difference {worst:.3g}")
        return f"max abs difference {worst:.3g}"

    def encoder_matches_oracle():
        sweep = oracle_sweep(settings.oracle_configs)
        worst = 0.0
        for seed, (num_stages, shape, ratio) in enumerate(sweep):
            config = tiny_model_config(num_stages)
            params = init_pretrain_params(config, shape, seed, "float64")
            volume = np.random.default_rng(seed).uniform(size=shape)
            pyramid = make_pyramid(shape, config, ratio, seed)
            sparse = encode_cnn(volume, pyramid, params, config.cnn)
            dense = dense_masked_forward(volume, pyramid, params, config.cnn)
            for stage, (s, d) in enumerate(zip(sparse, dense), start=1):
                active = pyramid.stage(stage).bits
                worst = max(worst, float(np.max(np.abs(s.features.data - d[:, active].T))))
        expect(worst < EXACT_TOLERANCE, f"max abs difference {worst:.3g}")
        return f"{len(sweep)} configs, max abs difference {worst:.3g}"

    def mask_preserved():
        config = tiny_model_config(2)
        params = init_pretrain_params(config, (16, 16, 16), 0, "float64")
        for seed in range(settings.seeds):
            volume = np.random.default_rng(seed).uniform(size=(16, 16, 16))
            pyramid = make_pyramid(volume.shape, config, 0.75, seed)
            with no_grad():
                features = encode_cnn(volume, pyramid, params, config.cnn)
            for stage, f in enumerate(features, start=1):
                sites = nonzero_sites(densify(f).data)
                expect(
                    np.array_equal(sites, pyramid.stage(stage).bits),
                    f"seed {seed}: nonzero sites of S_{stage} differ from M_{stage}",
                )
        return f"{settings.seeds} seeds"

    def erosion_control():
        config = tiny_model_config(2)
        params = init_pretrain_params(config, (16, 16, 16), 0, "float64")
        volume = np.random.default_rng(0).uniform(0.1, 1.0, size=(16, 16, 16))
        pyramid = make_pyramid(volume.shape, config, 0.75, 0)
        plain = dense_masked_forward(volume, pyramid, params, config.cnn, remask=False)
        grown = int(np.count_nonzero(nonzero_sites(plain[0])))
        active = pyramid.stage(1).active_count
        expect(grown > active, f"dense forward kept {grown} nonzero sites for {active} active cells")
        return f"{grown} nonzero sites without re-masking for {active} active cells"

    def norm_statistics():
        means = []
        with default_dtype("float64"):
            for index, ratio in enumerate((0.25, 0.5, 0.75)):
                mask = _random_mask((8, 8, 8), ratio, index)
                rng = np.random.default_rng(index)
                features = Tensor(rng.normal(2.0, 3.0, size=(mask.active_count, 4)))
                input = SparseFeatureMap(features=features, mask=mask)
                out = sparse_norm(input, Tensor(np.ones(4)), Tensor(np.zeros(4)))
                means.append(float(np.max(np.abs(out.features.data.mean(axis=0)))))
        expect(max(means) < 1e-5, f"per group means {means}")
        return f"per group means {means}"

    return {
        "submanifold_conv": submanifold_conv,
        "encoder_matches_oracle": encoder_matches_oracle,
        "mask_preserved": mask_preserved,
        "erosion_control": erosion_control,
        "norm_statistics": norm_statistics,
    }


################################################################################
# grad
################################################################################


def op_gradient_check(build: Callable[..., Tensor], shapes: Sequence, seed: int = 0, count: int = 40):
    """
    Return the GradCheck of the scalar built by ``build`` from random
    64-bit leaves of ``shapes``.
    """
    rng = np.random.default_rng(seed)
    with default_dtype("float64"):
        leaves = [parameter(rng.normal(size=shape)) for shape in shapes]
        build(*leaves).backward()
    arrays = {str(i): leaf.data for i, leaf in enumerate(leaves)}
    analytic = {str(i): leaf.grad for i, leaf in enumerate(leaves)}

    def value():
        with no_grad():
            return build(*leaves).item()

    return check_gradients(value, arrays, analytic, count=count, seed=seed)


def _grad_checks(settings: VerifySettings) -> Dict[str, Callable[[], str]]:
    mask = _random_mask((4, 4, 4), 0.5, 3)
    labels = (np.random.default_rng(5).uniform(size=(4, 4, 4)) > 0.5).astype(float)
    cases = {
        "conv3d": (
            lambda x, w, b: (F.conv3d(x, w, b, stride=1, padding=1) ** 2).sum(),
            [(1, 2, 4, 4, 4), (3, 2, 3, 3, 3), (3,)],
        ),
        "conv3d_depthwise": (
            lambda x, w: F.conv3d(x, w, padding=1, groups=2).tanh().sum(),
            [(1, 2, 4, 4, 4), (2, 1, 3, 3, 3)],
        ),
        "max_pool3d": (lambda x: (F.max_pool3d(x, 2) ** 2).sum(), [(1, 2, 4, 4, 4)]),
        "linear": (lambda x, w, b: F.linear(x, w, b).tanh().sum(), [(4, 3), (5, 3), (5,)]),
        "layer_norm": (lambda x, g, b: (F.layer_norm(x, g, b) * x).sum(), [(3, 6), (6,), (6,)]),
        "attention": (
            lambda q, k, v, w: (F.multi_head_attention(q, k, v, 2, w) ** 2).sum(),
            [(3, 4), (3, 4), (3, 4), (4, 4)],
        ),
        "sparse_conv3d": (
            lambda x, w: (sparse_conv3d(sparsify(x, mask), mask, w).features ** 2).sum(),
            [(2, 4, 4, 4), (2, 2, 3, 3, 3)],
        ),
        "mask_embedding": (
            lambda x, e: (densify_with_mask_embedding(sparsify(x, mask), e) ** 2).sum(),
            [(3, 4, 4, 4), (3,)],
        ),
        "seg_loss": (lambda x: seg_loss(x, labels), [(4, 4, 4)]),
    }
    checks = {}
    for name, (build, shapes) in cases.items():

        def check(build=build, shapes=shapes):
            result = op_gradient_check(build, shapes)
            expect(result.passed(GRAD_TOLERANCE), f"max relative error {result.max_rel_error:.3g} at {result.worst}")
            return f"max relative error {result.max_rel_error:.3g} over {result.checked} coordinates"

        checks[name] = check
    return checks


################################################################################
# pipeline
################################################################################


def _pipeline_checks(settings: VerifySettings) -> Dict[str, Callable[[], str]]:
    config = tiny_model_config(2)
    shape = (16, 16, 16)

    def end_to_end_gradient():
        params = init_pretrain_params(config, shape, 0, "float64")
        volume = np.random.default_rng(0).uniform(size=shape)
        pyramid = make_pyramid(shape, config, 0.5, 0)
        loss, _targets, _output = reconstruction_loss(volume, pyramid, params, config)
        loss.backward()
        arrays = {n: t.data for n, t in params.items()}
        analytic = {n: t.grad if t.grad is not None else np.zeros_like(t.data) for n, t in params.items()}

        def value():
            with no_grad():
                return reconstruction_loss(volume, pyramid, params, config)[0].item()

        result = check_gradients(value, arrays, analytic, count=settings.grad_samples)
        expect(result.passed(GRAD_TOLERANCE), f"max relative error {result.max_rel_error:.3g} at {result.worst}")
        return f"max relative error {result.max_rel_error:.3g} over {result.checked} coordinates"

    def loss_masking():
        rng = np.random.default_rng(1)
        for trial in range(20):
            junction = _random_mask((4, 4, 4), 0.5, trial, scale_id=2)
            volume = rng.uniform(size=shape)
            targets = normalize_targets(volume, junction)
            pred = rng.normal(size=shape)
            with default_dtype("float64"):
                before = masked_mse_loss(Tensor(pred), targets.targets, targets.voxel_mask).item()
                pred[~targets.voxel_mask] += rng.normal(size=int(np.count_nonzero(~targets.voxel_mask)))
                after = masked_mse_loss(Tensor(pred), targets.targets, targets.voxel_mask).item()
            expect(before == after, f"trial {trial}: loss moved from {before!r} to {after!r}")
        return "20 trials bit-identical"

    def checkpoint_round_trip():
        params = init_pretrain_params(config, shape, 2, "float32")
        volume = np.random.default_rng(2).uniform(size=shape)
        pyramid = make_pyramid(shape, config, 0.75, 2)
        with no_grad():
            before = pretrain_forward(volume, pyramid, params, config).output.data.copy()
        restored = init_pretrain_params(config, shape, 3, "float32")
        decode_checkpoint(encode_checkpoint(params, step=1)).restore(restored)
        with no_grad():
            after = pretrain_forward(volume, pyramid, restored, config).output.data
        expect(np.array_equal(before, after), "forward output changed after the round trip")
        return "forward output bit-identical"

    return {
        "end_to_end_gradient": end_to_end_gradient,
        "loss_masking": loss_masking,
        "checkpoint_round_trip": checkpoint_round_trip,
    }


SUITE_CHECKS = {
    "mask": _mask_checks,
    "sparse": _sparse_checks,
    "grad": _grad_checks,
    "pipeline": _pipeline_checks,
}


def run_check(name: str, check: Callable[[], Optional[str]]) -> CheckReport:
    try:
        detail = check() or ""
    except CheckFailure as e:
        logger.warning(f"verify: {name} failed: {e}")
        return CheckReport(name=name, passed=False, detail=str(e))
    except Exception as e:
        logger.warning(f"verify: {name} raised {type(e).__name__}: {e}")
        return CheckReport(name=name, passed=False, detail=f"{type(e).__name__}: {e}")
    return CheckReport(name=name, passed=True, detail=detail)


def run_suite(name: str, settings: VerifySettings) -> SuiteReport:
    if name not in SUITE_CHECKS:
        raise ConfigError(f"unknown suite {name!r}, expected one of {list(SUITES)}")
    checks = [run_check(f"{name}.{check}", func) for check, func in SUITE_CHECKS[name](settings).items()]
    logger.info(f"verify: suite {name}: {sum(c.passed for c in checks)}/{len(checks)} passed")
    return SuiteReport(name=name, passed=all(c.passed for c in checks), checks=checks)


def run_verify(suites: Sequence[str] = SUITES, settings: Optional[VerifySettings] = None) -> VerifyReport:
    """Run each of ``suites`` once, in order, and return the report."""
    settings = settings or VerifySettings()
    ordered = [s for s in SUITES if s in set(suites)]
    unknown = sorted(set(suites) - set(SUITES))
    if unknown:
        raise ConfigError(f"unknown suites {unknown}, expected some of {list(SUITES)}")
    reports = [run_suite(name, settings) for name in ordered]
    return VerifyReport(
        passed=all(r.passed for r in reports),
        suites=reports,
        settings=attr.asdict(settings),
    )
