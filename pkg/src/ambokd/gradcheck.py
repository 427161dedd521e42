"""Finite-difference verification suite for every differentiable block.

Runs on a deliberately tiny model so that element-wise central differences
over all parameters stay fast. The composite block freezes teacher
distributions and KD weights at their current values, mirroring how a
training step treats them: per-iteration constants that gradients never
flow through.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .distill import cross_entropy, kd_loss, total_loss
from .errors import ParameterError
from .model import BRANCHES, EncoderSpec, FusionSpec, ThreeBranchModel
from .numerics import ParamSet, Tensor, grad_check

BLOCKS = (
    "visual_encoder",
    "eeg_encoder",
    "alignment",
    "attention_head",
    "fusion",
    "classifier",
    "cross_entropy",
    "kd",
    "composite",
    "composite_flowthrough",
)

_BATCH = 2
_TAU = 4.0


def _tiny_model(seed: int) -> ThreeBranchModel:
    return ThreeBranchModel(
        EncoderSpec("toy-conv", (1, 6, 6), hidden=2, feature_len=4),
        EncoderSpec("toy-temporal", (3, 6), hidden=2, feature_len=4),
        FusionSpec(heads=2, key_width=3, tokens=2, aligned_len=4, feature_softmax=True),
        n_classes=2,
        seed=seed,
    )


def build_block(name: str, seed: int) -> tuple[Callable[[], Tensor], ParamSet]:
    """Scalar objective plus the parameters it is differentiated against."""
    if name not in BLOCKS:
        raise ParameterError(f"unknown gradcheck block '{name}'; blocks: {', '.join(BLOCKS)}")
    model = _tiny_model(seed)
    rng = np.random.default_rng(seed + 1_000_003)
    feat = model.visual_spec.feature_len

    def weights(shape) -> np.ndarray:
        return rng.standard_normal(shape)

    if name == "visual_encoder":
        x = Tensor(weights((_BATCH,) + model.visual_spec.input_shape))
        r = weights((_BATCH, feat))
        return lambda: (model.encode_visual(x) * r).sum(), model.params.subset("v_enc.")
    if name == "eeg_encoder":
        x = Tensor(weights((_BATCH,) + model.eeg_spec.input_shape))
        r = weights((_BATCH, feat))
        return lambda: (model.encode_eeg(x) * r).sum(), model.params.subset("e_enc.")
    if name == "alignment":
        fe = Tensor(weights((_BATCH, feat)))
        fv = Tensor(weights((_BATCH, feat)))
        r = weights((_BATCH, 2 * feat))
        return (
            lambda: (model.align_concat(fe, fv) * r).sum(),
            model.params.subset("fus.align_e.", "fus.align_v."),
        )
    if name == "attention_head":
        fc = Tensor(weights((_BATCH, model.fusion_spec.fused_len)))
        r = weights((_BATCH, model.fusion_spec.tokens, model.fusion_spec.key_width))
        return lambda: (model.attention_head(fc, 0) * r).sum(), model.params.subset("fus.head0.")
    if name == "fusion":
        fe = Tensor(weights((_BATCH, feat)))
        fv = Tensor(weights((_BATCH, feat)))
        r = weights((_BATCH, model.fusion_spec.fused_len))
        return lambda: (model.fuse(fe, fv) * r).sum(), model.params.subset("fus.")
    if name == "classifier":
        f = Tensor(weights((_BATCH, feat)))
        r = weights((_BATCH, model.n_classes))
        return lambda: (model.classify(f, "eeg") * r).sum(), model.params.subset("clf_e.")
    if name == "cross_entropy":
        params = ParamSet()
        logits = params.add("logits", weights((4, 3)))
        labels = rng.integers(0, 3, size=4)
        return lambda: cross_entropy(logits, labels), params
    if name == "kd":
        params = ParamSet()
        student = params.add("student_logits", weights((4, 3)))
        teacher = weights((4, 3))
        return lambda: kd_loss(student, Tensor(teacher), _TAU), params

    # composite blocks: full three-branch objective over all parameters
    flow_through = name == "composite_flowthrough"
    xa = weights((_BATCH,) + model.visual_spec.input_shape)
    xb = weights((_BATCH,) + model.eeg_spec.input_shape)
    labels = rng.integers(0, model.n_classes, size=_BATCH)
    base = model.forward(xa, xb, detach_fusion_inputs=not flow_through)
    frozen = {b: base.logits[b].data.copy() for b in BRANCHES}

    def objective() -> Tensor:
        out = model.forward(xa, xb, detach_fusion_inputs=not flow_through)
        total = None
        for student in BRANCHES:
            t_a, t_b = (b for b in BRANCHES if b != student)
            loss = total_loss(
                cross_entropy(out.logits[student], labels),
                kd_loss(out.logits[student], Tensor(frozen[t_a]), _TAU),
                kd_loss(out.logits[student], Tensor(frozen[t_b]), _TAU),
                1.0,
                1.0,
                _TAU,
            )
            total = loss if total is None else total + loss
        return total

    return objective, model.params


def run_block(name: str, seed: int, eps: float = 1e-5, corrupt: bool = False) -> float:
    f, params = build_block(name, seed)
    if corrupt:
        first = next(params.values())

        # Fault injection: a term the value sees but the tape does not.
        def corrupted() -> Tensor:
            return f() + 0.25 * float(first.data.reshape(-1)[0])

        return grad_check(corrupted, params, eps)
    return grad_check(f, params, eps)


def run_suite(
    eps: float = 1e-5,
    n_seeds: int = 20,
    corrupt_block: str | None = None,
    blocks: tuple[str, ...] = BLOCKS,
) -> dict[str, float]:
    """Max relative error per block across seeds."""
    if corrupt_block is not None and corrupt_block not in BLOCKS:
        raise ParameterError(
            f"unknown gradcheck block '{corrupt_block}'; blocks: {', '.join(BLOCKS)}"
        )
    results: dict[str, float] = {}
    for block in blocks:
        worst = 0.0
        for seed in range(n_seeds):
            err = run_block(block, seed, eps, corrupt=(block == corrupt_block))
            worst = max(worst, err)
        results[block] = worst
    return results
