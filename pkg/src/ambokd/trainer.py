"""Training orchestration: role rotation, balancing, metrics, artifacts.

Each batch runs one shared forward pass; every branch that the active
variant treats as a student then gets its own objective (CE plus weighted
KD from its two teachers), all gradients are taken from the same
pre-update values, and each student's optimizer applies its own step
scale. Epoch 1 captures per-branch baseline CE means that later progress
ratios are measured against.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from .amb import AmbState, dynamic_gradient_ratio, dynamic_weights, progress_ratio
from .config import RunConfig
from .data import PairedDataset, SynthSpec
from .distill import LossBundle, cross_entropy, kd_loss, total_loss
from .errors import DataError, FormatError, NumericalError, ParameterError
from .model import BRANCHES, EncoderSpec, FusionSpec, ThreeBranchModel
from .numerics import Tensor, softmax
from .optim import ModulatedAdam

CSV_COLUMNS = (
    "epoch", "branch", "ce", "kd_a", "kd_b", "alpha_mean", "beta_mean",
    "rdg_mean", "rdg_min", "rdg_max", "auc", "acc", "f1", "precision",
)

CHECKPOINT_MAGIC = b"AMBK"
CHECKPOINT_VERSION = 1

NAN = float("nan")


def fmt9(value: float) -> str:
    """Deterministic 9-significant-digit decimal rendering."""
    return format(float(value), ".9g")


# -- variants ---------------------------------------------------------------

@dataclass(frozen=True)
class VariantPlan:
    """Which branches learn, from whom, and which balancing blocks run."""

    students: dict[str, tuple[str, ...]]
    dynamic_weights: bool
    dynamic_gradients: bool


def _mutual() -> dict[str, tuple[str, ...]]:
    return {b: tuple(o for o in BRANCHES if o != b) for b in BRANCHES}


_VARIANT_TABLE: dict[str, tuple[dict[str, tuple[str, ...]], bool, bool]] = {
    "ambokd": (_mutual(), True, True),
    "mmokd": (_mutual(), False, False),
    "mmokd_dk": (_mutual(), True, False),
    "mmokd_dg": (_mutual(), False, True),
    # Offline-style: fusion distills from both encoders at fixed unit weights;
    # the encoder branches train on CE only as stand-ins for pretrained teachers.
    "mkd": ({"eeg": (), "visual": (), "fusion": ("eeg", "visual")}, False, False),
    # Mutual learning between the two encoders only; fusion is frozen.
    "dml_style": ({"eeg": ("visual",), "visual": ("eeg",)}, False, False),
    "unimodal_e": ({"eeg": ()}, False, False),
    "unimodal_v": ({"visual": ()}, False, False),
    # Attention fusion trained with CE only; encoders likewise, so the
    # fusion branch sees learned rather than frozen-random features.
    "amm": ({"eeg": (), "visual": (), "fusion": ()}, False, False),
}


def variant_plan(
    variant: str,
    dynamic_weights_override: bool | None = None,
    dynamic_gradients_override: bool | None = None,
) -> VariantPlan:
    if variant not in _VARIANT_TABLE:
        raise ParameterError(
            f"unknown variant '{variant}'; valid variants: " + ", ".join(_VARIANT_TABLE)
        )
    students, dyn_k, dyn_g = _VARIANT_TABLE[variant]
    if dynamic_weights_override is not None:
        dyn_k = dynamic_weights_override
    if dynamic_gradients_override is not None:
        dyn_g = dynamic_gradients_override
    return VariantPlan(students=dict(students), dynamic_weights=dyn_k, dynamic_gradients=dyn_g)


# -- metrics ----------------------------------------------------------------

def tied_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUC with tie correction; nan when one class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    positives = labels == 1
    n_pos = int(positives.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return NAN
    ranks = tied_ranks(scores)
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _prec_recall_f1(preds: np.ndarray, labels: np.ndarray, positive: int) -> tuple[float, float, float]:
    tp = int(np.sum((preds == positive) & (labels == positive)))
    fp = int(np.sum((preds == positive) & (labels != positive)))
    fn = int(np.sum((preds != positive) & (labels == positive)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def classification_metrics(probs: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    """AUC/ACC/F1/Precision from class probabilities.

    Binary reports the positive class; more classes report macro averages
    and an undefined (nan) AUC.
    """
    labels = np.asarray(labels)
    preds = probs.argmax(axis=1)
    acc = float((preds == labels).mean()) if len(labels) else NAN
    n_classes = probs.shape[1]
    if n_classes == 2:
        auc = auc_score(probs[:, 1], labels)
        precision, _, f1 = _prec_recall_f1(preds, labels, positive=1)
    else:
        auc = NAN
        per = [_prec_recall_f1(preds, labels, positive=c) for c in range(n_classes)]
        precision = float(np.mean([p for p, _, _ in per]))
        f1 = float(np.mean([f for _, _, f in per]))
    return {"auc": auc, "acc": acc, "f1": f1, "precision": precision}


def predict_probs(model: ThreeBranchModel, ds: PairedDataset, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Per-branch class probabilities over a whole dataset."""
    outs: dict[str, list[np.ndarray]] = {b: [] for b in BRANCHES}
    for start in range(0, len(ds), batch_size):
        sl = slice(start, start + batch_size)
        out = model.forward(ds.modality_a[sl], ds.modality_b[sl])
        for branch in BRANCHES:
            outs[branch].append(softmax(out.logits[branch]).data)
    return {
        b: np.concatenate(chunks) if chunks else np.zeros((0, model.n_classes))
        for b, chunks in outs.items()
    }


def evaluate(model: ThreeBranchModel, ds: PairedDataset, batch_size: int = 256) -> dict[str, dict[str, float]]:
    """Validation metrics for every branch."""
    if len(ds) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    probs = predict_probs(model, ds, batch_size)
    return {b: classification_metrics(probs[b], ds.labels) for b in BRANCHES}


# -- single step ------------------------------------------------------------

@dataclass
class StepRecord:
    epoch: int
    ce: dict[str, float]
    kd_a: dict[str, float]
    kd_b: dict[str, float]
    alpha: dict[str, float]
    beta: dict[str, float]
    rdg: dict[str, float]


def train_step(
    model: ThreeBranchModel,
    x_visual: np.ndarray,
    x_eeg: np.ndarray,
    labels: np.ndarray,
    plan: VariantPlan,
    cfg: RunConfig,
    amb_state: AmbState,
    optimizers: dict[str, ModulatedAdam],
    epoch: int,
) -> StepRecord:
    """One shared forward pass, per-student losses, one update per student."""
    if len(labels) == 0:
        raise DataError("train_step requires a nonempty batch")
    out = model.forward(
        x_visual, x_eeg, detach_fusion_inputs=not cfg.optim.fusion_backprop_encoders
    )
    ce_t = {b: cross_entropy(out.logits[b], labels) for b in BRANCHES}
    ce = {b: ce_t[b].item() for b in BRANCHES}
    if epoch == 1:
        amb_state.observe(ce)

    rec = StepRecord(
        epoch=epoch,
        ce=ce,
        kd_a={b: NAN for b in BRANCHES},
        kd_b={b: NAN for b in BRANCHES},
        alpha={b: NAN for b in BRANCHES},
        beta={b: NAN for b in BRANCHES},
        rdg={b: NAN for b in BRANCHES},
    )
    bundle = LossBundle(ce=dict(ce), tau=cfg.tau)
    totals: list[Tensor] = []
    for student, teachers in plan.students.items():
        if len(teachers) == 2:
            kd_ta = kd_loss(out.logits[student], out.logits[teachers[0]], cfg.tau)
            kd_tb = kd_loss(out.logits[student], out.logits[teachers[1]], cfg.tau)
            if plan.dynamic_weights:
                alpha, beta = dynamic_weights(ce[student], ce[teachers[0]], ce[teachers[1]], cfg.amb)
            else:
                alpha, beta = 1.0, 1.0
            total = total_loss(ce_t[student], kd_ta, kd_tb, alpha, beta, cfg.tau)
            rec.kd_a[student] = kd_ta.item()
            rec.kd_b[student] = kd_tb.item()
            rec.alpha[student] = alpha
            rec.beta[student] = beta
            bundle.kd[(student, teachers[0])] = kd_ta.item()
            bundle.kd[(student, teachers[1])] = kd_tb.item()
            bundle.alpha[student] = alpha
            bundle.beta[student] = beta
        elif len(teachers) == 1:
            kd_ta = kd_loss(out.logits[student], out.logits[teachers[0]], cfg.tau)
            total = ce_t[student] + kd_ta * (cfg.tau * cfg.tau)
            rec.kd_a[student] = kd_ta.item()
            rec.alpha[student] = 1.0
            bundle.kd[(student, teachers[0])] = kd_ta.item()
            bundle.alpha[student] = 1.0
        else:
            total = ce_t[student]
        bundle.total[student] = total.item()
        if not np.isfinite(total.item()):
            raise NumericalError(
                f"non-finite total loss for student '{student}' at epoch {epoch}; {bundle}"
            )
        totals.append(total)

    model.params.zero_grad()
    composite = totals[0]
    for extra in totals[1:]:
        composite = composite + extra
    composite.backward()

    for student, teachers in plan.students.items():
        if plan.dynamic_gradients and epoch >= 2 and len(teachers) == 2:
            ratios = {
                b: progress_ratio(amb_state.baseline(b), ce[b])
                for b in (student,) + teachers
            }
            r_dg = dynamic_gradient_ratio(
                ratios[student], ratios[teachers[0]], ratios[teachers[1]], epoch, cfg.amb
            )
        else:
            r_dg = 1.0
        rec.rdg[student] = r_dg
        amb_state.record(student, rec.alpha[student], rec.beta[student], r_dg)
        optimizers[student].step(r_dg)
    return rec


# -- epoch reports ------------------------------------------------------------

@dataclass
class EpochReport:
    epoch: int
    ce: dict[str, float]
    kd_a: dict[str, float]
    kd_b: dict[str, float]
    alpha_mean: dict[str, float]
    beta_mean: dict[str, float]
    rdg_mean: dict[str, float]
    rdg_min: dict[str, float]
    rdg_max: dict[str, float]
    val: dict[str, dict[str, float]]


@dataclass
class RunResult:
    reports: list[EpochReport]
    steps: list[StepRecord]
    model: ThreeBranchModel
    metrics_path: Path | None = None
    checkpoint_path: Path | None = None
    config_path: Path | None = None


def _aggregate(epoch: int, records: list[StepRecord], val: dict[str, dict[str, float]]) -> EpochReport:
    def stat(getter, reducer):
        return {
            b: float(reducer([getter(r)[b] for r in records])) for b in BRANCHES
        }

    return EpochReport(
        epoch=epoch,
        ce=stat(lambda r: r.ce, np.mean),
        kd_a=stat(lambda r: r.kd_a, np.mean),
        kd_b=stat(lambda r: r.kd_b, np.mean),
        alpha_mean=stat(lambda r: r.alpha, np.mean),
        beta_mean=stat(lambda r: r.beta, np.mean),
        rdg_mean=stat(lambda r: r.rdg, np.mean),
        rdg_min=stat(lambda r: r.rdg, np.min),
        rdg_max=stat(lambda r: r.rdg, np.max),
        val=val,
    )


def _seed_ints(seed: int, count: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(c.generate_state(1)[0]) for c in children]


def build_model(cfg: RunConfig, dataset: PairedDataset, init_seed: int) -> ThreeBranchModel:
    shape_a = tuple(dataset.modality_a.shape[1:])
    shape_b = tuple(dataset.modality_b.shape[1:])
    visual_spec = EncoderSpec("toy-conv", shape_a, cfg.model.conv_channels, cfg.model.feature_len)
    eeg_spec = EncoderSpec("toy-temporal", shape_b, cfg.model.temporal_hidden, cfg.model.feature_len)
    fusion_spec = FusionSpec(
        heads=cfg.model.heads,
        key_width=cfg.model.key_width,
        tokens=cfg.model.tokens,
        aligned_len=cfg.model.feature_len,
        feature_softmax=cfg.model.feature_softmax,
    )
    return ThreeBranchModel(visual_spec, eeg_spec, fusion_spec, dataset.n_classes, seed=init_seed)


def load_run_dataset(cfg: RunConfig) -> PairedDataset:
    if cfg.data.path is not None:
        return data_mod.load(cfg.data.path)
    spec = SynthSpec(
        n_samples=cfg.data.n_samples,
        positive_fraction=cfg.data.positive_fraction,
        shape_a=cfg.data.shape_a,
        shape_b=cfg.data.shape_b,
        sep_a=cfg.data.sep_a,
        sep_b=cfg.data.sep_b,
        noise_a=cfg.data.noise_a,
        noise_b=cfg.data.noise_b,
        n_classes=cfg.data.n_classes,
        seed=cfg.data_seed(),
    )
    return data_mod.generate(spec)


def run_experiment(cfg: RunConfig, persist: bool = True) -> RunResult:
    """Full training run per the configured variant; deterministic in (cfg, seed)."""
    cfg.validate()
    plan = variant_plan(cfg.variant, cfg.amb_dynamic_weights, cfg.amb_dynamic_gradients)
    init_seed, shuffle_seed, noise_seed = _seed_ints(cfg.seed, 3)

    dataset = load_run_dataset(cfg)
    train_ds, val_ds = data_mod.split(dataset, cfg.data.train_fraction, seed=cfg.seed)
    if cfg.data.val_noise:
        val_ds = data_mod.apply_validation_noise(val_ds, cfg.data.noise_level, noise_seed)

    model = build_model(cfg, dataset, init_seed)
    optimizers = {
        student: ModulatedAdam(
            model.params_for(student),
            eta=cfg.optim.eta,
            beta1=cfg.optim.beta1,
            beta2=cfg.optim.beta2,
            epsilon=cfg.optim.epsilon,
            bias_correction=cfg.optim.bias_correction,
        )
        for student in plan.students
    }
    amb_state = AmbState()
    shuffle_rng = np.random.default_rng(shuffle_seed)

    reports: list[EpochReport] = []
    steps: list[StepRecord] = []
    n = len(train_ds)
    for epoch in range(1, cfg.epochs + 1):
        amb_state.begin_epoch(epoch)
        perm = shuffle_rng.permutation(n)
        epoch_records: list[StepRecord] = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            rec = train_step(
                model,
                train_ds.modality_a[idx],
                train_ds.modality_b[idx],
                train_ds.labels[idx],
                plan,
                cfg,
                amb_state,
                optimizers,
                epoch,
            )
            epoch_records.append(rec)
        if epoch == 1:
            amb_state.finalize_baselines()
        val = evaluate(model, val_ds)
        reports.append(_aggregate(epoch, epoch_records, val))
        steps.extend(epoch_records)

    result = RunResult(reports=reports, steps=steps, model=model)
    if persist and cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.metrics_path = out / "metrics.csv"
        result.checkpoint_path = out / "checkpoint.ambk"
        result.config_path = out / "resolved_config.txt"
        write_metrics_csv(reports, result.metrics_path)
        save_checkpoint(model.state_dict(), result.checkpoint_path)
        from .config import dump_resolved

        result.config_path.write_text(dump_resolved(cfg))
    return result


# -- artifacts ----------------------------------------------------------------

def write_metrics_csv(reports: list[EpochReport], path) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for rep in reports:
        for branch in BRANCHES:
            v = rep.val[branch]
            row = (
                str(rep.epoch),
                branch,
                fmt9(rep.ce[branch]),
                fmt9(rep.kd_a[branch]),
                fmt9(rep.kd_b[branch]),
                fmt9(rep.alpha_mean[branch]),
                fmt9(rep.beta_mean[branch]),
                fmt9(rep.rdg_mean[branch]),
                fmt9(rep.rdg_min[branch]),
                fmt9(rep.rdg_max[branch]),
                fmt9(v["auc"]),
                fmt9(v["acc"]),
                fmt9(v["f1"]),
                fmt9(v["precision"]),
            )
            lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def dump_embeddings(model: ThreeBranchModel, ds: PairedDataset, path, batch_size: int = 256) -> None:
    """Per-sample branch features as CSV: label, then eeg/visual/fused feature columns."""
    n_e = model.eeg_spec.feature_len
    n_v = model.visual_spec.feature_len
    n_f = model.fusion_spec.fused_len
    header = (
        ["label"]
        + [f"fe_{i}" for i in range(n_e)]
        + [f"fv_{i}" for i in range(n_v)]
        + [f"ff_{i}" for i in range(n_f)]
    )
    lines = [",".join(header)]
    for start in range(0, len(ds), batch_size):
        sl = slice(start, start + batch_size)
        out = model.forward(ds.modality_a[sl], ds.modality_b[sl])
        fe = out.feats["eeg"].data
        fv = out.feats["visual"].data
        ff = out.feats["fusion"].data
        for i in range(fe.shape[0]):
            cells = [str(int(ds.labels[start + i]))]
            cells += [fmt9(x) for x in fe[i]]
            cells += [fmt9(x) for x in fv[i]]
            cells += [fmt9(x) for x in ff[i]]
            lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def save_checkpoint(state: dict[str, np.ndarray], path) -> None:
    """Versioned little-endian binary of named float64 parameter tensors."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in state.items():
            encoded = name.encode("utf-8")
            arr = np.asarray(arr, dtype=np.float64)
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise FormatError(
                f"truncated checkpoint: needed {n} bytes for {what} "
                f"at byte offset {offset}, file has {len(blob)}"
            )
        chunk = blob[offset : offset + n]
        offset += n
        return chunk

    magic = take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0, expected {CHECKPOINT_MAGIC!r}")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte offset 4")
    state: dict[str, np.ndarray] = {}
    while offset < len(blob):
        name_len = struct.unpack("<H", take(2, "name length"))[0]
        name = take(name_len, "name").decode("utf-8")
        rank = struct.unpack("<B", take(1, f"rank of '{name}'"))[0]
        shape = tuple(
            struct.unpack("<I", take(4, f"dim {i} of '{name}'"))[0] for i in range(rank)
        )
        count = int(np.prod(shape)) if shape else 1
        payload = take(8 * count, f"payload of '{name}'")
        state[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return state
