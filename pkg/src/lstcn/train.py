"""Training loop, Adam optimizer, embedding extraction and the
cross-view rank-1 evaluation protocol.

Training iterates (p, k) batches through the dual-branch model under the
joint triplet + focal objective with a piecewise-constant learning-rate
schedule, appending one tab-separated metrics line per iteration and
checkpointing on a cadence. Evaluation embeds full sequences, L2
normalizes each part, and matches probes to their nearest gallery entry
under the summed per-part Euclidean distance, tabulated per
(condition, probe view, gallery view).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .configio import load_config_file, save_config_file, to_kv_lines
from .data import (
    DatasetIndex,
    SequenceStore,
    SynthSplitSpec,
    downsample_frames,
    load_index,
    make_eval_split,
    pk_batch,
)
from .losses import joint_loss
from .model import LstcnModel, ModelConfig, apply_variant, build_model, save_checkpoint
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Every run hyperparameter, serializable to the run config file."""

    data_dir: str = "data/synth"
    protocol: str = "synth"  # synth | casia
    # batch composition
    p: int = 8
    k: int = 2
    frames_per_clip: int = 30
    min_train_frames: int = 15
    # objective
    margin: float = 0.2
    gamma: float = 2.0
    lambda_focal: float = 1.0
    eq11_prefactor: bool = False
    # optimizer / schedule
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_schedule: tuple[tuple[int, float], ...] = ((0, 0.01), (300, 0.001), (450, 0.0001))
    max_iters: int = 500
    checkpoint_every: int = 250
    # reproducibility
    seed: int = 0
    deterministic: bool = True
    # model
    variant: str = "full"
    frame_downsample: int = 4
    channels: tuple[int, int, int] = (8, 16, 32)
    embed_dim: int = 64
    n_static_strips: int = 4
    lstc_kernel: int = 3
    asymmetric: bool = True
    gbsp_mode: str = "max"
    head: str = "lstp"
    head_mode: str = "max"
    gem_p: float = 6.5
    lrelu_slope: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    # evaluation
    include_identical_view: bool = True
    gallery_seq_indices: tuple[int, ...] = (1, 2)
    # sequences used for training; empty = all. Keeping the probe indices
    # out of this set holds probe sequences out of training entirely.
    train_seq_indices: tuple[int, ...] = ()
    probe_seq_indices: tuple[int, ...] = ()  # empty = all non-gallery
    fuse_for_eval: bool = False

    def __post_init__(self):
        if self.p * self.k < 4:
            raise ValueError(f"batch p*k must be >= 4, got {self.p}*{self.k}")
        its = [it for it, _ in self.lr_schedule]
        if its != sorted(its) or len(set(its)) != len(its):
            raise ValueError(f"lr_schedule iterations must be strictly increasing, got {its}")
        if not self.lr_schedule or self.lr_schedule[0][0] != 0:
            raise ValueError("lr_schedule must start at iteration 0")
        if self.frame_downsample < 1 or 64 % self.frame_downsample or 44 % self.frame_downsample:
            raise ValueError(
                f"frame_downsample must divide 64 and 44, got {self.frame_downsample}"
            )
        if self.margin <= 0 or self.gamma < 0 or self.lambda_focal < 0:
            raise ValueError("margin must be > 0, gamma and lambda_focal >= 0")
        if self.max_iters < 1 or self.checkpoint_every < 1:
            raise ValueError("max_iters and checkpoint_every must be >= 1")
        if self.frames_per_clip < 3 or self.min_train_frames < 3:
            raise ValueError("frames_per_clip and min_train_frames must be >= 3")


def model_config_for(config: TrainConfig, n_classes: int) -> ModelConfig:
    ds = config.frame_downsample
    base = ModelConfig(
        n_classes=n_classes,
        input_hw=(64 // ds, 44 // ds),
        channels=config.channels,
        embed_dim=config.embed_dim,
        n_static_strips=config.n_static_strips,
        lstc_kernel=config.lstc_kernel,
        asymmetric=config.asymmetric,
        head=config.head,
        gbsp_mode=config.gbsp_mode,
        head_mode=config.head_mode,
        gem_p=config.gem_p,
        lrelu_slope=config.lrelu_slope,
        bn_eps=config.bn_eps,
        bn_momentum=config.bn_momentum,
    )
    return apply_variant(base, config.variant)


def schedule_lr(schedule, iteration: int) -> float:
    """Piecewise-constant rate: the last entry at or before ``iteration``."""
    lr = schedule[0][1]
    for it0, value in schedule:
        if iteration >= it0:
            lr = value
    return lr


class Adam:
    """Adam with bias correction; one moment pair per named parameter."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if not np.all(np.isfinite(p.data)):
                raise NonFiniteError(f"parameter {name} became non-finite after Adam step")


class TrainAbort(RuntimeError):
    """Raised when training hits a non-finite loss; names the last good checkpoint."""

    def __init__(self, message: str, last_checkpoint: str | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainResult:
    model: LstcnModel
    model_config: ModelConfig
    metrics_path: Path
    checkpoints: list[Path]
    final_checkpoint: Path | None
    iterations_run: int
    interrupted: bool = False
    label_names: list[str] = field(default_factory=list)


METRICS_HEADER = "# iteration\ttriplet\tfocal\ttotal\tn_active\tlr"


def train(config: TrainConfig, out_dir) -> TrainResult:
    """Run the full schedule; artifacts land under ``out_dir``.

    Produces metrics.tsv (append-only, one line per iteration), periodic
    checkpoints, final.lstcn and the effective run config. A KeyboardInterrupt
    checkpoints and returns; a non-finite loss aborts with a reference to
    the last good checkpoint.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = config.seed
    if not config.deterministic:
        seed = int(np.random.SeedSequence().entropy % (2**31))
        log.info("deterministic off: drew seed %d", seed)
    rng = np.random.default_rng(seed)

    index = load_index(config.data_dir)
    if config.train_seq_indices:
        allowed = set(config.train_seq_indices)
        index = index.filter(lambda e: e.seq_index in allowed)
        if not index.entries:
            raise ValueError(
                f"train_seq_indices {config.train_seq_indices} match no sequences"
            )
    store = SequenceStore(config.data_dir)
    subjects = index.subjects()
    if len(subjects) < config.p:
        raise ValueError(
            f"dataset has {len(subjects)} subjects but batches need p={config.p}"
        )
    label_of = {s: i for i, s in enumerate(subjects)}
    mcfg = model_config_for(config, n_classes=len(subjects))
    model = build_model(mcfg, seed=seed)
    adam = Adam(model.named_parameters(), config.beta1, config.beta2, config.adam_eps)

    save_config_file(config, out / "run_config.cfg")
    ckpt_dir = out / "checkpoints"
    metrics_path = out / "metrics.tsv"
    checkpoints: list[Path] = []
    last_ckpt: Path | None = None
    iterations = 0
    interrupted = False

    with open(metrics_path, "w", encoding="utf-8") as mf:
        mf.write(METRICS_HEADER + "\n")
        try:
            for it in range(1, config.max_iters + 1):
                lr = schedule_lr(config.lr_schedule, it)
                clips, subj_ids = pk_batch(
                    index, store, config.p, config.k, rng,
                    clip_len=config.frames_per_clip,
                    min_frames=config.min_train_frames,
                )
                labels = np.array([label_of[s] for s in subj_ids])
                clips = _prepare_clips(clips, config.frame_downsample)
                try:
                    feats, logits, _ = model.forward_batch(Tensor(clips), "train")
                    total, rep = joint_loss(
                        feats, logits, labels,
                        margin=config.margin, gamma=config.gamma,
                        lambda_focal=config.lambda_focal,
                        eq11_prefactor=config.eq11_prefactor,
                    )
                    model.zero_grad()
                    total.backward()
                    adam.step(lr)
                except NonFiniteError as e:
                    mf.flush()
                    ref = str(last_ckpt) if last_ckpt else "none written yet"
                    raise TrainAbort(
                        f"non-finite loss at iteration {it}: {e}; last good checkpoint: {ref}",
                        str(last_ckpt) if last_ckpt else None,
                    ) from e
                mf.write(
                    f"{it}\t{rep.triplet_value:.10g}\t{rep.focal_value:.10g}"
                    f"\t{rep.total:.10g}\t{rep.n_active_triplets}\t{lr:.10g}\n"
                )
                iterations = it
                if it % config.checkpoint_every == 0:
                    path = ckpt_dir / f"ckpt_{it:06d}.lstcn"
                    save_checkpoint(model, path)
                    checkpoints.append(path)
                    last_ckpt = path
        except KeyboardInterrupt:
            interrupted = True
            log.warning("interrupted at iteration %d; checkpointing", iterations)

    final_path = out / "final.lstcn"
    save_checkpoint(model, final_path)
    checkpoints.append(final_path)
    return TrainResult(
        model=model,
        model_config=mcfg,
        metrics_path=metrics_path,
        checkpoints=checkpoints,
        final_checkpoint=final_path,
        iterations_run=iterations,
        interrupted=interrupted,
        label_names=subjects,
    )


def _prepare_clips(clips: np.ndarray, downsample: int) -> np.ndarray:
    """[B, T, H, W] uint8 -> [B, T, 1, h, w] float64 at model resolution."""
    b, t, h, w = clips.shape
    if downsample > 1:
        clips = downsample_frames(clips.reshape(b * t, h, w), downsample)
        clips = clips.reshape(b, t, h // downsample, w // downsample)
    return clips[:, :, None, :, :].astype(np.float64)


def parse_metrics(path) -> list[dict]:
    """Read a metrics.tsv back into dicts; tolerates truncated tails."""
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            continue
        rows.append(
            dict(
                iteration=int(parts[0]),
                triplet=float(parts[1]),
                focal=float(parts[2]),
                total=float(parts[3]),
                n_active=int(parts[4]),
                lr=float(parts[5]),
            )
        )
    return rows


# ---------------------------------------------------------------------------
# embeddings and rank-1 evaluation
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingTable:
    """Per-sequence part embeddings aligned with their index entries."""

    entries: list
    features: np.ndarray  # [n, n_parts, embed_dim], each part L2-normalized
    skipped: list[tuple[tuple, str]] = field(default_factory=list)


def extract_embeddings(
    model: LstcnModel,
    index: DatasetIndex,
    store: SequenceStore,
    frame_downsample: int = 1,
    min_frames: int = 3,
    group_size: int = 8,
) -> EmbeddingTable:
    """Embed every sequence (full length, eval mode); sequences shorter
    than ``min_frames`` are skipped and reported."""
    usable, skipped = [], []
    for e in index.entries:
        t = store.get(e).n_frames
        if t < min_frames:
            skipped.append((e.key, f"only {t} frames (< {min_frames})"))
        else:
            usable.append(e)

    feats_out = np.zeros((len(usable), model.config.n_parts, model.config.embed_dim))
    by_len: dict[int, list[int]] = {}
    for i, e in enumerate(usable):
        by_len.setdefault(store.get(e).n_frames, []).append(i)
    with no_grad():
        for t_len in sorted(by_len):
            idxs = by_len[t_len]
            for lo in range(0, len(idxs), group_size):
                chunk = idxs[lo : lo + group_size]
                clips = np.stack([store.get(usable[i]).frames for i in chunk])
                clips = _prepare_clips(clips, frame_downsample)
                feats, _, _ = model.forward_batch(Tensor(clips), "eval")
                feats_out[chunk] = feats.data
    norms = np.linalg.norm(feats_out, axis=2, keepdims=True)
    feats_out /= np.maximum(norms, 1e-12)
    return EmbeddingTable(entries=usable, features=feats_out, skipped=skipped)


@dataclass
class EvalResult:
    """Rank-1 accuracy per (condition, probe view, gallery view) cell."""

    cells: dict[tuple[str, int, int], tuple[int, int]]
    condition_aggregates: dict[str, float]
    aggregate: float
    errors: list[tuple[tuple, str]]
    include_identical_view: bool

    def accuracy(self, condition: str, probe_view: int, gallery_view: int) -> float:
        correct, total = self.cells[(condition, probe_view, gallery_view)]
        return correct / total if total else math.nan


def sequence_distances(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Summed per-part Euclidean distance matrix [n_probe, n_gallery]."""
    n_p, parts, _ = probe.shape
    n_g = gallery.shape[0]
    dist = np.zeros((n_p, n_g))
    for part in range(parts):
        a, b = probe[:, part, :], gallery[:, part, :]
        d2 = (
            (a * a).sum(1)[:, None] - 2.0 * (a @ b.T) + (b * b).sum(1)[None, :]
        )
        dist += np.sqrt(np.maximum(d2, 0.0))
    return dist


def rank1(
    gallery: EmbeddingTable,
    probe: EmbeddingTable,
    include_identical_view: bool = True,
) -> EvalResult:
    """Nearest-gallery matching tabulated per view pair and condition.

    Probes whose subject is absent from the gallery are counted as error
    rows, never silently dropped. Aggregates average the per-cell
    accuracies, optionally excluding identical-view pairs.
    """
    if not gallery.entries:
        raise ValueError("rank1 requires a nonempty gallery")
    g_subjects = {e.subject_id for e in gallery.entries}
    errors = [
        (e.key, "subject absent from gallery")
        for e in probe.entries
        if e.subject_id not in g_subjects
    ]
    ok = [i for i, e in enumerate(probe.entries) if e.subject_id in g_subjects]

    dist = sequence_distances(probe.features, gallery.features)
    g_views = sorted({e.view_deg for e in gallery.entries})
    p_views = sorted({e.view_deg for e in probe.entries})
    conditions = sorted({e.condition for e in probe.entries})
    g_view_idx = {
        v: np.array([i for i, e in enumerate(gallery.entries) if e.view_deg == v])
        for v in g_views
    }

    cells: dict[tuple[str, int, int], tuple[int, int]] = {}
    for cond in conditions:
        for pv in p_views:
            rows = [
                i for i in ok
                if probe.entries[i].condition == cond and probe.entries[i].view_deg == pv
            ]
            for gv in g_views:
                cols = g_view_idx[gv]
                correct = 0
                for i in rows:
                    j = cols[np.argmin(dist[i, cols])]
                    if gallery.entries[j].subject_id == probe.entries[i].subject_id:
                        correct += 1
                cells[(cond, pv, gv)] = (correct, len(rows))

    cond_aggs = {}
    for cond in conditions:
        accs = [
            c / t
            for (cc, pv, gv), (c, t) in cells.items()
            if cc == cond and t > 0 and (include_identical_view or pv != gv)
        ]
        cond_aggs[cond] = float(np.mean(accs)) if accs else math.nan
    valid = [v for v in cond_aggs.values() if not math.isnan(v)]
    return EvalResult(
        cells=cells,
        condition_aggregates=cond_aggs,
        aggregate=float(np.mean(valid)) if valid else math.nan,
        errors=errors,
        include_identical_view=include_identical_view,
    )


def eval_to_kv_lines(result: EvalResult) -> list[str]:
    lines = [f"aggregate = {result.aggregate:.6f}"]
    for cond in sorted(result.condition_aggregates):
        lines.append(f"aggregate.{cond} = {result.condition_aggregates[cond]:.6f}")
    for (cond, pv, gv) in sorted(result.cells):
        c, t = result.cells[(cond, pv, gv)]
        acc = c / t if t else float("nan")
        lines.append(f"cell.{cond}.p{pv:03d}.g{gv:03d} = {acc:.6f} ({c}/{t})")
    lines.append(f"include_identical_view = {str(result.include_identical_view).lower()}")
    lines.append(f"errors = {len(result.errors)}")
    for key, reason in result.errors:
        lines.append(f"error.{'/'.join(str(k) for k in key)} = {reason}")
    return lines


def eval_to_text(result: EvalResult) -> str:
    out = ["rank-1 accuracy by (condition, probe view, gallery view):"]
    for (cond, pv, gv) in sorted(result.cells):
        c, t = result.cells[(cond, pv, gv)]
        acc = 100.0 * c / t if t else float("nan")
        out.append(f"  {cond}  probe {pv:3d}  gallery {gv:3d}  {acc:6.2f}%  ({c}/{t})")
    for cond in sorted(result.condition_aggregates):
        out.append(f"mean {cond}: {100.0 * result.condition_aggregates[cond]:.2f}%")
    out.append(f"aggregate: {100.0 * result.aggregate:.2f}%")
    if result.errors:
        out.append(f"errors: {len(result.errors)} probe sequence(s) without gallery subject")
    return "\n".join(out)


def evaluate_model(model: LstcnModel, config: TrainConfig, data_dir=None) -> EvalResult:
    """Split the dataset per protocol, embed both sides, and run rank-1."""
    data_dir = Path(data_dir or config.data_dir)
    index = load_index(data_dir)
    store = SequenceStore(data_dir)
    if config.protocol == "synth":
        conds = tuple(sorted({e.condition for e in index.entries}))
        spec = SynthSplitSpec(
            gallery_conditions=("NM",) if "NM" in conds else conds,
            gallery_seq_indices=config.gallery_seq_indices,
            probe_conditions=conds,
            probe_seq_indices=config.probe_seq_indices or None,
        )
        gal_idx, probe_idx = make_eval_split(index, "synth", spec)
    else:
        gal_idx, probe_idx = make_eval_split(index, "casia")
    if config.fuse_for_eval:
        model.fuse()
    gal = extract_embeddings(model, gal_idx, store, config.frame_downsample)
    probe = extract_embeddings(model, probe_idx, store, config.frame_downsample)
    return rank1(gal, probe, include_identical_view=config.include_identical_view)


def write_eval_report(result: EvalResult, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt = out / "eval_report.txt"
    kv = out / "eval_report.kv"
    txt.write_text(eval_to_text(result) + "\n", encoding="utf-8")
    kv.write_text("\n".join(eval_to_kv_lines(result)) + "\n", encoding="utf-8")
    return txt, kv


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

ABLATION_DEFAULT_VARIANTS = (
    "static_only", "gsp_lstc", "h_only", "v_only", "gbsp_lstc", "full", "gstp_head",
)


@dataclass
class AblationRow:
    variant: str
    gbsp_mode: str
    head: str
    aggregate: float
    per_condition: dict[str, float]


def ablation_suite(
    base_config: TrainConfig,
    out_dir,
    variants=ABLATION_DEFAULT_VARIANTS,
    poolings: tuple[str, ...] = ("max",),
) -> list[AblationRow]:
    """Train and evaluate each requested variant/pooling combination."""
    from dataclasses import replace as dc_replace

    out = Path(out_dir)
    rows: list[AblationRow] = []
    for variant in variants:
        modes = ("max",) if variant == "static_only" else poolings
        for mode in modes:
            cfg = dc_replace(base_config, variant=variant, gbsp_mode=mode, head_mode=mode)
            run_dir = out / f"{variant}_{mode}"
            log.info("ablation run: %s (pooling %s)", variant, mode)
            result = train(cfg, run_dir)
            ev = evaluate_model(result.model, cfg)
            write_eval_report(ev, run_dir)
            rows.append(
                AblationRow(
                    variant=variant,
                    gbsp_mode=mode,
                    head=result.model_config.head,
                    aggregate=ev.aggregate,
                    per_condition=dict(ev.condition_aggregates),
                )
            )
    _write_ablation_table(rows, out)
    return rows


def _write_ablation_table(rows: list[AblationRow], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    conds = sorted({c for r in rows for c in r.per_condition})
    header = ["variant", "pooling", "head"] + [f"acc_{c}" for c in conds] + ["acc_mean"]
    lines = ["\t".join(header)]
    for r in rows:
        cells = [r.variant, r.gbsp_mode, r.head]
        cells += [f"{100.0 * r.per_condition.get(c, float('nan')):.2f}" for c in conds]
        cells.append(f"{100.0 * r.aggregate:.2f}")
        lines.append("\t".join(cells))
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_train_config(path, **overrides) -> TrainConfig:
    return load_config_file(TrainConfig, path, **overrides)


def train_config_lines(config: TrainConfig) -> list[str]:
    return to_kv_lines(config)


def desk_config(data_dir, variant: str = "full", seed: int = 42, **overrides) -> TrainConfig:
    """The tuned desk-scale run: minutes on one CPU core.

    Trains on sequences 1-3 of each subject/view and probes with the
    held-out sequence 4 against a gallery of sequences 1-2, so evaluation
    measures generalization to unseen walking bouts rather than recall of
    memorized ones.
    """
    from dataclasses import replace as dc_replace

    cfg = TrainConfig(
        data_dir=str(data_dir),
        variant=variant,
        seed=seed,
        train_seq_indices=(1, 2, 3),
        gallery_seq_indices=(1, 2),
        probe_seq_indices=(4,),
    )
    return dc_replace(cfg, **overrides) if overrides else cfg
