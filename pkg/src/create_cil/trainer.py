"""Task-by-task training of the extractor and the auto-encoder classifier."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .datasets import FixedTotal, LabeledDataset, PerClass, TaskProtocol, TaskStream, split_tasks
from .evaluation import (
    AEClassifier,
    NMEClassifier,
    PhaseResult,
    RunRecord,
    confusion_stats,
    non_target_error,
    old_new_accuracy,
)
from .losses import LossConfig, cr_loss, cross_entropy_logits, kd_loss, kd_loss_logits, total_loss
from .memory import ExemplarMemory, balanced_subset, update_memory
from .model import (
    AutoEncoderBank,
    ClassAutoEncoder,
    FeatureExtractor,
    LinearHead,
    append_classes,
    extract,
    param_count,
)
from .numerics import (
    CheckpointError,
    NonFiniteError,
    SgdState,
    Tensor,
    backward,
    load_tensors,
    no_grad,
    ops,
    save_tensors,
    sgd_step,
)

ABLATIONS = ("nme", "ae_only", "full")


class TrainingError(RuntimeError):
    def __init__(self, message: str, phase: int | None = None, epoch: int | None = None,
                 batch: int | None = None, component: str | None = None):
        self.message = message
        self.phase, self.epoch, self.batch, self.component = phase, epoch, batch, component
        where = ", ".join(
            f"{k}={v}" for k, v in (("phase", phase), ("epoch", epoch), ("batch", batch), ("component", component))
            if v is not None
        )
        super().__init__(f"{message} [{where}]" if where else message)


@dataclass
class ModelConfig:
    hidden: tuple[int, ...] = (256, 128)
    feature_dim: int = 64
    latent_dim: int = 32
    decoder_activation: str = "tanh"
    error_norm: str = "l2"


@dataclass
class TrainConfig:
    initial_epochs: int = 60
    incremental_epochs: int = 40
    finetune_epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.1
    # 0 means: same as learning_rate
    finetune_learning_rate: float = 0.0
    lr_gamma: float = 0.1
    lr_milestones: tuple[float, ...] = (0.6, 0.8)
    momentum: float = 0.9
    weight_decay: float = 2e-4
    # 0 means: use the memory quota
    finetune_per_class: int = 0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        for name in ("initial_epochs", "incremental_epochs", "finetune_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.finetune_learning_rate < 0:
            raise ValueError("finetune_learning_rate must be >= 0")


@dataclass
class LRSchedule:
    initial: float
    total_epochs: int
    gamma: float = 0.1
    milestones: Sequence[float] = (0.6, 0.8)

    def milestone_epochs(self) -> list[int]:
        return [int(round(m * self.total_epochs)) for m in self.milestones]


def lr_schedule_step(schedule: LRSchedule, epoch: int) -> float:
    """Milestone decay: initial * gamma ** (number of milestones reached)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    passed = sum(epoch >= m for m in schedule.milestone_epochs())
    return schedule.initial * schedule.gamma**passed


@dataclass
class EpochLog:
    phase: int
    stage: str
    epoch: int
    lr: float
    ce: float
    kd: float
    cr: float
    total: float
    accuracy: float

    def line(self) -> str:
        return (
            f"phase={self.phase} stage={self.stage} epoch={self.epoch} lr={self.lr:.6g} "
            f"ce={self.ce:.6f} kd={self.kd:.6f} cr={self.cr:.6f} total={self.total:.6f} acc={self.accuracy:.2f}"
        )


@dataclass
class ContinualState:
    extractor: FeatureExtractor
    head: AutoEncoderBank | LinearHead
    memory: ExemplarMemory
    old_extractor: FeatureExtractor | None = None
    old_head: AutoEncoderBank | LinearHead | None = None
    phase: int = 0
    seed: int = 0

    @property
    def seen_classes(self) -> int:
        return self.head.num_classes

    @property
    def uses_autoencoders(self) -> bool:
        return isinstance(self.head, AutoEncoderBank)


def init_state(input_dim: int, model: ModelConfig, memory: ExemplarMemory, seed: int, ablation: str = "full") -> ContinualState:
    if ablation not in ABLATIONS:
        raise ValueError(f"ablation must be one of {ABLATIONS}, got {ablation!r}")
    extractor = FeatureExtractor.create(input_dim, model.hidden, model.feature_dim, seed)
    if ablation == "nme":
        head = LinearHead(model.feature_dim)
    else:
        head = AutoEncoderBank(model.feature_dim, model.latent_dim, model.decoder_activation, model.error_norm)
    return ContinualState(extractor, head, memory, seed=seed)


def _batches(rng: np.random.Generator, n: int, size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i : i + size] for i in range(0, n, size)]
    # a singleton batch has no contrastive pairs; fold it into its neighbour
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def _head_outputs(head, h: Tensor, alpha: float):
    if isinstance(head, AutoEncoderBank):
        eps, latents = head.forward(h)
        return ops.scale(eps, -alpha), eps, latents
    return head.logits(h), None, None


def _old_outputs(state: ContinualState, x: np.ndarray, alpha: float) -> np.ndarray | None:
    """Snapshot outputs: reconstruction errors for the bank, logits for a linear head."""
    if state.old_head is None or state.old_head.num_classes == 0:
        return None
    with no_grad():
        h = extract(state.old_extractor, Tensor(x))
        logits, eps, _ = _head_outputs(state.old_head, h, alpha)
    return (eps if eps is not None else logits).data


class _StepLoss:
    """Computes the total objective on one batch, labelling failures by component."""

    def __init__(self, state: ContinualState, cfg: LossConfig):
        self.state = state
        self.cfg = cfg

    def __call__(self, h: Tensor, y: np.ndarray, old_out: np.ndarray | None):
        cfg = self.cfg
        component = "forward"
        try:
            logits, eps, latents = _head_outputs(self.state.head, h, cfg.alpha)
            component = "ce"
            ce = cross_entropy_logits(logits, y)
            kd = None
            if old_out is not None:
                component = "kd"
                cols = np.arange(old_out.shape[1])
                if eps is not None:
                    kd = kd_loss(ops.index_select(eps, cols, axis=1), old_out, cfg.alpha, cfg.tau_d)
                else:
                    kd = kd_loss_logits(ops.index_select(logits, cols, axis=1), old_out, cfg.tau_d)
            cr = None
            if latents is not None and cfg.lam > 0:
                component = "cr"
                cr = cr_loss(latents, y, eps=eps.data, config=cfg)
            component = "total"
            total = total_loss(ce, kd, cr, cfg.lam)
        except (NonFiniteError, FloatingPointError) as exc:
            raise TrainingError(f"non-finite loss: {exc}", component=component) from exc
        hits = int(np.sum(np.argmax(logits.data, axis=1) == y))
        parts = (ce.item(), 0.0 if kd is None else kd.item(), 0.0 if cr is None else cr.item())
        return total, parts, hits


def _run_epochs(
    state: ContinualState,
    stage: str,
    x: np.ndarray,
    y: np.ndarray,
    old_out: np.ndarray | None,
    params: list[Tensor],
    epochs: int,
    lr: float,
    config: TrainConfig,
    frozen_features: np.ndarray | None,
    rng: np.random.Generator,
    progress: Callable[[EpochLog], None] | None,
) -> list[EpochLog]:
    schedule = LRSchedule(lr, epochs, config.lr_gamma, config.lr_milestones)
    opt = SgdState(lr, config.momentum, config.weight_decay)
    step_loss = _StepLoss(state, config.loss)
    logs = []
    for epoch in range(epochs):
        opt.learning_rate = lr_schedule_step(schedule, epoch)
        sums = np.zeros(4)
        hits = 0
        batches = _batches(rng, len(y), config.batch_size)
        for b, rows in enumerate(batches):
            try:
                if frozen_features is not None:
                    h = Tensor(frozen_features[rows])
                else:
                    h = extract(state.extractor, Tensor(x[rows]))
                total, parts, nhit = step_loss(h, y[rows], None if old_out is None else old_out[rows])
            except TrainingError as exc:
                raise TrainingError(exc.message, state.phase, epoch, b, exc.component) from exc
            except (NonFiniteError, FloatingPointError) as exc:
                raise TrainingError(f"non-finite loss: {exc}", state.phase, epoch, b, "forward") from exc
            grads = backward(total, params)
            sgd_step(opt, params, grads)
            sums += np.array([*parts, total.item()])
            hits += nhit
        means = sums / len(batches)
        log = EpochLog(state.phase, stage, epoch, opt.learning_rate, *means, accuracy=100.0 * hits / len(y))
        logs.append(log)
        if progress is not None:
            progress(log)
    return logs


def train_task(
    state: ContinualState,
    task_classes: Sequence[int],
    train: LabeledDataset,
    config: TrainConfig,
    progress: Callable[[EpochLog], None] | None = None,
) -> list[EpochLog]:
    """Learn one task in place on ``state``; returns the per-epoch log."""
    task_classes = [int(c) for c in task_classes]
    if len(train) == 0 or not task_classes:
        raise TrainingError("empty task", state.phase + 1)
    if min(task_classes) < state.seen_classes:
        raise TrainingError(f"task classes {task_classes} overlap the {state.seen_classes} seen classes")
    expected = list(range(state.seen_classes, state.seen_classes + len(task_classes)))
    if task_classes != expected:
        raise TrainingError(f"task classes must be the next ids {expected}, got {task_classes}")

    first = state.phase == 0
    state.phase += 1
    rng = np.random.default_rng([config.seed, state.phase, 0x7A5C])

    # (1) freeze a copy of the previous model for distillation
    if not first:
        state.old_extractor = state.extractor.clone(trainable=False)
        state.old_head = state.head.clone(trainable=False)
    # (2) grow the classifier
    if isinstance(state.head, AutoEncoderBank):
        append_classes(state.head, len(task_classes), seed=config.seed)
    else:
        state.head.append_classes(len(task_classes), seed=config.seed)
    # (3) current data plus replayed exemplars
    mem_x, mem_y = state.memory.as_arrays()
    if len(mem_y):
        x = np.concatenate([train.samples, mem_x])
        y = np.concatenate([train.labels, mem_y])
    else:
        x, y = train.samples, train.labels
    old_out = None if first else _old_outputs(state, x, config.loss.alpha)

    # (4) joint training of extractor and every auto-encoder
    params = state.extractor.parameters() + state.head.parameters()
    epochs = config.initial_epochs if first else config.incremental_epochs
    logs = _run_epochs(state, "train", x, y, old_out, params, epochs, config.learning_rate,
                       config, None, rng, progress)

    # (5) class-balanced fine-tuning of the classifier on a frozen extractor
    if not first:
        per_class = config.finetune_per_class or state.memory.quota(state.seen_classes)
        fx, fy = balanced_subset(state.memory, train, per_class, seed=config.seed + state.phase)
        feats = _features(state.extractor, fx)
        fold = _old_outputs(state, fx, config.loss.alpha)
        logs += _run_epochs(state, "finetune", fx, fy, fold, state.head.parameters(), config.finetune_epochs,
                            config.finetune_learning_rate or config.learning_rate, config, feats, rng, progress)

    # (6) refresh memory
    update_memory(
        state.memory,
        [(c, train.samples[train.labels == c], train.indices[train.labels == c]) for c in task_classes],
        state.extractor,
    )
    return logs


def _features(extractor: FeatureExtractor, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return extract(extractor, Tensor(x)).data


def classifier_for(state: ContinualState, alpha: float):
    if isinstance(state.head, AutoEncoderBank):
        return AEClassifier(state.extractor, state.head, alpha)
    return NMEClassifier(state.extractor, state.memory, state.seen_classes)


def evaluate_phase(state: ContinualState, stream: TaskStream, phase: int, alpha: float, boundary: int) -> PhaseResult:
    test = stream.cumulative_test(phase)
    model = classifier_for(state, alpha)
    on = old_new_accuracy(model, test, boundary)
    conf = confusion_stats(model, test, alpha) if model.num_classes >= 2 else None
    nte = non_target_error(model, test) if isinstance(model, AEClassifier) and model.num_classes >= 2 else None
    return PhaseResult(
        phase=phase,
        classes_seen=stream.classes_seen(phase),
        accuracy=on.total,
        old_acc=on.old,
        new_acc=on.new,
        confusion=conf,
        param_counts=param_count(state.extractor, state.head)._asdict(),
        non_target_error=nte,
    )


def run_experiment(
    train: LabeledDataset,
    test: LabeledDataset,
    protocol: TaskProtocol,
    config: TrainConfig,
    model: ModelConfig | None = None,
    ablation: str = "full",
    selection: str = "herding",
    progress: Callable[[EpochLog], None] | None = None,
    on_phase: Callable[[ContinualState, PhaseResult], None] | None = None,
    config_echo: dict | None = None,
    max_phases: int | None = None,
) -> RunRecord:
    """Train over the whole task stream, evaluating after every phase."""
    model = model or ModelConfig()
    if ablation not in ABLATIONS:
        raise ValueError(f"ablation must be one of {ABLATIONS}, got {ablation!r}")
    if ablation == "ae_only":
        config = replace(config, loss=replace(config.loss, lam=0.0))
    stream = split_tasks(train, test, protocol, config.seed)
    memory = ExemplarMemory(protocol.memory_policy, selection, config.seed)
    state = init_state(train.dim, model, memory, config.seed, ablation)
    record = RunRecord(config=dict(config_echo or {}), ablation=ablation)
    for t, task in enumerate(stream.tasks[:max_phases], start=1):
        start = time.perf_counter()
        boundary = state.seen_classes
        train_task(state, task.classes, task.train, config, progress)
        result = evaluate_phase(state, stream, t, config.loss.alpha, boundary)
        result.wall_clock = time.perf_counter() - start
        record.phases.append(result)
        if on_phase is not None:
            on_phase(state, result)
    return record


# -- checkpoints ---------------------------------------------------------------------

CHECKPOINT_KIND = "create-phase-checkpoint"


def save_checkpoint(path, state: ContinualState, model: ModelConfig, extra: dict | None = None) -> None:
    """Extractor, classifier and memory after a phase, with enough meta to rebuild them."""
    tensors = {k: p.data for k, p in state.extractor.named_parameters().items()}
    tensors.update({k: p.data for k, p in state.head.named_parameters().items()})
    tensors.update(state.memory.state_tensors())
    policy = state.memory.policy
    meta = {
        "kind": CHECKPOINT_KIND,
        "phase": state.phase,
        "seed": state.seed,
        "input_dim": state.extractor.input_dim,
        "num_classes": state.seen_classes,
        "head": "autoencoders" if state.uses_autoencoders else "linear",
        "model": {
            "hidden": list(model.hidden),
            "feature_dim": model.feature_dim,
            "latent_dim": model.latent_dim,
            "decoder_activation": model.decoder_activation,
            "error_norm": model.error_norm,
        },
        "memory": {
            "policy": type(policy).__name__,
            "size": policy.count if isinstance(policy, PerClass) else policy.budget,
            "selection": state.memory.selection,
        },
        **(extra or {}),
    }
    save_tensors(path, tensors, meta)


def load_checkpoint(path) -> tuple[ContinualState, ModelConfig, dict]:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path}: not a phase checkpoint (kind={meta.get('kind')!r})")
    try:
        m = meta["model"]
        model = ModelConfig(tuple(m["hidden"]), m["feature_dim"], m["latent_dim"], m["decoder_activation"], m["error_norm"])
        layers = len(model.hidden) + 1
        extractor = FeatureExtractor(
            [Tensor(tensors[f"extractor/{i}/w"]) for i in range(layers)],
            [Tensor(tensors[f"extractor/{i}/b"]) for i in range(layers)],
        )
        n = int(meta["num_classes"])
        if meta["head"] == "autoencoders":
            head = AutoEncoderBank(model.feature_dim, model.latent_dim, model.decoder_activation, model.error_norm)
            head.autoencoders = [
                ClassAutoEncoder(
                    *(Tensor(tensors[f"ae/{c}/{k}"]) for k in ("enc_w", "enc_b", "dec_w", "dec_b")),
                    model.decoder_activation,
                )
                for c in range(n)
            ]
        else:
            head = LinearHead(model.feature_dim, Tensor(tensors["head/w"]), Tensor(tensors["head/b"]))
        mem = meta["memory"]
        policy = PerClass(mem["size"]) if mem["policy"] == "PerClass" else FixedTotal(mem["size"])
        memory = ExemplarMemory.from_state_tensors(tensors, policy, mem["selection"], meta["seed"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: checkpoint is missing entry {exc}") from None
    state = ContinualState(extractor, head, memory, phase=int(meta["phase"]), seed=int(meta["seed"]))
    return state, model, meta
