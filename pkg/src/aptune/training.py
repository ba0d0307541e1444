"""Frozen-backbone training of prefixes, gates and the task head."""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import numerics as nx
from .data import CLS_ID, SEQUENCE, SPECIALS, TAGGING, Batch, Dataset, Example, collate
from .gating import PrefixGates
from .metrics import Metrics, accuracy, span_counts
from .numerics import ContractViolation, Tape, Tensor
from .transformer import Backbone, EncoderState, ModelConfig, encode

LR_GRID = (5e-3, 7e-3, 1e-2, 1e-4)
EPOCH_GRID = (20, 40, 60, 80, 100, 120)
BATCH_GRID = (8, 16, 32)
SEEDS = (11, 21, 42, 87, 100)

# independent PCG64 streams derived from one seed; stream 0 initialises prefixes
_STREAM_HEAD, _STREAM_ORDER, _STREAM_DROPOUT = 1, 2, 3

DTYPES = {"f32": np.float32, "f64": np.float64}


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng([seed, which])


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 16
    seed: int = 42
    mode: str = "apt"
    precision: str = "f32"
    lr_grid: tuple[float, ...] | None = None
    max_steps: int | None = None

    def __post_init__(self):
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs nonnegative")

    @property
    def dtype(self):
        return DTYPES[self.precision]


@dataclass
class TaskHead:
    """Linear classifier over the final-layer-normed hidden state.

    Sequence heads read the first token; tagging heads read every token.
    """

    kind: str
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, kind: str, model_dim: int, num_labels: int, seed: int, dtype=np.float32) -> "TaskHead":
        rng = stream(seed, _STREAM_HEAD)
        w = Tensor(rng.normal(0.0, 0.02, (model_dim, num_labels)), requires_grad=True, dtype=dtype)
        b = Tensor(np.zeros(num_labels), requires_grad=True, dtype=dtype)
        return cls(kind, w, b)

    @property
    def num_labels(self) -> int:
        return self.weight.shape[1]

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "head.weight", self.weight
        yield "head.bias", self.bias


class PrefixModel:
    """Frozen backbone + prefix/gate bank + task head."""

    def __init__(self, config: ModelConfig, backbone: Backbone, gates: PrefixGates, head: TaskHead):
        self.config = config
        self.backbone = backbone
        self.gates = gates
        self.head = head

    @classmethod
    def build(
        cls,
        config: ModelConfig,
        backbone: Backbone,
        task_kind: str,
        num_labels: int,
        seed: int,
        dtype=np.float32,
    ) -> "PrefixModel":
        if backbone.tok_emb.dtype != dtype:
            backbone = backbone.astype(dtype)
        freeze_base(backbone)
        gates = PrefixGates.init(config, seed, dtype=dtype)
        head = TaskHead.init(task_kind, config.model_dim, num_labels, seed, dtype=dtype)
        return cls(config, backbone, gates, head)

    @property
    def task_kind(self) -> str:
        return self.head.kind

    @property
    def mode(self) -> str:
        return self.config.mode

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.backbone.named_tensors()
        yield from self.gates.named_tensors()
        yield from self.head.named_tensors()

    def trainable(self) -> dict[str, Tensor]:
        return {name: t for name, t in self.named_tensors() if t.requires_grad}

    def encode(self, batch: Batch, rng: np.random.Generator | None = None) -> EncoderState:
        return encode(batch.ids, self.config, self.backbone, self.gates, batch.mask, rng)

    def logits(self, batch: Batch, rng: np.random.Generator | None = None) -> tuple[Tensor, EncoderState]:
        state = self.encode(batch, rng)
        h = nx.layer_norm(state.last, self.backbone.final_gain, self.backbone.final_bias)
        if self.task_kind == SEQUENCE:
            h = nx.take(h, 0, axis=1)
        else:
            b, s, d = h.shape
            h = nx.reshape(h, (b * s, d))
        return nx.add(nx.matmul(h, self.head.weight), self.head.bias), state

    def loss(self, batch: Batch, rng: np.random.Generator | None = None) -> Tensor:
        logits, _ = self.logits(batch, rng)
        return nx.cross_entropy(logits, batch.labels.reshape(-1))

    def predict(self, batch: Batch) -> np.ndarray:
        logits, _ = self.logits(batch)
        pred = logits.data.argmax(axis=-1)
        if self.task_kind == TAGGING:
            pred = pred.reshape(batch.ids.shape)
        return pred


def freeze_base(backbone: Backbone) -> None:
    for _, t in backbone.named_tensors():
        t.requires_grad = False
        t.grad = None


class Adam:
    """Adam with bias correction and no weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def train_step(batch: Batch, model: PrefixModel, optim: Adam, rng: np.random.Generator | None = None) -> float:
    if batch is None or len(batch) == 0:
        raise ValueError("train_step needs a nonempty batch")
    optim.zero_grad()
    with Tape() as tape:
        loss = model.loss(batch, rng)
    tape.backward(loss)
    optim.step()
    return float(loss.data)


def iter_batches(examples: Sequence[Example], batch_size: int, task_kind: str, rng=None) -> Iterator[Batch]:
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield collate([examples[i] for i in order[start:start + batch_size]], task_kind)


LogFn = Callable[[int, float, float, str], None]


def fit(model: PrefixModel, examples: Sequence[Example], config: TrainConfig, log: LogFn | None = None) -> list[float]:
    """Train for ``config.epochs`` epochs, or exactly ``config.max_steps`` steps when set."""
    if not examples:
        raise ValueError("no training examples")
    optim = Adam(model.trainable(), config.learning_rate)
    order_rng = stream(config.seed, _STREAM_ORDER)
    drop_rng = stream(config.seed, _STREAM_DROPOUT) if model.config.dropout > 0 else None
    losses: list[float] = []
    epoch = 0
    while config.max_steps is not None or epoch < config.epochs:
        for batch in iter_batches(examples, config.batch_size, model.task_kind, order_rng):
            loss = train_step(batch, model, optim, drop_rng)
            losses.append(loss)
            if log is not None:
                log(len(losses), loss, config.learning_rate, model.mode)
            if config.max_steps is not None and len(losses) >= config.max_steps:
                return losses
        epoch += 1
    return losses


def evaluate(model: PrefixModel, dataset: Dataset, split: str = "dev", batch_size: int = 64) -> Metrics:
    if dataset.task_kind != model.task_kind:
        raise ContractViolation(f"{dataset.task_kind} dataset cannot be scored with a {model.task_kind} head")
    examples = dataset.splits[split]
    if model.task_kind == SEQUENCE:
        gold, pred = [], []
        for batch in iter_batches(examples, batch_size, SEQUENCE):
            gold.extend(batch.labels.tolist())
            pred.extend(model.predict(batch).tolist())
        return Metrics(accuracy=accuracy(gold, pred))
    names = dataset.label_names
    gold_tags, pred_tags = [], []
    for batch in iter_batches(examples, batch_size, TAGGING):
        pred = model.predict(batch)
        for r in range(len(batch)):
            keep = batch.labels[r] >= 0
            gold_tags.append([names[t] for t in batch.labels[r][keep]])
            pred_tags.append([names[t] for t in pred[r][keep]])
    counts = span_counts(gold_tags, pred_tags)
    return Metrics(span_micro_f1=counts.f1, precision=counts.precision, recall=counts.recall)


# ---------------------------------------------------------------------------
# stand-in "pre-trained" backbone

PRETRAIN_STEPS = 1000
_pretrain_cache: dict[tuple, Backbone] = {}
_pretrain_lock = threading.Lock()


def pretrain_backbone(
    config: ModelConfig,
    seed: int,
    steps: int = PRETRAIN_STEPS,
    batch_size: int = 32,
    lr: float = 1e-3,
) -> Backbone:
    """Random init followed by a short task-agnostic pre-training run.

    Sentences are uniform random word sequences; the first-token state must
    predict the bag of words in its sentence. Returns a frozen f32 backbone.
    Results are cached per (architecture, seed, steps).
    """
    key = (config.num_layers, config.num_heads, config.model_dim, config.ffn_dim,
           config.vocab_size, config.max_seq_len, seed, steps, batch_size, lr)
    with _pretrain_lock:
        if key in _pretrain_cache:
            return _pretrain_cache[key]
    backbone = Backbone.init(config, seed)
    params = dict(backbone.named_tensors())
    for t in params.values():
        t.requires_grad = True
    rng = stream(seed, _STREAM_ORDER)
    params["decoder"] = Tensor(
        rng.normal(0.0, 0.02, (config.model_dim, config.vocab_size)), requires_grad=True, dtype=np.float32
    )
    optim = Adam(params, lr)
    first_word = len(SPECIALS)
    max_words = min(10, config.max_seq_len - 1)
    if config.vocab_size <= first_word or max_words < 1:
        freeze_base(backbone)
        return backbone
    for _ in range(steps):
        lengths = rng.integers(min(4, max_words), max_words + 1, size=batch_size)
        ids = np.zeros((batch_size, int(lengths.max()) + 1), dtype=np.int64)
        mask = np.zeros(ids.shape, dtype=bool)
        ids[:, 0] = CLS_ID
        rows, targets = [], []
        for r, n in enumerate(lengths):
            words = rng.integers(first_word, config.vocab_size, size=n)
            ids[r, 1:n + 1] = words
            mask[r, :n + 1] = True
            rows.extend([r] * int(n))
            targets.extend(words.tolist())
        optim.zero_grad()
        with Tape() as tape:
            state = encode(ids, config, backbone, None, mask)
            h = nx.layer_norm(state.last, backbone.final_gain, backbone.final_bias)
            logits = nx.matmul(nx.take(h, 0, axis=1), params["decoder"])
            loss = nx.cross_entropy(nx.embedding(logits, np.asarray(rows)), np.asarray(targets))
        tape.backward(loss)
        optim.step()
    freeze_base(backbone)
    with _pretrain_lock:
        _pretrain_cache[key] = backbone
    return backbone


# ---------------------------------------------------------------------------
# multi-arm experiments


def format_mean_std(values: Sequence[float], scale: float = 100.0) -> str:
    """``mean_std`` with one decimal, metrics scaled to percent."""
    arr = np.asarray(values, dtype=np.float64) * scale
    return f"{arr.mean():.1f}_{arr.std():.1f}"


@dataclass
class RunResult:
    arm: str
    seed: int
    metric: float
    learning_rate: float
    losses: list[float] = field(default_factory=list, repr=False)


@dataclass
class ExperimentReport:
    metric_name: str
    runs: list[RunResult]

    def arms(self) -> list[str]:
        seen: list[str] = []
        for r in self.runs:
            if r.arm not in seen:
                seen.append(r.arm)
        return seen

    def values(self, arm: str) -> list[float]:
        return [r.metric for r in self.runs if r.arm == arm]

    def summary(self, arm: str) -> tuple[float, float]:
        vals = np.asarray(self.values(arm), dtype=np.float64)
        return float(vals.mean()), float(vals.std())

    def mean_std(self, arm: str) -> str:
        return format_mean_std(self.values(arm))

    def to_csv(self) -> str:
        lines = ["arm,seed,metric,mean,std"]
        for r in self.runs:
            mean, std = self.summary(r.arm)
            lines.append(f"{r.arm},{r.seed},{r.metric:.17g},{mean:.17g},{std:.17g}")
        return "\n".join(lines) + "\n"


def _run_one(
    arm: str,
    seed: int,
    config: TrainConfig,
    model_config: ModelConfig,
    backbone: Backbone,
    dataset: Dataset,
    eval_split: str,
    log: LogFn | None,
) -> RunResult:
    cfg = model_config.with_mode(arm)
    grid = config.lr_grid or (config.learning_rate,)
    best = None
    for lr in grid:
        run_cfg = TrainConfig(lr, config.epochs, config.batch_size, seed, arm, config.precision, None, config.max_steps)
        model = PrefixModel.build(cfg, backbone, dataset.task_kind, dataset.num_labels, seed, config.dtype)
        losses = fit(model, dataset.train, run_cfg, log)
        score = evaluate(model, dataset, "dev").main if len(grid) > 1 else None
        if best is None or score > best[0]:
            best = (score, lr, model, losses)
    _, lr, model, losses = best
    return RunResult(arm, seed, evaluate(model, dataset, eval_split).main, lr, losses)


def run_experiment(
    config: TrainConfig,
    dataset: Dataset,
    arms: Sequence[str],
    model_config: ModelConfig,
    backbone: Backbone,
    seeds: Sequence[int] | None = None,
    eval_split: str = "dev",
    max_workers: int = 1,
    log: LogFn | None = None,
) -> ExperimentReport:
    """Train every arm on every seed with identical data order per seed.

    With ``config.lr_grid`` set, each run keeps the learning rate with the best
    dev metric.
    """
    if not arms:
        raise ValueError("run_experiment needs at least one arm")
    seeds = list(seeds) if seeds else [config.seed]
    jobs = [(arm, seed) for arm in arms for seed in seeds]

    def job(item):
        arm, seed = item
        return _run_one(arm, seed, config, model_config, backbone, dataset, eval_split, log)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            runs = list(pool.map(job, jobs))
    else:
        runs = [job(j) for j in jobs]
    metric = "accuracy" if dataset.task_kind == SEQUENCE else "span_micro_f1"
    return ExperimentReport(metric, runs)
