"""Training loop, gradients and checkpoint I/O for PoserNet."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .. import graph as vg
from ..se3 import InvalidInputError
from .loss import LossBreakdown, loss_tensor, orientation_terms, direction_terms, per_graph_weights
from .model import GraphArrays, Mlp, PoserNetParams, collate, forward, init_embeddings

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "median_rot_err_deg", "median_tr_dir_err_deg")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    depth: int = 2
    alpha: float = 0.1
    learning_rate: float = 1e-3
    scheduler_patience: int = 3
    scheduler_factor: float = 0.1
    epochs: int = 100
    batch_size: int = 8
    rng_seed: int = 0
    hidden: int = 32
    output_activation: bool = False
    pixel_scale: float = 1000.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        # depth 0 is allowed for pass-through checkpoints; train() needs >= 1
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if min(self.epochs, self.batch_size, self.hidden) < 1:
            raise ValueError("epochs, batch_size and hidden must be >= 1")
        if not 0 < self.scheduler_factor <= 1:
            raise ValueError("scheduler_factor must lie in (0, 1]")


@dataclass
class TrainResult:
    params: PoserNetParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def loss_and_grads(params: PoserNetParams, arrays: GraphArrays, depth: int, alpha: float):
    """Loss breakdown plus gradients of the total w.r.t. every parameter array."""
    if arrays.gt_quat is None:
        raise InvalidInputError("graphs need ground truth for training")
    result = forward(params, arrays, depth)
    weights = per_graph_weights(arrays.edge_graph, arrays.num_graphs)
    total, parts = loss_tensor(result.edges, arrays.gt_quat, arrays.gt_dir, weights, alpha)
    total.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.value) for t in result.param_tensors]
    return parts, grads


def backward(params: PoserNetParams, arrays: GraphArrays, depth: int, alpha: float = 0.1) -> list[np.ndarray]:
    return loss_and_grads(params, arrays, depth, alpha)[1]


def evaluate(params: PoserNetParams, arrays: GraphArrays, depth: int, alpha: float):
    """Loss breakdown and per-edge rotation / direction errors in degrees."""
    result = forward(params, arrays, depth)
    weights = per_graph_weights(arrays.edge_graph, arrays.num_graphs)
    _, parts = loss_tensor(result.edges, arrays.gt_quat, arrays.gt_dir, weights, alpha)
    h = result.edges.value
    rot = np.degrees(orientation_terms(h[:, 3:], arrays.gt_quat)[0])
    tdir = np.degrees(direction_terms(h[:, :3], arrays.gt_dir)[0])
    return parts, rot, tdir


class Adam:
    def __init__(self, params: PoserNetParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.step_count = 0

    def step(self, params: PoserNetParams, grads: list[np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for a, g, m, v in zip(params.arrays(), grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer: Adam, patience: int = 3, factor: float = 0.1):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> None:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.optimizer.lr *= self.factor
            self.bad_epochs = 0


def prepare(graphs: list[vg.ViewGraph], pixel_scale: float = 1000.0) -> list[GraphArrays]:
    return [init_embeddings(g, pixel_scale) for g in graphs]


def train(
    train_graphs: list[vg.ViewGraph],
    val_graphs: list[vg.ViewGraph],
    config: TrainConfig = TrainConfig(),
    init_params: PoserNetParams | None = None,
) -> TrainResult:
    """Adam on the per-graph mean loss; returns the best-validation parameters."""
    if config.depth < 1:
        raise ValueError("training needs depth >= 1")
    if not train_graphs or not val_graphs:
        raise ValueError("need non-empty training and validation sets")
    train_arrays = prepare(train_graphs, config.pixel_scale)
    val_batch = collate(prepare(val_graphs, config.pixel_scale))

    params = init_params.copy() if init_params is not None else PoserNetParams.init(
        config.rng_seed, config.hidden, config.output_activation
    )
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    sched = PlateauScheduler(opt, config.scheduler_patience, config.scheduler_factor)
    rng = np.random.default_rng(config.rng_seed)

    parts, rot, tdir = evaluate(params, val_batch, config.depth, config.alpha)
    initial_val = parts.total
    history = [_history_row(0, np.nan, parts.total, opt.lr, rot, tdir)]
    best = (parts.total, params.copy(), 0)
    diverged_streak = 0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_arrays))
        losses, sizes = [], []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            batch = collate([train_arrays[i] for i in idx])
            parts, grads = loss_and_grads(params, batch, config.depth, config.alpha)
            opt.step(params, grads)
            losses.append(parts.total)
            sizes.append(len(idx))
        train_loss = float(np.average(losses, weights=sizes))

        parts, rot, tdir = evaluate(params, val_batch, config.depth, config.alpha)
        history.append(_history_row(epoch, train_loss, parts.total, opt.lr, rot, tdir))
        log.info("epoch %d train %.4f val %.4f lr %.2g", epoch, train_loss, parts.total, opt.lr)
        if parts.total < best[0]:
            best = (parts.total, params.copy(), epoch)
        sched.step(parts.total)

        diverged_streak = diverged_streak + 1 if parts.total > 10.0 * initial_val else 0
        if diverged_streak >= 3:
            raise TrainingDivergedError(f"validation loss above 10x initial for 3 epochs (epoch {epoch})", history)

    return TrainResult(best[1], history, best[2])


def _history_row(epoch, train_loss, val_loss, lr, rot, tdir) -> dict:
    return {
        "epoch": epoch,
        "train_loss": float(train_loss),
        "val_loss": float(val_loss),
        "lr": float(lr),
        "median_rot_err_deg": float(np.median(rot)),
        "median_tr_dir_err_deg": float(np.median(tdir)),
    }


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# checkpoints


def _mlp_doc(mlp: Mlp) -> dict:
    return {
        "output_activation": mlp.output_activation,
        "layers": [
            {"weight": {"shape": list(W.shape), "data": W.ravel().tolist()}, "bias": {"shape": list(b.shape), "data": b.tolist()}}
            for W, b in zip(mlp.weights, mlp.biases)
        ],
    }


def _mlp_from_doc(doc: dict) -> Mlp:
    weights = [np.array(l["weight"]["data"], dtype=float).reshape(l["weight"]["shape"]) for l in doc["layers"]]
    biases = [np.array(l["bias"]["data"], dtype=float).reshape(l["bias"]["shape"]) for l in doc["layers"]]
    return Mlp(weights, biases, bool(doc["output_activation"]))


def checkpoint_dumps(params: PoserNetParams, config: TrainConfig) -> str:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "rng_seed": config.rng_seed,
        "params": {"edge": _mlp_doc(params.edge), "node": _mlp_doc(params.node)},
    }
    return json.dumps(doc) + "\n"


def checkpoint_loads(text: str) -> tuple[PoserNetParams, TrainConfig]:
    doc = json.loads(text)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version mismatch: {doc.get('version')!r}")
    known = {f.name for f in fields(TrainConfig)}
    config = TrainConfig(**{k: v for k, v in doc["config"].items() if k in known})
    params = PoserNetParams(_mlp_from_doc(doc["params"]["edge"]), _mlp_from_doc(doc["params"]["node"]))
    return params, config


def save_checkpoint(path, params: PoserNetParams, config: TrainConfig) -> None:
    with open(path, "w") as fh:
        fh.write(checkpoint_dumps(params, config))


def load_checkpoint(path) -> tuple[PoserNetParams, TrainConfig]:
    with open(path) as fh:
        return checkpoint_loads(fh.read())


__all__ = [
    "Adam",
    "LossBreakdown",
    "PlateauScheduler",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "backward",
    "evaluate",
    "loss_and_grads",
    "train",
]
