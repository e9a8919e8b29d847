"""Training loop, checkpointing, and evaluation for the synthetic task.

The optimizer is Adam under an inverse-square-root schedule with linear
warmup (1000 steps) and a peak scaled by d_model**-0.5.  Training runs in
float32; checkpoints store float32 payloads bit-exactly.  All randomness
derives from the config seeds, so equal seeds give byte-identical runs.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .ctc import CTCHead, InfeasibleTargetError
from .data import Utterance, generate_dataset
from .encoder import Encoder, LayerTrace
from .metrics import corpus_rate
from .objective import CTCHeads, LossBreakdown, plan_step, total_loss, eval_decode
from .tensor import Tape, Tensor, scale

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ICTC"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-9
WARMUP_STEPS = 1000
PEAK_LR_FACTOR = 3.0


class TrainingDiverged(RuntimeError):
    pass


# --- model -------------------------------------------------------------------

class Model:
    """Encoder plus CTC output heads, with a flat named-parameter view."""

    def __init__(self, encoder: Encoder, heads: CTCHeads):
        self.encoder = encoder
        self.heads = heads

    @classmethod
    def from_run_config(cls, cfg: RunConfig, dtype=np.float32) -> "Model":
        encoder = Encoder.build(cfg.encoder_config(), dtype=dtype)
        head_rng = np.random.default_rng([cfg.seed, 7])
        final = CTCHead.build(cfg.d_model, cfg.task.vocab, head_rng, dtype=dtype)
        if cfg.separate_heads:
            inter = CTCHead.build(cfg.d_model, cfg.task.vocab, head_rng, dtype=dtype)
            heads = CTCHeads(final, inter)
        else:
            heads = CTCHeads.shared(final)
        return cls(encoder, heads)

    def parameters(self) -> dict[str, Tensor]:
        named = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        named.update(self.heads.parameters())
        return named

    def trace(self, features: np.ndarray, mode: str = "eval",
              rng: np.random.Generator | None = None) -> LayerTrace:
        x0 = Tensor(np.asarray(features, dtype=self.encoder.dtype))
        return self.encoder.forward(x0, mode=mode, rng=rng)

    def decode(self, features: np.ndarray) -> tuple[int, ...]:
        return eval_decode(self.trace(features), self.heads)


# --- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    step: int
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    peak_rate: float
    warmup_steps: int
    d_model: int

    @classmethod
    def init(cls, params: dict[str, Tensor], d_model: int,
             peak_rate: float | None = None,
             warmup_steps: int | None = None) -> "OptimizerState":
        if peak_rate is None:
            peak_rate = PEAK_LR_FACTOR
        if warmup_steps is None:
            warmup_steps = WARMUP_STEPS
        return cls(step=0,
                   first_moment={k: np.zeros_like(p.data) for k, p in params.items()},
                   second_moment={k: np.zeros_like(p.data) for k, p in params.items()},
                   peak_rate=peak_rate, warmup_steps=warmup_steps, d_model=d_model)

    def learning_rate(self, step: int) -> float:
        return (self.peak_rate * self.d_model ** -0.5
                * min(step ** -0.5, step * self.warmup_steps ** -1.5))

    def apply_gradients(self, params: dict[str, Tensor]) -> None:
        """One Adam update from the accumulated grads, which are then reset."""
        self.step += 1
        lr = self.learning_rate(self.step)
        c1 = 1.0 - ADAM_BETA1 ** self.step
        c2 = 1.0 - ADAM_BETA2 ** self.step
        for name, p in params.items():
            g = p.grad
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
            p.zero_grad()


# --- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    params: dict[str, np.ndarray]  # float32, insertion-ordered
    config_echo: str


def checkpoint_from_model(model: Model, config_echo: str) -> Checkpoint:
    params = {name: p.data.astype(np.float32, copy=True)
              for name, p in model.parameters().items()}
    return Checkpoint(CHECKPOINT_VERSION, params, config_echo)


def load_model_state(model: Model, ckpt: Checkpoint) -> None:
    params = model.parameters()
    if set(params) != set(ckpt.params):
        missing = set(params) ^ set(ckpt.params)
        raise ValueError(f"checkpoint/model parameter names differ: {sorted(missing)}")
    for name, p in params.items():
        stored = ckpt.params[name]
        if stored.shape != p.data.shape:
            raise ValueError(f"{name}: shape {stored.shape} != {p.data.shape}")
        p.data[...] = stored.astype(p.data.dtype)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Bit-exact layout: magic, u32 version, u32 count, then per parameter
    u32 name length + name, u8 rank, u32 extents, little-endian binary32
    payload; finally a u32-length-prefixed UTF-8 config echo."""
    chunks = [CHECKPOINT_MAGIC,
              struct.pack("<II", ckpt.version, len(ckpt.params))]
    for name, arr in ckpt.params.items():
        if arr.dtype != np.float32:
            raise ValueError(f"{name}: checkpoint payloads must be float32")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    echo = ckpt.config_echo.encode("utf-8")
    chunks.append(struct.pack("<I", len(echo)))
    chunks.append(echo)
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    offset = 4
    version, count = struct.unpack_from("<II", blob, offset)
    offset += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        offset += 4 * n
        if name in params:
            raise ValueError(f"{path}: duplicate parameter name {name!r}")
        params[name] = arr.reshape(shape).copy()
    (echo_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    echo = blob[offset:offset + echo_len].decode("utf-8")
    return Checkpoint(version, params, echo)


def average_checkpoints(paths) -> Checkpoint:
    """Elementwise mean of the parameters across checkpoint files; optimizer
    state is never part of the format, so nothing else survives."""
    ckpts = [load_checkpoint(p) for p in paths]
    if not ckpts:
        raise ValueError("no checkpoints to average")
    first = ckpts[0]
    names = list(first.params)
    for ckpt in ckpts[1:]:
        if list(ckpt.params) != names:
            raise ValueError("checkpoints disagree on parameter names")
        for name in names:
            if ckpt.params[name].shape != first.params[name].shape:
                raise ValueError(f"{name}: shape mismatch across checkpoints")
    averaged = {}
    for name in names:
        # float64 accumulation is exact for small N, so the mean is
        # permutation-invariant before the final float32 rounding
        stack = np.stack([c.params[name].astype(np.float64) for c in ckpts])
        averaged[name] = stack.mean(axis=0).astype(np.float32)
    return Checkpoint(first.version, averaged, first.config_echo)


# --- training & evaluation ----------------------------------------------------

@dataclass
class TrainResult:
    checkpoint_paths: list[Path]
    averaged_path: Path | None
    metrics: list[tuple[int, float, float]]  # (epoch, train_loss, dev_ter)
    skipped_utterances: int


def utterance_loss(model: Model, utt: Utterance, spec, plan,
                   rng: np.random.Generator, batch_size: int) -> LossBreakdown:
    """Forward one utterance in train mode and push 1/batch of its gradient
    onto the parameters."""
    with Tape() as tape:
        trace = model.trace(utt.features, mode="train", rng=rng)
        breakdown = total_loss(trace, utt.labels, spec, model.heads, plan=plan)
        scaled = scale(breakdown.total, 1.0 / batch_size)
    tape.backward(scaled)
    return breakdown


def run_training(cfg: RunConfig, out_dir) -> TrainResult:
    """Train per the config, writing one checkpoint per epoch, a metrics log,
    and the average of the last `average_last` epoch checkpoints."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = cfg.to_text()
    spec = cfg.loss_spec()

    train_set = generate_dataset(cfg.task, "train")
    dev_set = generate_dataset(cfg.task, "dev")
    model = Model.from_run_config(cfg)
    params = model.parameters()
    optimizer = OptimizerState.init(params, cfg.d_model)
    rng = np.random.default_rng([cfg.seed, 100])  # one stream for all step draws

    paths = [out_dir / "epoch_0.ckpt"]
    save_checkpoint(paths[0], checkpoint_from_model(model, echo))
    metrics: list[tuple[int, float, float]] = []
    metrics_lines: list[str] = []
    skipped = 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        epoch_losses: list[float] = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            plan = plan_step(spec, cfg.layers, rng)
            batch_losses = []
            for utt in batch:
                try:
                    breakdown = utterance_loss(model, utt, spec, plan, rng,
                                               len(batch))
                except InfeasibleTargetError:
                    skipped += 1
                    logger.warning("skipping infeasible utterance (T=%d, U=%d)",
                                   utt.features.shape[0], len(utt.labels))
                    continue
                except FloatingPointError as err:
                    raise TrainingDiverged(
                        f"non-finite value at epoch {epoch}, step {optimizer.step + 1}: {err}"
                    ) from err
                batch_losses.append(breakdown.total.item())
            if not batch_losses:
                continue
            optimizer.apply_gradients(params)
            mean_loss = float(np.mean(batch_losses))
            if not np.isfinite(mean_loss):
                raise TrainingDiverged(
                    f"loss diverged at epoch {epoch}, step {optimizer.step}")
            epoch_losses.append(mean_loss)

        train_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        dev_ter = evaluate_model(model, dev_set).rate
        metrics.append((epoch, train_loss, dev_ter))
        metrics_lines.append(f"{epoch}\t{train_loss:.6f}\t{dev_ter:.6f}")
        logger.info("epoch %d: train_loss=%.4f dev_ter=%.4f", epoch, train_loss, dev_ter)
        path = out_dir / f"epoch_{epoch}.ckpt"
        save_checkpoint(path, checkpoint_from_model(model, echo))
        paths.append(path)

    (out_dir / "metrics.log").write_text("\n".join(metrics_lines) + "\n"
                                         if metrics_lines else "")
    averaged_path = None
    if cfg.epochs >= 1:
        window = min(cfg.average_last, cfg.epochs)
        averaged = average_checkpoints(paths[-window:])
        averaged_path = out_dir / "averaged.ckpt"
        save_checkpoint(averaged_path, averaged)
    if skipped:
        logger.info("skipped %d infeasible utterances", skipped)
    return TrainResult(paths, averaged_path, metrics, skipped)


@dataclass
class EvalResult:
    rate: float
    decodes: list[tuple[int, ...]]


def evaluate_model(model: Model, dataset: list[Utterance]) -> EvalResult:
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    decodes = [model.decode(utt.features) for utt in dataset]
    rate = corpus_rate([(utt.labels, hyp) for utt, hyp in zip(dataset, decodes)])
    return EvalResult(rate, decodes)


def evaluate(ckpt: Checkpoint, dataset: list[Utterance]) -> EvalResult:
    """Greedy-decode the dataset with the model stored in a checkpoint."""
    cfg = RunConfig.parse(ckpt.config_echo)
    model = Model.from_run_config(cfg)
    load_model_state(model, ckpt)
    return evaluate_model(model, dataset)
