"""Training loop: random crops, absorbing corruption, DWDSE, AdamW.

All randomness (crop choice, diffusion times, masks) is drawn from a single
numpy generator stored in the train state, so a checkpoint plus the corpus
fully determines the rest of the trajectory.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .diffusion_core import NoiseSchedule, dwdse_loss
from .errors import EmptyCorpus, IncompatibleCheckpoint, InvalidConfig, NumericalFailure, SequenceTooShort
from .rng import stream
from .score_net import ModelConfig, init_network, network_from_container, read_container, write_container

log = logging.getLogger(__name__)

EMA_DECAY = 0.99


@dataclass
class TrainConfig:
    batch_size: int = 16
    sequence_length: int = 256
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    total_steps: int = 10000
    warmup_steps: int = 1000
    checkpoint_interval: int = 1000
    log_interval: int = 50
    grad_clip: float = 1.0
    time_samples: int = 1
    loop_padding: bool = False
    span_corruption: bool = False
    seed: int = 0

    def validate(self, model_config=None):
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.sequence_length < 1:
            raise InvalidConfig("sequence_length must be >= 1")
        if not self.learning_rate >= 0:
            raise InvalidConfig("learning_rate must be >= 0")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise InvalidConfig("step counts must be >= 0")
        if self.checkpoint_interval < 1 or self.log_interval < 1:
            raise InvalidConfig("intervals must be >= 1")
        if model_config is not None and self.sequence_length > model_config.context_length:
            raise InvalidConfig(
                f"sequence_length {self.sequence_length} exceeds model context {model_config.context_length}"
            )
        return self


PROFILES = {
    "desk": TrainConfig(),
    # batch 128 x 1024 tokens, lr 1e-6, ~400k steps
    "paper": TrainConfig(batch_size=128, sequence_length=1024, learning_rate=1e-6, total_steps=400_000, warmup_steps=0),
}


def lr_at(config, step):
    if config.warmup_steps <= 0:
        return config.learning_rate
    return config.learning_rate * min(1.0, (step + 1) / config.warmup_steps)


@dataclass
class TrainState:
    step: int
    net: torch.nn.Module
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    config: TrainConfig
    schedule: NoiseSchedule
    loss_ema: float = math.nan
    last_loss: float = math.nan
    history: list = field(default_factory=list)


def make_optimizer(net, config):
    return torch.optim.AdamW(
        net.parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )


def new_state(model_config, train_config, schedule=None, seed=None):
    seed = train_config.seed if seed is None else seed
    train_config = replace(train_config, seed=seed).validate(model_config)
    net = init_network(model_config, seed=int(stream(seed, "init").integers(2**31)))
    return TrainState(
        step=0,
        net=net,
        optimizer=make_optimizer(net, train_config),
        rng=stream(seed, "train"),
        config=train_config,
        schedule=schedule or NoiseSchedule.log_linear(),
    )


# -- batches -------------------------------------------------------------------


def _prepare(corpus, length, loop_padding):
    seqs = []
    for item in corpus:
        ids = np.asarray(getattr(item, "ids", item), dtype=np.int64)
        if ids.shape[0] < length:
            if not loop_padding or ids.shape[0] == 0:
                raise SequenceTooShort(f"sequence of length {ids.shape[0]} is shorter than crop length {length}")
            ids = np.resize(ids, length)
        seqs.append(ids)
    return seqs


def sample_crops(lengths, crop, count, rng):
    """Draw ``count`` crops uniformly over every valid (sequence, offset) pair."""
    n_crops = np.asarray(lengths, dtype=np.int64) - crop + 1
    cum = np.cumsum(n_crops)
    flat = rng.integers(0, cum[-1], size=count)
    seq = np.searchsorted(cum, flat, side="right")
    offset = flat - np.concatenate([[0], cum[:-1]])[seq]
    return seq, offset


def make_batches(corpus, config, rng):
    """Endless stream of ``(batch_size, sequence_length)`` token crops."""
    if not corpus:
        raise EmptyCorpus("training corpus is empty")
    seqs = _prepare(corpus, config.sequence_length, config.loop_padding)
    lengths = [s.shape[0] for s in seqs]
    length = config.sequence_length
    while True:
        seq, off = sample_crops(lengths, length, config.batch_size, rng)
        yield np.stack([seqs[s][o : o + length] for s, o in zip(seq, off)])


# -- optimisation ----------------------------------------------------------------


def train_step(state, batch):
    """One AdamW update on ``batch``; returns the scalar loss."""
    net, cfg = state.net, state.config
    net.train()
    lr = lr_at(cfg, state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    loss, info = dwdse_loss(
        batch,
        net,
        state.schedule,
        time_samples=cfg.time_samples,
        rng=state.rng,
        vocab_size=net.config.vocab_size,
        span=cfg.span_corruption,
        return_info=True,
    )
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericalFailure(f"non-finite loss at step {state.step}", {"t": info["t"].tolist()})
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip and cfg.grad_clip > 0:
        norm = torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
        if not bool(torch.isfinite(norm)):
            raise NumericalFailure(f"non-finite gradient at step {state.step}", {"t": info["t"].tolist()})
    state.optimizer.step()
    state.step += 1
    state.last_loss = value
    state.loss_ema = value if math.isnan(state.loss_ema) else EMA_DECAY * state.loss_ema + (1 - EMA_DECAY) * value
    return value


def train(state, corpus, steps=None, out_dir=None, on_step=None):
    """Advance ``state`` to ``config.total_steps`` (or by ``steps``).

    With ``out_dir``, writes ``metrics.csv`` (step, loss_ema, wall_time)
    every ``log_interval`` steps and a checkpoint every
    ``checkpoint_interval`` steps plus ``last.ckpt`` at the end.
    """
    cfg = state.config
    target = cfg.total_steps if steps is None else state.step + steps
    batches = make_batches(corpus, cfg, state.rng)
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        fresh = state.step == 0 or not metrics_path.exists()
        fh = open(metrics_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["step", "loss_ema", "wall_time"])
    start = time.perf_counter()
    try:
        while state.step < target:
            loss = train_step(state, next(batches))
            if on_step is not None:
                on_step(state, loss)
            if state.step % cfg.log_interval == 0:
                state.history.append((state.step, state.loss_ema))
                log.info("step %d loss_ema %.5f", state.step, state.loss_ema)
                if writer is not None:
                    writer.writerow([state.step, f"{state.loss_ema:.6f}", f"{time.perf_counter() - start:.3f}"])
            if out_dir is not None and state.step % cfg.checkpoint_interval == 0:
                checkpoint(state, out_dir / f"step_{state.step:08d}.ckpt")
    finally:
        if writer is not None:
            fh.close()
    if out_dir is not None:
        checkpoint(state, out_dir / "last.ckpt")
    return state


# -- checkpointing ---------------------------------------------------------------


def checkpoint(state, path):
    net = state.net
    params = list(net.named_parameters())
    tensors = [(f"param/{k}", v.detach().cpu().numpy()) for k, v in net.state_dict().items()]
    adam_steps = {}
    for name, p in params:
        st = state.optimizer.state.get(p)
        if st:
            adam_steps[name] = float(st["step"])
            tensors.append((f"exp_avg/{name}", st["exp_avg"].detach().cpu().numpy()))
            tensors.append((f"exp_avg_sq/{name}", st["exp_avg_sq"].detach().cpu().numpy()))
    header = {
        "kind": "train_state",
        "config": asdict(net.config),
        "train_config": asdict(state.config),
        "schedule": state.schedule.to_dict(),
        "step": state.step,
        "loss_ema": None if math.isnan(state.loss_ema) else state.loss_ema,
        "rng": state.rng.bit_generator.state,
        "adam_steps": adam_steps,
    }
    write_container(path, header, tensors)


def resume(path):
    header, tensors = read_container(path)
    if header.get("kind") != "train_state":
        raise IncompatibleCheckpoint(f"{path}: not a training checkpoint")
    try:
        net = network_from_container(header, tensors)
        cfg = TrainConfig(**header["train_config"])
        schedule = NoiseSchedule(**header["schedule"])
        optimizer = make_optimizer(net, cfg)
        for name, p in net.named_parameters():
            if name in header["adam_steps"]:
                optimizer.state[p] = {
                    "step": torch.tensor(header["adam_steps"][name], dtype=torch.float32),
                    "exp_avg": torch.from_numpy(tensors[f"exp_avg/{name}"]),
                    "exp_avg_sq": torch.from_numpy(tensors[f"exp_avg_sq/{name}"]),
                }
        bitgen = np.random.PCG64()
        bitgen.state = header["rng"]
    except (KeyError, TypeError, ValueError) as e:
        raise IncompatibleCheckpoint(f"{path}: {e}") from e
    ema = header["loss_ema"]
    return TrainState(
        step=int(header["step"]),
        net=net,
        optimizer=optimizer,
        rng=np.random.Generator(bitgen),
        config=cfg,
        schedule=schedule,
        loss_ema=math.nan if ema is None else float(ema),
    )


def model_config_for(corpus_vocab, **overrides):
    return ModelConfig(vocab_size=corpus_vocab, **overrides)
