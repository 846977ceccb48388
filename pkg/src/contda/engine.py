"""Single-pass continual adaptation over a degrading domain stream.

Each incoming chunk is merged with the replay buffer, pseudolabels are
refined at the start of every epoch, and the encoder is updated by SGD
with momentum under a per-chunk polynomial LR decay. Gradients can be
rescaled to unit global L2 norm before every optimizer step, which is the
stabilization knob this engine exists to study. The hypothesis stays
frozen throughout; the engine verifies that bitwise after every chunk.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .buffer import ReplayBuffer, merge
from .datasets import ImageDataset
from .degrade import DomainSequence
from .errors import ConfigurationError, InputValidationError
from .losses import METHODS, refine_pseudolabels, total_adaptation_loss
from .models import ClassifierModel, evaluate_accuracy, images_to_tensor
from .optimization import global_grad_norm, lr_at, normalize_gradients

__all__ = [
    "AdaptationConfig",
    "AdaptationTrace",
    "ChunkRecord",
    "adapt_chunk",
    "lr_at",
    "normalize_gradients",
    "run_continual",
]


@dataclasses.dataclass
class AdaptationConfig:
    method: str = "conda"
    eta0: float = 0.002
    momentum: float = 0.9
    chunk_size: int = 256
    epochs_per_chunk: int = 15
    minibatch_size: int = 64
    grad_norm: bool = True
    grad_norm_scope: str = "global"  # or "per_tensor"
    buffer_capacity: int = 420
    buffer_policy: str = "auto"  # confidence (conda) / random (uclgv)
    beta: float = 0.3
    lam: float = 1.0
    tau: float = 0.1
    refine_rounds: int = 2
    bn_update: bool = True
    seed: int = 0

    def validate(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.eta0 <= 0:
            raise ConfigurationError(f"eta0 must be positive: {self.eta0}")
        if self.chunk_size < self.minibatch_size:
            raise ConfigurationError("chunk_size must be >= minibatch_size")
        if self.epochs_per_chunk < 1:
            raise ConfigurationError("epochs_per_chunk must be >= 1")
        if self.buffer_policy not in ("auto", "confidence", "random"):
            raise ConfigurationError(f"unknown buffer policy {self.buffer_policy!r}")
        if self.grad_norm_scope not in ("global", "per_tensor"):
            raise ConfigurationError(f"unknown grad_norm scope {self.grad_norm_scope!r}")

    def resolved_buffer_policy(self) -> str | None:
        if self.method == "cshot":
            return None
        if self.buffer_policy != "auto":
            return self.buffer_policy
        return "confidence" if self.method == "conda" else "random"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class IterationRecord:
    lr: float
    total_loss: float
    terms: dict
    grad_norm_pre: float
    grad_norm_post: float
    stepped: bool = True


@dataclasses.dataclass
class ChunkRecord:
    chunk_index: int
    domain: str
    num_incoming: int
    num_replay: int
    iterations: list
    accuracy: float | None
    warnings: list
    incidents: list
    hypothesis_frozen: bool

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["iterations"] = [dataclasses.asdict(it) for it in self.iterations]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChunkRecord":
        d = dict(d)
        d["iterations"] = [IterationRecord(**it) for it in d["iterations"]]
        return cls(**d)


@dataclasses.dataclass
class AdaptationTrace:
    config: dict
    notes: dict
    initial_accuracy: float | None
    records: list
    final_accuracy: float | None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "notes": self.notes,
            "initial_accuracy": self.initial_accuracy,
            "records": [r.to_dict() for r in self.records],
            "final_accuracy": self.final_accuracy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationTrace":
        return cls(
            config=d["config"],
            notes=d["notes"],
            initial_accuracy=d["initial_accuracy"],
            records=[ChunkRecord.from_dict(r) for r in d["records"]],
            final_accuracy=d["final_accuracy"],
        )

    def chunk_accuracies(self) -> list:
        return [r.accuracy for r in self.records]

    def save_jsonl(self, path) -> None:
        """One JSON line per chunk record."""
        path = Path(path)
        with path.open("w") as fh:
            for record in self.records:
                fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")

    def summary(self) -> dict:
        return {
            "config": self.config,
            "notes": self.notes,
            "initial_accuracy": self.initial_accuracy,
            "final_accuracy": self.final_accuracy,
            "chunk_accuracies": self.chunk_accuracies(),
            "num_chunks": len(self.records),
        }

    def save_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True))

    def __eq__(self, other) -> bool:
        if not isinstance(other, AdaptationTrace):
            return NotImplemented
        return json.dumps(self.to_dict(), sort_keys=True) == json.dumps(
            other.to_dict(), sort_keys=True
        )


def _set_batchnorm_eval(model: torch.nn.Module):
    for m in model.modules():
        if isinstance(m, (torch.nn.BatchNorm1d, torch.nn.BatchNorm2d)):
            m.eval()


def _forward_dataset(model: ClassifierModel, images: np.ndarray, batch_size: int = 256):
    """Evaluation-mode features and softmax probs over a whole array."""
    was_training = model.training
    model.eval()
    feats, probs = [], []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = images_to_tensor(images[start : start + batch_size])
            z = model.features(x)
            feats.append(z)
            probs.append(F.softmax(model.hypothesis(z), dim=1))
    if was_training:
        model.train()
    return torch.cat(feats), torch.cat(probs)


def _buffer_tensors(model: ClassifierModel, buffer: ReplayBuffer):
    """Current-encoder features of the stored buffer samples (no grad)."""
    images, labels, _ = buffer.contents()
    if len(labels) == 0:
        d = model.hypothesis.fc.weight_v.shape[1]
        return torch.zeros((0, d)), torch.zeros((0,), dtype=torch.long)
    feats, _ = _forward_dataset(model, images)
    return feats, torch.from_numpy(labels)


def adapt_chunk(
    model: ClassifierModel,
    chunk_images: np.ndarray,
    buffer: ReplayBuffer | None,
    config: AdaptationConfig,
    chunk_index: int,
    optimizer: torch.optim.Optimizer | None = None,
    eval_dataset: ImageDataset | None = None,
    rng: np.random.Generator | None = None,
    domain_name: str = "",
) -> ChunkRecord:
    """Adapt the encoder on one incoming chunk (merged with the buffer),
    then repopulate the buffer from this chunk. Mutates model and buffer
    in place and returns the per-chunk record."""
    config.validate()
    if len(chunk_images) == 0:
        raise InputValidationError("chunk is empty")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if optimizer is None:
        optimizer = torch.optim.SGD(
            model.encoder_parameters(), lr=config.eta0, momentum=config.momentum
        )

    use_buffer = config.method != "cshot"
    merged = merge(chunk_images, buffer if use_buffer else None)
    n = len(merged)
    num_incoming = int(merged.incoming_mask.sum())
    num_replay = n - num_incoming

    warnings_list, incidents = [], []
    if len(chunk_images) < config.minibatch_size:
        warnings_list.append(
            f"chunk of {len(chunk_images)} smaller than minibatch {config.minibatch_size}"
        )

    n_batches = max(math.ceil(n / config.minibatch_size), 1)
    i_T = config.epochs_per_chunk * n_batches
    hyp_before = model.hypothesis_state_clone()
    params = model.encoder_parameters()
    iterations = []
    it = 0

    for _ in range(config.epochs_per_chunk):
        feats_all, probs_all = _forward_dataset(model, merged.images)
        assign = refine_pseudolabels(feats_all, probs_all, config.refine_rounds)
        labels_all = torch.from_numpy(assign.labels)

        order = rng.permutation(n)
        for batch_idx in np.array_split(order, n_batches):
            x = images_to_tensor(merged.images[batch_idx])
            y = labels_all[torch.from_numpy(batch_idx)]
            inc_mask = torch.from_numpy(merged.incoming_mask[batch_idx])

            model.train()
            if not config.bn_update:
                _set_batchnorm_eval(model)
            if len(batch_idx) < 2:
                _set_batchnorm_eval(model)  # stats need more than one sample
                warnings_list.append(f"iteration {it}: single-sample minibatch")

            feats_b = model.features(x)
            probs_b = F.softmax(model.hypothesis(feats_b), dim=1)

            buf_feats = buf_labels = None
            if use_buffer:
                if config.method == "uclgv" and config.lam != 0.0 and buffer is not None:
                    buf_feats, buf_labels = _buffer_tensors(model, buffer)
                else:
                    d = feats_b.shape[1]
                    buf_feats = torch.zeros((0, d))
                    buf_labels = torch.zeros((0,), dtype=torch.long)

            total, terms = total_adaptation_loss(
                config.method,
                probs_b,
                feats_b,
                y,
                buffer_features=buf_feats,
                buffer_labels=buf_labels,
                beta=config.beta,
                lam=config.lam,
                tau=config.tau,
                incoming_mask=inc_mask,
            )

            optimizer.zero_grad()
            total.backward()
            grads = [p.grad for p in params if p.grad is not None]
            lr = lr_at(config.eta0, it, i_T)

            if not all(torch.isfinite(g).all() for g in grads):
                incidents.append(f"iteration {it}: non-finite gradient, step aborted")
                optimizer.zero_grad()
                iterations.append(
                    IterationRecord(lr, float(total), terms, float("nan"), float("nan"), False)
                )
                it += 1
                continue

            pre_norm = global_grad_norm(grads)
            if config.grad_norm:
                scaled, _ = normalize_gradients(grads, scope=config.grad_norm_scope)
                with torch.no_grad():
                    for g, s in zip(grads, scaled):
                        g.copy_(s)
            post_norm = global_grad_norm(grads)

            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.step()
            iterations.append(IterationRecord(lr, float(total), terms, pre_norm, post_norm))
            it += 1

    hyp_after = model.hypothesis_state_clone()
    frozen = all(torch.equal(hyp_before[k], hyp_after[k]) for k in hyp_before)
    if not frozen:
        raise RuntimeError("hypothesis parameters changed during adaptation")

    if use_buffer and buffer is not None:
        feats_all, probs_all = _forward_dataset(model, merged.images)
        assign = refine_pseudolabels(feats_all, probs_all, config.refine_rounds)
        inc = merged.incoming_mask
        buffer.repopulate(
            merged.images[inc], assign.labels[inc], assign.confidences[inc]
        )

    accuracy = evaluate_accuracy(model, eval_dataset) if eval_dataset is not None else None
    return ChunkRecord(
        chunk_index=chunk_index,
        domain=domain_name,
        num_incoming=num_incoming,
        num_replay=num_replay,
        iterations=iterations,
        accuracy=accuracy,
        warnings=warnings_list,
        incidents=incidents,
        hypothesis_frozen=frozen,
    )


def _chunk_plan(sequence: DomainSequence, config: AdaptationConfig, rng: np.random.Generator):
    """Partition every domain, least to most severe, into incoming chunks."""
    names = sequence.manifest.get(
        "domain_names", [f"level_{k + 1}" for k in range(len(sequence.domains))]
    )
    plan = []
    for domain_idx, domain in enumerate(sequence.domains):
        order = rng.permutation(len(domain))
        for start in range(0, len(domain), config.chunk_size):
            plan.append((domain_idx, names[domain_idx], order[start : start + config.chunk_size]))
    return plan


def _run_notes(config: AdaptationConfig) -> dict:
    return {
        "grad_norm_scope": config.grad_norm_scope,
        "bn_stats_update_during_adaptation": config.bn_update,
        "prototype_recompute": "per_iteration_no_grad",
        "buffer_policy": config.resolved_buffer_policy(),
        "lr_schedule": "eta0*(1+10p)^-0.75 reset per chunk",
    }


def run_continual(
    source_model: ClassifierModel,
    sequence: DomainSequence,
    config: AdaptationConfig,
    checkpoint_dir=None,
    resume: bool = False,
) -> AdaptationTrace:
    """Adapt through every domain chunk once, in severity order.

    The model is mutated in place; accuracy on the (held-out labels of the)
    final target domain is recorded after every chunk. With
    ``checkpoint_dir`` set, a resumable snapshot is written after each
    chunk; a resumed run is bit-identical to an uninterrupted one.
    """
    config.validate()
    if source_model.class_names != sequence.source.class_names:
        raise ConfigurationError(
            "model classes do not match the domain sequence classes: "
            f"{source_model.class_names} vs {sequence.source.class_names}"
        )

    model = source_model
    model.freeze_hypothesis()
    eval_dataset = sequence.target
    checkpoint_path = Path(checkpoint_dir) / "latest.pt" if checkpoint_dir else None

    if resume:
        if checkpoint_path is None or not checkpoint_path.is_file():
            raise ConfigurationError("resume requested but no checkpoint found")
        state = torch.load(checkpoint_path, weights_only=False)
        model.load_state_dict(state["model"])
        optimizer = torch.optim.SGD(
            model.encoder_parameters(), lr=config.eta0, momentum=config.momentum
        )
        optimizer.load_state_dict(state["optimizer"])
        buffer = (
            ReplayBuffer.from_state_dict(state["buffer"]) if state["buffer"] is not None else None
        )
        rng = np.random.default_rng()
        rng.bit_generator.state = state["rng_state"]
        plan = state["plan"]
        next_chunk = state["next_chunk"]
        trace = AdaptationTrace.from_dict(state["trace"])
    else:
        seed_seq = np.random.SeedSequence(config.seed)
        engine_seed, buffer_seed = seed_seq.spawn(2)
        rng = np.random.default_rng(engine_seed)
        policy = config.resolved_buffer_policy()
        buffer = (
            ReplayBuffer(config.buffer_capacity, model.class_count, policy, buffer_seed)
            if policy is not None
            else None
        )
        optimizer = torch.optim.SGD(
            model.encoder_parameters(), lr=config.eta0, momentum=config.momentum
        )
        plan = _chunk_plan(sequence, config, rng)
        next_chunk = 0
        trace = AdaptationTrace(
            config=config.to_dict(),
            notes=_run_notes(config),
            initial_accuracy=evaluate_accuracy(model, eval_dataset),
            records=[],
            final_accuracy=None,
        )

    for chunk_index in range(next_chunk, len(plan)):
        domain_idx, domain_name, indices = plan[chunk_index]
        domain = sequence.domains[domain_idx]
        record = adapt_chunk(
            model,
            domain.images[indices],
            buffer,
            config,
            chunk_index,
            optimizer=optimizer,
            eval_dataset=eval_dataset,
            rng=rng,
            domain_name=domain_name,
        )
        trace.records.append(record)
        if checkpoint_path is not None:
            checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(
                {
                    "model": model.state_dict(),
                    "optimizer": optimizer.state_dict(),
                    "buffer": buffer.state_dict() if buffer is not None else None,
                    "rng_state": rng.bit_generator.state,
                    "plan": plan,
                    "next_chunk": chunk_index + 1,
                    "trace": trace.to_dict(),
                },
                checkpoint_path,
            )

    trace.final_accuracy = trace.records[-1].accuracy if trace.records else trace.initial_accuracy
    return trace
