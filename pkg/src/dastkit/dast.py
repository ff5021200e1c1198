"""Adversarial co-training of a substitute classifier against a black-box
oracle.

No real data enters the loop: a label-conditioned generator proposes
synthetic batches, the oracle labels them, and the substitute learns to
imitate those answers while the generator is pushed toward samples the two
models disagree on. Each iteration spends exactly one oracle call.
"""

import dataclasses
import json
import os
from typing import List, Optional, Tuple

import numpy as np

from .archive import load_state_dict, save_state_dict
from .attacks import AttackConfig, fgsm
from .engine import (ConfigurationError, Tape, Tensor, make_optimizer, ops,
                     pause_tape)
from .nets import (ClassifierModel, GeneratorModel, LatentBatch, accuracy,
                   generate, sample_latent)
from .oracle import OracleMode, OracleResponse, QueryLedger, TransportError

CHECKPOINT_NAME = "checkpoint.dkwa"


class TrainingAborted(RuntimeError):
    """The oracle became unreachable mid-run.

    Carries the partial trace so the caller can persist progress; if a
    checkpoint directory was configured, a checkpoint has already been
    written and the run can resume from it.
    """

    def __init__(self, message: str, trace: "TrainingTrace", iteration: int):
        super().__init__(message)
        self.trace = trace
        self.iteration = iteration


@dataclasses.dataclass
class DastConfig:
    mode: OracleMode
    query_budget: int
    max_iterations: int = 1_000_000
    alpha: float = 0.2
    batch_size: int = 64
    lr_substitute: float = 1e-3
    lr_generator: float = 2e-4
    latent_dim: int = 64
    eval_interval: int = 50
    seed: int = 0
    optimizer: str = "adam"
    plateau_window: Optional[int] = None
    attack_epsilon: float = 0.3
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = OracleMode(self.mode)
        problems = []
        if self.alpha < 0:
            problems.append(f"alpha must be >= 0, got {self.alpha}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_iterations < 1:
            problems.append(
                f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.query_budget < self.batch_size:
            problems.append(
                f"query_budget ({self.query_budget}) cannot fund a single "
                f"batch of {self.batch_size}")
        if self.eval_interval < 1:
            problems.append(
                f"eval_interval must be >= 1, got {self.eval_interval}")
        if self.latent_dim < 1:
            problems.append(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.lr_substitute <= 0 or self.lr_generator <= 0:
            problems.append("learning rates must be positive")
        if self.plateau_window is not None and self.plateau_window < 1:
            problems.append(
                f"plateau_window must be >= 1, got {self.plateau_window}")
        if self.attack_epsilon < 0:
            problems.append(
                f"attack_epsilon must be >= 0, got {self.attack_epsilon}")
        if problems:
            raise ConfigurationError("; ".join(problems))


@dataclasses.dataclass
class EvalPoint:
    iteration: int
    ledger: QueryLedger
    l_d: float
    l_g: float
    l_c: float
    acc: Optional[float] = None
    att: Optional[float] = None

    def to_record(self) -> dict:
        return {
            "iteration": self.iteration,
            "l_d": self.l_d,
            "l_g": self.l_g,
            "l_c": self.l_c,
            "acc": self.acc,
            "att": self.att,
            "ledger": dataclasses.asdict(self.ledger),
        }


class TrainingTrace:
    """Eval-point records plus the raw per-iteration loss series."""

    def __init__(self):
        self.records: List[EvalPoint] = []
        self.l_d_series: List[float] = []
        self.l_g_series: List[float] = []
        self.l_c_series: List[float] = []

    def add_point(self, point: EvalPoint) -> None:
        if self.records:
            prev = self.records[-1].ledger
            if (point.ledger.total_samples < prev.total_samples
                    or point.ledger.total_calls < prev.total_calls):
                raise ValueError(
                    "ledger went backwards between eval points "
                    f"({prev.total_samples} -> {point.ledger.total_samples} "
                    "samples)")
        self.records.append(point)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(p.to_record()) + "\n" for p in self.records)

    def write_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


def imitation_distance(mode: OracleMode, d_out: Tensor,
                       t_response: OracleResponse) -> Tensor:
    """Distance between the substitute's prediction and the oracle's answer.

    Label mode scores cross-entropy against the returned labels; probability
    mode measures the Frobenius distance between the two probability tables.
    Either way the oracle side is a plain array, so no gradient ever points
    at the victim.
    """
    if d_out.data.ndim != 2:
        raise ConfigurationError(
            f"substitute output must be [batch, classes], got shape "
            f"{d_out.data.shape}")
    batch = d_out.data.shape[0]
    if mode is OracleMode.LABEL_ONLY:
        if t_response.labels is None or len(t_response.labels) != batch:
            raise ConfigurationError(
                "oracle response does not carry one label per sample")
        return ops.cross_entropy(d_out, t_response.labels)
    if mode is OracleMode.PROBABILITY_ONLY:
        if t_response.probs is None:
            raise ConfigurationError(
                "probability mode requires probs in the oracle response; "
                "got a label-only response")
        probs = np.asarray(t_response.probs, dtype=d_out.data.dtype)
        return ops.frobenius_distance(ops.softmax(d_out), Tensor(probs))
    raise ConfigurationError(f"unknown oracle mode {mode!r}")


def substitute_loss(d_out: Tensor, t_response: OracleResponse,
                    mode: OracleMode) -> Tensor:
    return imitation_distance(mode, d_out, t_response)


def label_control_loss(substitute: ClassifierModel, synthetic_batch: Tensor,
                       requested_labels: np.ndarray) -> Tensor:
    """How far the substitute is from classifying each synthetic sample as
    the label it was generated for. Differentiates into the generator through
    the substitute's forward pass; freezing the substitute is the caller's
    job."""
    return ops.cross_entropy(substitute.forward(synthetic_batch),
                             requested_labels)


def generator_loss(d_value: Tensor, l_c: Tensor, alpha: float) -> Tensor:
    # exp(-d) rewards disagreement, the weighted control term keeps the
    # requested labels meaningful
    return ops.add(ops.exp(ops.neg(d_value)), ops.scale(l_c, alpha))


def _improved(values: List[float], window: int) -> bool:
    recent = values[-window:]
    earlier = values[:-window]
    baseline = max(earlier) if earlier else recent[0]
    return max(recent) > baseline


def plateau_detector(trace: TrainingTrace, window: int) -> bool:
    """True once neither probe accuracy nor attack success improved over the
    last ``window`` eval points. Without populated probe metrics it never
    fires; the budget and iteration cap govern instead."""
    acc = [p.acc for p in trace.records if p.acc is not None]
    att = [p.att for p in trace.records if p.att is not None]
    if window < 1 or len(acc) < window or len(att) < window:
        return False
    return not (_improved(acc, window) or _improved(att, window))


def _probe_metrics(substitute, oracle, probe, epsilon) -> Tuple[float, float]:
    """Substitute accuracy on the probe set, and how often single-step
    adversarial examples crafted on the substitute flip the oracle off the
    true label. Spends eval-phase oracle queries."""
    x, labels = probe
    acc = accuracy(substitute, x, labels)
    adv = fgsm(substitute, x, labels, AttackConfig("fgsm", epsilon=epsilon))
    response = oracle.query(adv.adversarial, phase="eval")
    att = float(np.mean(response.labels != labels))
    return acc, att


def save_checkpoint(path: str, substitute, generator, opt_d, opt_g,
                    meta: dict) -> None:
    arrays = {}
    for name, arr in substitute.named_arrays():
        arrays[f"substitute.{name}"] = arr
    for name, arr in generator.named_arrays():
        arrays[f"generator.{name}"] = arr
    for name, arr in opt_d.state_arrays().items():
        arrays[f"opt_d.{name}"] = arr
    for name, arr in opt_g.state_arrays().items():
        arrays[f"opt_g.{name}"] = arr
    save_state_dict(path, arrays, meta)


def load_checkpoint(path: str, substitute, generator, opt_d=None,
                    opt_g=None) -> dict:
    """Restore models (and optionally optimizer state) in place; returns the
    checkpoint metadata (iteration, consumed budget, rng state, ledger)."""
    manifest, arrays = load_state_dict(path)

    def slice_for(prefix, order):
        return [arrays[f"{prefix}.{name}"] for name in order]

    substitute.load_arrays(
        slice_for("substitute", [n for n, _ in substitute.named_arrays()]))
    generator.load_arrays(
        slice_for("generator", [n for n, _ in generator.named_arrays()]))
    for opt, prefix in ((opt_d, "opt_d"), (opt_g, "opt_g")):
        if opt is None:
            continue
        state = {k[len(prefix) + 1:]: v for k, v in arrays.items()
                 if k.startswith(prefix + ".")}
        opt.load_state_arrays(state)
    # meta keys live at the manifest's top level, next to the entry table
    return {k: v for k, v in manifest.items()
            if k not in ("format_version", "precision", "entries")}


def dast_train(config: DastConfig, oracle, substitute: ClassifierModel,
               generator: GeneratorModel,
               probe: Optional[Tuple[np.ndarray, np.ndarray]] = None,
               resume: Optional[str] = None):
    """Run the two-player loop until the iteration cap, the query budget, or
    the plateau detector stops it. Returns (substitute, trace).

    Per iteration: draw a latent batch, synthesize inputs, query the oracle
    once, update the substitute on the imitation loss (synthetic inputs held
    constant), then update the generator on exp(-d) + alpha * control with
    the substitute frozen and the oracle response reused.
    """
    oracle_mode = getattr(oracle, "mode", None)
    if oracle_mode is not None and oracle_mode is not config.mode:
        raise ConfigurationError(
            f"oracle answers in {oracle_mode.value!r} mode but the run is "
            f"configured for {config.mode.value!r}")
    if substitute.num_classes != generator.num_classes:
        raise ConfigurationError(
            f"substitute has {substitute.num_classes} classes, generator "
            f"has {generator.num_classes}")

    rng = np.random.default_rng(config.seed)
    opt_d = make_optimizer(config.optimizer, substitute.parameters(),
                           config.lr_substitute)
    opt_g = make_optimizer(config.optimizer, generator.parameters(),
                           config.lr_generator)
    trace = TrainingTrace()
    iteration = 0
    consumed = 0

    if resume is not None:
        meta = load_checkpoint(resume, substitute, generator, opt_d, opt_g)
        iteration = int(meta.get("iteration", 0))
        consumed = int(meta.get("consumed", 0))
        if "rng_state" in meta:
            rng.bit_generator.state = meta["rng_state"]

    checkpoint_path = None
    if config.checkpoint_dir is not None:
        os.makedirs(config.checkpoint_dir, exist_ok=True)
        checkpoint_path = os.path.join(config.checkpoint_dir, CHECKPOINT_NAME)

    def write_checkpoint(rng_state=None):
        if checkpoint_path is None:
            return
        meta = {
            "iteration": iteration,
            "consumed": consumed,
            "rng_state": rng_state or rng.bit_generator.state,
            "ledger": dataclasses.asdict(oracle.snapshot_ledger()),
            "mode": config.mode.value,
        }
        save_checkpoint(checkpoint_path, substitute, generator, opt_d, opt_g,
                        meta)

    def record_point():
        acc = att = None
        if probe is not None:
            acc, att = _probe_metrics(substitute, oracle, probe,
                                      config.attack_epsilon)
        trace.add_point(EvalPoint(
            iteration=iteration,
            ledger=oracle.snapshot_ledger(),
            l_d=trace.l_d_series[-1],
            l_g=trace.l_g_series[-1],
            l_c=trace.l_c_series[-1],
            acc=acc,
            att=att,
        ))

    substitute.train(True)
    generator.train(True)
    while (iteration < config.max_iterations
           and consumed + config.batch_size <= config.query_budget):
        # snapshot so an abort mid-iteration checkpoints the state from
        # before this batch was drawn; the resumed run redraws it
        rng_before = rng.bit_generator.state
        batch = sample_latent(rng, config.batch_size, config.latent_dim,
                              generator.num_classes)
        with pause_tape():
            x_hat = generate(generator, batch).data
        try:
            response = oracle.query(x_hat, phase="train")
        except TransportError as exc:
            write_checkpoint(rng_state=rng_before)
            raise TrainingAborted(
                f"oracle unreachable at iteration {iteration}: {exc}",
                trace, iteration) from exc
        consumed += config.batch_size

        # substitute update: synthetic inputs enter as constants
        substitute.zero_grad()
        with Tape() as tape:
            d_out = substitute.forward(Tensor(x_hat))
            l_d = substitute_loss(d_out, response, config.mode)
        tape.backward(l_d)
        opt_d.step()

        # generator update: regenerate through the tape, substitute frozen,
        # same oracle response (the generator has not moved yet)
        substitute.set_trainable(False)
        substitute.train(False)
        generator.zero_grad()
        with Tape() as tape:
            x_live = generate(generator, batch)
            g_out = substitute.forward(x_live)
            d_live = imitation_distance(config.mode, g_out, response)
            l_c = ops.cross_entropy(g_out, batch.labels)
            l_g = generator_loss(d_live, l_c, config.alpha)
        tape.backward(l_g)
        opt_g.step()
        substitute.set_trainable(True)
        substitute.train(True)

        iteration += 1
        trace.l_d_series.append(l_d.item())
        trace.l_g_series.append(l_g.item())
        trace.l_c_series.append(l_c.item())

        if iteration % config.eval_interval == 0:
            record_point()
            write_checkpoint()
            if (config.plateau_window is not None
                    and plateau_detector(trace, config.plateau_window)):
                break

    if trace.l_d_series and (not trace.records
                             or trace.records[-1].iteration != iteration):
        record_point()
        write_checkpoint()
    substitute.train(False)
    generator.train(False)
    return substitute, trace
