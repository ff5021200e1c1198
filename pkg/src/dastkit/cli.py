"""Operator commands: train and serve victim models, run the co-training
loop, evaluate transfer attacks, and verify gradients. Every command reads
one TOML config and writes its artifacts under the config's output
directory, with the config mirrored alongside for replay."""

import argparse
import json
import os
import shutil
import sys
import time

import numpy as np

from .archive import ArchiveError, load_model, save_model, save_state_dict
from .attacks import AttackConfig
from .config import (ExperimentConfig, load_config, scenario_name,
                     write_config_mirror)
from .dast import DastConfig, TrainingAborted, dast_train
from .datasets import load_dataset
from .engine import ConfigurationError, Tensor, ops
from .engine.gradcheck import finite_difference_check
from .evaluation import (EmptyEligibleSetError, attack_success_rate,
                         eligible_set, export_curves, format_table,
                         write_report_json)
from .nets import (LatentBatch, accuracy, build_classifier, build_generator,
                   generate, train_classifier)
from .oracle import (LocalOracle, OracleMode, ProtocolError, RemoteOracle,
                     TransportError, serve_victim)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3

GRADCHECK_TOLERANCE = 1e-4


def _victim_path(config: ExperimentConfig) -> str:
    return config.victim.get("weights") or os.path.join(config.output_dir,
                                                        "victim.dkwa")


def _build_victim(config, data):
    return build_classifier(config.victim.get("arch", "medium"),
                            data.input_shape, data.num_classes,
                            seed=int(config.victim.get("seed", config.seed)))


def _load_victim(config, data):
    path = _victim_path(config)
    if not os.path.exists(path):
        raise ConfigurationError(
            f"victim weights not found at {path}; run train-victim first "
            "or point victim.weights at an archive")
    model = _build_victim(config, data)
    load_model(path, model)
    return model


def _oracle_mode(config) -> OracleMode:
    return OracleMode(config.oracle.get("mode", "prob"))


def _make_oracle(config, data):
    endpoint = config.oracle.get("endpoint", "")
    if endpoint:
        return RemoteOracle(endpoint, _oracle_mode(config))
    return LocalOracle(_load_victim(config, data), _oracle_mode(config))


def _build_substitute(config, data):
    return build_classifier(config.dast.get("substitute_arch", "small"),
                            data.input_shape, data.num_classes,
                            seed=config.seed + 1)


def cmd_train_victim(config: ExperimentConfig, args) -> int:
    data = load_dataset(config.dataset)
    victim = _build_victim(config, data)
    seed = int(config.victim.get("seed", config.seed))
    train_classifier(victim, data.train_x, data.train_y,
                     epochs=int(config.victim.get("epochs", 5)),
                     batch_size=int(config.victim.get("batch_size", 64)),
                     lr=float(config.victim.get("lr", 1e-3)),
                     rng=np.random.default_rng(seed), verbose=True)
    acc = accuracy(victim, data.test_x, data.test_y)
    path = _victim_path(config)
    save_model(path, victim, meta={"seed": seed, "test_accuracy": acc})
    with open(os.path.join(config.output_dir, "victim_accuracy.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"test_accuracy": acc}, fh)
        fh.write("\n")
    print(f"victim test accuracy {acc:.4f}; weights saved to {path}")
    return EXIT_OK


def cmd_serve_victim(config: ExperimentConfig, args) -> int:
    data = load_dataset(config.dataset)
    victim = _load_victim(config, data)
    log_path = None
    if config.oracle.get("log_requests", True):
        log_path = os.path.join(config.output_dir, "requests.log")
    rate = float(config.oracle.get("rate_limit", 0))
    server = serve_victim(victim, _oracle_mode(config),
                          host=config.oracle.get("host", "127.0.0.1"),
                          port=int(config.oracle.get("port", 0)),
                          rate_limit=rate or None, log_path=log_path)
    print(f"serving victim at {server.url} "
          f"(mode {_oracle_mode(config).value}); ctrl-c stops", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def _dast_config(config: ExperimentConfig) -> DastConfig:
    d = config.dast
    window = d.get("plateau_window", 0)
    return DastConfig(
        mode=_oracle_mode(config),
        query_budget=int(d.get("query_budget", 100_000)),
        max_iterations=int(d.get("max_iterations", 1_000_000)),
        alpha=float(d.get("alpha", 0.2)),
        batch_size=int(d.get("batch_size", 64)),
        lr_substitute=float(d.get("lr_substitute", 1e-3)),
        lr_generator=float(d.get("lr_generator", 2e-4)),
        latent_dim=int(d.get("latent_dim", 64)),
        eval_interval=int(d.get("eval_interval", 50)),
        seed=config.seed,
        optimizer=d.get("optimizer", "adam"),
        plateau_window=int(window) or None,
        attack_epsilon=float(d.get("attack_epsilon", 0.3)),
        checkpoint_dir=os.path.join(config.output_dir, "checkpoints"),
    )


def cmd_dast(config: ExperimentConfig, args) -> int:
    data = load_dataset(config.dataset)
    oracle = _make_oracle(config, data)
    dcfg = _dast_config(config)
    substitute = _build_substitute(config, data)
    generator = build_generator(data.num_classes, dcfg.latent_dim,
                                data.input_shape, seed=config.seed + 2)
    probe_size = int(config.dast.get("probe_size", 0))
    probe = None
    if probe_size:
        probe = (data.test_x[:probe_size], data.test_y[:probe_size])
    trace_path = os.path.join(config.output_dir, "trace.jsonl")
    try:
        _, trace = dast_train(dcfg, oracle, substitute, generator,
                              probe=probe)
    except TrainingAborted as exc:
        exc.trace.write_jsonl(trace_path)
        print(f"partial trace saved to {trace_path}", file=sys.stderr)
        raise
    save_model(os.path.join(config.output_dir, "substitute.dkwa"), substitute,
               meta={"seed": config.seed + 1})
    arrays = dict(generator.named_arrays())
    save_state_dict(os.path.join(config.output_dir, "generator.dkwa"),
                    arrays, meta={"seed": config.seed + 2,
                                  "num_classes": data.num_classes})
    trace.write_jsonl(trace_path)
    export_curves(trace, os.path.join(config.output_dir, "curves.csv"))
    ledger = oracle.snapshot_ledger()
    print(f"dast finished after {len(trace.l_d_series)} iterations: "
          f"{ledger.train_samples} train samples, "
          f"{ledger.eval_samples} eval samples")
    print(f"substitute saved to "
          f"{os.path.join(config.output_dir, 'substitute.dkwa')}")
    return EXIT_OK


def _attack_config(entry: dict) -> AttackConfig:
    kwargs = {k: v for k, v in entry.items() if k != "method"}
    return AttackConfig(entry.get("method", "fgsm"), **kwargs)


def cmd_attack_eval(config: ExperimentConfig, args) -> int:
    data = load_dataset(config.dataset)
    oracle = _make_oracle(config, data)
    sub_path = os.path.join(config.output_dir, "substitute.dkwa")
    if not os.path.exists(sub_path):
        raise ConfigurationError(
            f"substitute weights not found at {sub_path}; run dast first")
    substitute = _build_substitute(config, data)
    load_model(sub_path, substitute)
    scenario = scenario_name(config)
    entries = config.attacks or [{"method": "fgsm", "epsilon": 0.3}]
    rng = np.random.default_rng(config.seed)
    eligible_cache = {}
    reports = []
    for entry in entries:
        acfg = _attack_config(entry)
        key = (acfg.targeted, acfg.target_label)
        if key not in eligible_cache:
            eligible_cache[key] = eligible_set(
                oracle, (data.test_x, data.test_y), targeted=acfg.targeted,
                target_label=acfg.target_label)
        reports.append(attack_success_rate(
            substitute, oracle, eligible_cache[key], acfg, scenario, rng=rng))
    write_report_json(reports, os.path.join(config.output_dir, "report.json"))
    table = format_table(reports)
    with open(os.path.join(config.output_dir, "report.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    return EXIT_OK


class _GeneratorHarness:
    """Adapts the generator to the checker's model.forward(x) calling
    convention: the input tensor is the latent batch."""

    def __init__(self, gen, labels):
        self.gen = gen
        self.labels = labels

    def parameters(self):
        return self.gen.parameters()

    def zero_grad(self):
        self.gen.zero_grad()

    def forward(self, z):
        return generate(self.gen, LatentBatch(z=z, labels=self.labels))


def cmd_gradcheck(config: ExperimentConfig, args) -> int:
    rng = np.random.default_rng(config.seed)
    shape = (1, 8, 8)
    classes = 3
    labels = np.arange(4, dtype=np.int64) % classes

    classifier = build_classifier("small", shape, classes, seed=config.seed,
                                  dtype=np.float64)
    x_img = Tensor(rng.random((4, *shape)))
    err_c = finite_difference_check(
        classifier, x_img,
        lambda model, x: ops.cross_entropy(model.forward(x), labels),
        rng=rng)
    print(f"classifier (conv / dense / relu): max rel err {err_c:.3e}")

    generator = build_generator(classes, 8, shape, seed=config.seed,
                                dtype=np.float64, batch_norm=True)
    harness = _GeneratorHarness(generator, labels)
    z = Tensor(rng.standard_normal((4, 8)))
    err_g = finite_difference_check(
        harness, z, lambda model, x: ops.mean_all(model.forward(x)), rng=rng)
    print("generator (transposed conv / batch norm / sigmoid): "
          f"max rel err {err_g:.3e}")

    worst = max(err_c, err_g)
    if worst < GRADCHECK_TOLERANCE:
        print(f"PASS, max rel err < {GRADCHECK_TOLERANCE:.0e}")
        return EXIT_OK
    print(f"FAIL, max rel err {worst:.3e} >= {GRADCHECK_TOLERANCE:.0e}")
    return EXIT_CHECK_FAILED


COMMANDS = (
    ("train-victim", cmd_train_victim,
     "train a classifier on the configured dataset and save its weights"),
    ("serve-victim", cmd_serve_victim,
     "expose a trained victim over HTTP until interrupted"),
    ("dast", cmd_dast,
     "train a substitute against the oracle without any real data"),
    ("attack-eval", cmd_attack_eval,
     "craft transfer attacks with the substitute and score them on the victim"),
    ("gradcheck", cmd_gradcheck,
     "verify the gradient engine against finite differences"),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dastkit",
        description="substitute training against black-box classifiers, "
                    "plus the attack and measurement tooling around it")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML run config")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    common.add_argument("--budget", type=int, default=None,
                        help="override dast.query_budget")
    common.add_argument("--endpoint", default=None,
                        help="override oracle.endpoint (empty = in-process)")
    common.add_argument("--mode", choices=("label", "prob"), default=None,
                        help="override oracle.mode")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_text in COMMANDS:
        sub.add_parser(name, parents=[common], help=help_text
                       ).set_defaults(fn=fn)
    return parser


def _apply_overrides(config: ExperimentConfig, args) -> None:
    if args.seed is not None:
        config.seed = args.seed
    if args.budget is not None:
        config.dast["query_budget"] = args.budget
    if args.endpoint is not None:
        config.oracle["endpoint"] = args.endpoint
    if args.mode is not None:
        config.oracle["mode"] = args.mode


def _prepare_run_dir(config: ExperimentConfig, args) -> None:
    os.makedirs(config.output_dir, exist_ok=True)
    write_config_mirror(config,
                        os.path.join(config.output_dir, "config.json"))
    copy = os.path.join(config.output_dir, "config.toml")
    if os.path.abspath(args.config) != os.path.abspath(copy):
        shutil.copyfile(args.config, copy)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        _apply_overrides(config, args)
        _prepare_run_dir(config, args)
        return args.fn(config, args)
    except (ConfigurationError, ArchiveError, EmptyEligibleSetError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TransportError, ProtocolError, TrainingAborted, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
