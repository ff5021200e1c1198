"""Data-free substitute training and black-box transfer attacks.

The package trains a substitute classifier against a label- or
probability-only oracle using only generated samples, then mounts gradient
attacks on the substitute and transfers them to the oracle's model.
"""

__version__ = "0.1.0"

from .attacks import AdvExample, AttackConfig, bim, fgsm, pgd, run_attack
from .config import ExperimentConfig, load_config, parse_config, scenario_name
from .dast import (
    DastConfig,
    TrainingAborted,
    TrainingTrace,
    dast_train,
    generator_loss,
    imitation_distance,
    label_control_loss,
    load_checkpoint,
    plateau_detector,
    save_checkpoint,
    substitute_loss,
)
from .engine import (
    Adam,
    ConfigurationError,
    EmptyGradientError,
    Gradients,
    Parameter,
    Sgd,
    ShapeError,
    Tape,
    Tensor,
    make_optimizer,
    ops,
)
from .evaluation import (
    Agreement,
    AttackReport,
    EligibleSet,
    EmptyEligibleSetError,
    agreement,
    attack_success_rate,
    eligible_set,
    export_curves,
    format_table,
    random_sign_baseline,
    write_report_json,
)
from .nets import (
    ClassifierModel,
    GeneratorModel,
    LatentBatch,
    build_classifier,
    build_generator,
    predict,
    sample_latent,
    train_classifier,
)
from .oracle import (
    LocalOracle,
    OracleMode,
    OracleResponse,
    ProtocolError,
    QueryLedger,
    RemoteOracle,
    TransportError,
    serve_victim,
)

__all__ = [
    "Adam",
    "AdvExample",
    "Agreement",
    "AttackConfig",
    "AttackReport",
    "ClassifierModel",
    "ConfigurationError",
    "DastConfig",
    "EligibleSet",
    "EmptyEligibleSetError",
    "EmptyGradientError",
    "ExperimentConfig",
    "GeneratorModel",
    "Gradients",
    "LatentBatch",
    "LocalOracle",
    "OracleMode",
    "OracleResponse",
    "Parameter",
    "ProtocolError",
    "QueryLedger",
    "RemoteOracle",
    "Sgd",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainingAborted",
    "TrainingTrace",
    "TransportError",
    "__version__",
    "agreement",
    "attack_success_rate",
    "bim",
    "build_classifier",
    "build_generator",
    "dast_train",
    "eligible_set",
    "export_curves",
    "fgsm",
    "format_table",
    "generator_loss",
    "imitation_distance",
    "label_control_loss",
    "load_checkpoint",
    "load_config",
    "make_optimizer",
    "ops",
    "parse_config",
    "pgd",
    "plateau_detector",
    "predict",
    "random_sign_baseline",
    "run_attack",
    "sample_latent",
    "save_checkpoint",
    "scenario_name",
    "serve_victim",
    "substitute_loss",
    "train_classifier",
    "write_report_json",
]
