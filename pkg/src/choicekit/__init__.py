"""Discrete choice estimation: conditional and nested logit."""
from choicekit.conditional_logit import ConditionalLogitModel
from choicekit.dataset import CategoryPartition, ChoiceDataset, JointDataset, join
from choicekit.errors import ChoiceError
from choicekit.estimation import FitOptions, FitResult, fit, run, standard_errors
from choicekit.formula import Regularization, parse_formula
from choicekit.ingest import ColumnRoles, encode_labels, from_long_format, to_long_format
from choicekit.io import load_dataset, write_dataset_dir
from choicekit.kernels import BACKEND as KERNEL_BACKEND
from choicekit.nested_logit import NestedLogitModel, NestStructure
from choicekit.synth import SimSpec, simulate

__version__ = "0.1.0"

__all__ = [
    "CategoryPartition", "ChoiceDataset", "ChoiceError", "ColumnRoles", "ConditionalLogitModel",
    "FitOptions", "FitResult", "JointDataset", "KERNEL_BACKEND", "NestStructure",
    "NestedLogitModel", "Regularization", "SimSpec", "encode_labels", "fit", "from_long_format",
    "join", "load_dataset", "parse_formula", "run", "simulate", "standard_errors",
    "to_long_format", "write_dataset_dir",
]
