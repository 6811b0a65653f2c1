"""Maximum-likelihood estimation: the epoch loop, stopping rules and standard errors.

Models expose a small protocol used here: ``objective_and_grad(data, theta)``,
``nll_and_grad(data, theta)``, ``subset_data``, ``full_data``,
``penalized_mask``, ``to_natural``, ``natural_jacobian_diag`` and a writable
``theta``.  Both :class:`~choicekit.conditional_logit.ConditionalLogitModel`
and :class:`~choicekit.nested_logit.NestedLogitModel` implement it.
"""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from choicekit.conditional_logit import make_regularization, penalty
from choicekit.dataset import batch_indices
from choicekit.errors import (
    Diverged,
    LineSearchFailed,
    ModelConfigError,
    RegularizedModel,
    SingularHessian,
)
from choicekit.formula import Regularization
from choicekit.layout import ParamStore
from choicekit.optim import LBFGS, AdamState, adam_update, gd_update

OPTIMIZERS = ("gd", "adam", "lbfgs")
MAX_LR_HALVINGS = 5


@dataclass
class FitOptions:
    optimizer: str = "adam"
    learning_rate: float = 0.01
    num_epochs: int = 5000
    batch_size: int = -1
    seed: int = 0
    early_stop: bool = True
    window: int = 50
    rel_tol: float = 1e-5
    max_epochs: int = 30000
    # stop once ||grad||_inf <= grad_tol * max(1, |objective|); 0 disables
    grad_tol: float = 1e-7
    init: str = "zeros"
    regularization: Regularization | None = None
    lbfgs_memory: int = 10
    verbose: bool = False

    def __post_init__(self):
        self.optimizer = str(self.optimizer).lower()
        if self.optimizer not in OPTIMIZERS:
            raise ModelConfigError(
                f"optimizer must be one of {', '.join(OPTIMIZERS)}, got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ModelConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.window < 1:
            raise ModelConfigError(f"early-stop window must be >= 1, got {self.window}")
        if self.num_epochs < 0:
            raise ModelConfigError(f"num_epochs must be >= 0, got {self.num_epochs}")
        if self.batch_size == 0 or self.batch_size < -1:
            raise ModelConfigError(f"batch_size must be -1 or positive, got {self.batch_size}")
        if self.optimizer == "lbfgs" and self.batch_size != -1:
            raise ModelConfigError("L-BFGS runs full-batch only (batch_size=-1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        reg = self.regularization
        d["regularization"] = None if reg is None else asdict(reg)
        return d


class EarlyStopper:
    """Fires when a value moves by less than ``rel_tol`` relative to the
    average of the previous ``window`` values.

    Given a constant sequence it fires on the ``window + 1``-th update.
    """

    def __init__(self, window=50, rel_tol=1e-5):
        self.window = window
        self.rel_tol = rel_tol
        self.history: list[float] = []

    def update(self, value: float) -> bool:
        self.history.append(float(value))
        if len(self.history) <= self.window:
            return False
        avg = float(np.mean(self.history[-self.window - 1:-1]))
        return abs(value - avg) <= self.rel_tol * abs(avg)


@dataclass
class FitResult:
    params: ParamStore
    nll: float
    objective: float
    trace_nll: np.ndarray
    trace_objective: np.ndarray
    trace_grad_norm: np.ndarray
    trace_wall_ms: np.ndarray
    epochs: int
    wall_time: float
    converged: bool
    stop_reason: str
    grad_norm: float
    learning_rate: float
    num_records: int
    std_errors: np.ndarray | None = None
    options: FitOptions = field(default_factory=FitOptions)

    @property
    def theta(self) -> np.ndarray:
        return self.params.theta

    @property
    def log_likelihood(self) -> float:
        return -self.nll

    def write_trace(self, path, timing=True):
        """Write ``epoch,nll,grad_norm,wall_ms``; ``timing=False`` leaves
        ``wall_ms`` blank so the file is reproducible byte for byte."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "nll", "grad_norm", "wall_ms"])
            for e in range(self.epochs):
                wall = f"{self.trace_wall_ms[e]:.3f}" if timing else ""
                w.writerow([e + 1, repr(float(self.trace_nll[e])),
                            repr(float(self.trace_grad_norm[e])), wall])

    def summary(self) -> dict:
        return {
            "final_nll": self.nll,
            "final_log_likelihood": -self.nll,
            "final_objective": self.objective,
            "epochs": self.epochs,
            "wall_time_seconds": self.wall_time,
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "grad_norm": self.grad_norm,
            "final_learning_rate": self.learning_rate,
            "num_params": int(self.params.theta.size),
            "num_records": self.num_records,
        }


def _nll_from_objective(model, theta, objective):
    reg = model.regularization
    if reg is None or reg.weight == 0:
        return objective
    mask = model.penalized_mask()
    return objective - penalty(theta[mask], reg)[0]


def _initial_theta(model, options):
    if options.init == "keep":
        return model.theta.copy()
    model.initialize(options.init, seed=options.seed)
    return model.theta.copy()


def fit(model, data, options: FitOptions | None = None, **overrides) -> FitResult:
    """Estimate ``model`` on ``data`` and leave the estimate in ``model.theta``.

    One epoch is a pass over all records: one update for full-batch GD/Adam,
    one update per mini-batch otherwise, and one line-searched iteration for
    L-BFGS.  The trace records full-data values at the end of every epoch.
    """
    options = replace(options or FitOptions(), **overrides)
    if options.regularization is not None:
        model.set_regularization(make_regularization(options.regularization))
    full = model.full_data(data)
    n = len(full)
    theta = _initial_theta(model, options)

    def fg(th):
        return model.objective_and_grad(full, th)

    start = time.perf_counter()
    lr = options.learning_rate
    budget = min(options.num_epochs, options.max_epochs)
    stopper = EarlyStopper(options.window, options.rel_tol)
    nll_tr, obj_tr, g_tr, wall_tr = [], [], [], []
    f, g = fg(theta)
    if not np.isfinite(f):
        raise Diverged("objective is not finite at the initial parameters")
    stop_reason = "max_epochs"
    converged = False

    lbfgs = None
    adam = AdamState.zeros(theta.size) if options.optimizer == "adam" else None
    if options.optimizer == "lbfgs":
        lbfgs = LBFGS(fg, theta, lr=lr, memory=options.lbfgs_memory)

    def grad_small(f_, g_):
        return options.grad_tol > 0 and np.max(np.abs(g_), initial=0.0) <= \
            options.grad_tol * max(1.0, abs(f_))

    for epoch in range(1, budget + 1):
        halvings = 0
        while True:
            if lbfgs is not None:
                try:
                    new_theta, new_f, new_g = lbfgs.step()
                    new_theta = new_theta.copy()
                except LineSearchFailed:
                    new_theta = None
            else:
                saved_state = adam.copy() if adam is not None else None
                new_theta = _first_order_epoch(model, full, theta, g, lr, adam, options,
                                               epoch, n)
                new_f, new_g = fg(new_theta)
            if new_theta is None or np.isfinite(new_f):
                break
            halvings += 1
            if halvings > MAX_LR_HALVINGS:
                raise Diverged(f"objective became non-finite at epoch {epoch} after "
                               f"{MAX_LR_HALVINGS} learning-rate halvings")
            lr *= 0.5
            if adam is not None:
                adam = saved_state
        if new_theta is None:
            # the line search cannot decrease the objective any further
            stop_reason = "line_search_stalled"
            converged = bool(np.max(np.abs(g), initial=0.0) <= 1e-6 * max(1.0, abs(f)))
            break
        theta, f, g = new_theta, new_f, new_g
        gnorm = float(np.max(np.abs(g), initial=0.0))
        obj_tr.append(float(f))
        nll_tr.append(float(_nll_from_objective(model, theta, f)))
        g_tr.append(gnorm)
        wall_tr.append((time.perf_counter() - start) * 1000.0)
        if options.verbose and (epoch % 100 == 0 or epoch == 1):
            print(f"epoch {epoch}: objective={f:.6f} grad_inf={gnorm:.3e}")
        fired = stopper.update(f)
        if grad_small(f, g):
            stop_reason, converged = "grad_tol", True
            break
        if options.early_stop and fired:
            stop_reason, converged = "early_stop", True
            break

    model.theta = theta
    return FitResult(
        params=model.params.copy(),
        nll=float(_nll_from_objective(model, theta, f)),
        objective=float(f),
        trace_nll=np.array(nll_tr),
        trace_objective=np.array(obj_tr),
        trace_grad_norm=np.array(g_tr),
        trace_wall_ms=np.array(wall_tr),
        epochs=len(nll_tr),
        wall_time=time.perf_counter() - start,
        converged=converged,
        stop_reason=stop_reason if budget > 0 else "num_epochs=0",
        grad_norm=float(np.max(np.abs(g), initial=0.0)),
        learning_rate=lr,
        num_records=n,
        options=options,
    )


def _first_order_epoch(model, full, theta, full_grad, lr, adam, options, epoch, n):
    step = (lambda th, gr: adam_update(adam, th, gr, lr)) if adam is not None else \
        (lambda th, gr: gd_update(th, gr, lr))
    if options.batch_size == -1 or options.batch_size >= n:
        return step(theta, full_grad)
    theta = theta.copy()
    for idx in batch_indices(n, options.batch_size, shuffle=True, seed=(options.seed, epoch)):
        _, gr = model.objective_and_grad(model.subset_data(full, idx), theta)
        theta = step(theta, gr)
    return theta


# ----------------------------------------------------------------------
def numerical_hessian(grad_fn, theta, h=1e-5) -> np.ndarray:
    """Symmetrized Hessian from central differences of an analytic gradient."""
    theta = np.asarray(theta, dtype=np.float64)
    p = theta.size
    H = np.empty((p, p))
    for j in range(p):
        e = np.zeros(p)
        e[j] = h
        H[:, j] = (grad_fn(theta + e) - grad_fn(theta - e)) / (2.0 * h)
    return 0.5 * (H + H.T)


def standard_errors(model, data, theta=None, h=1e-5, scale="natural") -> np.ndarray:
    """Asymptotic standard errors from the inverse NLL Hessian.

    The Hessian is taken with respect to the internal parameters (log-lambda
    for nested models); ``scale="natural"`` maps them back with the delta
    method.  The result is aligned with ``model.theta``; pinned rows are
    reported as NaN by :meth:`ParamStore.materialize`.
    """
    reg = model.regularization
    if reg is not None and reg.weight > 0:
        raise RegularizedModel(
            "standard errors of a penalized estimate are not defined; refit with weight 0")
    full = model.full_data(data)
    theta = model.theta if theta is None else np.asarray(theta, dtype=np.float64)
    H = numerical_hessian(lambda th: model.nll_and_grad(full, th)[1], theta, h)
    if not np.all(np.isfinite(H)):
        raise SingularHessian("Hessian has non-finite entries")
    eig, vec = np.linalg.eigh(H)
    top = max(float(np.abs(eig).max(initial=0.0)), 1.0)
    if eig.size and eig.min() <= 1e-8 * top:
        raise SingularHessian(
            f"Hessian is not positive definite (smallest eigenvalue {eig.min():.3e}); "
            "the parameters are not identified at this estimate")
    var = np.einsum("ij,j,ij->i", vec, 1.0 / eig, vec)
    se = np.sqrt(var)
    if scale == "natural":
        se = se * model.natural_jacobian_diag(theta)
    elif scale != "internal":
        raise ValueError(f"scale must be 'natural' or 'internal', got {scale!r}")
    return se


# ----------------------------------------------------------------------
def report(model, result: FitResult, item_labels=None, user_labels=None) -> str:
    """Plain-text summary with the coefficient table."""
    rows = model.coefficient_rows(result.std_errors, item_labels=item_labels,
                                  user_labels=user_labels)
    lines = [
        f"records: {result.num_records}  parameters: {result.params.theta.size}",
        f"epochs: {result.epochs}  converged: {result.converged} ({result.stop_reason})",
        f"final log-likelihood: {-result.nll:.6f}",
        f"wall time: {result.wall_time:.3f} s",
        "",
        f"{'coefficient':<32}{'level':<7}{'entity':>10}{'dim':>5}{'estimate':>14}{'std.err':>12}",
    ]
    for r in rows:
        se = "" if r["std_error"] is None else f"{r['std_error']:.6f}"
        lines.append(f"{r['coefficient']:<32}{r['level']:<7}{str(r['entity_index']):>10}"
                     f"{r['dim']:>5}{r['estimate']:>14.6f}{se:>12}")
    return "\n".join(lines)


def run(model, dataset, batch_size=-1, learning_rate=0.01, num_epochs=5000,
        model_optimizer="adam", compute_std_errors=True, seed=0, print_report=True,
        **options) -> FitResult:
    """Fit, attach standard errors where defined, and print a report."""
    opts = FitOptions(optimizer=str(model_optimizer).lower(), learning_rate=learning_rate,
                      num_epochs=num_epochs, batch_size=batch_size, seed=seed, **options)
    result = fit(model, dataset, opts)
    reg = model.regularization
    if compute_std_errors and (reg is None or reg.weight == 0):
        try:
            result.std_errors = standard_errors(model, dataset)
        except SingularHessian:
            result.std_errors = None
    if hasattr(model, "check_lambda"):
        model.check_lambda()
    if print_report:
        print(report(model, result))
    return result
