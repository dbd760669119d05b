"""Desk-scale experiment recipes on PS10.

Each recipe pins its dataset, model and schedules so that a call with a seed
is fully reproducible. Headline numbers use :func:`final_value`, the mean of
the last ``TAIL`` logged epochs, because a single SGD epoch at a large
constant rate can swing subset accuracies by several points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad, ps10
from .autodecay import AutoDecayConfig
from .spectrum import top_k_eigs
from .trainer import Auto, Constant, RunResult, Step, TrainConfig, fit_arrays, train

__all__ = [
    "TAIL",
    "final_value",
    "decay_gain_attribution",
    "SplitSetup",
    "pattern_setup",
    "noise_setup",
    "AUTODECAY_CONFIG",
    "autodecay_setup",
    "run_pair",
    "divergence_probe",
]

TAIL = 10


def final_value(run: RunResult, column: str, tail: int = TAIL) -> float:
    values = run.column(column)[-tail:]
    return float(np.nanmean(values))


def decay_gain_attribution(run: RunResult, data: ps10.Ps10Dataset, width: int = 5) -> list[dict]:
    """Split the total-accuracy change around each decay into simple and complex parts.

    For a decay after epoch ``e`` the change of a column is the mean over
    epochs ``e+1 .. e+width`` minus the mean over ``e-width+1 .. e``. Each
    subset contributes its change weighted by its share of the clean
    evaluation examples, so the two contributions add up to the change in
    ``total_acc``.
    """
    n_simple = int((data.subsets == ps10.Subset.SIMPLE_ONLY).sum())
    n_complex = int((data.subsets == ps10.Subset.COMPLEX_ONLY).sum())
    w_s, w_c = n_simple / (n_simple + n_complex), n_complex / (n_simple + n_complex)
    epochs = run.column("epoch")
    out = []
    for e in run.decay_epochs():
        before = (epochs > e - width) & (epochs <= e)
        after = (epochs > e) & (epochs <= e + width)

        def delta(col):
            v = run.column(col)
            return float(v[after].mean() - v[before].mean())

        out.append(
            {
                "epoch": int(e),
                "total_gain": delta("total_acc"),
                "simple_part": w_s * delta("simple_acc"),
                "complex_part": w_c * delta("complex_acc"),
            }
        )
    return out


@dataclass(frozen=True)
class SplitSetup:
    """Dataset, model and the two schedules compared by a recipe."""

    spec: ps10.Ps10Spec
    hidden_dims: tuple[int, ...]
    first: object
    second: object
    epochs: int
    batch_size: int = 32

    def data(self):
        return ps10.generate(self.spec, "train"), ps10.generate(self.spec, "test")

    def model(self, seed: int) -> ndgrad.MlpConfig:
        return ndgrad.MlpConfig(6, self.hidden_dims, self.spec.num_classes, init_seed=seed)

    def config(self, schedule, seed: int, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(schedule, epochs=epochs or self.epochs, batch_size=self.batch_size, seed=seed)


def pattern_setup(seed: int) -> SplitSetup:
    """Step decay from a large rate against the same large rate held constant (clean PS10).

    Images are 1x1: spatial constancy makes the 6 channel values a lossless input.
    """
    spec = ps10.Ps10Spec(height=1, width=1, seed=seed)
    return SplitSetup(spec, (128, 128), Step(0.5, (150, 250), 10.0), Constant(0.5), epochs=300)


def noise_setup(seed: int) -> SplitSetup:
    """Large rate with decay against a small constant rate, with 10% label noise."""
    spec = ps10.Ps10Spec(
        complex_per_class=30,
        examples_total=3000,
        noise_fraction=0.1,
        noise_source="dual",
        height=1,
        width=1,
        seed=seed,
    )
    return SplitSetup(spec, (64, 64), Step(1.0, (450, 550), 10.0), Constant(0.05), epochs=600)


AUTODECAY_CONFIG = AutoDecayConfig(beta=0.95, window_w=20, eta_tol=0.035)


def autodecay_setup(seed: int, config: AutoDecayConfig | None = None) -> SplitSetup:
    """AutoDecay against the reference step schedule of :func:`pattern_setup`.

    ``AUTODECAY_CONFIG`` smooths harder and looks over a longer window than the
    controller defaults: at rate 0.5 with batch 32 the epoch loss is noisy
    enough that the defaults see a plateau within 70 to 150 epochs.
    """
    spec = ps10.Ps10Spec(height=1, width=1, seed=seed)
    auto = Auto(config or AUTODECAY_CONFIG, 0.5)
    return SplitSetup(spec, (128, 128), auto, Step(0.5, (150, 250), 10.0), epochs=300)


def run_pair(setup: SplitSetup, seed: int):
    """Train both schedules of ``setup`` from the same initialisation; returns ``(first, second, test)``."""
    train_data, test_data = setup.data()
    model = setup.model(seed)
    first = train(model, train_data, setup.config(setup.first, seed), eval_data=test_data)
    second = train(model, train_data, setup.config(setup.second, seed), eval_data=test_data)
    return first, second, test_data


def divergence_probe(
    seed: int,
    multipliers=(0.5, 1.1),
    pre_epochs: int = 200,
    pre_lr: float = 0.1,
    examples_total: int = 3000,
    gd_epochs: int = 50,
) -> dict:
    """Train the default MLP, measure lambda_1 of the training loss, then run GD at multiples of 2/lambda_1."""
    spec = ps10.Ps10Spec(examples_total=examples_total, height=1, width=1, seed=seed)
    data = ps10.generate(spec)
    model = ndgrad.MlpConfig(6, (64, 64), spec.num_classes, init_seed=seed)
    pre = train(model, data, TrainConfig(Constant(pre_lr), epochs=pre_epochs, batch_size=32, seed=seed))
    params = pre.final_params
    op = ndgrad.HvpOperator(model, params, data.features, data.labels)
    report = top_k_eigs(op, 1, max_iters=1000, tol=1e-4, seed=seed)
    lam = report.eigenvalues[0]
    runs = {}
    for m in multipliers:
        cfg = TrainConfig(Constant(m * 2.0 / lam), epochs=gd_epochs, optimizer="gd", seed=seed)
        r = fit_arrays(model, data.features, data.labels, cfg, init_params=params)
        runs[m] = {
            "lr": m * 2.0 / lam,
            "diverged": r.diverged,
            "max_loss": float(np.nanmax(r.column("train_loss"))),
            "final_loss": float(r.records[-1].train_loss),
        }
    return {"lambda1": lam, "converged": report.converged[0], "start_loss": pre.records[-1].train_loss, "runs": runs}
