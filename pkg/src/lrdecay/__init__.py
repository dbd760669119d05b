"""Learning-rate decay toolkit: smoothed-loss AutoDecay, Hessian spectra, PS10 and transferability."""

__version__ = "0.1.0"

from .autodecay import AutoDecay, AutoDecayConfig  # noqa: E402
from .estimator import DecayMLPClassifier  # noqa: E402
from .ndgrad import HvpOperator, MlpConfig  # noqa: E402
from .ps10 import Ps10Dataset, Ps10Spec  # noqa: E402
from .spectrum import top_k_eigs  # noqa: E402
from .trainer import Auto, Constant, Step, TrainConfig, train  # noqa: E402
from .transfer import compute_table  # noqa: E402

__all__ = [
    "AutoDecay",
    "AutoDecayConfig",
    "DecayMLPClassifier",
    "HvpOperator",
    "MlpConfig",
    "Ps10Dataset",
    "Ps10Spec",
    "top_k_eigs",
    "Auto",
    "Constant",
    "Step",
    "TrainConfig",
    "train",
    "compute_table",
]
