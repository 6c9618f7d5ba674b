"""Navigator-teacher-scrutinizer fine-grained classification on numpy.

Region proposals are ranked by a navigator network, scored by a teacher
network and fused by a scrutinizer network, trained jointly with a
pairwise ranking loss that ties informativeness to teacher confidence.
"""

from .estimator import NTSClassifier
from .geometry import AnchorSpec, Proposal, Region
from .synthdata import SynthConfig, generate_dataset
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "AnchorSpec",
    "NTSClassifier",
    "Proposal",
    "Region",
    "SynthConfig",
    "TrainConfig",
    "evaluate",
    "generate_dataset",
    "train",
]
__version__ = "0.1.0"
