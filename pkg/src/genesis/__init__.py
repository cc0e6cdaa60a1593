"""Object-centric generative scene modelling: unsupervised decomposition of
images into ordered components and component-wise generation of novel scenes,
trained under a constrained variational objective."""

__version__ = "0.1.0"

from .model import Genesis, GenesisS, LatentChain, ModelConfig, build_model
from .objective import ElboTerms, GecoState, elbo, geco_loss, geco_update

__all__ = [
    "Genesis",
    "GenesisS",
    "LatentChain",
    "ModelConfig",
    "build_model",
    "ElboTerms",
    "GecoState",
    "elbo",
    "geco_loss",
    "geco_update",
    "__version__",
]
