"""Small-noise limits of Schrodinger bridges: simulation, entropic OT, rates and Laplace checks."""
from importlib import metadata

try:
    __version__ = metadata.version("artifact")
except metadata.PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

from .model import BridgeSpec, DiffusionModel, brownian, ornstein_uhlenbeck  # noqa: E402
from .simulate import ControlPath, PathBatch, PathSample, SimConfig  # noqa: E402

__all__ = ["__version__", "BridgeSpec", "DiffusionModel", "brownian", "ornstein_uhlenbeck",
           "ControlPath", "PathBatch", "PathSample", "SimConfig"]
