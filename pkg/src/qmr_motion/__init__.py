"""qmr_motion: groupwise motion correction for quantitative MRI sequences."""

__version__ = "0.1.0"

from .config import Config, PhantomConfig, RegistrationConfig, RpcaConfig, T1FitConfig
from .errors import ConfigError, ConvergenceError, DataError, QmrError
from .stack import ImageStack, RoiMask, load_stack, save_stack

__all__ = [
    "__version__",
    "Config",
    "ConfigError",
    "ConvergenceError",
    "DataError",
    "ImageStack",
    "PhantomConfig",
    "QmrError",
    "RegistrationConfig",
    "RoiMask",
    "RpcaConfig",
    "T1FitConfig",
    "load_stack",
    "save_stack",
]
