"""Early-exit CNN, hard-to-easy converting autoencoder, and a latency/energy
benchmark harness for the MNIST-family datasets."""

__version__ = "0.1.0"

from .data import ImageSet, HardnessLabels, load_image_set  # noqa: F401
from .earlyexit import ExitPolicy, entropy, infer_with_exit  # noqa: F401
from .models import (  # noqa: F401
    build_branchy_lenet,
    build_converting_autoencoder,
    build_lenet,
    build_lightweight,
    load_checkpoint,
    save_checkpoint,
)
from .converter import CbnetPipeline, cbnet_infer, convert  # noqa: F401
