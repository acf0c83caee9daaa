"""Text-conditioned hand-object interaction generation.

Three-stage pipeline: contact-map prediction on the object point cloud,
transformer diffusion over joint hand+object motion, and a feed-forward hand
refiner, plus the geometry, hand-model, text, dataset and metric tooling
around them.
"""

from .config import VERSION, RunConfig, desk_scale_config
from .motion import MotionSequence
from .pipeline import GenerationPipeline

__version__ = VERSION.split("-")[-1]

__all__ = ["VERSION", "RunConfig", "desk_scale_config", "MotionSequence",
           "GenerationPipeline", "__version__"]
