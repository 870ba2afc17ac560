"""Real-video front end for the region-graph retrieval engine.

Samples frames from a video file at one-second intervals, runs a CNN
backbone, pools each stage's activation map into a 3x3 grid of regional
max-activation descriptors, concatenates the stages channel-wise, and
writes the result as an RMF1 feature file the retrieval engine consumes.
"""

from .extract import ExtractorConfig, extract
from .rmf1 import write_rmf1

__all__ = ["ExtractorConfig", "extract", "write_rmf1"]
