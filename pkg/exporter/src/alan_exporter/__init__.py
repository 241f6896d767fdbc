"""Bridge from raw echocardiogram frames to ALANFEAT feature tensors.

A frozen pretrained vision transformer runs over every frame; per-frame
patch tokens become the feature grid and the class token becomes the
global descriptor consumed by view classification.
"""

__version__ = "0.1.0"
