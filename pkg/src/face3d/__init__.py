"""3D-model-based face detection mathematics.

Submodules:

* ``geometry``: rotations, projected rigid poses, boxes, IoU.
* ``rigid_fit``: closed-form and projected rigid point-set fitting.
* ``shape_learn``: learning a rigid 3D keypoint model from 2D annotations.
* ``psm``: parameter-sensitive linear/nonlinear scoring models and training.
* ``pose_regression``: binned additive regression to relative 6-DoF pose.
* ``candidates``: face candidate generation, keypoint support, scoring, NMS.
* ``synth_oracle``: seeded synthetic scenes plus brute-force oracles.
* ``pipeline``: end-to-end wiring of the detection stages.
* ``cli``: command-line driver.
"""

__version__ = "0.1.0"
