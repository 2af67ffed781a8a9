"""twinbelt: rotate boxes of unknown mass distribution on twin conveyor belts.

Planar rigid-body simulator with per-voxel Coulomb friction, a gray-box
model-predictive controller (equations of motion + learned mass-distribution
estimator + calibrated control-to-force map), a black-box learned-dynamics
baseline, and a benchmark harness.
"""

__version__ = "0.1.0"
