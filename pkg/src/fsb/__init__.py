"""Desk-scale study of a restructured human-mesh-recovery inference path.

Subpackages:
  numkit      float32 kernels, gradient tape, FSB1 array files
  bodymodel   toy skinned body templates, forward kinematics, projection
  priors      detection stub, wrist-centered hand boxes, crop grids
  decoder     frozen tokenized encoder/decoder with gated layer updates
  pipeline    serial vs restructured execution plans and latency benches
  projection  mesh topology bridge, iterative fitting, feedforward converter
  cli         the `fsb` command line entry point
"""

__version__ = "0.1.0"
