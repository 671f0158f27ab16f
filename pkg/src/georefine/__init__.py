"""Online self-supervised depth refinement on synthetic scenes.

Submodules: geometry (camera/transforms/warping), losses (self-supervised
objectives and gradients), tracking (flow-guided front-end), refiner (online
depth optimization), fusion (TSDF + marching cubes), synthworld (ground-truth
factory), metrics (depth/trajectory evaluation), cli (operator surface).
"""

__version__ = "0.1.0"
