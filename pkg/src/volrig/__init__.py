"""Volumetric animation-skeleton prediction: mesh featurization into
signed-distance / curvature / thickness / density volumes, a stacked 3D
hourglass network trained with a masked heatmap loss, and skeleton
extraction via soft non-maximum suppression and a minimum spanning tree.
"""

__version__ = "0.1.0"

from .backend import backend_name
