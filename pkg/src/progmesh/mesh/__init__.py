from .mesh import Mesh, MeshError, load_obj, save_obj, vertex_normals, vertex_normals_op
from .bvh import TriangleBVH, closest_points_brute
from .decimate import DecimationError, decimate
from .hierarchy import (HierarchyLevel, MeshHierarchy, build_hierarchy, embed, load_hierarchy,
                        save_hierarchy, upsample)

__all__ = [
    "Mesh", "MeshError", "load_obj", "save_obj", "vertex_normals", "vertex_normals_op",
    "TriangleBVH", "closest_points_brute", "DecimationError", "decimate",
    "HierarchyLevel", "MeshHierarchy", "build_hierarchy", "embed", "load_hierarchy",
    "save_hierarchy", "upsample",
]
