from .template import icosphere, make_template
from .deform import DeformBasis, DeformationField, apply_deformation
from .render import ProceduralTexture, rasterize, render_views
from .dataset import (CaptureInput, DatasetConfig, Sample, SynthDataset, SynthWorld,
                      generate_dataset, read_pfm, write_pfm)

__all__ = [
    "icosphere", "make_template", "DeformBasis", "DeformationField", "apply_deformation",
    "ProceduralTexture", "rasterize", "render_views", "CaptureInput", "DatasetConfig", "Sample",
    "SynthDataset", "SynthWorld", "generate_dataset", "read_pfm", "write_pfm",
]
