"""Indoor radio pathloss maps: scene IO, ray-traced targets, physics features,
a numpy autodiff U-Net with coarse-to-fine refinement, and D4 test-time ensembling."""
from ._accel import HAVE_NUMBA
from .features import FeatureConfig, assemble_features
from .grid import D4Element, FeatureStack, NormalizationSpec, d4_elements, d4_transform
from .model import ModelConfig, StageModel, build_model, predict_pathloss
from .oracle import GeneratorParams, TraceConfig, build_dataset, generate_scene, trace_pathloss
from .scene_io import AntennaPattern, DatasetManifest, Scene, load_manifest, load_scene, save_scene

__version__ = "0.1.0"
