"""Inverse rendering of spatially varying reflectance and environment lighting.

The main entry points are re-exported here; see the submodules for details.
"""

from ._jit import THREADS_ENV, configure_threads
from .geometry import TriangleMesh, build_and_intersect, load_mesh, save_obj, shading_frame
from .grad import GradientBuffers, backward_render, gradcheck
from .lighting import EnvironmentMap, env_eval, env_pdf, env_sample
from .optim import Hyperparams, Schedule, composite_loss, mvcl, recon_loss, run_two_step, step
from .reflectance import BrdfParams, ReflectanceMaps, brdf_param_derivatives, eval_brdf, pdf_brdf, sample_brdf
from .renderer import CameraView, RenderImage, Scene, render, texel_coverage
from .uv_atlas import bake_atlas, lscm_parameterize, pack_atlas

__version__ = "0.1.0"

configure_threads()
