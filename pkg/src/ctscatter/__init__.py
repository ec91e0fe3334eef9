"""Monte Carlo photon transport and iterative scatter correction for cone-beam CT."""

from .correction import CorrectionConfig, IterationReport, correct_projections, run_iterative_correction
from .errors import (
    CtScatterError,
    DomainError,
    EnergyRangeError,
    SimulationError,
    TableParseError,
    ValidationError,
)
from .geometry import Ray, ScanGeometry, VoxelPhantom, load_phantom, save_phantom, trace_attenuation
from .metrics import RoiSpec, cnr, mse, ncc, profile_line
from .physics_data import (
    DetectorResponse,
    Material,
    MaterialLibrary,
    Spectrum,
    bundled_material,
    load_detector_response,
    load_material,
    load_spectrum,
)
from .postprocess import SgFilterSpec, interpolate_angles, sg_smooth, upsample_image
from .recon import SegmentationResult, Volume, fbp_reconstruct, intensity_to_attenuation, otsu_thresholds, to_density_phantom
from .sampling import sample_compton, sample_rayleigh
from .transport import DetectorImage, PhotonState, ProjectionStack, SimConfig, run_scan, simulate_primary, simulate_scatter

__version__ = "0.1.0"
