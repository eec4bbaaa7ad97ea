"""Fourier ptychography simulation, reconstruction, and unpaired virtual staining."""

from .optics import (
    AcquisitionStack,
    ArtifactConfig,
    Capture,
    ComplexField,
    IlluminationGeometry,
    PupilFunction,
    defocus_pupil,
    grid_geometry,
    ideal_pupil,
    illumination_wavevector,
    inject_coherent_artifacts,
    simulate_capture,
    simulate_stack,
)
from .recovery import (
    ReconstructionConfig,
    ReconstructionResult,
    compose_color,
    digital_refocus,
    reconstruct,
    sharpness_figure,
    synthetic_na,
)
from .metrics import SsimParams, SsimReport, ms_ssim_green, ssim, tile_report
from .translate import (
    LossBreakdown,
    TrainConfig,
    TranslationModel,
    generator_forward,
    discriminator_forward,
    load_model,
    save_model,
    total_loss,
    train,
    virtual_stain,
)
from .pipeline import (
    DatasetManifest,
    TileSet,
    build_dataset,
    normalize_for_network,
    denormalize_from_network,
    read_cfld,
    stitch_tiles,
    tile_image,
    write_cfld,
)

__version__ = "0.1.0"
