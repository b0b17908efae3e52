"""Multiband imaging inversion: ADMM restoration with deep generative spatial priors."""

from .cubes import (BandMask, EntryMask, ImageCube, MaskedObservation,
                    ObservationSet, PixelMask, apply_entry_mask,
                    cube_to_matrix, matrix_to_cube, scatter_masked)
from .decoder import (GddGenerator, GuidedDecoderModel, decoder_forward,
                      draw_latent, init_gdd, load_gdd, save_gdd, train_gdd)
from .mbio import (DegradationConfig, FormatError, GddConfig, RunConfig,
                   VaeConfig, config_from_dict, read_config, read_cube,
                   read_mask, read_report, write_cube, write_mask,
                   write_report)
from .metrics import MetricReport, ergas, evaluate, psnr, sam, ssim, uiqi
from .operators import (BlurOperator, DegradationModel, Downsampler,
                        SpectralResponse, add_noise_snr, apply_srf,
                        cyclic_blur, degrade, downsample, gaussian_kernel,
                        random_pixel_mask, standard_normal, upsample_adjoint,
                        upsample_naive)
from .phantom import PhantomSpec, make_phantom
from .solvers import (AdmmState, FusionProblem, InpaintProblem, admm_solve,
                      dual_update, fusion_a_update, inpaint_a_update,
                      write_trace, z_update)
from .subspace import SpectralBasis, estimate_subspace, project, reconstruct
from .vae import (VaeGenerator, VaeModel, extract_patches, load_vae, save_vae,
                  train_vae, vae_generate)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
