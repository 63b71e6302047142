"""Surfel-scene renderer with probe-cached lighting for object-scene composition."""

from .geometry import (ALPHA_CUTOFF, T_STOP, Bvh, PlacementTransform, Ray, Surfel,
                       SurfelFormatError, SurfelHit, SurfelScene, apply_transform,
                       load_surfels, ray_surfel_intersect, save_surfels,
                       surfel_normal, trace_ordered, transmittance)
from .octmap import (OctTexture, SamplingTable, build_sampling_table, dir_to_oct_uv,
                     hammersley, importance_sample, oct_uv_to_dir, sample_texture,
                     texel_solid_angle, texel_solid_angles, uniform_hemisphere_dir)
from .gbuffer import (Camera, GBuffer, ShadingPointSet, W_MIN, depth_to_points,
                      normal_from_depth, render_gbuffers, shading_points,
                      unbiased_depth)
from .shading import (BRDFParams, IlluminationContext, ShadedImage, deferred_pbr,
                      eval_brdf, incident_radiance, shade_point_importance,
                      shade_point_uniform)
from .probes import (Probe, ProbeSet, bake_probe, bake_probes, build_probe_set,
                     farthest_point_sample, frnn_query, fuse_surface_points,
                     interpolate, interpolate_batch, interpolated_vs_traced_error,
                     load_probes, place_probes, save_probes)
from .lighting import (EVStack, HdrEnvironment, PartialPanorama, capture_panorama,
                       capture_radiance, complete_panorama, equirect_to_oct,
                       estimate_environment, fuse_hdr)
from .composition import (ObjectRender, ShadowField, ShadowRegion, cache_occlusion,
                          compose_frame, define_shadow_region, relight_object,
                          shadow_ratio, shadow_ratio_batch)
from .metrics import (ImagePair, l1, loss_d2n, loss_lam, loss_mask, loss_sops,
                      psnr, render_loss, ssim)
from .errors import ConfigError, FormatError, NumericalError

__version__ = "0.1.0"
