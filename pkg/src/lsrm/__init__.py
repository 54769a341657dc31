"""Sparse-attention surface reconstruction, forward pass only.

Deterministic NumPy reference implementation: a dense dual-stream stage over
coarse volume and image tokens, a decode to a finer feature grid, active
token selection, and a sparse residual stage whose attention runs in a
gated compressed/selected/window form over spatial blocks, with simulated
block-aware sequence parallelism and dense oracles for every sparse path.
"""

from .block_partition import (BlockPartition, CompressWeights,
                              compress_block_kv, init_compress_weights,
                              occupancy_stats, partition)
from .block_routing import (RoutingBudgets, RoutingPlan, TokenCoords3D,
                            build_routing_plan, image_token_coords,
                            route_to_image_blocks, route_to_volume_blocks,
                            routing_overlap_report, volume_token_coords,
                            write_plan)
from .camera_geometry import (Camera, SdfField, box_field, eval_sdf,
                              eval_sdf_many, laplace_density, look_at_camera,
                              orbit_cameras, pluecker_rays, project_point,
                              ray_cube_intersection, scene_from_json,
                              silhouette_alpha, sphere_field,
                              surface_point_for_ray, union_field,
                              unproject_point)
from .errors import (BehindCameraError, ConfigurationError,
                     EmptyAttentionRowError, EmptyContextError,
                     GoldenFormatError, LsrmError, OutOfDomainError,
                     ProtocolError, VerificationError)
from .nsa_attention import (GatherTable, NsaWeights, Selection,
                            build_gather_table, cmp_attention, full_selection,
                            init_nsa_weights, nsa_cross_attention,
                            read_selection, score_topk_blocks, sel_attention,
                            win_attention, write_selection)
from .recon_pipeline import (DecoderHeads, DecodeWeights, FeatureVolume,
                             SparseContext, build_sparse_context,
                             build_sparse_features, decode_feature_volume,
                             decode_point, decode_points, dense_stage_forward,
                             init_decode, init_decoder_heads,
                             init_dense_stage, init_sparse_stage, query_field,
                             sparse_stage_forward, zero_sparse_stage)
from .rng import stream, tag_counter
from .runner import (RunConfig, config_from_json, load_json_file,
                     run_pipeline, run_scene, write_artifacts)
from .seq_parallel import (WorkerTopology, all_gather_kv, all_to_all,
                           imbalance_report, message_log_to_csv,
                           parallel_sparse_stage, shard_blocks)
from .tensor_core import (AttentionParams, affine, dense_cross_attention,
                          layer_norm, mlp_forward, read_goldens,
                          trilinear_interpolate, trilinear_interpolate_many,
                          write_goldens)
from .tokenizer import (TokenSet, foreground_patch_mask,
                        informative_voxel_mask, patchify, unpatchify,
                        upsample_select_tokens)
from .verify import compare_goldens, run_suite

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
