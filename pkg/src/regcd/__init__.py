"""Register distorted bi-temporal rasters and map changes inside their overlap."""

from .changekit import (BaselineClassifier, ChangeMap, apply_overlap_mask, baseline_score,
                        detect_changes, weighted_bce)
from .errors import (AssemblyError, ConfigError, ContractError, DecodeError, DegeneracyError,
                     EstimationError, GeometryError, InsufficientDataError, NumericError,
                     PluginError, RegCDError)
from .evalbench import (BenchScenario, ConfusionCounts, DistortionSpec, confusion, draw_distortion,
                        generate_scenario, metrics, registration_error)
from .featpyr import FeatureMap, FilterBank, build_pyramid, fuse_layerwise, gaussian_bank
from .geomest import (Homography, OverlapPolygon, RansacConfig, apply_h, dlt_homography,
                      overlap_polygon, polygon_mask, ransac_homography)
from .matchkit import (BuiltinMatcher, KeypointSet, builtin_match, detect_corners,
                       hierarchical_match, relocalize)
from .pretrainkit import (ClusterCenter, InstanceMask, augment_view, dino_loss_term,
                          extract_instance, filter_masks, generate_instances,
                          symmetric_pretrain_loss, update_center)
from .raster import GridLayout, Raster, Tile, load_raster, partition, stitch, warp_raster

__version__ = "0.1.0"
