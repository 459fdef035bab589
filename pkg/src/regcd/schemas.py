"""JSON Schemas (draft 2020-12) for plugin wire formats and CLI artifacts.

Plugin programs are invoked as argv lists with file paths appended:

    matcher:    command... a.png b.png out.json   -> KEYPOINTS
    segmenter:  command... image.png out.json     -> SEGMENTER_OUTPUT

A non-zero exit status, a missing or unreadable ``out.json``, or a document
that does not fit its schema is reported as a plugin failure. Matcher
coordinates are full-resolution pixels of ``a.png`` (t1) and ``b.png`` (t2).

The package itself does not depend on a schema validator; these dicts are
published for plugin authors and exercised by the test suite.
"""

_DIALECT = "https://json-schema.org/draft/2020-12/schema"

_point = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}

KEYPOINTS = {
    "$schema": _DIALECT,
    "title": "KeypointSet",
    "type": "object",
    "required": ["pairs"],
    "properties": {
        "pairs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["t1", "t2"],
                "properties": {
                    "t1": _point,
                    "t2": _point,
                    "conf": {"type": "number", "default": 1.0},
                    # plugins must report scale 1 (original pixels)
                    "scale": {"type": "integer", "enum": [1, 2, 4], "default": 1},
                    "level": {"type": "integer", "enum": [1, 2, 4]},
                },
            },
        },
    },
}

SEGMENTER_OUTPUT = {
    "$schema": _DIALECT,
    "title": "SegmenterOutput",
    "type": "object",
    "required": ["masks"],
    "properties": {
        "masks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["png"],
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "png": {"type": "string", "description": "0/255 mask, path relative to the JSON file"},
                },
            },
        },
    },
}

HOMOGRAPHY = {
    "$schema": _DIALECT,
    "title": "Homography",
    "type": "object",
    "required": ["h"],
    "properties": {
        "h": {"type": "array", "minItems": 3, "maxItems": 3,
              "items": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}},
    },
}

OVERLAP = {
    "$schema": _DIALECT,
    "title": "OverlapPolygon",
    "type": "object",
    "required": ["vertices"],
    "properties": {"vertices": {"type": "array", "items": _point}},
}

DISTORTION_SPEC = {
    "$schema": _DIALECT,
    "title": "DistortionSpec",
    "type": "object",
    "required": ["level", "rotation_deg", "shift_frac"],
    "properties": {
        "level": {"type": "integer", "enum": [1, 2, 3]},
        "rotation_deg": {"type": "number", "minimum": -30, "maximum": 30},
        "shift_frac": {"type": "array", "items": {"type": "number", "minimum": -0.2, "maximum": 0.2},
                       "minItems": 2, "maxItems": 2},
        "seed": {"type": ["integer", "null"]},
        "order": {"const": "rotate-about-centre-then-shift"},
    },
}

_counts = {"type": "integer", "minimum": 0}
_unit = {"type": "number", "minimum": 0, "maximum": 1}

METRICS = {
    "$schema": _DIALECT,
    "title": "Metrics",
    "type": "object",
    "required": ["precision", "recall", "f1", "iou", "oa", "confusion"],
    "properties": {
        "precision": _unit, "recall": _unit, "f1": _unit, "iou": _unit, "oa": _unit,
        "confusion": {"type": "object", "required": ["tp", "fp", "fn", "tn"],
                      "properties": {k: _counts for k in ("tp", "fp", "fn", "tn")},
                      "additionalProperties": False},
        "registration_error": {"type": "object", "required": ["mean_px", "max_px"],
                               "properties": {"mean_px": {"type": "number", "minimum": 0},
                                              "max_px": {"type": "number", "minimum": 0}}},
    },
}

_plugin = {"oneOf": [{"type": "string", "minLength": 1},
                     {"type": "array", "items": {"type": "string"}, "minItems": 1}]}

PIPELINE_CONFIG = {
    "$schema": _DIALECT,
    "title": "PipelineConfig",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "tile_size": {"type": "integer", "minimum": 32},
        "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "omega": {"type": "number", "exclusiveMinimum": 0},
        "matcher": _plugin,
        "segmenter": _plugin,
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "workers": {"type": "integer", "minimum": 1},
        "ransac": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "inlier_threshold": {"type": "number", "exclusiveMinimum": 0},
                "max_iterations": {"type": "integer", "minimum": 1},
                "confidence": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
    },
}

ALL = {
    "keypoints": KEYPOINTS,
    "segmenter_output": SEGMENTER_OUTPUT,
    "homography": HOMOGRAPHY,
    "overlap": OVERLAP,
    "distortion_spec": DISTORTION_SPEC,
    "metrics": METRICS,
    "pipeline_config": PIPELINE_CONFIG,
}
