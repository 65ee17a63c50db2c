"""Run configuration: one JSON document with sections for scenes, the
voxel grid, the model, training, and evaluation.  Unknown keys are
rejected with a JSON-pointer style path so typos fail loudly.
"""

from __future__ import annotations

import json

from .bev import PRESETS, VoxelConfig
from .losses import LossWeights
from .model import ModelConfig
from .scenes import SceneSpec
from .train import TrainConfig

_SCENE_KEYS = {
    "boxes_min", "boxes_max", "small_fraction", "radius_range",
    "min_center_gap", "angular_step", "rings", "range_noise",
    "occluder_prob", "clutter_points",
}
_VOXEL_KEYS = {"preset", "x_range", "y_range", "z_range", "cell"}
_MODEL_KEYS = {"widths", "num_classes", "bev_channels"}
_TRAIN_KEYS = {
    "seed", "epochs", "batch_size", "lr", "adam_beta1", "adam_beta2",
    "augment", "raw_dims", "val_every", "weights",
    "final_lr_epochs", "final_lr_scale",
}
_WEIGHT_KEYS = {"box", "aux", "alpha", "beta", "eps", "tau"}
_EVAL_KEYS = {"iou_threshold", "score_threshold", "nms_iou"}
_ABLATION_KEYS = {"use_raa", "lite", "use_adle", "use_aniso_gaussian"}
_SECTIONS = {"scene", "voxel", "model", "train", "eval", "ablation"}


class ConfigError(ValueError):
    pass


def _check_keys(d, allowed, path):
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown config key at /{path}/{k}")


class RunConfig:
    def __init__(self, doc=None):
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        _check_keys(doc, _SECTIONS, "")
        scene = dict(doc.get("scene", {}))
        _check_keys(scene, _SCENE_KEYS, "scene")
        for k in ("radius_range",):
            if k in scene:
                scene[k] = tuple(scene[k])
        self.scene = SceneSpec(**scene)

        voxel = dict(doc.get("voxel", {}))
        _check_keys(voxel, _VOXEL_KEYS, "voxel")
        preset = voxel.pop("preset", None)
        if preset is not None:
            if voxel:
                raise ConfigError("/voxel: preset cannot be combined with overrides")
            if preset not in PRESETS:
                raise ConfigError(
                    f"/voxel/preset: unknown preset {preset!r}; "
                    f"choose from {sorted(PRESETS)}"
                )
            self.voxel = PRESETS[preset]
        else:
            for k in list(voxel):
                voxel[k] = tuple(voxel[k])
            self.voxel = VoxelConfig(**voxel)

        ablation = dict(doc.get("ablation", {}))
        _check_keys(ablation, _ABLATION_KEYS, "ablation")

        model = dict(doc.get("model", {}))
        _check_keys(model, _MODEL_KEYS, "model")
        if "widths" in model:
            model["widths"] = tuple(model["widths"])
        self.model = ModelConfig(
            use_raa=bool(ablation.get("use_raa", True)),
            lite=bool(ablation.get("lite", False)),
            use_adle=bool(ablation.get("use_adle", True)),
            **model,
        )

        train = dict(doc.get("train", {}))
        _check_keys(train, _TRAIN_KEYS, "train")
        weights = dict(train.pop("weights", {}))
        _check_keys(weights, _WEIGHT_KEYS, "train/weights")
        self.train = TrainConfig(
            weights=LossWeights(**weights),
            use_aniso_gaussian=bool(ablation.get("use_aniso_gaussian", True)),
            **train,
        )

        ev = dict(doc.get("eval", {}))
        _check_keys(ev, _EVAL_KEYS, "eval")
        self.eval_iou = float(ev.get("iou_threshold", 0.5))
        self.score_threshold = float(ev.get("score_threshold", 0.1))
        self.nms_iou = float(ev.get("nms_iou", 0.2))

    @classmethod
    def load(cls, path):
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: malformed JSON: {e}") from e
        return cls(doc)

    def resolved(self):
        """Full config document with every default filled in."""
        return {
            "scene": {
                "boxes_min": self.scene.boxes_min,
                "boxes_max": self.scene.boxes_max,
                "small_fraction": self.scene.small_fraction,
                "radius_range": list(self.scene.radius_range),
                "min_center_gap": self.scene.min_center_gap,
                "angular_step": self.scene.angular_step,
                "rings": self.scene.rings,
                "range_noise": self.scene.range_noise,
                "occluder_prob": self.scene.occluder_prob,
                "clutter_points": self.scene.clutter_points,
            },
            "voxel": {
                "x_range": list(self.voxel.x_range),
                "y_range": list(self.voxel.y_range),
                "z_range": list(self.voxel.z_range),
                "cell": list(self.voxel.cell),
            },
            "model": {
                "widths": list(self.model.widths),
                "num_classes": self.model.num_classes,
                "bev_channels": self.model.bev_channels,
            },
            # use_aniso_gaussian lives in the ablation section, not train.
            "train": {k: v for k, v in self.train.to_dict().items()
                      if k != "use_aniso_gaussian"},
            "eval": {
                "iou_threshold": self.eval_iou,
                "score_threshold": self.score_threshold,
                "nms_iou": self.nms_iou,
            },
            "ablation": {
                "use_raa": self.model.use_raa,
                "lite": self.model.lite,
                "use_adle": self.model.use_adle,
                "use_aniso_gaussian": self.train.use_aniso_gaussian,
            },
        }

    def dump(self, path):
        with open(path, "w") as f:
            json.dump(self.resolved(), f, indent=2, sort_keys=True)
