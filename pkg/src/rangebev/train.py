"""Deterministic end-to-end training on synthetic scene datasets.

A dataset is a directory of ``scene_#####.bin`` point files with matching
``scene_#####.jsonl`` labels plus a ``manifest.json``.  Training shuffles
scene order with a seeded RNG, applies seeded augmentation, pillarizes,
renders targets at the head resolution, and takes Adam steps on the
weighted total loss.  Everything downstream of (seed, config, dataset) is
bit-reproducible.
"""

from __future__ import annotations

import glob
import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import tensor as T
from .bev import OrientedBox, VoxelConfig, augment, load_boxes, load_point_cloud, \
    pillarize, save_boxes, save_point_cloud, transform_for
from .decode import average_precision, decode_boxes, extract_peaks, nms
from .model import OUTPUT_STRIDE, DetectionNet, ModelConfig, save_checkpoint
from .scenes import SceneSpec, synth_scene
from .targets import DensityThresholds, fit_thresholds, regression_targets
from .tensor import Adam, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    augment: bool = True
    use_aniso_gaussian: bool = True
    raw_dims: bool = False
    weights: L.LossWeights = L.LossWeights()
    val_every: int = 1
    # Optional step schedule: run the last final_lr_epochs epochs at
    # lr * final_lr_scale so the endpoint settles instead of bouncing.
    final_lr_epochs: int = 0
    final_lr_scale: float = 0.1

    def to_dict(self):
        d = {k: getattr(self, k) for k in (
            "seed", "epochs", "batch_size", "lr", "adam_beta1", "adam_beta2",
            "augment", "use_aniso_gaussian", "raw_dims", "val_every",
            "final_lr_epochs", "final_lr_scale",
        )}
        d["weights"] = {
            "box": self.weights.box, "aux": self.weights.aux,
            "alpha": self.weights.alpha, "beta": self.weights.beta,
            "eps": self.weights.eps, "tau": self.weights.tau,
        }
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "weights" in d:
            d["weights"] = L.LossWeights(**d["weights"])
        return cls(**d)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def generate_dataset(out_dir, count, seed, spec: SceneSpec, force=False):
    """Write ``count`` scenes and a manifest; deterministic per (seed, count)."""
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise FileExistsError(f"{out_dir} exists and is not empty (use force)")
    os.makedirs(out_dir, exist_ok=True)
    scene_seeds = [int(s) for s in
                   np.random.default_rng(seed).integers(0, 2**31 - 1, size=count)]
    for idx, sseed in enumerate(scene_seeds):
        pts, boxes = synth_scene(sseed, spec)
        save_point_cloud(os.path.join(out_dir, f"scene_{idx:05d}.bin"), pts)
        save_boxes(os.path.join(out_dir, f"scene_{idx:05d}.jsonl"), boxes)
    manifest = {"count": count, "seed": seed, "scene_seeds": scene_seeds}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def load_dataset(data_dir):
    """List of (points, boxes) in scene order."""
    bins = sorted(glob.glob(os.path.join(data_dir, "scene_*.bin")))
    if not bins:
        raise FileNotFoundError(f"no scene files under {data_dir}")
    scenes = []
    for b in bins:
        labels = b[:-4] + ".jsonl"
        if not os.path.exists(labels):
            raise FileNotFoundError(f"missing label file {labels}")
        scenes.append((load_point_cloud(b), load_boxes(labels)))
    return scenes


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _batch_targets(scene_batch, head_tf, thresholds, use_adle, isotropic,
                   raw_dims, tau):
    hms, boxts, masks = [], [], []
    centers, labels = [], []
    for n, (_, boxes) in enumerate(scene_batch):
        tm = regression_targets(
            boxes, head_tf,
            thresholds=thresholds if use_adle else None,
            isotropic=isotropic, raw_dims=raw_dims, tau=tau,
        )
        hms.append(tm.heatmap)
        boxts.append(tm.box_targets)
        masks.append(tm.valid_mask)
        for (cls, i, j), lvl in zip(tm.centers, tm.density_labels):
            centers.append((n, i, j))
            labels.append(lvl)
    return (
        np.stack(hms), np.stack(boxts), np.stack(masks),
        np.asarray(centers, dtype=np.int64).reshape(-1, 3),
        np.asarray(labels, dtype=np.int64),
    )


def compute_losses(model, feats, scene_batch, head_tf, thresholds, train_cfg):
    use_adle = model.head_density is not None
    hm_gt, box_gt, mask, centers, labels = _batch_targets(
        scene_batch, head_tf, thresholds, use_adle,
        not train_cfg.use_aniso_gaussian, train_cfg.raw_dims,
        train_cfg.weights.tau,
    )
    out = model.forward(feats)
    l_hm = L.focal_heatmap_loss_logits(
        out["heatmap_logits"], hm_gt, train_cfg.weights)
    l_box, _ = L.box_loss(out["box"], box_gt, mask[:, None])
    l_aux = None
    if use_adle:
        logits = T.gather_cells(
            out["density"], centers[:, 0], centers[:, 1], centers[:, 2]
        ) if len(centers) else Tensor(np.zeros((0, 3), dtype=np.float32))
        l_aux, _ = L.density_loss(logits, labels, alpha=train_cfg.weights.alpha)
    total = L.total_loss(l_hm, l_box, l_aux, train_cfg.weights)
    return total, l_hm, l_box, l_aux


def evaluate_model(model, scenes, voxel_cfg, iou_threshold=0.5,
                   score_threshold=0.1, nms_iou=0.2, raw_dims=False):
    """Mean AP of the model over a list of (points, boxes) scenes."""
    head_tf = transform_for(voxel_cfg).downsample(OUTPUT_STRIDE)
    all_dets, all_gts = [], []
    for frame, (pts, boxes) in enumerate(scenes):
        grid = pillarize(pts, voxel_cfg)
        out = model.forward(grid.features, with_density=False)
        peaks = extract_peaks(out["heatmap"].data[0], score_threshold=score_threshold,
                              max_peaks=256)
        dets = decode_boxes(peaks, out["box"].data[0], head_tf, raw_dims=raw_dims)
        dets = nms(dets, nms_iou)
        all_dets.extend((frame, d) for d in dets)
        all_gts.extend((frame, b) for b in boxes)
    report = average_precision(
        all_dets, all_gts, iou_threshold, num_classes=model.config.num_classes
    )
    return report


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_scenes,
          val_scenes=None, voxel_cfg: VoxelConfig = VoxelConfig(),
          out_dir=None, log_cb=None):
    """Train a model; returns (model, metrics list, thresholds).

    Writes ``metrics.jsonl`` and a checkpoint directory under ``out_dir``
    when given.  Aborts on non-finite loss, keeping the last epoch-end
    checkpoint.
    """
    model = DetectionNet(model_cfg, seed=train_cfg.seed)
    head_tf = transform_for(voxel_cfg).downsample(OUTPUT_STRIDE)
    all_train_boxes = [b for _, boxes in train_scenes for b in boxes]
    thresholds = None
    if model_cfg.use_adle:
        thresholds = fit_thresholds(all_train_boxes)
    opt = Adam(model.parameters(), lr=train_cfg.lr,
               beta1=train_cfg.adam_beta1, beta2=train_cfg.adam_beta2)
    order_rng = np.random.default_rng(train_cfg.seed + 1)
    metrics = []
    log_f = None
    ckpt_dir = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_f = open(os.path.join(out_dir, "metrics.jsonl"), "w")
        ckpt_dir = os.path.join(out_dir, "checkpoint")

    def emit(rec):
        metrics.append(rec)
        if log_f:
            log_f.write(json.dumps(rec) + "\n")
            log_f.flush()
        if log_cb:
            log_cb(rec)

    def save(dir_):
        extra = {"train": train_cfg.to_dict(),
                 "voxel": {"x_range": list(voxel_cfg.x_range),
                           "y_range": list(voxel_cfg.y_range),
                           "z_range": list(voxel_cfg.z_range),
                           "cell": list(voxel_cfg.cell)}}
        if thresholds is not None:
            extra["density_thresholds"] = thresholds.to_dict()
        save_checkpoint(dir_, model, extra=extra)

    n = len(train_scenes)
    step = 0
    try:
        for epoch in range(train_cfg.epochs):
            if (train_cfg.final_lr_epochs
                    and epoch >= train_cfg.epochs - train_cfg.final_lr_epochs):
                opt.lr = train_cfg.lr * train_cfg.final_lr_scale
            order = order_rng.permutation(n)
            for start in range(0, n, train_cfg.batch_size):
                idx = order[start : start + train_cfg.batch_size]
                batch = []
                for si in idx:
                    pts, boxes = train_scenes[si]
                    if train_cfg.augment:
                        aug_seed = (train_cfg.seed * 1_000_003 + epoch * 7919
                                    + int(si)) & 0x7FFFFFFF
                        pts, boxes = augment(pts, boxes, aug_seed)
                    batch.append((pts, boxes))
                feats = Tensor(np.concatenate(
                    [pillarize(p, voxel_cfg).features.data for p, _ in batch]
                ))
                total, l_hm, l_box, l_aux = compute_losses(
                    model, feats, batch, head_tf, thresholds, train_cfg
                )
                if not np.isfinite(total.data).all():
                    raise FloatingPointError(f"non-finite loss at step {step}")
                total.backward()
                opt.step()
                gammas = [float(l.gamma_a.data) for l in model.attention_layers()] + \
                         [float(l.gamma_b.data) for l in model.attention_layers()]
                emit({
                    "epoch": epoch, "step": step,
                    "l_hm": l_hm.item(), "l_box": l_box.item(),
                    "l_aux": None if l_aux is None else l_aux.item(),
                    "total": total.item(), "gamma_values": gammas,
                })
                step += 1
            if val_scenes and (epoch + 1) % train_cfg.val_every == 0:
                report = evaluate_model(model, val_scenes, voxel_cfg,
                                        raw_dims=train_cfg.raw_dims)
                emit({"epoch": epoch, "step": step, "val_ap": report.mean_ap,
                      "val_per_class": {str(k): v for k, v in
                                        report.per_class_ap.items()}})
            if ckpt_dir:
                save(ckpt_dir)
    except FloatingPointError:
        logger.exception("training aborted; last-good checkpoint retained")
        raise
    finally:
        if log_f:
            log_f.close()
    if ckpt_dir:
        save(ckpt_dir)
    return model, metrics, thresholds


def infer_scene(model, points, voxel_cfg, score_threshold=0.1, nms_iou=0.2,
                raw_dims=False, dump_attention=False):
    """Detections for one point cloud; the density head is never run."""
    grid = pillarize(points, voxel_cfg)
    out = model.forward(grid.features, with_density=False,
                        capture_attention=dump_attention)
    head_tf = grid.transform.downsample(OUTPUT_STRIDE)
    peaks = extract_peaks(out["heatmap"].data[0], score_threshold=score_threshold,
                          max_peaks=256)
    dets = nms(decode_boxes(peaks, out["box"].data[0], head_tf,
                            raw_dims=raw_dims), nms_iou)
    attention = None
    if dump_attention:
        attention = [(name, fa.data, fb.data) for name, fa, fb in out["attention"]]
    return dets, attention
