"""The detection network: stem, down/up feature pyramid, and heads.

Topology (output stride 2 relative to the BEV grid):

    stem  C_bev -> w1                 at H x W
    down1 w1 -> w1 (stride 2) + conv  at H/2
    down2 w1 -> w2 (stride 2) + conv  at H/4
    down3 w2 -> w3 (stride 2) + conv  at H/8
    up1   w3 -> w2, skip-concat with down2, conv -> w2   at H/4
    up2   w2 -> w1, skip-concat with down1, conv -> w1   at H/2
    heads: heatmap (K, sigmoid), box (8, linear),
           density (3 logits, training only)

Every 3x3 conv can be swapped for the range-aware attention conv; the
"lite" variant swaps only the head convs, the full variant all of them.
Final 1x1 head projections stay plain (the density head has odd width).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import PlainConv2d, RangeAttentionConv
from .bev import BEV_CHANNELS
from .rtns import read_rtns, write_rtns
from .targets import BOX_CHANNELS, NUM_CLASSES
from .tensor import Tensor

OUTPUT_STRIDE = 2
SPEC_VERSION = "rangebev-checkpoint-1"


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (32, 64, 128)
    use_raa: bool = True
    lite: bool = False
    use_adle: bool = True
    num_classes: int = NUM_CLASSES
    bev_channels: int = BEV_CHANNELS

    def to_dict(self):
        return {
            "widths": list(self.widths), "use_raa": self.use_raa,
            "lite": self.lite, "use_adle": self.use_adle,
            "num_classes": self.num_classes, "bev_channels": self.bev_channels,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class DetectionNet:
    def __init__(self, config: ModelConfig, seed=0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        w1, w2, w3 = config.widths

        def conv(name, cin, cout, in_head, **kw):
            if config.use_raa and (in_head if config.lite else True):
                return RangeAttentionConv(rng, cin, cout, name=name, dtype=dtype, **kw)
            return PlainConv2d(rng, cin, cout, name=name, dtype=dtype, **kw)

        self.stem = conv("stem", config.bev_channels, w1, False)
        self.down1 = [conv("down1.0", w1, w1, False, stride=2),
                      conv("down1.1", w1, w1, False)]
        self.down2 = [conv("down2.0", w1, w2, False, stride=2),
                      conv("down2.1", w2, w2, False)]
        self.down3 = [conv("down3.0", w2, w3, False, stride=2),
                      conv("down3.1", w3, w3, False)]
        self.up1 = [conv("up1.pre", w3, w2, False),
                    conv("up1.post", w2 + w2, w2, False)]
        self.up2 = [conv("up2.pre", w2, w1, False),
                    conv("up2.post", w1 + w1, w1, False)]
        self.head_hm = [
            conv("head_hm.0", w1, w1, True),
            PlainConv2d(rng, w1, config.num_classes, k=1, padding=0, relu=False,
                        dtype=dtype, name="head_hm.1"),
        ]
        self.head_box = [
            conv("head_box.0", w1, w1, True),
            PlainConv2d(rng, w1, BOX_CHANNELS, k=1, padding=0, relu=False,
                        dtype=dtype, name="head_box.1"),
        ]
        if config.use_adle:
            self.head_density = [
                conv("head_density.0", w1, w1, True),
                PlainConv2d(rng, w1, 3, k=1, padding=0, relu=False, dtype=dtype,
                            name="head_density.1"),
            ]
        else:
            self.head_density = None

    # ------------------------------------------------------------------
    def _layers(self):
        groups = [
            [self.stem], self.down1, self.down2, self.down3, self.up1, self.up2,
            self.head_hm, self.head_box,
        ]
        if self.head_density is not None:
            groups.append(self.head_density)
        for g in groups:
            yield from g

    def parameters(self):
        out = []
        for layer in self._layers():
            out.extend(layer.parameters())
        return out

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def attention_layers(self):
        return [l for l in self._layers() if isinstance(l, RangeAttentionConv)]

    def parameter_count(self):
        return sum(p.data.size for p in self.parameters())

    # ------------------------------------------------------------------
    def forward(self, features: Tensor, with_density=True, capture_attention=False):
        """Run the network on 1/N x C_bev x H x W features.

        Returns a dict with ``heatmap`` (sigmoid), ``box`` and,
        when the density head exists and ``with_density``, ``density``
        logits.  ``capture_attention`` additionally collects the branch
        attention maps of every attention layer.
        """
        attn = []

        def run(layer, x):
            if capture_attention and isinstance(layer, RangeAttentionConv):
                out, fa, fb = layer._forward_impl(x)
                attn.append((layer.name, fa, fb))
                return out
            return layer.forward(x)

        x = run(self.stem, features)
        d1 = run(self.down1[1], run(self.down1[0], x))
        d2 = run(self.down2[1], run(self.down2[0], d1))
        d3 = run(self.down3[1], run(self.down3[0], d2))
        u1 = run(self.up1[0], T.upsample_nearest(d3, 2))
        u1 = run(self.up1[1], T.concat_channels(u1, d2))
        u2 = run(self.up2[0], T.upsample_nearest(u1, 2))
        u2 = run(self.up2[1], T.concat_channels(u2, d1))
        hm_logits = run(self.head_hm[1], run(self.head_hm[0], u2))
        box = run(self.head_box[1], run(self.head_box[0], u2))
        out = {"heatmap": T.sigmoid(hm_logits), "heatmap_logits": hm_logits,
               "box": box}
        if self.head_density is not None and with_density:
            out["density"] = run(
                self.head_density[1], run(self.head_density[0], u2)
            )
        if capture_attention:
            out["attention"] = attn
        return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: DetectionNet, extra=None):
    """Directory checkpoint: config.json plus one RTNS file per parameter."""
    os.makedirs(path, exist_ok=True)
    meta = {
        "version": SPEC_VERSION,
        "model": model.config.to_dict(),
    }
    if extra:
        meta.update(extra)
    with open(os.path.join(path, "config.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    pdir = os.path.join(path, "params")
    os.makedirs(pdir, exist_ok=True)
    for name, p in model.named_parameters().items():
        write_rtns(os.path.join(pdir, name + ".rtns"), p.data)


def load_checkpoint(path):
    """Returns (model, meta dict)."""
    with open(os.path.join(path, "config.json")) as f:
        meta = json.load(f)
    if meta.get("version") != SPEC_VERSION:
        raise ValueError(
            f"checkpoint version mismatch: expected {SPEC_VERSION!r}, "
            f"got {meta.get('version')!r}"
        )
    model = DetectionNet(ModelConfig.from_dict(meta["model"]), seed=0)
    for name, p in model.named_parameters().items():
        f = os.path.join(path, "params", name + ".rtns")
        arr = read_rtns(f)
        if tuple(arr.shape) != tuple(p.data.shape):
            raise ValueError(
                f"{f}: shape {arr.shape} does not match parameter "
                f"{name} of shape {p.data.shape}"
            )
        p.data = arr.astype(p.data.dtype)
    return model, meta
