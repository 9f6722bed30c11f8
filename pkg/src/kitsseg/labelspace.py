"""Hierarchical multi-label encoding between KiTS label maps and class channels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volcore import LabelMap, MultiChannelProb


@dataclass(frozen=True)
class ClassMap:
    """Ordered (name, source labels) pairs; channel ``c`` is membership in entry ``c``."""

    entries: tuple
    sigmoid: bool = True

    def __post_init__(self):
        entries = tuple((str(name), frozenset(int(i) for i in idx)) for name, idx in self.entries)
        if not entries:
            raise ValueError("class map needs at least one entry")
        for name, idx in entries:
            if not idx:
                raise ValueError(f"class {name!r} has an empty index set")
            if any(i <= 0 for i in idx):
                raise ValueError(f"class {name!r} references background or negative labels")
        object.__setattr__(self, "entries", entries)

    @property
    def names(self):
        return [name for name, _ in self.entries]

    def __len__(self):
        return len(self.entries)

    @property
    def is_nested(self) -> bool:
        sets = [idx for _, idx in self.entries]
        return all(b <= a for a, b in zip(sets, sets[1:]))

    def canonical_labels(self):
        """Label emitted when tier ``c`` is the deepest active channel.

        That is the smallest label in tier ``c`` that deeper tiers exclude.
        """
        if not self.is_nested:
            raise ValueError("class map is not nested; hierarchical decode is undefined")
        sets = [idx for _, idx in self.entries] + [frozenset()]
        out = []
        for name, (here, deeper) in zip(self.names, zip(sets, sets[1:])):
            own = here - deeper
            if not own:
                raise ValueError(f"class {name!r} has no labels of its own")
            out.append(min(own))
        return out

    @classmethod
    def from_config(cls, cfg):
        """Parse the ``class_names`` / ``sigmoid`` keys of an input.yaml-style dict."""
        items = cfg["class_names"]
        entries = []
        for item in items:
            idx = item["index"]
            entries.append((item["name"], [idx] if isinstance(idx, int) else idx))
        return cls(tuple(entries), bool(cfg.get("sigmoid", True)))

    def to_config(self):
        return {
            "class_names": [{"name": n, "index": sorted(idx)} for n, idx in self.entries],
            "sigmoid": self.sigmoid,
        }


KITS_CLASSMAP = ClassMap(
    (
        ("kidney_and_mass", (1, 2, 3)),
        ("mass", (2, 3)),
        ("tumor", (2,)),
    ),
    sigmoid=True,
)


def encode_array(labels, cmap: ClassMap = KITS_CLASSMAP):
    labels = np.asarray(labels)
    known = set().union(*(idx for _, idx in cmap.entries)) | {0}
    present = set(np.unique(labels).tolist())
    if not present <= known:
        raise ValueError(f"labels {sorted(present - known)} are not covered by the class map")
    return np.stack([np.isin(labels, sorted(idx)) for _, idx in cmap.entries]).astype(np.float32)


def encode(labels: LabelMap, cmap: ClassMap = KITS_CLASSMAP) -> MultiChannelProb:
    """One binary channel per class; channels overlap by design."""
    return MultiChannelProb(labels.geometry, encode_array(labels.data, cmap))


def _thresholds(threshold, n):
    thr = np.broadcast_to(np.asarray(threshold, dtype=np.float64), (n,))
    return [float(t) for t in thr]


def decode_array(prob, cmap: ClassMap = KITS_CLASSMAP, threshold=0.5):
    prob = np.asarray(prob)
    if prob.shape[0] != len(cmap):
        raise ValueError(f"expected {len(cmap)} channels, got {prob.shape[0]}")
    canon = cmap.canonical_labels()
    out = np.zeros(prob.shape[1:], dtype=np.uint8)
    # later (deeper) tiers overwrite shallower ones
    for c, (label, thr) in enumerate(zip(canon, _thresholds(threshold, len(cmap)))):
        out[prob[c] >= thr] = label
    return out


def decode(prob: MultiChannelProb, cmap: ClassMap = KITS_CLASSMAP, threshold=0.5) -> LabelMap:
    """Per voxel, the canonical label of the deepest channel at or above threshold.

    ``threshold`` may be a scalar or one value per class.  Shallower channels do
    not gate deeper ones: (0.4, 0.9, 0.9) decodes to tumor.
    """
    if not cmap.sigmoid:
        raise ValueError("only sigmoid (multi-label) class maps can be decoded")
    return LabelMap(prob.geometry, decode_array(prob.data, cmap, threshold))
