"""Frozen, seeded convolutional feature extractor standing in for a pretrained CNN."""
from __future__ import annotations

import hashlib
import math

import numpy as np

from .. import tensor as T
from ..tensor import Tensor


class ToyBackbone:
    """3x3 conv stack emitting several feature maps at each of three resolutions.

    Level strides are 4, 8 and 8 (or 16 with ``coarse_stride=2``). Maps are
    taken before the ReLU. Weights never change after construction.
    """

    def __init__(self, seed: int, widths=(8, 16, 24, 32), level_maps=(3, 4, 3), coarse_stride: int = 1):
        rng = np.random.default_rng(seed)
        self.level_maps = tuple(level_maps)
        self.widths = tuple(widths)

        def he(cout, cin):
            bound = math.sqrt(6.0 / (cin * 9))
            return rng.uniform(-bound, bound, size=(cout, cin, 3, 3)).astype(np.float32)

        self.stem = he(widths[0], 3)
        self.layers: list[list[tuple[np.ndarray, int]]] = []
        cin = widths[0]
        first_strides = (2, 2, coarse_stride)
        for lvl, n_maps in enumerate(level_maps):
            cout = widths[lvl + 1]
            block = []
            for j in range(n_maps):
                block.append((he(cout, cin), first_strides[lvl] if j == 0 else 1))
                cin = cout
            self.layers.append(block)
        self._cache: dict[tuple, list[list[Tensor]]] = {}

    @property
    def level_channels(self) -> list[int]:
        return list(self.widths[1:])

    def _run(self, image: np.ndarray) -> list[list[Tensor]]:
        with T.no_grad():
            x = T.relu(T.conv2d(Tensor(image), Tensor(self.stem), stride=2, pad=1))
            levels = []
            for block in self.layers:
                maps = []
                for w, stride in block:
                    pre = T.conv2d(x, Tensor(w), stride=stride, pad=1)
                    maps.append(pre)
                    x = T.relu(pre)
                levels.append(maps)
        return levels

    def features(self, image: np.ndarray) -> list[list[Tensor]]:
        image = np.ascontiguousarray(image)
        key = (hashlib.blake2b(image.tobytes(), digest_size=16).hexdigest(), image.shape,
               str(image.dtype), T.default_dtype().__name__)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._cache[key] = self._run(image)
        return hit
