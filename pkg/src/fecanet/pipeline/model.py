"""The assembled few-shot segmentation network and single-support forward pass."""
from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..config import RunConfig
from ..correlation import mask_features
from ..crm import CrmParams, crm_forward
from ..decoder import DecoderParams, MemoryBank, PredictionMap, residual_decode
from ..encoder4d import EncoderParams, encode_pyramid
from ..errors import ShapeError, ValidationError
from ..fem import EnhancedFeaturePair, FemParams, fem_forward
from ..tensor import ParamSet, Tensor
from .backbone import ToyBackbone
from .episode import Episode

# child seeds: backbone, fem, crm, encoder, decoder
_N_STREAMS = 5


class FecaNet:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg.validate()
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(_N_STREAMS)]
        bb_seed = int(streams[0].integers(2**63))
        self.backbone = ToyBackbone(bb_seed, cfg.backbone_widths, cfg.level_maps, cfg.coarse_stride)
        chans = self.backbone.level_channels
        self.fem = [FemParams.init(streams[1], c) for c in chans] if cfg.fem else []
        self.crm = [CrmParams.init(streams[2], cfg.k, cfg.depth, cfg.ms_width) for _ in chans] if cfg.gc else None
        in_ch = [m + (1 if cfg.gc else 0) for m in cfg.level_maps]
        self.encoder = EncoderParams.init(streams[3], in_ch, cfg.encoder_widths)
        self.decoder = DecoderParams.init(streams[4], self.encoder.out_channels)
        self.params = ParamSet()
        for name, t in self.named_parameters():
            self.params.add(name, t)

    def named_parameters(self):
        for lvl, p in enumerate(self.fem):
            yield from p.named(f"fem{lvl}")
        for lvl, p in enumerate(self.crm or []):
            yield from p.named(f"crm{lvl}")
        yield from self.encoder.named("enc")
        yield from self.decoder.named("dec")

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(values)
        if missing:
            raise ValidationError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in self.params.items():
            v = np.asarray(values[name])
            if v.shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint dims {list(v.shape)} vs model {p.dims}")
            p.data = np.ascontiguousarray(v, dtype=p.data.dtype)

    def cast_(self, dtype) -> None:
        """Change the storage dtype of every parameter in place."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)

    # -- forward -----------------------------------------------------------
    def enhanced_pairs(self, feats_q, feats_s, support_mask) -> list[EnhancedFeaturePair]:
        pairs = []
        for lvl in range(3):
            fq = feats_q[lvl][-1]
            fs = mask_features(feats_s[lvl][-1], support_mask)
            if self.cfg.fem:
                pairs.append(fem_forward(fs, fq, self.fem[lvl]))
            else:
                pairs.append(EnhancedFeaturePair(es=fs, eq=fq))
        return pairs

    def context(self, query_image: np.ndarray, support_image: np.ndarray, support_mask: np.ndarray) -> Tensor:
        feats_q = self.backbone.features(query_image)
        feats_s = self.backbone.features(support_image)
        enhanced = self.enhanced_pairs(feats_q, feats_s, support_mask)
        dense = [(fq, fs, lvl) for lvl in range(3) for fq, fs in zip(feats_q[lvl], feats_s[lvl])]
        pyr = crm_forward(enhanced, dense, self.cfg.k, self.crm if self.cfg.gc else None,
                          support_mask=None if self.cfg.keep_background else support_mask)
        return encode_pyramid(pyr, self.encoder)

    def forward(self, ep: Episode, support_index: int = 0, bank: MemoryBank | None = None) -> PredictionMap:
        image, mask = ep.supports[support_index]
        ctx = self.context(ep.query_image, image, mask)
        use_bank = self.cfg.bank and bank is not None
        shape = ctx.shape[1:]
        prior = bank.fetch(ep.query_id, shape) if use_bank else np.zeros((1,) + shape, dtype=np.float32)
        pred = residual_decode(ctx, prior, self.decoder, ep.size)
        if use_bank:
            bank.update(ep.query_id, pred)
        return pred

    def predict_fg(self, ep: Episode, support_index: int, bank: MemoryBank | None) -> np.ndarray:
        with T.no_grad():
            return self.forward(ep, support_index, bank).fg


def forward_episode(ep: Episode, model: FecaNet, bank: MemoryBank | None) -> PredictionMap:
    """Single-support pass: fetch the stored prior, decode, store the new map."""
    return model.forward(ep, 0, bank)
