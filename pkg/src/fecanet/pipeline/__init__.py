from .backbone import ToyBackbone
from .episode import Episode, EpisodeSampler, Sample, make_pool, synthetic_episodes
from .metrics import MetricsAccumulator, fb_iou, miou
from .model import FecaNet, forward_episode
from .train import Adam, EvalResult, KShotConfig, ce_loss, evaluate, fit, kshot_fuse, train_step

__all__ = [
    "Adam", "Episode", "EpisodeSampler", "EvalResult", "FecaNet", "KShotConfig", "MetricsAccumulator",
    "Sample", "ToyBackbone", "ce_loss", "evaluate", "fb_iou", "fit", "forward_episode", "kshot_fuse",
    "make_pool", "miou", "synthetic_episodes", "train_step",
]
