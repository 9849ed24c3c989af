"""Bundled synthetic image task and tensor-file dataset ingestion.

Eight classes on 32x32x1 images.  The class is the peak brightness of a
Gaussian blob placed at a random position: eight evenly spaced
amplitude levels, which a global-pooling network can read out in a
translation-invariant way.  A dimmer distractor blob, a few saturated
hot pixels, and Gaussian background noise are nuisances.  The hot-pixel
tail sits well above the class amplitudes, so histogram-divergence
calibration is tempted to spend its levels on the dense low range and
clip the class-informative peaks; threshold retraining has to win that
range back, which is what separates the run modes on this task.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import Rng, load_tensor, save_tensor

IMG = 32
CLASSES = 8

BG_SIGMA = 0.04
HOT_PIXELS = 3          # per image
HOT_LO, HOT_HI = 8.6, 10.4
AMP_BASE = 4.5          # class k peaks at AMP_BASE + k * AMP_STEP +- jitter
AMP_STEP = 0.45
AMP_JITTER = 0.12
CLASS_WIDTH = 2.3
DISTRACTOR_AMP = (2.2, 3.8)
DISTRACTOR_WIDTH = (1.8, 2.4)

_BLOB_MARGIN = 8.0      # class blob stays clear of the border
_MIN_SEP = 8.0          # blob-to-distractor center distance
_HOT_SEP = 5.0          # hot pixels stay off both blobs


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray

    def __post_init__(self):
        for x in (self.x_train, self.x_eval):
            if x.ndim != 4 or x.shape[1:] != (IMG, IMG, 1):
                raise ContractError("images must be [n, %d, %d, 1]" % (IMG, IMG))
        if len(self.x_train) != len(self.y_train) or len(self.x_eval) != len(self.y_eval):
            raise ContractError("image/label count mismatch")


def _apart(gen, lo, hi, anchors, min_d):
    """Uniform centers in [lo, hi]^2, each at least min_d from its anchor."""
    pos = gen.uniform(lo, hi, size=anchors.shape)
    bad = ((pos - anchors) ** 2).sum(axis=-1) < min_d * min_d
    while bad.any():
        pos[bad] = gen.uniform(lo, hi, size=(int(bad.sum()), 2))
        bad = ((pos - anchors) ** 2).sum(axis=-1) < min_d * min_d
    return pos


def _render(gen, n):
    """n images + labels from one generator (order of draws is fixed)."""
    yy, xx = np.mgrid[0:IMG, 0:IMG].astype(np.float64)
    labels = gen.integers(0, CLASSES, size=n)
    amp_c = AMP_BASE + AMP_STEP * labels \
        + gen.uniform(-AMP_JITTER, AMP_JITTER, size=n)
    c_pos = gen.uniform(_BLOB_MARGIN, IMG - 1 - _BLOB_MARGIN, size=(n, 2))
    amp_d = gen.uniform(*DISTRACTOR_AMP, size=n)
    sig_d = gen.uniform(*DISTRACTOR_WIDTH, size=n)
    d_pos = _apart(gen, 4.0, IMG - 5.0, c_pos, _MIN_SEP)
    img = gen.normal(0.0, BG_SIGMA, size=(n, IMG, IMG))

    def blob(pos, amp, sig):
        dx = xx[None] - pos[:, 0][:, None, None]
        dy = yy[None] - pos[:, 1][:, None, None]
        r2 = dx * dx + dy * dy
        return amp[:, None, None] * np.exp(-r2 / (2.0 * np.asarray(sig)[..., None, None] ** 2))

    img += blob(c_pos, amp_c, np.full(n, CLASS_WIDTH))
    img += blob(d_pos, amp_d, sig_d)
    # hot pixels stay off both blobs so they stay pure nuisance
    anchors = np.stack([c_pos, d_pos], axis=1)[:, None, :, :]  # [n,1,2,2]
    px = gen.integers(0, IMG, size=(n, HOT_PIXELS, 2)).astype(np.float64)
    bad = (((px[:, :, None, :] - anchors) ** 2).sum(axis=-1)
           < _HOT_SEP * _HOT_SEP).any(axis=-1)
    while bad.any():
        px[bad] = gen.integers(0, IMG, size=(int(bad.sum()), 2)).astype(np.float64)
        bad = (((px[:, :, None, :] - anchors) ** 2).sum(axis=-1)
               < _HOT_SEP * _HOT_SEP).any(axis=-1)
    hot = gen.uniform(HOT_LO, HOT_HI, size=(n, HOT_PIXELS))
    flat = (px[..., 1] * IMG + px[..., 0]).astype(np.int64)
    rows = np.repeat(np.arange(n), HOT_PIXELS)
    img.reshape(n, -1)[rows, flat.ravel()] += hot.ravel()
    return img[..., None], labels.astype(np.int64)


def make_dataset(seed: int, n_train: int = 6144, n_eval: int = 1024) -> Dataset:
    rng = Rng(seed)
    x_tr, y_tr = _render(rng.stream("train-data"), n_train)
    x_ev, y_ev = _render(rng.stream("eval-data"), n_eval)
    return Dataset(x_tr, y_tr, x_ev, y_ev)


def save_dataset(ds: Dataset, dirpath: str):
    os.makedirs(dirpath, exist_ok=True)
    save_tensor(os.path.join(dirpath, "x_train.tqt"), ds.x_train)
    save_tensor(os.path.join(dirpath, "y_train.tqt"), ds.y_train.astype(np.int32))
    save_tensor(os.path.join(dirpath, "x_eval.tqt"), ds.x_eval)
    save_tensor(os.path.join(dirpath, "y_eval.tqt"), ds.y_eval.astype(np.int32))


def load_dataset(dirpath: str) -> Dataset:
    def rd(name):
        path = os.path.join(dirpath, name + ".tqt")
        if not os.path.exists(path):
            raise ContractError("dataset directory lacks %s.tqt" % name)
        return load_tensor(path)
    return Dataset(rd("x_train"), rd("y_train").astype(np.int64).ravel(),
                   rd("x_eval"), rd("y_eval").astype(np.int64).ravel())


def batch_stream(rng: Rng, n: int, batch: int, steps: int):
    """Deterministic minibatch index batches, reshuffled each epoch."""
    gen = rng.stream("batches")
    emitted = 0
    while emitted < steps:
        order = gen.permutation(n)
        for k in range(0, n - batch + 1, batch):
            yield order[k:k + batch]
            emitted += 1
            if emitted >= steps:
                return
