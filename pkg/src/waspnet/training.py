"""Training loop, loss, learning-rate schedule and augmentation."""

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .exceptions import DivergenceError, NumericalError, ShapeError
from .metrics import ConfusionMatrix
from .validation import IGNORE_LABEL, check_images, check_labels

log = logging.getLogger(__name__)

OUTPUT_STRIDE = 8


@dataclass(frozen=True)
class PolySchedule:
    # base LR 0.007 follows the DeepLab lineage; the source never states one
    base_lr: float = 0.007
    max_iter: int = 500
    power: float = 0.9

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")

    def __call__(self, it):
        return poly_lr(it, self)


def poly_lr(it, schedule):
    """``base_lr * (1 - it / max_iter) ** power``."""
    if it < 0 or it > schedule.max_iter:
        raise ValueError(f"iteration {it} outside [0, {schedule.max_iter}]")
    return schedule.base_lr * (1.0 - it / schedule.max_iter) ** schedule.power


def cross_entropy(logits, labels, ignore_label=IGNORE_LABEL):
    """Mean softmax cross-entropy over scored pixels.

    Returns ``(loss, grad)`` with ``grad`` shaped like ``logits``. Pixels
    labelled ``ignore_label`` contribute to neither.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, C, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    keep = labels != ignore_label
    m = int(keep.sum())
    if m == 0:
        raise ValueError("cross_entropy: every pixel is ignored")
    lab = np.where(keep, labels, 0).astype(np.int64)
    if lab.min() < 0 or lab.max() >= C:
        raise ShapeError(f"labels outside [0, {C})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, lab[:, None], axis=1)[:, 0]
    nll = (logsum - picked) * keep
    loss = float(nll.sum() / m)
    prob = np.exp(z - logsum[:, None])
    np.put_along_axis(prob, lab[:, None], np.take_along_axis(prob, lab[:, None], axis=1) - 1.0, axis=1)
    grad = prob * keep[:, None] / m
    return loss, grad.astype(logits.dtype, copy=False)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    scale_min: float = 0.5
    scale_max: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError(f"need 0 < scale_min <= scale_max, got {self.scale_min}, {self.scale_max}")


def _nearest_index(n_in, n_out):
    return np.minimum(np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def rescale_pair(image, labels, scale):
    """Resize ``(h, w, 3)`` image bilinearly and ``(h, w)`` labels by nearest neighbour."""
    h, w = labels.shape
    oh, ow = int(round(h * scale)), int(round(w * scale))
    if oh < 1 or ow < 1:
        raise ShapeError(f"scale {scale} turns {h}x{w} into an empty image")
    if (oh, ow) == (h, w):
        return image.copy(), labels.copy()
    x = image.astype(np.float32).transpose(2, 0, 1)[None]
    img = ops.bilinear_resize(x, oh, ow)[0].transpose(1, 2, 0)
    img = np.clip(np.rint(img), 0, 255).astype(image.dtype) if image.dtype == np.uint8 else img
    lab = labels[_nearest_index(h, oh)][:, _nearest_index(w, ow)]
    return img, lab


def random_scale(image, labels, config=AugmentConfig(), rng=None):
    """Rescale an image/label pair by a factor drawn uniformly from
    ``[scale_min, scale_max]``. Uses ``config.seed`` when ``rng`` is None."""
    image = np.asarray(image)
    labels = np.asarray(labels)
    if image.shape[:2] != labels.shape:
        raise ShapeError(f"image {image.shape} and labels {labels.shape} differ in size")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    scale = float(rng.uniform(config.scale_min, config.scale_max))
    return rescale_pair(image, labels, scale)


def crop_or_pad(image, labels, size, rng):
    """Random crop (or ignore-padding) back to a fixed ``size = (h, w)``."""
    th, tw = size
    h, w = labels.shape
    ph, pw = max(th - h, 0), max(tw - w, 0)
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), constant_values=128)
        labels = np.pad(labels, ((0, ph), (0, pw)), constant_values=IGNORE_LABEL)
        h, w = labels.shape
    y0 = int(rng.integers(0, h - th + 1))
    x0 = int(rng.integers(0, w - tw + 1))
    return image[y0 : y0 + th, x0 : x0 + tw], labels[y0 : y0 + th, x0 : x0 + tw]


def to_input(images):
    """``(n, h, w, 3)`` uint8 -> ``(n, 3, h, w)`` float32 in [-1, 1]."""
    x = np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2)
    return (x - 127.5) / 127.5


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


class SGD:
    """SGD with momentum; weight decay applies to conv weights only."""

    def __init__(self, params, momentum=0.9, weight_decay=5e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads, lr):
        for k, p in self.params.items():
            g = grads[k]
            if self.weight_decay and k.endswith(".weight"):
                g = g + self.weight_decay * p
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p -= np.asarray(lr, dtype=p.dtype) * v


@dataclass
class TraceRow:
    step: int
    lr: float
    loss: float
    miou: float = math.nan


@dataclass
class TrainResult:
    trace: list = field(default_factory=list)
    checksum: str = ""

    def rows(self):
        return [(r.step, r.lr, r.loss, r.miou) for r in self.trace]


def param_checksum(params):
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


def _pad_to_stride(x):
    h, w = x.shape[2:]
    ph, pw = (-h) % OUTPUT_STRIDE, (-w) % OUTPUT_STRIDE
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))
    return x, (h, w)


def predict_logits(graph, images, batch_size=8):
    """Eval-mode logits ``(n, C, h, w)`` for uint8 images of any size."""
    images = check_images(images)
    out = []
    for s in range(0, len(images), batch_size):
        x, (h, w) = _pad_to_stride(to_input(images[s : s + batch_size]))
        out.append(graph.forward(x, mode="eval")[:, :, :h, :w])
    return np.concatenate(out)


def evaluate_graph(graph, images, labels, num_classes, batch_size=8):
    conf = ConfusionMatrix(num_classes)
    logits = predict_logits(graph, images, batch_size)
    conf.accumulate(logits.argmax(axis=1), check_labels(labels, num_classes))
    return conf


def _train_step(graph, opt, x, y, lr, rng, step):
    logits = graph.forward(x, mode="train", rng=rng)
    loss, grad = cross_entropy(logits, y)
    if not math.isfinite(loss):
        raise DivergenceError(step, loss)
    graph.backward(grad)
    opt.step(graph.grads, lr)
    return TraceRow(step, lr, loss), logits


def train(graph, dataset, schedule, batch_size=8, steps=None, *, momentum=0.9, weight_decay=5e-4,
          augment=AugmentConfig(), seed=0, eval_set=None, eval_every=100, num_classes=None):
    """Train ``graph`` in place on ``dataset = (images, labels)``.

    Mini-batches are drawn from per-epoch permutations; every sample is
    randomly rescaled (when ``augment`` is given) and cropped/padded back
    to the dataset's image size. ``eval_set`` is scored every
    ``eval_every`` steps and at the last step.
    """
    images, labels = dataset
    images = check_images(images)
    num_classes = num_classes or graph.metadata.get("num_classes")
    labels = check_labels(labels, num_classes, shape=images.shape[:3])
    if len(images) == 0:
        raise ValueError("train: empty dataset")
    steps = schedule.max_iter if steps is None else steps
    if steps > schedule.max_iter:
        raise ValueError(f"steps {steps} exceed schedule max_iter {schedule.max_iter}")
    if not graph.params:
        graph.init_params(seed)
    size = images.shape[1:3]
    if size[0] % OUTPUT_STRIDE or size[1] % OUTPUT_STRIDE:
        raise ShapeError(f"training images must be multiples of {OUTPUT_STRIDE}, got {size}")

    rng = np.random.default_rng(seed)
    opt = SGD(graph.params, momentum, weight_decay)
    result = TrainResult()
    order = np.empty(0, dtype=np.int64)
    for step in range(steps):
        if order.size < batch_size:
            order = np.concatenate([order, rng.permutation(len(images))])
        idx, order = order[:batch_size], order[batch_size:]
        xb, yb = [], []
        for i in idx:
            img, lab = images[i], labels[i]
            if augment is not None:
                scale = rng.uniform(augment.scale_min, augment.scale_max)
                img, lab = rescale_pair(img, lab, scale)
                img, lab = crop_or_pad(img, lab, size, rng)
            xb.append(img)
            yb.append(lab)
        x = to_input(np.stack(xb))
        y = np.stack(yb)

        lr = poly_lr(step, schedule)
        try:
            # overflow surfaces as NumericalError from the ops' finiteness checks
            with np.errstate(over="ignore", invalid="ignore"):
                row, logits = _train_step(graph, opt, x, y, lr, rng, step)
                last = step == steps - 1
                if eval_every and (step % eval_every == 0 or last):
                    if eval_set is not None:
                        conf = evaluate_graph(graph, *eval_set, num_classes)
                    else:
                        conf = ConfusionMatrix(num_classes).accumulate(logits.argmax(axis=1), y)
                    row.miou = conf.miou()[0]
                    log.info("step %d lr %.5f loss %.4f mIOU %.4f", step, lr, row.loss, row.miou)
        except DivergenceError:
            raise
        except NumericalError as e:
            raise DivergenceError(step, math.nan) from e
        result.trace.append(row)
    result.checksum = param_checksum(graph.params)
    return result
