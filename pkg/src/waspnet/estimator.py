"""scikit-learn compatible segmentation estimator."""

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .analysis import count_parameters, receptive_field
from .builders import TOY_WIDTHS, build_network
from .ops import softmax_channels
from .training import AugmentConfig, PolySchedule, evaluate_graph, predict_logits, train
from .validation import check_images, check_labels


class SegmentationNetwork(ClassifierMixin, BaseEstimator):
    """Backbone + multi-scale head + decoder, trained from scratch with SGD.

    ``X`` is a batch of RGB images ``(n, h, w, 3)`` (uint8 or 0..255
    floats); ``y`` holds per-pixel class ids ``(n, h, w)`` with 255 meaning
    "not scored". ``predict`` returns label maps, ``score`` the mIOU.

    Parameters
    ----------
    head : {"aspp", "cascade", "res2net-seg", "wasp"}
    rates : tuple of int, optional
        Dilation rates; the head's default when None.
    backbone : str
        ``"toy-resnet(depth,width)"`` or ``"resnet101-counting"`` (the latter
        is for accounting; it is too large to train here).
    widths : HeadWidths, optional
        Head channel widths; toy widths by default.
    """

    def __init__(self, head="wasp", rates=None, backbone="toy-resnet(2,16)", num_classes=4,
                 widths=None, decoder_ch=None, dropout=0.5, base_lr=0.007, max_iter=500, power=0.9,
                 batch_size=8, momentum=0.9, weight_decay=5e-4, augment=True, scale_min=0.5,
                 scale_max=1.5, eval_every=100, random_state=0):
        self.head = head
        self.rates = rates
        self.backbone = backbone
        self.num_classes = num_classes
        self.widths = widths
        self.decoder_ch = decoder_ch
        self.dropout = dropout
        self.base_lr = base_lr
        self.max_iter = max_iter
        self.power = power
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.augment = augment
        self.scale_min = scale_min
        self.scale_max = scale_max
        self.eval_every = eval_every
        self.random_state = random_state

    def _build(self):
        widths = self.widths
        if isinstance(widths, dict):
            widths = dataclasses.replace(TOY_WIDTHS, **widths)
        return build_network(self.head, self.rates, self.backbone, self.num_classes,
                             widths, self.decoder_ch, self.dropout)

    def build_graph(self):
        """The untrained graph this configuration describes."""
        return self._build()

    def fit(self, X, y, eval_set=None):
        X = check_images(X)
        y = check_labels(y, self.num_classes, shape=X.shape[:3])
        graph = self._build()
        graph.init_params(self.random_state)
        augment = AugmentConfig(self.scale_min, self.scale_max, self.random_state) if self.augment else None
        if eval_set is not None:
            eval_set = (check_images(eval_set[0]), check_labels(eval_set[1], self.num_classes))
        result = train(
            graph, (X, y), PolySchedule(self.base_lr, self.max_iter, self.power), self.batch_size,
            momentum=self.momentum, weight_decay=self.weight_decay, augment=augment,
            seed=self.random_state, eval_set=eval_set, eval_every=self.eval_every,
            num_classes=self.num_classes,
        )
        self.graph_ = graph
        self.trace_ = result.trace
        self.checksum_ = result.checksum
        self.classes_ = np.arange(self.num_classes)
        self.n_parameters_ = count_parameters(graph)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "graph_")
        return predict_logits(self.graph_, X, self.batch_size)

    def predict_proba(self, X):
        return softmax_channels(self.decision_function(X))

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1).astype(np.uint8)

    def score(self, X, y, sample_weight=None):
        """Mean IoU of the predictions against ``y``."""
        check_is_fitted(self, "graph_")
        return evaluate_graph(self.graph_, X, y, self.num_classes, self.batch_size).miou()[0]

    def receptive_field(self):
        return receptive_field(self._build())

