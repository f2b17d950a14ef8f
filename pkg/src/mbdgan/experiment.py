"""Desk-scale protocol: synthetic 3-class shapes, 64x64, one GAN per branch count."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SyntheticDataset, SyntheticSpec, synth_generate
from .evaluation import TranslationReport, evaluate_translations, train_eval_classifier
from .networks import Classifier, GeneratorSpec, MultiBranchDiscriminatorSpec
from .training import GAN, TrainConfig, TrainState, sample_targets, train_loop

log = logging.getLogger(__name__)


@dataclass
class DeskProtocol:
    n_images: int = 750
    train_fraction: float = 0.8
    image_side: int = 64
    epochs: int = 50
    batch_size: int = 16
    g_base_channels: int = 16
    g_res_blocks: int = 2
    g_edge_kernel: int = 3
    d_base_channels: int = 32
    d_layers: int = 4
    d_max_channels: int = 256
    classifier_epochs: int = 6
    seed: int = 0

    def specs(self, branches: int, num_classes: int) -> tuple[GeneratorSpec, MultiBranchDiscriminatorSpec]:
        g = GeneratorSpec(3, self.g_base_channels, 2, self.g_res_blocks, num_classes, self.image_side, self.g_edge_kernel)
        d = MultiBranchDiscriminatorSpec(branches, self.d_base_channels, self.d_layers, num_classes, self.image_side,
                                         max_channels=self.d_max_channels)
        return g, d

    def train_config(self, branches: int, recycling: bool = True) -> TrainConfig:
        return TrainConfig(total_epochs=self.epochs, batch_size=self.batch_size, recycling_enabled=recycling,
                           seed=self.seed, image_side=self.image_side, branches=branches)


@dataclass
class DeskData:
    train: SyntheticDataset
    test: SyntheticDataset
    classifier: Classifier
    classifier_accuracy: float


@dataclass
class DeskResult:
    branches: int
    translation: TranslationReport
    recycled: TranslationReport
    state: TrainState
    gan: GAN
    seconds: float
    extras: dict = field(default_factory=dict)


def prepare_data(p: DeskProtocol) -> DeskData:
    spec = SyntheticSpec(image_side=p.image_side)
    ds = synth_generate(spec, p.n_images, seed=p.seed)
    train, test = ds.split(p.train_fraction, seed=p.seed)
    clf, acc = train_eval_classifier(train.images, train.labels, test.images, test.labels, spec.num_classes,
                                     epochs=p.classifier_epochs, seed=p.seed)
    log.info("evaluation classifier: held-out accuracy %.4f", acc)
    return DeskData(train, test, clf, acc)


def run_branch_experiment(branches: int, p: DeskProtocol, data: DeskData, out_dir=None, eval_every: int = 0) -> DeskResult:
    k = data.train.spec.num_classes
    gspec, dspec = p.specs(branches, k)
    gan = GAN.build(gspec, dspec, seed=p.seed)
    cfg = p.train_config(branches)
    targets = sample_targets(np.random.default_rng(p.seed + 1), data.test.labels, k)

    def on_epoch(gan, state):
        if eval_every and state.epoch % eval_every == 0:
            rep = evaluate_translations(gan.generator, data.classifier, data.test.images, data.test.labels, targets,
                                        data.test.annotations)
            log.info("N=%d epoch %d: %s", branches, state.epoch, " | ".join(rep.lines()))

    t0 = time.perf_counter()
    state = train_loop(cfg, gan, data.train.images, data.train.labels, out_dir=out_dir,
                       checkpoint_every=p.epochs if out_dir else 0, sample_every=10 if out_dir else 0, on_epoch=on_epoch)
    seconds = time.perf_counter() - t0
    tr = evaluate_translations(gan.generator, data.classifier, data.test.images, data.test.labels, targets,
                               data.test.annotations)
    rc = evaluate_translations(gan.generator, data.classifier, data.test.images, data.test.labels, targets,
                               data.test.annotations, recycle=True)
    return DeskResult(branches, tr, rc, state, gan, seconds)
