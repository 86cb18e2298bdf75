import numpy as np
import pytest

from lesionsynth.errors import DegenerateLabelsError, EmptyInputError
from lesionsynth.metrics import dsc
from lesionsynth.phantom import PhantomSpec, make_phantom
from lesionsynth.pipeline import prepare_subject
from lesionsynth.segmenter import LabeledImage, SegmenterConfig, segment, train_segmenter
from lesionsynth.volume import BinaryMask3D


def labeled(seed, healthy=False):
    spec = PhantomSpec().healthy() if healthy else PhantomSpec()
    ph = make_phantom(spec, seed)
    sub = prepare_subject(ph.t1, ph.flair, ph.brain, gm=ph.gm, seed=seed)
    return LabeledImage(sub.t1, sub.flair, ph.lesion, ph.brain)


def test_overfits_single_phantom():
    img = labeled(0)
    cfg = SegmenterConfig(max_epochs=60, patience=60)
    model, hist = train_segmenter([img], cfg)
    seg = segment(model, img.t1, img.flair, img.brain, cfg)
    assert dsc(seg, img.lesion)[0] >= 0.7
    assert not (seg.data & ~img.brain.data).any()


def test_deterministic_first_epoch():
    img = labeled(1)
    cfg = SegmenterConfig(max_epochs=1)
    _, h1 = train_segmenter([img], cfg)
    _, h2 = train_segmenter([img], cfg)
    assert h1.epochs[0] == h2.epochs[0]


def test_degenerate_labels():
    with pytest.raises(DegenerateLabelsError):
        train_segmenter([labeled(2, healthy=True)])
    with pytest.raises(EmptyInputError):
        train_segmenter([])
