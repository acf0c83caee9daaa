import numpy as np
import pytest
import torch

from hoigen.data import generate_synthetic_clip
from hoigen.hand import procedural_backend
from hoigen.metrics import (
    ActionClassifier,
    MetricReport,
    MetricsError,
    max_penetration_sequence,
    metric_accuracy_topk,
    metric_diversity,
    metric_fid,
    metric_multimodality,
    physical_realism_frame,
    physical_realism_sequence,
    train_classifier,
)
from hoigen.motion import FRAME_DIM, MotionSequence

torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# Feature-space metrics
# ---------------------------------------------------------------------------

def test_fid_identical_sets_is_zero():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(64, 8))
    assert metric_fid(feats, feats) == pytest.approx(0.0, abs=1e-6)


def test_fid_pure_shift_is_squared_distance():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(128, 8))
    shift = np.zeros(8)
    shift[0], shift[3] = 3.0, 4.0     # distance 5
    assert metric_fid(feats, feats + shift) == pytest.approx(25.0, rel=1e-6)


def test_fid_shifted_unit_gaussians_matches_squared_distance():
    """Independent samples from N(0, I) and N(mu, I): FID approaches |mu|^2."""
    rng = np.random.default_rng(2)
    d = 3.0
    a = rng.normal(size=(20000, 8))
    b = rng.normal(size=(20000, 8))
    b[:, 0] += d
    assert metric_fid(a, b) == pytest.approx(d * d, rel=0.02)


def test_diversity():
    feats = np.ones((10, 4))
    assert metric_diversity(feats) == 0.0
    rng = np.random.default_rng(0)
    assert metric_diversity(rng.normal(size=(10, 4))) > 0
    with pytest.raises(MetricsError):
        metric_diversity(np.ones((1, 4)))


def test_diversity_deterministic_per_seed():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(20, 6))
    assert metric_diversity(feats, seed=3) == metric_diversity(feats, seed=3)
    assert metric_diversity(feats, seed=3) != metric_diversity(feats, seed=4)


def test_multimodality_closed_form():
    # prompt "a": two points 2 apart on one axis -> mean sq distance from center 1
    feats = np.array([[0.0, 0], [2.0, 0], [5.0, 0], [1.0, 1]])
    prompts = ["a", "a", "b", "c"]  # b and c are singletons: skipped
    assert metric_multimodality(feats, prompts) == pytest.approx(1.0)
    with pytest.raises(MetricsError):
        metric_multimodality(feats, ["a", "b", "c", "d"])


def test_accuracy_topk():
    logits = np.array([[0.9, 0.5, 0.1, 0.0],
                       [0.1, 0.2, 0.3, 0.9],
                       [0.5, 0.4, 0.3, 0.2]])
    labels = [1, 3, 3]
    assert metric_accuracy_topk(logits, labels, k=1) == pytest.approx(1 / 3)
    assert metric_accuracy_topk(logits, labels, k=3) == pytest.approx(2 / 3)
    assert metric_accuracy_topk(logits, labels, k=4) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------

def make_class_seqs(n_per=8, L=6):
    rng = np.random.default_rng(0)
    seqs, labels = [], []
    for c in range(2):
        for _ in range(n_per):
            frames = rng.normal(scale=0.1, size=(L, FRAME_DIM))
            frames[:, 0] += 3.0 * c  # strongly separable channel
            seqs.append(MotionSequence.from_frames(frames))
            labels.append(c)
    return seqs, labels


def test_classifier_learns_separable_classes():
    seqs, labels = make_class_seqs()
    clf = train_classifier(seqs, labels, n_classes=2, hidden=16, steps=150, seed=0)
    acc = metric_accuracy_topk(clf.logits_for(seqs), labels, k=1)
    assert acc == 1.0
    feats = clf.features(seqs)
    assert feats.shape == (len(seqs), 16)


def test_classifier_needs_two_classes():
    seqs, _ = make_class_seqs(n_per=4)
    with pytest.raises(MetricsError):
        train_classifier(seqs, [0] * len(seqs), n_classes=2)
    with pytest.raises(MetricsError):
        train_classifier(seqs, [0] * len(seqs), n_classes=1)


# ---------------------------------------------------------------------------
# Physical realism
# ---------------------------------------------------------------------------

def plane_fixture():
    xs, ys = np.meshgrid(np.linspace(-0.1, 0.1, 5), np.linspace(-0.1, 0.1, 5))
    points = np.stack([xs.ravel(), ys.ravel(), np.zeros(25)], axis=1)
    normals = np.tile([0.0, 0.0, 1.0], (25, 1))
    return points, normals


def test_realism_static_no_contact_is_real():
    points, normals = plane_fixture()
    far = np.array([[0.0, 0.0, 0.5]])
    assert physical_realism_frame({"right": far}, {"right": far}, ["right"],
                                  points, points.copy(), normals) == 1
    assert physical_realism_frame({"right": far}, {"right": far}, ["right"],
                                  points, None, normals) == 1


def test_realism_moving_without_contact_fails():
    points, normals = plane_fixture()
    far = np.array([[0.0, 0.0, 0.5]])
    prev = points - [0.0, 0.0, 0.01]  # moved 1 cm since last frame
    assert physical_realism_frame({"right": far}, {"right": far}, ["right"],
                                  points, prev, normals) == 0


def test_realism_moving_with_contact_is_real():
    points, normals = plane_fixture()
    vert = np.array([[0.0, 0.0, 0.5]])
    joint = np.array([[0.0, 0.0, 0.015]])  # within contact_tau of the plane
    prev = points - [0.0, 0.0, 0.01]
    assert physical_realism_frame({"right": vert}, {"right": joint}, ["right"],
                                  points, prev, normals) == 1


def test_realism_penetration_fails():
    points, normals = plane_fixture()
    inside = np.array([[0.0, 0.0, -0.01]])  # 1 cm behind the surface
    assert physical_realism_frame({"right": inside}, {"right": inside}, ["right"],
                                  points, points.copy(), normals) == 0
    # shallow penetration below pen_max passes
    shallow = np.array([[0.0, 0.0, -0.004]])
    assert physical_realism_frame({"right": shallow}, {"right": shallow}, ["right"],
                                  points, points.copy(), normals) == 1


def test_ground_truth_clip_is_fully_realistic():
    bl, br = procedural_backend("left"), procedural_backend("right")
    clip, spec = generate_synthetic_clip(1, "sphere", "lift", n_points=64,
                                         backend_left=bl, backend_right=br)
    scores = physical_realism_sequence(clip.seq, spec, bl, br)
    assert scores.shape == (len(clip.seq),)
    assert scores.mean() == 1.0
    assert max_penetration_sequence(clip.seq, spec, bl, br) == 0.0


# ---------------------------------------------------------------------------
# Multi-run protocol
# ---------------------------------------------------------------------------

def test_metric_report_aggregate_closed_form():
    values = list(np.arange(20, dtype=float))
    rep = MetricReport(per_run={"fid": values}, n_runs=20)
    agg = rep.aggregate()["fid"]
    v = np.asarray(values)
    assert agg["mean"] == pytest.approx(v.mean())
    assert agg["ci95"] == pytest.approx(1.96 * v.std(ddof=1) / np.sqrt(20))


def test_metric_report_run_count_validation():
    rep = MetricReport(per_run={"fid": [1.0] * 19}, n_runs=20)
    with pytest.raises(MetricsError, match="20"):
        rep.aggregate()


def test_metric_report_json_roundtrip_bit_identical():
    rng = np.random.default_rng(0)
    rep = MetricReport(per_run={"fid": rng.normal(size=20).tolist(),
                                "diversity": rng.normal(size=20).tolist()},
                       n_runs=20)
    text = rep.to_json()
    back = MetricReport.from_json(text)
    assert back.to_json() == text  # reaggregation is bit-identical
    assert back.aggregate() == rep.aggregate()
