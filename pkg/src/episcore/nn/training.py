"""Toy-scale training of the hypothesis scorer on synthetic scenes."""

import csv
from dataclasses import dataclass

import numpy as np

from ..geometry import compose_fundamental, pose_error_of_hypothesis
from ..robust import generate_pool
from ..rng import stream
from ..scene import PairSpec, generate_scene, render, sample_correspondences
from . import losses, model

# Pose-error bins (degrees) used for balanced hypothesis sampling.
BIN_EDGES_DEG = (0.0, 5.0, 10.0, 20.0, 40.0, 90.0, 180.0)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainingPair:
    image_a: np.ndarray      # (3, S, S)
    image_b: np.ndarray
    hypotheses: np.ndarray   # (M, 3, 3) fundamental matrices
    errors_r: np.ndarray     # (M,) degrees
    errors_t: np.ndarray     # (M,) degrees

    @property
    def errors_max(self):
        return np.maximum(self.errors_r, self.errors_t)


def hypothesis_errors(hyps, scene, pa, pb):
    """Per-hypothesis rotation and translation errors against the scene pose."""
    er, et = [], []
    for m in hyps:
        pe = pose_error_of_hypothesis(m, scene.gt_pose, (pa, pb), scene.kA, scene.kB)
        er.append(pe.rot_deg)
        et.append(180.0 if pe.trans_undefined else pe.trans_deg)
    return np.array(er), np.array(et)


def make_training_pair(scene, spec, seed, pair_id, pool_size=16, inject_gt=True):
    """Rendered images plus an F7 hypothesis pool with labeled pose errors.

    The ground-truth-composed F is appended so that every pool contains
    at least one near-zero-error hypothesis.
    """
    pa, pb, _ = sample_correspondences(scene, spec, seed, pair_id=pair_id)
    pool = generate_pool(pa, pb, pool_size, solver="f7", seed=seed, pair_id=pair_id)
    hyps = [h for h in pool.hypotheses]
    if inject_gt:
        hyps.append(compose_fundamental(scene.kA, scene.kB, scene.gt_pose).m)
    hyps = np.array(hyps)
    er, et = hypothesis_errors(hyps, scene, pa, pb)
    img_a = render(scene, "a").transpose(2, 0, 1)
    img_b = render(scene, "b").transpose(2, 0, 1)
    return TrainingPair(img_a, img_b, hyps, er, et)


def build_toy_dataset(n_pairs, seed, image_size=64, pool_size=16, spec=None,
                      inject_gt=True):
    if spec is None:
        spec = PairSpec()
    pairs = []
    attempt = 0
    while len(pairs) < n_pairs:
        scene_seed = seed * 1000003 + attempt
        attempt += 1
        scene = generate_scene(spec, scene_seed, image_size=image_size)
        pairs.append(make_training_pair(scene, spec, scene_seed, len(pairs),
                                        pool_size=pool_size, inject_gt=inject_gt))
    return pairs


def _assign_bins(errors_max):
    bins = []
    for lo, hi in zip(BIN_EDGES_DEG[:-1], BIN_EDGES_DEG[1:]):
        idx = np.nonzero((errors_max >= lo) & (errors_max < hi))[0]
        if idx.size:
            bins.append(idx)
    leftover = np.nonzero(errors_max >= BIN_EDGES_DEG[-1])[0]
    if leftover.size:
        bins.append(leftover)
    return bins


def sample_hypothesis(pair, gen):
    """Pick a nonempty pose-error bin uniformly, then a hypothesis in it."""
    bins = _assign_bins(pair.errors_max)
    idx = bins[gen.integers(len(bins))]
    return int(idx[gen.integers(idx.size)])


@dataclass
class TrainingLogRow:
    step: int
    loss: float
    grad_norm: float

    def to_csv(self):
        return [self.step, repr(self.loss), repr(self.grad_norm)]


def train_step(params, config, batch, lr, momentum, velocity):
    images_a = np.stack([p.image_a for p, _ in batch])
    images_b = np.stack([p.image_b for p, _ in batch])
    fmats = np.stack([p.hypotheses[i] for p, i in batch])
    true_r = np.array([p.errors_r[i] for p, i in batch])
    true_t = np.array([p.errors_t[i] for p, i in batch])
    fa = model.extract_features(params, model._as_input(images_a, config))
    fb = model.extract_features(params, model._as_input(images_b, config))
    fa, fb = model.transform_pair(params, fa, fb, config)
    e_r, e_t, conf = model.forward_batch(params, fa, fb, fmats, config)
    loss = losses.total_loss(e_r, e_t, conf, true_r, true_t, config.clamp_scale)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value}")
    loss.backward()
    sq = 0.0
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        sq += float(np.sum(g * g))
        velocity[name] = momentum * velocity[name] - lr * g
        t.data += velocity[name]
        t.grad = None
    return value, float(np.sqrt(sq))


def train_toy(dataset, config, seed, steps=200, batch_size=4, lr=1e-4,
              momentum=0.9, log_path=None, params=None):
    """Momentum SGD over bin-balanced (pair, hypothesis) samples.

    Returns (params, rows).  Raises TrainingDivergedError on a
    non-finite loss.
    """
    if params is None:
        params = model.init_weights(config, seed)
    gen = stream(seed, "train")
    velocity = {name: np.zeros_like(t.data) for name, t in params.items()}
    rows = []
    for step in range(steps):
        picks = gen.integers(len(dataset), size=batch_size)
        batch = [(dataset[i], sample_hypothesis(dataset[i], gen)) for i in picks]
        value, gnorm = train_step(params, config, batch, lr, momentum, velocity)
        rows.append(TrainingLogRow(step, value, gnorm))
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "grad_norm"])
            for row in rows:
                writer.writerow(row.to_csv())
    return params, rows
