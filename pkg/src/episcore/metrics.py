# Evaluation: mAA, failure taxonomy, hybrid filters, modality analysis,
# and report assembly.
import enum
from dataclasses import dataclass, field

import numpy as np

from .geometry import pose_error_of_hypothesis
from .robust import ScoreRecord, degeneracy_check, select_best

GOOD_POSE_DEG = 10.0


class FailureClass(enum.Enum):
    SELECTED_GOOD = "selected_good"
    SCORING_FAILURE = "scoring_failure"
    PRE_SCORING_FAILURE = "pre_scoring_failure"
    DEGENERATE = "degenerate"


def maa(errors, max_thresh=10.0):
    """Mean average accuracy over integer-degree thresholds 1..max_thresh.

    Undefined errors must be passed as inf (they never count as accurate).
    """
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise ValueError("empty error list")
    thresholds = np.arange(1.0, np.floor(max_thresh) + 0.5, 1.0)
    # Single integer ratio: exact, independent of summation order.
    total = int(sum(int(np.sum(errors <= t)) for t in thresholds))
    return total / (errors.size * thresholds.size)


def pool_pose_errors(pool, gt_pose, pA, pB, kA, kB):
    """True max(e_R, e_t) per hypothesis; undecidable decompositions map to 180."""
    return np.array([
        pose_error_of_hypothesis(h, gt_pose, (pA, pB), kA, kB, pool.model_kind).max_deg
        for h in pool.hypotheses])


def classify_failure(pool, selected, gt_pose, pA, pB, kA, kB,
                     threshold=1.0, pool_errors=None):
    """Failure taxonomy with fixed precedence: good, pre-scoring, degenerate, scoring."""
    if pool_errors is None:
        pool_errors = pool_pose_errors(pool, gt_pose, pA, pB, kA, kB)
    if pool_errors[selected] < GOOD_POSE_DEG:
        return FailureClass.SELECTED_GOOD
    if not np.any(pool_errors < GOOD_POSE_DEG):
        return FailureClass.PRE_SCORING_FAILURE
    sound, _ = degeneracy_check(pool.hypotheses[selected], pA, pB, threshold,
                                kA, kB, pool.model_kind)
    if not sound:
        return FailureClass.DEGENERATE
    return FailureClass.SCORING_FAILURE


def combine_filter(mode, pool, base_scores, rescorer, n_corrs=None, k=None):
    """Hybrid selection: correspondence-count switch or top-k candidate rescoring.

    base_scores: per-hypothesis values (higher is better). rescorer(indices)
    returns rescored values (higher is better) for the given hypothesis indices.
    """
    base_scores = np.asarray(base_scores, dtype=float)
    if base_scores.size < len(pool):
        raise ValueError("base scores do not cover the pool")
    if mode == "corresp":
        if n_corrs is None:
            raise ValueError("corresp mode needs the correspondence count")
        if n_corrs < 100:
            values = np.asarray(rescorer(np.arange(len(pool))), dtype=float)
            return int(np.argmax(values))
        return int(np.argmax(base_scores))
    if mode == "candidate":
        if k is None:
            k = 10 if pool.model_kind == "f" else 20
        if k <= 0:
            raise ValueError("k must be positive")
        k = min(k, len(pool))
        # Top-k by base score, ties toward lower index; stable ordering.
        order = np.lexsort((np.arange(len(pool)), -base_scores))
        top = np.sort(order[:k])
        values = np.asarray(rescorer(top), dtype=float)
        return int(top[np.argmax(values)])
    raise ValueError(f"unknown filter mode {mode!r}")


def _pairwise_pose_distance(pose_i, pose_j):
    from .geometry import direction_angle_deg, rotation_angle_deg
    return max(rotation_angle_deg(pose_i.rotation, pose_j.rotation),
               direction_angle_deg(pose_i.translation, pose_j.translation))


def modality_analysis(hypotheses, pA, pB, kA, kB, model_kind="f",
                      rule="max_pairwise", threshold_deg=10.0):
    """UNIMODAL vs MULTIMODAL over a small set of top hypotheses.

    rule "max_pairwise": unimodal iff the largest pairwise pose distance is
    below threshold. rule "spread": unimodal iff (max - min) pairwise distance
    is below threshold.
    """
    from .geometry import (EssentialMatrix, FundamentalMatrix, GeometryError,
                           decompose_essential, fundamental_to_essential)
    poses = []
    excluded = 0
    for h in hypotheses:
        try:
            if model_kind == "f":
                e = fundamental_to_essential(FundamentalMatrix(h), kA, kB)
            else:
                e = EssentialMatrix(h)
            poses.append(decompose_essential(e, (pA, pB), kA, kB))
        except GeometryError:
            excluded += 1
    if len(poses) < 2:
        return "unimodal", excluded
    dists = [_pairwise_pose_distance(poses[i], poses[j])
             for i in range(len(poses)) for j in range(i + 1, len(poses))]
    if rule == "max_pairwise":
        label = "unimodal" if max(dists) < threshold_deg else "multimodal"
    elif rule == "spread":
        label = "unimodal" if (max(dists) - min(dists)) < threshold_deg else "multimodal"
    else:
        raise ValueError(f"unknown modality rule {rule!r}")
    return label, excluded


@dataclass
class PairResult:
    pair_id: str
    scorer: str
    selected_index: int
    e_r: float
    e_t: float
    e_max: float
    n_corrs: int
    failure_class: str


@dataclass
class EvalReport:
    per_pair: list                    # PairResult rows
    aggregates: dict                  # per scorer
    histograms: dict                  # scorer -> list of (bin_lo, bin_hi, count)
    modality: dict
    config: dict

    def to_json(self):
        return {"aggregates": self.aggregates, "modality": self.modality,
                "histograms": {k: [list(b) for b in v] for k, v in self.histograms.items()},
                "config": self.config}


def _aggregate_rows(rows, maa_max):
    e_r = np.array([r.e_r for r in rows])
    e_t = np.array([r.e_t for r in rows])
    e_m = np.array([r.e_max for r in rows])
    counts = np.array([r.n_corrs for r in rows])
    out = {}
    for name, mask in (("all", np.ones(len(rows), dtype=bool)),
                       ("0-100", counts < 100), ("100-inf", counts >= 100)):
        if not np.any(mask):
            out[name] = None
            continue
        out[name] = {
            "n_pairs": int(mask.sum()),
            "maa_r": maa(e_r[mask], maa_max),
            "maa_t": maa(e_t[mask], maa_max),
            "maa_max": maa(e_m[mask], maa_max),
            "median_e_r": float(np.median(e_r[mask])),
            "median_e_t": float(np.median(e_t[mask])),
        }
    n = len(rows)
    classes = list(FailureClass)
    vals = [sum(1 for r in rows if r.failure_class == fc.value) / n for fc in classes]
    # Close the partition on the last class so the fractions sum to exactly
    # 1.0 despite per-division rounding.
    vals[-1] = 1.0 - sum(vals[:-1])
    out["failure_fractions"] = {fc.value: v for fc, v in zip(classes, vals)}
    return out


def evaluate(pairs, pools, scorer_values, maa_max=10.0, threshold=1.0,
             histogram_bin_deg=5.0, modality_top_k=5, base_scorer=None):
    """Assemble an EvalReport from per-pair data and per-scorer score values.

    pairs: list of dicts with keys pair_id, pA, pB, n_corrs, gt_pose, kA, kB.
    pools: dict pair_id -> HypothesisPool.
    scorer_values: dict scorer_name -> dict pair_id -> array of per-hypothesis
    values (higher is better).
    """
    if not pairs:
        raise ValueError("empty pair set")
    for scorer, per_pair in scorer_values.items():
        missing = [p["pair_id"] for p in pairs if p["pair_id"] not in per_pair]
        if missing:
            raise ValueError(f"scorer {scorer}: missing scores for {missing[:3]}")
    rows = []
    histograms = {}
    modality = {}
    errors_cache = {}
    for p in pairs:
        pid = p["pair_id"]
        pool = pools[pid]
        errors_cache[pid] = pool_pose_errors(pool, p["gt_pose"], p["pA"], p["pB"],
                                             p["kA"], p["kB"])
    scorer_names = sorted(scorer_values)
    for scorer in scorer_names:
        for p in pairs:
            pid = p["pair_id"]
            pool = pools[pid]
            values = np.asarray(scorer_values[scorer][pid], dtype=float)
            records = [ScoreRecord(i, float(v), scorer) for i, v in enumerate(values)]
            sel = select_best(pool, records)
            err = pose_error_of_hypothesis(pool.hypotheses[sel], p["gt_pose"],
                                           (p["pA"], p["pB"]), p["kA"], p["kB"],
                                           pool.model_kind)
            fc = classify_failure(pool, sel, p["gt_pose"], p["pA"], p["pB"],
                                  p["kA"], p["kB"], threshold,
                                  pool_errors=errors_cache[pid])
            e_t = 180.0 if err.trans_undefined else err.trans_deg
            rows.append(PairResult(pair_id=pid, scorer=scorer, selected_index=sel,
                                   e_r=err.rot_deg, e_t=e_t, e_max=err.max_deg,
                                   n_corrs=p["n_corrs"], failure_class=fc.value))
    # Pool pose-error histograms (all hypotheses, per scorer-independent pool).
    edges = np.arange(0.0, 180.0 + histogram_bin_deg, histogram_bin_deg)
    all_errors = np.concatenate([errors_cache[p["pair_id"]] for p in pairs])
    counts, _ = np.histogram(all_errors, bins=edges)
    histograms["pool"] = [(float(edges[i]), float(edges[i + 1]), int(counts[i]))
                          for i in range(len(counts))]
    # Modality of the base scorer's top-k hypotheses.
    base = base_scorer if base_scorer is not None else scorer_names[0]
    if base in scorer_values:
        tallies = {"unimodal": 0, "multimodal": 0}
        for p in pairs:
            pid = p["pair_id"]
            pool = pools[pid]
            values = np.asarray(scorer_values[base][pid], dtype=float)
            order = np.lexsort((np.arange(len(pool)), -values))
            top = [pool.hypotheses[i] for i in order[:modality_top_k]]
            label, _ = modality_analysis(top, p["pA"], p["pB"], p["kA"], p["kB"],
                                         pool.model_kind)
            tallies[label] += 1
        modality = {"base_scorer": base, "top_k": modality_top_k, **tallies}
    aggregates = {scorer: _aggregate_rows([r for r in rows if r.scorer == scorer],
                                          maa_max)
                  for scorer in scorer_names}
    config = {"maa_max": maa_max, "maa_step_deg": 1.0, "threshold": threshold,
              "histogram_bin_deg": histogram_bin_deg, "boundary_rule": "below-100"}
    return EvalReport(per_pair=rows, aggregates=aggregates, histograms=histograms,
                      modality=modality, config=config)
