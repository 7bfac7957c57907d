"""Command-line pipeline: scenes -> pairs -> pools -> scores -> report.

Stages compose through JSONL files only.  Every output carries a schema
version and is accompanied by a run manifest.  All stages are
deterministic for fixed seeds; EPI_THREADS caps stage-internal worker
threads (0 or 1 means strictly serial).
"""

import argparse
import concurrent.futures
import datetime
import hashlib
import json
import os
import sys

import numpy as np

from . import SCHEMA_VERSION, __version__
from .geometry import compose_fundamental, pose_error_of_hypothesis
from .criteria import Criterion, oracle_score
from .metrics import combine_filter, evaluate, maa
from .nn import model as nn_model
from .nn import training as nn_training
from .nn.gradcheck import run_gradcheck
from .nn.weights_io import WeightsFormatError, load_weights, save_weights
from .robust import HypothesisPool, generate_pool, score
from .scene import (PairSpec, SceneGenerationError, SyntheticScene, dense_gt,
                    generate_scene, render, sample_correspondences)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_SCHEMA = 4
EXIT_DATA = 5
EXIT_GRADCHECK = 6


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


class SchemaError(CliError):
    def __init__(self, message):
        super().__init__(message, EXIT_SCHEMA)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message, EXIT_USAGE)


def _workers():
    try:
        return max(0, int(os.environ.get("EPI_THREADS", "0")))
    except ValueError:
        return 0


def _pmap(fn, items):
    """Order-preserving map, threaded when EPI_THREADS allows it."""
    n = _workers()
    if n >= 2:
        with concurrent.futures.ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_path, argv, seeds, inputs, outputs):
    manifest = {
        "schema": SCHEMA_VERSION,
        "tool": "episcore",
        "version": __version__,
        "command": list(argv),
        "seeds": seeds,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    path = str(out_path) + ".manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")


def _read_jsonl(path):
    if not os.path.exists(path):
        raise CliError(f"missing input file: {path}", EXIT_MISSING_FILE)
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CliError(f"{path}:{ln}: invalid JSON ({exc})", EXIT_DATA)
            if row.get("schema") != SCHEMA_VERSION:
                raise SchemaError(
                    f"{path}:{ln}: schema {row.get('schema')!r}, expected {SCHEMA_VERSION}")
            rows.append(row)
    if not rows:
        raise CliError(f"{path}: no records", EXIT_DATA)
    return rows


# ---- stages ----


def cmd_gen_scenes(args, argv):
    spec = PairSpec(overlap_band=(args.overlap_min, args.overlap_max))
    rows = []
    attempt = 0
    while len(rows) < args.n:
        seed = args.seed * 1000003 + attempt
        attempt += 1
        try:
            scene = generate_scene(spec, seed, image_size=args.image_size)
        except SceneGenerationError:
            continue
        rows.append({"schema": SCHEMA_VERSION, "scene_id": len(rows),
                     "seed": seed, "scene": scene.to_json()})
    _write_jsonl(args.out, rows)
    write_manifest(args.out, argv, {"seed": args.seed}, [], [args.out])
    return EXIT_OK


def cmd_gen_pairs(args, argv):
    scenes = _read_jsonl(args.scenes)
    spec = PairSpec(noise_px=args.noise_px, outlier_rate=args.outlier_rate,
                    n_corrs=args.n_corr)

    def one(row):
        scene = SyntheticScene.from_json(row["scene"])
        pa, pb, inl = sample_correspondences(scene, spec, args.seed,
                                             pair_id=row["scene_id"])
        return {"schema": SCHEMA_VERSION, "pair_id": row["scene_id"],
                "scene_id": row["scene_id"], "seed": args.seed,
                "scene": row["scene"],
                "noise_px": args.noise_px, "outlier_rate": args.outlier_rate,
                "pA": pa.tolist(), "pB": pb.tolist(),
                "inliers": [bool(b) for b in inl]}

    _write_jsonl(args.out, _pmap(one, scenes))
    write_manifest(args.out, argv, {"seed": args.seed}, [args.scenes], [args.out])
    return EXIT_OK


def cmd_gen_pool(args, argv):
    pairs = _read_jsonl(args.pairs)
    solver = args.solver
    if args.model == "e" and solver != "e8":
        raise CliError("essential pools require --solver e8", EXIT_USAGE)
    if args.model == "f" and solver == "e8":
        raise CliError("fundamental pools require --solver f7 or f8", EXIT_USAGE)

    def one(row):
        scene = SyntheticScene.from_json(row["scene"])
        pool = generate_pool(np.array(row["pA"]), np.array(row["pB"]), args.n,
                             solver=solver, seed=args.seed,
                             kA=scene.kA, kB=scene.kB, pair_id=row["pair_id"])
        return {"schema": SCHEMA_VERSION, **pool.to_json(row["pair_id"])}

    _write_jsonl(args.out, _pmap(one, pairs))
    write_manifest(args.out, argv, {"seed": args.seed}, [args.pairs], [args.out])
    return EXIT_OK


def _load_pools(path):
    return {row["pair_id"]: HypothesisPool.from_json(row) for row in _read_jsonl(path)}


def _scene_f_for(pool, scene):
    # Ground-truth-composed matrix in the pool's model space, for scoring.
    return compose_fundamental(scene.kA, scene.kB, scene.gt_pose)


def score_values(method, pool, row, scene, threshold, net=None):
    """Per-hypothesis score values, higher is better, for one pair."""
    pa, pb = np.array(row["pA"]), np.array(row["pB"])
    if method in ("ransac", "msac", "marginalized"):
        return [score(h, pa, pb, method=method, threshold=threshold,
                      kA=scene.kA, kB=scene.kB, model_kind=pool.model_kind)
                for h in pool.hypotheses]
    if method == "oracle-sampson":
        da, db = dense_gt(scene)
        vals = []
        for h in pool.hypotheses:
            from .robust import _f_matrix_for_scoring
            f = _f_matrix_for_scoring(h, scene.kA, scene.kB, pool.model_kind)
            vals.append(-oracle_score(f, (da, db), Criterion.SAMPSON))
        return vals
    if method == "oracle-pose":
        return [-pose_error_of_hypothesis(h, scene.gt_pose, (pa, pb),
                                          scene.kA, scene.kB, pool.model_kind).max_deg
                for h in pool.hypotheses]
    if method == "fsnet":
        params, config = net
        img_a = render(scene, "a").transpose(2, 0, 1)
        img_b = render(scene, "b").transpose(2, 0, 1)
        from .robust import _f_matrix_for_scoring
        fmats = np.stack([_f_matrix_for_scoring(h, scene.kA, scene.kB, pool.model_kind)
                          for h in pool.hypotheses])
        outs = nn_model.score_hypotheses(params, config, img_a, img_b, fmats)
        return [-o.max_deg for o in outs]
    raise CliError(f"unknown scoring method {method!r}", EXIT_USAGE)


def cmd_score(args, argv):
    pairs = _read_jsonl(args.pairs)
    pools = _load_pools(args.pools)
    net = None
    inputs = [args.pairs, args.pools]
    if args.method == "fsnet":
        if not args.weights:
            raise CliError("fsnet scoring requires --weights", EXIT_USAGE)
        if not os.path.exists(args.weights):
            raise CliError(f"missing weights file: {args.weights}", EXIT_MISSING_FILE)
        try:
            net = load_weights(args.weights)
        except WeightsFormatError as exc:
            raise SchemaError(str(exc))
        inputs.append(args.weights)

    def one(row):
        pid = row["pair_id"]
        if pid not in pools:
            raise CliError(f"pool file has no pair {pid}", EXIT_DATA)
        scene = SyntheticScene.from_json(row["scene"])
        values = score_values(args.method, pools[pid], row, scene,
                              args.threshold, net)
        values = [float(v) for v in values]
        return {"schema": SCHEMA_VERSION, "pair_id": pid, "method": args.method,
                "threshold": args.threshold, "values": values,
                "selected": int(np.argmax(values))}

    _write_jsonl(args.out, _pmap(one, pairs))
    write_manifest(args.out, argv, {}, inputs, [args.out])
    return EXIT_OK


def cmd_train(args, argv):
    pairs = _read_jsonl(args.pairs)
    pools = _load_pools(args.pools)
    config = nn_model.desk_config() if args.config == "desk" else nn_model.paper_config()
    dataset = []
    for row in pairs:
        scene = SyntheticScene.from_json(row["scene"])
        if scene.image_size != config.image_size:
            raise CliError(
                f"scene image size {scene.image_size} != config {config.image_size}",
                EXIT_DATA)
        pool = pools[row["pair_id"]]
        pa, pb = np.array(row["pA"]), np.array(row["pB"])
        hyps = list(pool.hypotheses) + [_scene_f_for(pool, scene).m]
        hyps = np.array(hyps)
        er, et = nn_training.hypothesis_errors(hyps, scene, pa, pb)
        dataset.append(nn_training.TrainingPair(
            render(scene, "a").transpose(2, 0, 1),
            render(scene, "b").transpose(2, 0, 1), hyps, er, et))
    log_path = str(args.out) + ".log.csv"
    params, _ = nn_training.train_toy(dataset, config, seed=args.seed,
                                      steps=args.steps, batch_size=args.batch_size,
                                      lr=args.lr, log_path=log_path)
    save_weights(args.out, params, config)
    write_manifest(args.out, argv, {"seed": args.seed},
                   [args.pairs, args.pools], [args.out, log_path])
    return EXIT_OK


def cmd_eval(args, argv):
    pairs_rows = _read_jsonl(args.pairs)
    pools = _load_pools(args.pools)
    scorer_values = {}
    for path in args.scores:
        for row in _read_jsonl(path):
            scorer_values.setdefault(row["method"], {})[row["pair_id"]] = row["values"]
    pairs = []
    scenes = {}
    for row in pairs_rows:
        scene = SyntheticScene.from_json(row["scene"])
        scenes[row["pair_id"]] = scene
        pairs.append({"pair_id": row["pair_id"], "pA": np.array(row["pA"]),
                      "pB": np.array(row["pB"]), "n_corrs": len(row["pA"]),
                      "gt_pose": scene.gt_pose, "kA": scene.kA, "kB": scene.kB})
    try:
        report = evaluate(pairs, pools, scorer_values, maa_max=args.maa_max,
                          threshold=args.threshold)
    except (KeyError, ValueError) as exc:
        raise CliError(str(exc), EXIT_DATA)
    out = {"schema": SCHEMA_VERSION, **report.to_json()}
    if args.filter != "none":
        methods = sorted(scorer_values)
        base = args.base_method or methods[0]
        resc = args.rescorer_method or methods[-1]
        for m in (base, resc):
            if m not in scorer_values:
                raise CliError(f"no scores for method {m!r}", EXIT_DATA)
        selections = {}
        errors = []
        for p in pairs:
            pid = p["pair_id"]
            pool = pools[pid]
            base_vals = np.asarray(scorer_values[base][pid], dtype=float)
            resc_vals = np.asarray(scorer_values[resc][pid], dtype=float)
            sel = combine_filter(args.filter, pool, base_vals,
                                 lambda idx: resc_vals[idx],
                                 n_corrs=p["n_corrs"], k=args.k)
            selections[str(pid)] = sel
            err = pose_error_of_hypothesis(pool.hypotheses[sel], p["gt_pose"],
                                           (p["pA"], p["pB"]), p["kA"], p["kB"],
                                           pool.model_kind)
            errors.append(err.max_deg)
        out["filter"] = {"mode": args.filter, "k": args.k, "base": base,
                         "rescorer": resc, "selected": selections,
                         "maa_max": maa(np.array(errors), args.maa_max)}
    with open(args.out, "w") as fh:
        json.dump(out, fh, sort_keys=True)
        fh.write("\n")
    write_manifest(args.out, argv, {}, [args.pairs, args.pools] + args.scores,
                   [args.out])
    return EXIT_OK


def cmd_gradcheck(args, argv):
    result = run_gradcheck(seed=args.seed) if args.config == "tiny" else \
        run_gradcheck(seed=args.seed, config=nn_model.desk_config(),
                      samples_per_tensor=2)
    payload = {"schema": SCHEMA_VERSION, "checked": int(result.checked),
               "max_rel_err": float(result.max_rel_err),
               "worst_param": result.worst_param, "passed": bool(result.passed)}
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK if result.passed else EXIT_GRADCHECK


def build_parser():
    parser = _Parser(prog="episcore", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate synthetic scenes")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overlap-min", type=float, default=0.10)
    p.add_argument("--overlap-max", type=float, default=0.40)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_scenes)

    p = sub.add_parser("gen-pairs", help="sample noisy correspondences")
    p.add_argument("--scenes", required=True)
    p.add_argument("--noise-px", type=float, default=1.0)
    p.add_argument("--outlier-rate", type=float, default=0.3)
    p.add_argument("--n-corr", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_pairs)

    p = sub.add_parser("gen-pool", help="generate hypothesis pools")
    p.add_argument("--pairs", required=True)
    p.add_argument("--model", choices=["f", "e"], default="f")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--solver", choices=["f7", "f8", "e8"], default="f7")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_pool)

    p = sub.add_parser("score", help="score pool hypotheses")
    p.add_argument("--pools", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--method", required=True,
                   choices=["ransac", "msac", "marginalized", "oracle-sampson",
                            "oracle-pose", "fsnet"])
    p.add_argument("--threshold", type=float, default=1.0)
    p.add_argument("--weights")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("train", help="train the toy scorer")
    p.add_argument("--pairs", required=True)
    p.add_argument("--pools", required=True)
    p.add_argument("--config", choices=["desk", "paper"], default="desk")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="assemble an evaluation report")
    p.add_argument("--scores", required=True, nargs="+")
    p.add_argument("--pairs", required=True)
    p.add_argument("--pools", required=True)
    p.add_argument("--maa-max", type=float, default=10.0)
    p.add_argument("--threshold", type=float, default=1.0)
    p.add_argument("--filter", choices=["none", "corresp", "candidate"],
                   default="none")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--base-method")
    p.add_argument("--rescorer-method")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify gradients numerically")
    p.add_argument("--config", choices=["tiny", "desk"], default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args, argv)
    except CliError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc),
                   "exit_code": exc.code}, sys.stderr)
        sys.stderr.write("\n")
        return exc.code
    except Exception as exc:  # noqa: BLE001 - last-resort conversion to JSON
        json.dump({"error": type(exc).__name__, "message": str(exc),
                   "exit_code": EXIT_INTERNAL}, sys.stderr)
        sys.stderr.write("\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
