"""Command-line front end: synth, cluster, validate-params, train-lp,
evaluate, report.

Structured logs go to stderr; data goes to files under --outdir. Every
output embeds the resolved-config hash and the master seed, and runs with
the same hash produce byte-identical numeric outputs. Exit codes: 0 on
success, 1 for fatal input errors, 2 for numeric failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import clustering as cl
from . import demand, ingest, spectral, synth
from .errors import DataError, NumericError, SchemaError
from .linkpred import (
    Checkpoint,
    IsotonicCalibrator,
    TrainConfig,
    build_graph,
    evaluate as lp_evaluate,
    fit_calibrator,
    init_model,
    node_feature_matrix,
    predict_pairs,
    restrict_to_prior_year,
    split_edges,
    standardize_features,
    train as lp_train,
)
from .linkpred.evaluate import pe_curve_rows
from .linkpred.sampling import sample_negative

log = logging.getLogger("stationflow")


def config_hash(config: dict) -> str:
    payload = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_json(path: Path, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=1) + "\n")


def write_tsv(path: Path, header: list[str], rows: list[list], meta: dict) -> None:
    lines = ["# " + " ".join(f"{k}={v}" for k, v in sorted(meta.items()))]
    lines.append("\t".join(header))
    for row in rows:
        lines.append("\t".join(_cell(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _load_schema_map(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _load_inputs(args, need_status=True, need_weather=False):
    schema = _load_schema_map(getattr(args, "schema_map", None))
    trips, rejects = ingest.parse_trips(args.trips, schema.get("trips"))
    log.info("trips: %d rows, %d rejected", len(trips), rejects.count)
    status = None
    if need_status:
        status, st_rej = ingest.parse_status(args.status, schema.get("status"))
        log.info("status: %d rows, %d rejected", len(status), st_rej.count)
    weather = None
    if need_weather:
        weather, w_rej = ingest.parse_weather(args.weather, schema.get("weather"))
        log.info("weather: %d rows, %d rejected", len(weather), w_rej.count)
    return trips, status, weather


def _clustered_inputs(args):
    """Shared front of the clustering pipeline: filter, profiles, matrices."""
    trips, status, _ = _load_inputs(args, need_status=True)
    stations, trips = ingest.filter_stations(trips, args.year)
    log.info("retained %d stations above threshold %d", len(stations), stations.min_trips)
    dm = ingest.parse_distances(args.distances)
    missing = ingest.stations_missing_coordinates(dm, stations.coords)
    if missing:
        log.warning("%d stations in the distance matrix have no coordinates", len(missing))
    gd_sym = cl.symmetrize(dm.submatrix(stations.stations).d)
    profiles, diags = demand.checkout_profiles(trips, status, args.year, stations.stations)
    log.info(
        "profiles: %d station-days, %d clamped events, %d stations without status",
        diags.station_days, diags.clamped_events, diags.stations_without_status,
    )
    u = demand.profile_matrix(profiles)
    transitions = cl.TripTransitions.from_trips(trips, stations.stations)
    return trips, stations, gd_sym, u, transitions, profiles


def cmd_synth(args) -> int:
    scenario = synth.SyntheticScenario(
        seed=args.seed,
        n_stations=args.stations,
        n_communities=args.communities,
        n_trips=args.trips_count,
        year=args.year,
    )
    city = synth.generate(scenario)
    outdir = Path(args.outdir)
    paths = synth.write_city(city, outdir)
    meta = {
        "config_hash": config_hash(_public_args(args)),
        "seed": args.seed,
        "stations": args.stations,
        "communities": args.communities,
        "trips": args.trips_count,
        "year": args.year,
        "files": {k: p.name for k, p in paths.items()},
    }
    write_json(outdir / "synth_manifest.json", meta)
    log.info("synthetic city written to %s", outdir)
    return 0


_CLUSTER_METHODS = ("adatc+", "gc", "km", "sc")


def cmd_cluster(args) -> int:
    if args.method == "nc":
        raise DataError("method 'nc' has no clustering output")
    if args.method not in _CLUSTER_METHODS:
        raise DataError(f"unknown clustering method {args.method!r}")
    trips, stations, gd_sym, u, transitions, profiles = _clustered_inputs(args)
    h = config_hash(_public_args(args))
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    demand.write_profiles(outdir / "profiles.tsv", profiles, meta={"config_hash": h, "seed": args.seed})

    d_gc = cl.geo_dissimilarity_matrix(gd_sym, u, args.rho1)
    cod = cl.pairwise_l2(u)
    reports: list[cl.ClusterQualityReport] = []
    params = cl.AdaTCParams(
        rho1=args.rho1, k1=args.k1, k2=args.k2, n_outer=args.n_outer,
        max_iters_gc=args.max_iters_gc, max_iters_tc=args.max_iters_tc, seed=args.seed,
    )
    if args.method == "adatc+":
        result = cl.adatc_plus(gd_sym, u, transitions, params, stations=stations.stations)
        final = result.clustering
        reports = result.reports
        iterations, converged = result.iterations, result.converged
    else:
        if args.method == "km":
            final = cl.baseline_km(d_gc, args.k1, seed=args.seed, max_iters=args.max_iters_gc)
        elif args.method == "gc":
            final = cl.geo_cluster_step(
                [np.arange(len(stations.stations))], d_gc, args.k1,
                seed=args.seed, max_iters=args.max_iters_gc,
            )
        else:
            final = spectral.baseline_spectral(d_gc, args.k1, seed=args.seed)
        final.stations = stations.stations
        reports = [cl.quality_report(final, None, gd_sym, cod, d_gc, None)]
        iterations, converged = 1, True

    doc = {
        "method": args.method,
        "params": {
            "rho1": args.rho1, "k1": args.k1, "k2": args.k2,
            "n_outer": args.n_outer, "max_iters_gc": args.max_iters_gc,
            "max_iters_tc": args.max_iters_tc, "seed": args.seed,
        },
        "iterations": iterations,
        "converged": converged,
        "config_hash": h,
        "seed": args.seed,
        **final.to_dict(),
    }
    write_json(outdir / "clustering.json", doc)
    write_tsv(
        outdir / "quality_report.tsv",
        ["iteration", "agd_inner", "acod_inner", "agd_inter", "acod_inter", "td_gc", "td_tc", "tdf"],
        [
            [i + 1, r.agd_inner, r.acod_inner, r.agd_inter, r.acod_inter, r.td_gc, r.td_tc, r.tdf]
            for i, r in enumerate(reports)
        ],
        {"config_hash": h, "seed": args.seed},
    )
    log.info("%s clustering with %d clusters written to %s", args.method, final.k, outdir)
    return 0


def _parse_grid(text: str, cast) -> tuple:
    return tuple(cast(v) for v in text.split(",") if v.strip() != "")


def cmd_validate_params(args) -> int:
    _, _, gd_sym, u, transitions, _ = _clustered_inputs(args)
    h = config_hash(_public_args(args))
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    window = _parse_grid(args.rho_window, float)
    cells = cl.grid_search(
        gd_sym,
        u,
        transitions,
        rho1_values=_parse_grid(args.rho1_grid, float),
        k1_values=_parse_grid(args.k1_grid, int),
        k2_values=_parse_grid(args.k2_grid, int),
        n_outer=args.n_outer,
        max_iters_gc=args.max_iters_gc,
        max_iters_tc=args.max_iters_tc,
        seed=args.seed,
        rho_window=(window[0], window[1]),
        checkpoint_path=outdir / "grid_checkpoint.jsonl",
    )
    header = [
        "rho1", "k1", "k2", "iterations", "converged", "pareto", "in_window",
        "agd_inner", "acod_inner", "agd_inter", "acod_inter", "td_gc", "td_tc", "tdf", "error",
    ]
    rows = []
    for c in cells:
        d = c.to_dict()
        rows.append([d.get(k, "") if d.get(k) is not None else "" for k in header])
    suggestion = cl.suggest_mid_k1(cells)
    meta = {"config_hash": h, "seed": args.seed}
    if suggestion is not None:
        meta["mid_k1_suggestion"] = f"rho1={suggestion.rho1!r},k1={suggestion.k1},k2={suggestion.k2}"
    write_tsv(outdir / "grid_report.tsv", header, rows, meta)
    n_pareto = sum(1 for c in cells if c.pareto)
    log.info("grid: %d cells, %d on the Pareto front (window %s)", len(cells), n_pareto, args.rho_window)
    if suggestion is not None:
        log.info("mid-range k1 suggestion: %s", meta["mid_k1_suggestion"])
    return 0


def _cluster_ids_from_file(path: str, stations: list[str]) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    assignment = doc.get("assignment")
    if assignment is None:
        raise DataError(f"{path} is not a clustering document (no assignment)")
    missing = [s for s in stations if s not in assignment]
    if missing:
        raise DataError(f"clustering file lacks {len(missing)} stations, e.g. {missing[:3]}")
    return np.array([assignment[s] for s in stations], dtype=np.float64)


def cmd_train_lp(args) -> int:
    if not args.no_clustering and not args.clustering:
        raise DataError("either --clustering FILE or --no-clustering is required")
    trips, _, weather = _load_inputs(args, need_status=False, need_weather=True)
    stations, trips = ingest.filter_stations(trips, args.year)
    station_order = stations.stations
    h = config_hash(_public_args(args))
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    cluster_ids = None
    if not args.no_clustering:
        cluster_ids = _cluster_ids_from_file(args.clustering, station_order)

    graph = build_graph(trips, station_order)
    log.info("graph: %d nodes, %d edges, %d self-loop trips dropped",
             graph.n, graph.n_edges, graph.self_loop_trips)
    raw, no_dep = node_feature_matrix(station_order, trips, weather, cluster_ids)
    if no_dep:
        log.warning("%d stations have no departures; city-wide weather used", len(no_dep))
    features, means, stds = standardize_features(raw)

    split = split_edges(
        graph, test_frac=args.test_frac, val_frac=args.val_frac,
        train_frac=args.train_frac, seed=args.seed,
    )
    model = init_model(
        features.shape[1], widths=(args.width, args.width), seed=args.seed,
        pair_mode=args.pair_mode,
    )
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
        num_samples=(args.samples1, args.samples2), seed=args.seed,
    )
    model, history = lp_train(model, split.g_train, features, split.train_pairs, split.train_labels, cfg)

    val_probs = predict_pairs(model, split.g_val, features, split.val_pairs)
    calibrator = fit_calibrator(val_probs, split.val_labels)

    ckpt = Checkpoint(
        model=model,
        num_samples=cfg.num_samples,
        feature_means=means,
        feature_stds=stds,
        station_order=station_order,
        with_clustering=not args.no_clustering,
        master_seed=args.seed,
        config_hash=h,
        calibrator_x=calibrator.x,
        calibrator_y=calibrator.y,
        test_pairs=split.test_pairs,
        test_labels=split.test_labels,
        val_pairs=split.val_pairs,
        val_labels=split.val_labels,
        extra={
            "trained": True,
            "year": args.year,
            "cluster_ids": None if cluster_ids is None else cluster_ids.tolist(),
            "final_loss": history[-1],
        },
    )
    ckpt.save(outdir / "checkpoint.json")
    write_tsv(
        outdir / "training_log.tsv",
        ["epoch", "loss"],
        [[i + 1, v] for i, v in enumerate(history)],
        {"config_hash": h, "seed": args.seed},
    )
    log.info("model with %d features trained; final loss %.4f", features.shape[1], history[-1])
    return 0


def _prev_station_set(path: str) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if isinstance(doc, list):
        return [str(s) for s in doc]
    if "assignment" in doc:
        return sorted(doc["assignment"])
    if "station_order" in doc:
        return list(doc["station_order"])
    raise DataError(f"{path} does not describe a station set")


def cmd_evaluate(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    if not ckpt.extra.get("trained"):
        raise DataError("checkpoint has not been trained")
    trips, _, weather = _load_inputs(args, need_status=False, need_weather=True)
    h = config_hash(_public_args(args))
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    calibrator = IsotonicCalibrator(ckpt.calibrator_x, ckpt.calibrator_y)
    stored_ids = ckpt.extra.get("cluster_ids")

    if args.mismatch:
        if not args.prev_stations:
            raise DataError("--mismatch requires --prev-stations")
        prev = _prev_station_set(args.prev_stations)
        stations, trips = ingest.filter_stations(trips, args.year)
        full = build_graph(trips, stations.stations)
        graph = restrict_to_prior_year(full, prev)
        id_by_station = None
        if stored_ids is not None:
            mapping = dict(zip(ckpt.station_order, stored_ids))
            missing = [s for s in graph.stations if s not in mapping]
            if missing:
                raise DataError(f"no stored cluster for {len(missing)} stations, e.g. {missing[:3]}")
            id_by_station = np.array([mapping[s] for s in graph.stations])
        keep = set(graph.stations)
        mask = np.array(
            [s in keep and e in keep for s, e in zip(trips.start_station, trips.end_station)]
        )
        trips_eval = trips.subset(mask)
        raw, _ = node_feature_matrix(graph.stations, trips_eval, weather, id_by_station)
        features = _apply_stored_standardization(raw, ckpt)
        rng = np.random.default_rng(ckpt.master_seed)
        edges = sorted(graph.edges)
        n_pos = max(1, int(round(args.test_frac * len(edges))))
        pos_idx = sorted(int(i) for i in rng.choice(len(edges), size=n_pos, replace=False))
        positives = [edges[i] for i in pos_idx]
        g_eval = graph.without_edges(positives)
        exclude: set[tuple[int, int]] = set()
        negatives = []
        for _ in range(n_pos):
            pair = sample_negative(graph, rng, exclude=exclude)
            exclude.add(pair)
            negatives.append(pair)
        pairs = np.array(positives + negatives, dtype=np.int64)
        labels = np.concatenate([np.ones(n_pos), np.zeros(n_pos)])
        report = lp_evaluate(ckpt.model, calibrator, g_eval, features, pairs, labels, trips_test=trips_eval)
        mode = "mismatch"
    else:
        keep = set(ckpt.station_order)
        mask = np.array(
            [s in keep and e in keep for s, e in zip(trips.start_station, trips.end_station)]
        )
        trips_eval = trips.subset(mask)
        graph = build_graph(trips_eval, ckpt.station_order)
        ids = None if stored_ids is None else np.asarray(stored_ids, dtype=np.float64)
        raw, _ = node_feature_matrix(graph.stations, trips_eval, weather, ids)
        features = _apply_stored_standardization(raw, ckpt)
        positives = [
            (int(u), int(v)) for (u, v), y in zip(ckpt.test_pairs, ckpt.test_labels) if y
        ]
        missing = [p for p in positives if p not in graph.edges]
        if missing:
            raise DataError(
                f"{len(missing)} checkpoint test edges are absent from the rebuilt graph; "
                "matched evaluation needs the training year's trip file"
            )
        g_eval = graph.without_edges(positives)
        report = lp_evaluate(
            ckpt.model, calibrator, g_eval, features,
            ckpt.test_pairs, ckpt.test_labels, trips_test=trips_eval,
        )
        mode = "matched"

    doc = {
        "mode": mode,
        "config_hash": h,
        "seed": ckpt.master_seed,
        "n_nodes": graph.n,
        "n_edges": graph.n_edges,
        **report.to_dict(),
    }
    write_json(outdir / "eval_report.json", doc)
    meta = {
        "config_hash": h,
        "seed": ckpt.master_seed,
        "reference_error_pct": args.reference_error,
    }
    for side, name in ((report.origin, "pe_origin.tsv"), (report.destination, "pe_destination.tsv")):
        write_tsv(
            outdir / name,
            ["station", "true_trips", "pe_pct"],
            [list(r) for r in pe_curve_rows(side)],
            {**meta, "mean_trips": side.mean_trips},
        )
    log.info("%s evaluation: accuracy %.3f over %d examples", mode, report.accuracy, report.n_examples)
    return 0


def _apply_stored_standardization(raw: np.ndarray, ckpt: Checkpoint) -> np.ndarray:
    from .linkpred.features import apply_standardization

    if raw.shape[1] != len(ckpt.feature_means):
        raise DataError(
            f"feature width {raw.shape[1]} does not match checkpoint ({len(ckpt.feature_means)})"
        )
    return apply_standardization(raw, ckpt.feature_means, ckpt.feature_stds)


def cmd_report(args) -> int:
    outdir = Path(args.outdir)
    lines = []
    clustering_path = outdir / "clustering.json"
    if clustering_path.exists():
        doc = json.loads(clustering_path.read_text())
        lines.append(
            f"clustering: method={doc['method']} k={doc['k']} iterations={doc['iterations']}"
            f" converged={doc['converged']} hash={doc['config_hash']}"
        )
    eval_path = outdir / "eval_report.json"
    if eval_path.exists():
        doc = json.loads(eval_path.read_text())
        lines.append(
            f"evaluation: mode={doc['mode']} accuracy={doc['accuracy']:.4f}"
            f" examples={doc['n_examples']} hash={doc['config_hash']}"
        )
        lines.append(
            f"  origin mean PE {doc['origin']['mean_pe']:.2f}% (+{doc['origin']['infinite_count']} infinite)"
            f" | destination mean PE {doc['destination']['mean_pe']:.2f}%"
            f" (+{doc['destination']['infinite_count']} infinite)"
        )
    grid_path = outdir / "grid_report.tsv"
    if grid_path.exists():
        rows = grid_path.read_text().splitlines()
        lines.append(f"grid report: {max(0, len(rows) - 2)} cells ({grid_path.name})")
    if not lines:
        lines.append(f"no reports found under {outdir}")
    print("\n".join(lines))
    return 0


def _public_args(args) -> dict:
    skip = {"func", "outdir"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def _add_input_args(p, status=True, weather=False, distances=True):
    p.add_argument("--trips", required=True, help="trip file")
    if status:
        p.add_argument("--status", required=True, help="station status file")
    if weather:
        p.add_argument("--weather", required=True, help="weather file")
    if distances:
        p.add_argument("--distances", required=True, help="pairwise distance matrix file")
    p.add_argument("--year", type=int, required=True, help="calendar year of the data")
    p.add_argument("--schema-map", help="JSON file remapping input column names")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stationflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic city")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stations", type=int, default=200)
    p.add_argument("--communities", type=int, default=4)
    p.add_argument("--trips-count", type=int, default=50_000)
    p.add_argument("--year", type=int, default=2018)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cluster", help="cluster stations")
    _add_input_args(p)
    p.add_argument("--method", default="adatc+", help="adatc+ | gc | km | sc")
    p.add_argument("--k1", type=int, default=70)
    p.add_argument("--k2", type=int, default=40)
    p.add_argument("--rho1", type=float, default=0.505)
    p.add_argument("--n-outer", type=int, default=10)
    p.add_argument("--max-iters-gc", type=int, default=100)
    p.add_argument("--max-iters-tc", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("validate-params", help="grid search over clustering parameters")
    _add_input_args(p)
    p.add_argument("--rho1-grid", default=",".join(repr(v) for v in cl.RHO1_GRID))
    p.add_argument("--k1-grid", default=",".join(str(v) for v in cl.K1_GRID))
    p.add_argument("--k2-grid", default=",".join(str(v) for v in cl.K2_GRID))
    p.add_argument("--n-outer", type=int, default=10)
    p.add_argument("--max-iters-gc", type=int, default=100)
    p.add_argument("--max-iters-tc", type=int, default=100)
    p.add_argument("--rho-window", default="0.1,0.505")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_validate_params)

    p = sub.add_parser("train-lp", help="train the link prediction model")
    _add_input_args(p, status=False, weather=True, distances=False)
    p.add_argument("--clustering", help="clustering.json with station cluster ids")
    p.add_argument("--no-clustering", action="store_true", help="33-feature variant without cluster ids")
    p.add_argument("--test-frac", type=float, default=0.1)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--train-frac", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--samples1", type=int, default=20)
    p.add_argument("--samples2", type=int, default=10)
    p.add_argument("--pair-mode", default="dot", choices=("dot", "elementwise"),
                   help="link head: scalar inner product or elementwise product")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_train_lp)

    p = sub.add_parser("evaluate", help="evaluate a trained checkpoint")
    _add_input_args(p, status=False, weather=True, distances=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mismatch", action="store_true", help="restrict to a prior station set")
    p.add_argument("--prev-stations", help="JSON file with the prior year's stations")
    p.add_argument("--test-frac", type=float, default=0.1)
    p.add_argument("--reference-error", type=float, default=12.0)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="summarize output files in a directory")
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, SchemaError, FileNotFoundError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return 1
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
