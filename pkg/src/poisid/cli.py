"""Command-line pipeline: one subcommand per stage, artifacts under ``run.out_dir``."""

import argparse
import hashlib
import json
import logging
import os
import sys

from . import __version__
from . import config as cfgmod
from .evalrec import (
    MarkovBaseline,
    acc_at_1,
    make_eval_instances,
    prefix_similarity_report,
    read_eval_manifest,
    score_external,
    write_eval_manifest,
    write_predictions,
    write_prefix_similarity,
)
from .features import FeatureMatrix, PoiFeatureEncoder
from .ingest import (
    ColumnMapping,
    build_eval_instances,
    filter_and_split,
    load_split,
    parse_checkins,
    read_lines,
    read_poi_table,
    save_split,
    write_lines,
    write_rejects,
)
from .promptgen import AugmentPolicy, make_training_set, render_prompt, write_jsonl
from .rqvae import RQVAE, infer_indices
from .sidregistry import SidRegistry, assign_sids, prefix_category_profile, sid_stats, write_prefix_profile

logger = logging.getLogger("poisid")

STAGES = (
    "ingest",
    "features",
    "train-codebook",
    "assign-sids",
    "stats",
    "emit-prompts",
    "emit-eval",
    "baseline",
    "score",
    "analyze",
)
STAGE_DIRS = {
    "ingest": "ingest",
    "features": "features",
    "train-codebook": "codebook",
    "assign-sids": "sids",
    "stats": "stats",
    "emit-prompts": "prompts",
    "emit-eval": "eval",
    "baseline": "baseline",
    "score": "score",
    "analyze": "analyze",
}


class PipelineError(RuntimeError):
    pass


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class Stage:
    """Bookkeeping for one stage run: inputs, outputs and the manifest."""

    def __init__(self, name, cfg):
        self.name = name
        self.cfg = cfg
        self.root = cfg["run.out_dir"]
        self.dir = os.path.join(self.root, STAGE_DIRS[name])
        self.seed = cfgmod.stage_seed(cfg["run.seed"], name)
        self.inputs = {}
        self.outputs = []

    def upstream(self, stage, filename):
        path = os.path.join(self.root, STAGE_DIRS[stage], filename)
        if not os.path.isfile(path):
            raise PipelineError(f"missing upstream artifact {path} (run `poisid {stage}` first)")
        self.inputs[os.path.relpath(path, self.root)] = sha256_file(path)
        return path

    def external(self, path, label):
        if not path or not os.path.isfile(path):
            raise PipelineError(f"missing input file for {label}: {path or '(not set)'}")
        self.inputs[label] = sha256_file(path)
        return path

    def out(self, filename):
        os.makedirs(self.dir, exist_ok=True)
        self.outputs.append(filename)
        return os.path.join(self.dir, filename)

    def write_manifest(self, extra=None):
        manifest = {
            "stage": self.name,
            "version": __version__,
            "master_seed": self.cfg["run.seed"],
            "stage_seed": self.seed,
            "config": cfgmod.echo(self.cfg),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": sorted(self.outputs),
        }
        if extra:
            manifest.update(extra)
        with open(os.path.join(self.dir, "manifest.json"), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")


def _sid_registry(st):
    path = st.upstream("assign-sids", "sids.tsv")
    return SidRegistry.load(path, st.cfg["rqvae.codebook_size"], st.cfg["rqvae.num_layers"])


def _split(st):
    for name in ("train.jsonl", "validation.jsonl", "test.jsonl", "poi_table.jsonl", "categories.txt", "users.txt"):
        st.upstream("ingest", name)
    return load_split(os.path.join(st.root, STAGE_DIRS["ingest"]))


def _rids(poi_ids):
    # Numeric ids for the no-SID ablation: 1-based rank in lexical poi_id order.
    return {pid: i + 1 for i, pid in enumerate(sorted(poi_ids))}


def _model(cfg):
    tau = cfg["rqvae.utilization_tau"]
    return RQVAE(
        num_layers=cfg["rqvae.num_layers"],
        codebook_size=cfg["rqvae.codebook_size"],
        code_dim=cfg["rqvae.code_dim"],
        encoder_hidden=tuple(cfgmod.int_list(cfg["rqvae.encoder_hidden"])),
        commitment_beta=cfg["rqvae.commitment_beta"],
        quant_weight=cfg["rqvae.quant_weight"],
        diversity_weight=cfg["rqvae.diversity_weight"],
        batch_size=cfg["rqvae.batch_size"],
        max_epochs=cfg["rqvae.max_epochs"],
        patience=cfg["rqvae.patience"],
        learning_rate=cfg["rqvae.learning_rate"],
        kmeans_iters=cfg["rqvae.kmeans_iters"],
        compactness_operand=cfg["rqvae.compactness_operand"],
        utilization_tau=tau if tau > 0 else None,
        validation_fraction=cfg["rqvae.validation_fraction"],
    )


# -- stages ---------------------------------------------------------------


def run_ingest(st):
    cfg = st.cfg
    path = st.external(cfg["data.checkins"], "data.checkins")
    mapping = ColumnMapping(
        user=cfg["data.col_user"],
        poi=cfg["data.col_poi"],
        category=cfg["data.col_category"],
        lat=cfg["data.col_lat"],
        lon=cfg["data.col_lon"],
        time=cfg["data.col_time"],
        delimiter=cfgmod.delimiter(cfg),
        header=cfg["data.header"],
        time_format=cfg["data.time_format"] or None,
    )
    with open(path, encoding="utf-8") as f:
        checkins, rejects = parse_checkins(f.read().splitlines(), mapping)
    split = filter_and_split(
        checkins,
        cfg["filter.min_poi_interactions"],
        cfg["filter.min_user_checkins"],
        (cfg["filter.train_ratio"], cfg["filter.validation_ratio"], cfg["filter.test_ratio"]),
    )
    os.makedirs(st.dir, exist_ok=True)
    save_split(split, st.dir)
    st.outputs += ["train.jsonl", "validation.jsonl", "test.jsonl", "poi_table.jsonl", "categories.txt", "users.txt"]
    write_rejects(rejects, st.out("rejects.txt"))
    counts = {name: sum(len(s) for s in part.values()) for name, part in split.splits().items()}
    st.write_manifest({"counts": counts, "n_pois": len(split.poi_table), "n_rejects": len(rejects)})
    return [f"{k}={v}" for k, v in counts.items()] + [f"pois={len(split.poi_table)}", f"rejects={len(rejects)}"]


def run_features(st):
    cfg = st.cfg
    table = read_poi_table(st.upstream("ingest", "poi_table.jsonl"))
    cats = read_lines(st.upstream("ingest", "categories.txt"))
    users = read_lines(st.upstream("ingest", "users.txt"))
    enc = PoiFeatureEncoder(cfg["features.precision"], cfg["features.top_k_slots"], cfg["features.top_k_visitors"])
    enc.fit(table, category_vocab=cats, user_vocab=users)
    fm = enc.feature_matrix(table)
    fm.save(st.out("features.txt"))
    enc.space_.region_vocab.save(st.out("regions.txt"))
    st.write_manifest({"rows": len(fm.poi_ids), "width": int(fm.X.shape[1])})
    return [f"rows={len(fm.poi_ids)}", f"width={fm.X.shape[1]}", f"regions={len(enc.space_.region_vocab)}"]


def run_train_codebook(st):
    fm = FeatureMatrix.load(st.upstream("features", "features.txt"))
    model = _model(st.cfg).set_params(random_state=st.seed)
    model.fit(fm.X)
    os.makedirs(st.dir, exist_ok=True)
    model.save(st.dir)
    st.outputs += ["params.txt", "config.json"]
    write_lines(model.report_lines(), st.out("training_log.tsv"))
    st.write_manifest({"epochs": model.n_iter_, "best_epoch": model.best_epoch_})
    return [f"epochs={model.n_iter_}", f"best_epoch={model.best_epoch_}"]


def run_assign_sids(st):
    fm = FeatureMatrix.load(st.upstream("features", "features.txt"))
    st.upstream("train-codebook", "config.json")
    st.upstream("train-codebook", "params.txt")
    model = RQVAE.load(os.path.join(st.root, STAGE_DIRS["train-codebook"]))
    registry = assign_sids(infer_indices(model, fm), model.codebook_size, model.num_layers)
    registry.save(st.out("sids.tsv"))
    stats = sid_stats(registry)
    st.write_manifest({"stats": stats.__dict__})
    return stats.lines()


def run_stats(st):
    registry = _sid_registry(st)
    lines = sid_stats(registry).lines()
    write_lines(lines, st.out("stats.txt"))
    st.write_manifest()
    return lines


def run_emit_prompts(st):
    cfg = st.cfg
    split = _split(st)
    registry = _sid_registry(st)
    policy = AugmentPolicy(cfg["prompts.max_history"], cfg["prompts.blank_rate"])
    rids = _rids(split.poi_table)
    lines = []
    for variant in cfgmod.str_list(cfg["prompts.variants"]):
        examples = make_training_set(
            split.train, registry, policy, st.seed, variant, rids if variant == "no_sid" else None
        )
        write_jsonl(examples, st.out(f"train_{variant}.jsonl"))
        n_blank = sum(ex.meta["kind"] == "blank" for ex in examples)
        lines.append(f"{variant}: examples={len(examples)} blank={n_blank}")
    write_lines([f"{pid}\t{rid}" for pid, rid in rids.items()], st.out("rids.tsv"))
    st.write_manifest({"registry_sha256": st.inputs["sids/sids.tsv"]})
    return lines


def run_emit_eval(st):
    split = _split(st)
    registry = _sid_registry(st)
    pairs, skipped = build_eval_instances(split, st.cfg["eval.history_len"])
    instances = make_eval_instances(pairs, registry)
    prompts = [render_prompt(inst.history, inst.target_time, inst.uid, "full") for inst in instances]
    write_eval_manifest(instances, st.out("eval_manifest.jsonl"), prompts)
    write_lines([inst.target_sid for inst in instances], st.out("targets.txt"))
    st.write_manifest({"instances": len(instances), "users_skipped": skipped})
    return [f"instances={len(instances)}", f"users_skipped={skipped}"]


def run_baseline(st):
    split = _split(st)
    registry = _sid_registry(st)
    instances = read_eval_manifest(st.upstream("emit-eval", "eval_manifest.jsonl"))
    seqs = {u: [registry.render(e.poi_id) for e in seq] for u, seq in split.train.items()}
    model = MarkovBaseline(st.cfg["eval.smoothing"]).fit(seqs)
    preds = model.predict(instances)
    write_predictions(preds, st.out("predictions.txt"))
    report = acc_at_1(preds, [i.target_sid for i in instances], instances)
    write_lines(report.lines(), st.out("report.txt"))
    st.write_manifest({"acc1": report.acc1})
    return report.lines()[:3]


def run_score(st, predictions=None):
    instances = read_eval_manifest(st.upstream("emit-eval", "eval_manifest.jsonl"))
    if predictions:
        path = st.external(predictions, "predictions")
    else:
        path = st.upstream("baseline", "predictions.txt")
    report = score_external(path, instances)
    write_lines(report.lines(), st.out("report.txt"))
    st.write_manifest({"acc1": report.acc1, "unparseable": report.unparseable})
    return report.lines()[:4]


def run_analyze(st):
    cfg = st.cfg
    registry = _sid_registry(st)
    table = read_poi_table(st.upstream("ingest", "poi_table.jsonl"))
    cats = read_lines(st.upstream("ingest", "categories.txt"))
    category = {pid: cats[rec.category_id] for pid, rec in table.items()}
    lines = []
    for depth in cfgmod.int_list(cfg["eval.prefix_depths"]):
        profile = prefix_category_profile(registry, category, depth)
        write_prefix_profile(profile, st.out(f"prefix_profile_depth{depth}.csv"))
        lines.append(f"depth{depth}_prefixes={len(profile)}")
    report = prefix_similarity_report(registry, category, cfg["eval.n_pairs"], st.seed, cfg["eval.n_boot"])
    write_prefix_similarity(report, st.out("prefix_similarity.csv"))
    lines += [f"same_mean={report.mean_same:.4f}", f"cross_mean={report.mean_cross:.4f}"]
    st.write_manifest()
    return lines


RUNNERS = {
    "ingest": run_ingest,
    "features": run_features,
    "train-codebook": run_train_codebook,
    "assign-sids": run_assign_sids,
    "stats": run_stats,
    "emit-prompts": run_emit_prompts,
    "emit-eval": run_emit_eval,
    "baseline": run_baseline,
    "score": run_score,
    "analyze": run_analyze,
}

EPILOG = """\
configuration:
  A config file holds one 'section.key = value' per line ('#' starts a comment).
  Values resolve in this order, later wins: built-in defaults, --config file,
  environment variables POISID__SECTION__KEY (e.g. POISID__RQVAE__MAX_EPOCHS=50),
  then --set section.key=value flags. Use 'poisid show-config' to print the result.

stages (each writes <run.out_dir>/<stage>/ plus manifest.json):
  ingest -> features -> train-codebook -> assign-sids -> stats
  assign-sids -> emit-prompts | emit-eval -> baseline -> score | analyze
"""


def build_parser():
    p = argparse.ArgumentParser(
        prog="poisid",
        description="Semantic-ID pipeline for next-POI recommendation data.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--version", action="version", version=f"poisid {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="config file with 'section.key = value' lines")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    helps = {
        "ingest": "parse, filter and split the check-in log",
        "features": "build multi-hot POI feature vectors",
        "train-codebook": "train the residual-quantized autoencoder",
        "assign-sids": "assign semantic IDs with collision suffixes",
        "stats": "print unique/collision counts of the SID registry",
        "emit-prompts": "write fine-tuning JSONL files (all configured variants)",
        "emit-eval": "write the ordered evaluation manifest",
        "baseline": "predict with the first-order Markov baseline",
        "score": "score a prediction file against the eval manifest",
        "analyze": "write SID prefix profiles and prefix-similarity statistics",
    }
    for name in STAGES:
        sp = sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
        if name == "score":
            sp.add_argument("--predictions", help="one predicted SID per line (default: baseline predictions)")
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load_config(args.config, args.set)
    except cfgmod.ConfigError as exc:
        print(f"poisid: {exc}", file=sys.stderr)
        return 2
    if args.command == "show-config":
        sys.stdout.write(cfgmod.dump(cfg))
        return 0
    st = Stage(args.command, cfg)
    try:
        if args.command == "score":
            lines = run_score(st, args.predictions)
        else:
            lines = RUNNERS[args.command](st)
    except PipelineError as exc:
        print(f"poisid {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"poisid {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    for line in lines:
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
