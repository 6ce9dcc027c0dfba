"""Command-line pipeline: synth -> prep -> train -> eval -> ensemble, plus gradcheck.

Every subcommand reads one JSON run config (``--config``) and writes into
``--out``. Exit codes: 0 success, 1 invalid input or config, 2 numeric
failure (non-finite values, or a failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import checks
from .datastore import (GroundTruth, SynthSpec, load_feature_store,
                        load_score_matrix, load_triplets, load_truth, save_score_matrix,
                        save_truth, synth_dataset, validate_triplets, write_json)
from .encoders import read_embedding_file
from .ensemble import (EnsemblePool, EvalTarget, TpeSettings, iterative_ensemble,
                       write_history)
from .metrics import build_score_matrix, evaluate
from .model import ModelConfig, RetrievalModel, rng_for
from .numkernel import NumericError, load_checkpoint, save_checkpoint
from .textprep import (Vocabulary, build_vocab, correction_report, encode_captions,
                       load_vocab, read_overrides, read_word_list, save_vocab, spell_correct,
                       tokenize)
from .training import CaptionCache, TrainConfig, TrainingData, train_run, write_metrics_log

log = logging.getLogger("rticlab")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Run config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataPaths:
    features: str = "features.tsv"
    ir_features: str | None = "ir_features.tsv"
    triplets: str = "triplets.jsonl"
    wordlist: str | None = "wordlist.tsv"
    overrides: str | None = None
    embeddings: str | None = None
    vocab: str | None = None


@dataclass(frozen=True)
class TextSettings:
    min_freq: int = 1
    spell_correct: bool = True


@dataclass(frozen=True)
class MetricSettings:
    ks: tuple[int, int] = (10, 50)
    split: str = "val"
    category_gallery: bool = True
    batch_size: int = 256


@dataclass(frozen=True)
class EnsembleSettings:
    n_trials: int = 200
    gamma: float = 0.25
    n_candidates: int = 24
    n_startup: int = 20
    zscore: bool = False
    rounds: int = 3
    stop_eps: float = 0.05

    def tpe(self) -> TpeSettings:
        return TpeSettings(self.n_trials, self.gamma, self.n_candidates, self.n_startup,
                           self.zscore)


_TRAIN_FIELDS = [f.name for f in dataclasses.fields(TrainConfig) if f.name != "seed"]


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_dir: str = "."
    data: DataPaths = field(default_factory=DataPaths)
    synth: SynthSpec = field(default_factory=SynthSpec)
    text: TextSettings = field(default_factory=TextSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricSettings = field(default_factory=MetricSettings)
    ensemble: EnsembleSettings = field(default_factory=EnsembleSettings)
    base_dir: Path = field(default=Path("."), compare=False)

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "data_dir": self.data_dir}
        for name in ("data", "synth", "text", "model", "metrics", "ensemble"):
            d[name] = dataclasses.asdict(getattr(self, name))
        d["metrics"]["ks"] = list(self.metrics.ks)
        d["train"] = {k: getattr(self.train, k) for k in _TRAIN_FIELDS}
        return d

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def path(self, key: str) -> Path | None:
        rel = getattr(self.data, key)
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / self.data_dir / p


def _section(cls, raw, name, exclude=()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config field {name!r} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r}: {exc}") from None


def parse_config(raw: dict, base_dir=Path(".")) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {"seed", "data_dir", "data", "synth", "text", "model", "train", "metrics", "ensemble"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    metrics_raw = dict(raw.get("metrics") or {})
    if "ks" in metrics_raw:
        ks = metrics_raw["ks"]
        if (not isinstance(ks, list) or len(ks) != 2
                or not all(isinstance(k, int) and k >= 1 for k in ks)):
            raise ConfigError("metrics.ks must be a list of two positive integers")
        metrics_raw["ks"] = tuple(ks)
    synth = _section(SynthSpec, raw.get("synth"), "synth")
    try:
        synth.validate()
    except ValueError as exc:
        raise ConfigError(f"invalid 'synth': {exc}") from None
    train = _section(TrainConfig, raw.get("train"), "train", exclude=("seed",))
    metrics = _section(MetricSettings, metrics_raw, "metrics")
    if metrics.split not in ("train", "val", "test"):
        raise ConfigError("metrics.split must be train, val or test")
    return RunConfig(
        seed=seed,
        data_dir=str(raw.get("data_dir", ".")),
        data=_section(DataPaths, raw.get("data"), "data"),
        synth=synth,
        text=_section(TextSettings, raw.get("text"), "text"),
        model=_section(ModelConfig, raw.get("model"), "model"),
        train=dataclasses.replace(train, seed=seed),
        metrics=metrics,
        ensemble=_section(EnsembleSettings, raw.get("ensemble"), "ensemble"),
        base_dir=Path(base_dir),
    )


def load_config(path) -> RunConfig:
    if path is None:
        return parse_config({})
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(raw, path.parent)


def _write_run_record(out: Path, cfg: RunConfig, command: str, files):
    write_json({"command": command, "config_hash": cfg.hash, "config": cfg.to_dict(),
                "files": sorted(files)}, out / "run.json")


# ---------------------------------------------------------------------------
# Shared loading
# ---------------------------------------------------------------------------

def _required(cfg: RunConfig, key: str) -> Path:
    p = cfg.path(key)
    if p is None or not p.exists():
        raise FileNotFoundError(f"data.{key}: file not found: {p}")
    return p


def _optional(cfg: RunConfig, key: str) -> Path | None:
    p = cfg.path(key)
    if p is not None and not p.exists():
        # defaults name optional files that may simply not exist
        default = getattr(DataPaths(), key)
        if getattr(cfg.data, key) != default:
            raise FileNotFoundError(f"data.{key}: file not found: {p}")
        return None
    return p


def _load_dataset(cfg: RunConfig):
    features = load_feature_store(_required(cfg, "features"))
    triplets = load_triplets(_required(cfg, "triplets"))
    validate_triplets(triplets, features)
    ir_path = _optional(cfg, "ir_features")
    ir = load_feature_store(ir_path) if ir_path else None
    return features, triplets, ir


def _text_reference(cfg: RunConfig):
    """(external word list or None, overrides or None)."""
    wl = _optional(cfg, "wordlist")
    ov = _optional(cfg, "overrides")
    return (read_word_list(wl) if wl else None), (read_overrides(ov) if ov else None)


def _build_vocab(cfg: RunConfig, triplets, wordlist, overrides) -> tuple[Vocabulary, Vocabulary]:
    """Model vocabulary and the dictionary that spell correction consults.

    With a word list, training tokens are corrected against it before
    counting; without one, the raw training vocabulary is its own reference.
    """
    train_caps = [c for r in triplets if r.split == "train" for c in r.captions]
    raw_tokens = [t for c in train_caps for t in tokenize(c)]
    if wordlist:
        reference = Vocabulary(wordlist)
        tokens = raw_tokens
        if cfg.text.spell_correct:
            tokens = [spell_correct(t, reference, overrides) for t in raw_tokens]
        return build_vocab(tokens, cfg.text.min_freq, wordlist), reference
    vocab = build_vocab(raw_tokens, cfg.text.min_freq)
    return vocab, vocab


def _vocabularies(cfg: RunConfig, triplets, wordlist, overrides):
    vpath = _optional(cfg, "vocab")
    if vpath:
        vocab = load_vocab(vpath)
        return vocab, (Vocabulary(wordlist) if wordlist else vocab)
    return _build_vocab(cfg, triplets, wordlist, overrides)


def _pretrained_rows(cfg: RunConfig, vocab: Vocabulary):
    p = _optional(cfg, "embeddings")
    if p is None:
        return None
    table = read_embedding_file(p)
    return {vocab.index[w]: v for w, v in table.items() if w in vocab.index}


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    ds = synth_dataset(cfg.seed, cfg.synth)
    ds.save(out)
    _write_run_record(out, cfg, "synth",
                      ["features.tsv", "ir_features.tsv", "triplets.jsonl", "wordlist.tsv"])
    log.info("wrote %d items and %d triplets to %s", len(ds.features), len(ds.triplets), out)
    return 0


def cmd_prep(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    triplets = load_triplets(_required(cfg, "triplets"))
    wordlist, overrides = _text_reference(cfg)
    vocab, reference = _build_vocab(cfg, triplets, wordlist, overrides)
    save_vocab(vocab, out / "vocab.tsv")
    with open(out / "tokens.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for r in triplets:
            seq = encode_captions(r.captions, vocab, correct=cfg.text.spell_correct,
                                  reference=reference, overrides=overrides)
            fh.write(json.dumps({"qid": r.qid, "ids": list(seq.tokens)}) + "\n")
    changes = correction_report((c for r in triplets for c in r.captions), reference, overrides)
    with open(out / "corrections.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_hash={cfg.hash}\n")
        for (orig, fixed), n in sorted(changes.items()):
            fh.write(f"{orig} → {fixed}\t{n}\n")
    _write_run_record(out, cfg, "prep", ["vocab.tsv", "tokens.jsonl", "corrections.tsv"])
    log.info("vocabulary %d tokens, %d distinct corrections", len(vocab), len(changes))
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    features, triplets, ir = _load_dataset(cfg)
    wordlist, overrides = _text_reference(cfg)
    vocab, reference = _vocabularies(cfg, triplets, wordlist, overrides)
    model = RetrievalModel.initialize(cfg.model, len(vocab), features.dim,
                                      rng_for(cfg.seed, "init"), _pretrained_rows(cfg, vocab))
    cache = CaptionCache(vocab, cfg.text.spell_correct, reference, overrides)
    records = train_run(model, TrainingData(features, triplets, cache, ir), cfg.train, cfg.hash)
    save_checkpoint(model.params, out / "checkpoint.tsv", cfg.hash)
    save_vocab(vocab, out / "vocab.tsv")
    write_metrics_log(records, out / "metrics.jsonl")
    _write_run_record(out, cfg, "train", ["checkpoint.tsv", "vocab.tsv", "metrics.jsonl"])
    if records:
        log.info("trained %d steps, final loss %.5f", len(records), records[-1]["loss"])
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint)
    params, ckpt_hash = load_checkpoint(ckpt)
    if ckpt_hash != cfg.hash:
        raise ConfigError(f"{ckpt}: checkpoint config hash {ckpt_hash} does not match "
                          f"the supplied config ({cfg.hash})")
    features, triplets, ir = _load_dataset(cfg)
    wordlist, overrides = _text_reference(cfg)
    vocab_path = ckpt.parent / "vocab.tsv"
    if not vocab_path.exists():
        raise FileNotFoundError(f"vocabulary not found next to checkpoint: {vocab_path}")
    vocab = load_vocab(vocab_path)
    reference = Vocabulary(wordlist) if wordlist else vocab
    model = RetrievalModel.initialize(cfg.model, len(vocab), features.dim,
                                      rng_for(cfg.seed, "init"))
    for name, t in model.params.items():
        if name not in params or params[name].shape != t.shape:
            raise ConfigError(f"{ckpt}: parameter {name} missing or mis-shaped")
        t.value = params[name].value
    queries = [r for r in triplets if r.split == cfg.metrics.split]
    if not queries:
        raise ConfigError(f"no triplets in split {cfg.metrics.split!r}")
    cache = CaptionCache(vocab, cfg.text.spell_correct, reference, overrides)
    m = build_score_matrix(model, queries, features, cache, ir, cfg.metrics.batch_size)
    m.meta = {"config_hash": cfg.hash, "model": cfg.model.kind, "split": cfg.metrics.split}
    truth = GroundTruth.from_triplets(queries)
    cats = features.categories() if cfg.metrics.category_gallery else None
    report = evaluate(m, truth, cats, cfg.metrics.ks)
    save_score_matrix(m, out / "scores.tsv")
    save_truth(truth, out / "truth.tsv")
    write_json({"config_hash": cfg.hash, **report.to_json()}, out / "report.json")
    _write_run_record(out, cfg, "eval", ["scores.tsv", "truth.tsv", "report.json"])
    print(report.table())
    return 0


def _manifest_path(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def load_manifest(path):
    """``{"matrices": [paths] or {name: path}, "truth": path,
    "heldout_truth": path?, "features": path?}``"""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    unknown = sorted(set(raw) - {"matrices", "truth", "heldout_truth", "features"})
    if unknown:
        raise ConfigError(f"{path}: unknown manifest key(s): {', '.join(unknown)}")
    if "matrices" not in raw or "truth" not in raw:
        raise ConfigError(f"{path}: manifest needs 'matrices' and 'truth'")
    mats = raw["matrices"]
    if isinstance(mats, list):
        mats = {Path(p).parent.name or Path(p).stem: p for p in mats}
        if len(mats) != len(raw["matrices"]):
            mats = {f"m{i}": p for i, p in enumerate(raw["matrices"])}
    if not mats:
        raise ConfigError(f"{path}: manifest lists no matrices")
    base = path.parent
    names = list(mats)
    matrices = [load_score_matrix(_manifest_path(base, mats[n])) for n in names]
    truth = load_truth(_manifest_path(base, raw["truth"]))
    heldout = raw.get("heldout_truth")
    heldout = load_truth(_manifest_path(base, heldout)) if heldout else None
    feats = raw.get("features")
    feats = load_feature_store(_manifest_path(base, feats)) if feats else None
    return EnsemblePool(names, matrices), truth, heldout, feats


def _effective_weights(records) -> dict[str, float]:
    """Weights on the original matrices implied by the final fused matrix.

    Each round's best matrix is a weighted sum of that round's pool, so
    earlier ``best_round`` entries can be expanded recursively.
    """
    expand: dict[str, dict[str, float]] = {}
    base = [n for n in records[0].pool_names]
    for rec in records:
        combo = {n: 0.0 for n in base}
        for name, w in zip(rec.pool_names, rec.result.weights):
            if name in expand:
                for b, wb in expand[name].items():
                    combo[b] += float(w) * wb
            else:
                combo[name] += float(w)
        expand[f"best_round{rec.round}"] = combo
    return expand[f"best_round{records[-1].round}"]


def cmd_ensemble(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pool, truth, heldout, feats = load_manifest(args.manifest)
    if feats is None and cfg.metrics.category_gallery:
        fp = _optional(cfg, "features")
        feats = load_feature_store(fp) if fp else None
    cats = feats.categories() if (feats is not None and cfg.metrics.category_gallery) else None
    target = EvalTarget(truth, cats, cfg.metrics.ks)
    es = cfg.ensemble
    fused, records = iterative_ensemble(pool, target, es.rounds, cfg.seed, es.tpe(), es.stop_eps)
    fused.meta = {"config_hash": cfg.hash, "rounds": str(len(records))}
    result = {
        "config_hash": cfg.hash,
        "objective": records[-1].result.objective,
        "round_objectives": [r.result.objective for r in records],
        "rounds": [{"round": r.round,
                    "weights": dict(zip(r.pool_names, map(float, r.result.weights)))}
                   for r in records],
        "effective_weights": None if es.zscore else _effective_weights(records),
        "single_objectives": {n: target.objective(m) for n, m in zip(pool.names, pool.matrices)},
    }
    if heldout is not None:
        ho = EvalTarget(heldout, cats, cfg.metrics.ks)
        result["heldout_objective"] = ho.objective(fused)
        result["heldout_single_objectives"] = {n: ho.objective(m)
                                               for n, m in zip(pool.names, pool.matrices)}
    save_score_matrix(fused, out / "fused.tsv")
    write_json(result, out / "weights.json")
    write_history(records, out / "history.jsonl")
    _write_run_record(out, cfg, "ensemble", ["fused.tsv", "weights.json", "history.jsonl"])
    print(f"ensemble objective {result['objective']:.4f} after {len(records)} round(s)")
    if heldout is not None:
        print(f"held-out objective {result['heldout_objective']:.4f}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = checks.run_suite(cfg.seed, max_coords=args.max_coords)
    table = checks.format_table(results)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "gradcheck.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# config_hash={cfg.hash}\n")
            for r in results:
                fh.write(f"{r.name}\t{r.max_rel_error!r}\t{'pass' if r.passed else 'fail'}\n")
    return 0 if all(r.passed for r in results) else 2


COMMANDS = {
    "synth": cmd_synth, "prep": cmd_prep, "train": cmd_train, "eval": cmd_eval,
    "ensemble": cmd_ensemble, "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rticlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, out_required=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="run config JSON (defaults apply when omitted)")
        p.add_argument("--out", required=out_required, help="output directory")
        return p

    add("synth", "write a synthetic dataset")
    add("prep", "tokenize, spell-correct and build the vocabulary")
    add("train", "train one model and write a checkpoint")
    p = add("eval", "score held-out queries and report recall")
    p.add_argument("--checkpoint", required=True)
    p = add("ensemble", "search fusion weights over score matrices")
    p.add_argument("--manifest", required=True)
    p = add("gradcheck", "finite-difference check of every component", out_required=False)
    p.add_argument("--max-coords", type=int, default=24,
                   help="coordinates probed per tensor (0 = all)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "max_coords", None) == 0:
        args.max_coords = None
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
