# cli.py
"""
Pipeline orchestration: corpus | pretrain | finetune | eval | sweep | report.

Every subcommand reads the same flat config file; --seed / --out override it.
Exit codes: 0 ok, 2 config error, 3 numeric divergence, 4 missing artifact.
"""
import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

import db
from baselines import NormSpec, nattr_transform, norm_preprocess, resolve_baseline
from checkpoint import load_checkpoint, save_checkpoint
from coffee import finetune
from config import RunConfig, config_hash, dump_config, load_config
from corpus import (AttributeSpace, Dataset, SynthesisSpec, Vocabulary, build_vocab, group_summary, load,
                    load_lexicon, save, split, synthesize)
from disentangle import (DISC_HIDDEN_FULL, alternate_train, build_discriminator, chance_level, owner_embeddings,
                         probe_accuracy)
from errors import (EXIT_ARTIFACT, EXIT_OK, ArtifactMissingError, ConfigError, FairgenError)
from io_utils import write_csv_atomic, write_text_atomic
from metrics import evaluate, write_report
from models import ContextIndex, build_for_dataset, pretrain
from numerics import seed_everything
from plots import plot_length_histograms, plot_loss_curve, plot_tradeoff
from quality import make_oracle

LOG = logging.getLogger("fairgen.cli")

PRETRAIN_CKPT = "pretrain.cffe"
FINETUNE_CKPT = "finetune.cffe"
DB_FILE = "fairgen_runs.db"
# largest BLEU-1 loss (relative to lambda = 0) a swept lambda may cost
MAX_BLEU_DROP = 0.10


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True,
    )


# =========================
# HELPERS
# =========================
def out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def attribute_space(cfg: RunConfig) -> AttributeSpace:
    return AttributeSpace(cfg.attribute_name, tuple(cfg.attribute_values), cfg.attribute_side)


def synthesis_spec(cfg: RunConfig) -> SynthesisSpec:
    values = list(cfg.attribute_values)
    return SynthesisSpec(
        n_users=cfg.synth_users, n_items=cfg.synth_items, n_records=cfg.synth_records,
        attribute=cfg.attribute_name, side=cfg.attribute_side,
        attribute_probs=dict(zip(values, cfg.synth_probs)),
        mean_length=dict(zip(values, cfg.synth_mean_length)),
        mean_features=dict(zip(values, cfg.synth_mean_features)),
        max_len=cfg.max_decode_len,
    )


def lexicon_for(cfg: RunConfig) -> frozenset:
    path = Path(cfg.lexicon_path)
    if path.exists():
        return load_lexicon(path)
    if any(m in ("F", "LF") for m in cfg.eval_measures) or cfg.quality in ("F", "LF"):
        raise ArtifactMissingError(f"feature lexicon not found: {path}")
    return frozenset()


def prepare_data(cfg: RunConfig) -> Tuple[Dataset, Vocabulary, ContextIndex, frozenset]:
    """Load the corpus (splitting it when the file carries no split), vocab over train."""
    path = Path(cfg.data_path)
    if not path.exists():
        raise ArtifactMissingError(f"dataset not found: {path} (run the corpus subcommand first)")
    dataset = load(path, attribute_space(cfg), cfg.merge_map())
    if not dataset.splits:
        dataset = split(dataset, cfg.split_ratios, cfg.seed)
    lexicon = lexicon_for(cfg)
    vocab = build_vocab((r.explanation for r in dataset.split_records("train")), cfg.vocab_size, lexicon)
    index = ContextIndex.from_dataset(dataset)
    LOG.info(f"Data: {len(dataset.records)} records, vocab {len(vocab)}, "
             f"{len(index.user_index)} users, {len(index.item_index)} items")
    return dataset, vocab, index, lexicon


def resolve_checkpoint(cfg: RunConfig, given: Optional[str], *names: str) -> Path:
    if given:
        path = Path(given)
        if not path.exists():
            raise ArtifactMissingError(f"checkpoint not found: {path}")
        return path
    for name in names:
        path = Path(cfg.out_dir) / name
        if path.exists():
            return path
    raise ArtifactMissingError(f"no checkpoint ({', '.join(names)}) in {cfg.out_dir}")


# =========================
# SUBCOMMANDS
# =========================
def cmd_corpus(cfg: RunConfig, args=None) -> Dict[str, Path]:
    spec = synthesis_spec(cfg)
    dataset = split(synthesize(spec, cfg.seed), cfg.split_ratios, cfg.seed)
    data_path = save(dataset, cfg.data_path)
    lex_path = write_text_atomic(cfg.lexicon_path, "\n".join(spec.features) + "\n")
    summary = group_summary(dataset, spec.features)
    summary_path = write_csv_atomic(summary, out_dir(cfg) / "corpus_summary.csv")

    print(f"\n📊 BIAS SUMMARY ({cfg.attribute_name})")
    print(summary.to_string(index=False))
    sizes = {k: len(v) for k, v in dataset.splits.items()}
    print(f"\nSplit: train {sizes['train']} | valid {sizes['valid']} | test {sizes['test']}")
    return {"data": data_path, "lexicon": lex_path, "summary": summary_path}


def _pretrain_records(cfg: RunConfig, plan, dataset: Dataset, out: Path):
    train = dataset.split_records("train")
    if not plan.norm_data:
        return None
    oracle = make_oracle(cfg.quality, lexicon_for(cfg), tuple(cfg.quality_weights))
    result = norm_preprocess(train, dataset.attribute_space, NormSpec(oracle, cfg.norm_threshold))
    write_csv_atomic(result.manifest(train), out / "norm_removed.csv")
    print(f"✂️  NORM removed {len(result.removed)} records (gap {result.original_gap:.3f} -> {result.final_gap:.3f})")
    return result.records


def cmd_pretrain(cfg: RunConfig, args=None) -> Dict[str, Path]:
    cfg, plan = resolve_baseline(cfg)
    out = out_dir(cfg)
    dataset, vocab, index, _ = prepare_data(cfg)
    train_records = _pretrain_records(cfg, plan, dataset, out)
    seed_everything(cfg.seed)

    resume = getattr(args, "resume", None)
    start_step = 0
    if resume:
        ckpt = load_checkpoint(resume, expect_config_hash=config_hash(cfg), expect_vocab=vocab)
        model, start_step = ckpt.model, ckpt.step
        LOG.info(f"Resuming from {resume} at step {start_step}")
    else:
        model = build_for_dataset(cfg, vocab, index, cfg.seed)

    disc = None
    if cfg.lambda_d > 0:
        hidden = cfg.disc_hidden or (DISC_HIDDEN_FULL if cfg.dims == "full" else None)
        disc = build_discriminator(model.cfg.emb_dim, len(cfg.attribute_values), hidden, cfg.seed)
        if resume and ckpt.disc_state:
            disc.load_state_dict(ckpt.disc_state)
        result, disc = alternate_train(model, disc, dataset, vocab, index, cfg, train_records, start_step)
    else:
        result = pretrain(model, dataset, vocab, index, cfg, train_records=train_records, start_step=start_step)

    paths = {
        "checkpoint": save_checkpoint(out / PRETRAIN_CKPT, result.model, vocab, index, config_hash(cfg),
                                      step=result.steps, disc=disc,
                                      extra={"baseline": plan.name, "best_epoch": result.best_epoch}),
        "curve": write_csv_atomic(result.curve, out / "loss_curve.csv"),
        "config": write_text_atomic(out / "run_config.txt", dump_config(cfg)),
    }
    paths["curve_png"] = plot_loss_curve(result.curve, out / "loss_curve.png")

    emb, attr = owner_embeddings(result.model, dataset, index)
    if len(attr) >= 2:
        acc = probe_accuracy(emb, attr, len(cfg.attribute_values), seed=cfg.seed)
        print(f"🔎 Attribute probe on {cfg.attribute_side} embeddings: {acc:.3f} "
              f"(chance {chance_level(attr, len(cfg.attribute_values)):.3f})")
    print(f"💾 Pretrained checkpoint: {paths['checkpoint']} (best epoch {result.best_epoch}, {result.steps} steps)")
    return paths


def run_finetune(cfg: RunConfig, ckpt_path: Path, dataset: Dataset, vocab: Vocabulary, lexicon,
                 log_path: Optional[Path] = None):
    ckpt = load_checkpoint(ckpt_path, expect_vocab=vocab)
    if ckpt.model.attr_emb is None:
        raise ArtifactMissingError(f"{ckpt_path} has no attribute table; fine-tuning needs an attribute-token model")
    oracle = make_oracle(cfg.quality, lexicon, tuple(cfg.quality_weights))
    result = finetune(ckpt.model, dataset, vocab, ckpt.index, cfg, oracle,
                      batch_size=cfg.effective_finetune_batch, log_path=log_path, start_step=ckpt.step)
    return ckpt, result


def cmd_finetune(cfg: RunConfig, args=None) -> Dict[str, Path]:
    cfg, plan = resolve_baseline(cfg)
    out = out_dir(cfg)
    dataset, vocab, _, lexicon = prepare_data(cfg)
    ckpt_path = resolve_checkpoint(cfg, getattr(args, "checkpoint", None), PRETRAIN_CKPT)
    ckpt, result = run_finetune(cfg, ckpt_path, dataset, vocab, lexicon, out / "finetune_steps.csv")
    path = save_checkpoint(out / FINETUNE_CKPT, result.model, vocab, ckpt.index, config_hash(cfg),
                           step=result.steps, extra={"baseline": plan.name, "lam": cfg.lam, "eta": cfg.eta})
    print(f"💾 Fine-tuned checkpoint: {path} ({result.steps - ckpt.step} steps, lambda={cfg.lam}, eta={cfg.eta})")
    return {"checkpoint": path, "steps": out / "finetune_steps.csv"}


def _ledger_rows(cfg: RunConfig, report, plan_name: str) -> List[dict]:
    rows = report.rows().to_dict("records")
    for row in rows:
        row.update({"tag": cfg.run_tag, "baseline": plan_name, "arch": cfg.arch, "lam": cfg.lam,
                    "eta": cfg.eta, "config_hash": config_hash(cfg)})
    return rows


def cmd_eval(cfg: RunConfig, args=None) -> Dict[str, Path]:
    cfg, plan = resolve_baseline(cfg)
    out = out_dir(cfg)
    dataset, vocab, _, lexicon = prepare_data(cfg)
    ckpt_path = resolve_checkpoint(cfg, getattr(args, "checkpoint", None), FINETUNE_CKPT, PRETRAIN_CKPT)
    ckpt = load_checkpoint(ckpt_path, expect_vocab=vocab)
    model = nattr_transform(ckpt.model, cfg.seed) if plan.nattr_inference else ckpt.model
    report, hist = evaluate(model, dataset, vocab, ckpt.index, cfg, lexicon,
                            tag=cfg.run_tag, dataset_name=Path(cfg.data_path).stem)
    paths = write_report(report, hist, out)
    paths["lengths_png"] = plot_length_histograms(hist, out / "lengths.png")
    db.insert_reports(_ledger_rows(cfg, report, plan.name), out / DB_FILE)

    print(f"\n📊 REPORT ({cfg.run_tag})")
    print(report.rows().drop(columns=["model", "dataset"]).to_string(index=False))
    return paths


def sweep_lambdas(values: Sequence[float]) -> List[float]:
    """Sorted, de-duplicated, always containing 0."""
    return sorted(set(float(v) for v in values) | {0.0})


def best_lambda(table: pd.DataFrame, max_bleu_drop: float = MAX_BLEU_DROP) -> Optional[float]:
    """Lambda > 0 with the lowest Ind-CF ratio among rows keeping BLEU-1 within the allowed drop."""
    ok = table[(table["lam"] > 0) & (table["bleu_ratio"] >= 1.0 - max_bleu_drop) & table["ind_cf_ratio"].notna()]
    if ok.empty:
        return None
    return float(ok.sort_values(["ind_cf_ratio", "lam"]).iloc[0]["lam"])


def cmd_sweep(cfg: RunConfig, args=None) -> Dict[str, Path]:
    cfg, plan = resolve_baseline(cfg)
    if plan.name != "coffee":
        raise ConfigError("sweep runs the coffee baseline only")
    out = out_dir(cfg)
    dataset, vocab, _, lexicon = prepare_data(cfg)
    ckpt_path = resolve_checkpoint(cfg, getattr(args, "checkpoint", None), PRETRAIN_CKPT)

    rows, ledger = [], []
    for lam in sweep_lambdas(cfg.sweep_lambdas):
        lam_cfg = dataclasses.replace(cfg, lam=lam, tag=f"{cfg.run_tag}-lam{lam:g}")
        print(f"\n🔁 lambda = {lam:g}")
        ckpt, result = run_finetune(lam_cfg, ckpt_path, dataset, vocab, lexicon,
                                    out / f"finetune_steps_lam{lam:g}.csv")
        report, _ = evaluate(result.model, dataset, vocab, ckpt.index, lam_cfg, lexicon,
                             tag=lam_cfg.run_tag, dataset_name=Path(cfg.data_path).stem)
        rows.append({"lam": lam, "ind_cf": report.fairness[cfg.quality]["ind_cf"]
                     if cfg.quality in report.fairness else float("nan"), "bleu1": report.bleu1})
        ledger += _ledger_rows(lam_cfg, report, plan.name)

    table = pd.DataFrame(rows)
    base = table.loc[table["lam"] == 0.0].iloc[0]
    table["ind_cf_ratio"] = table["ind_cf"] / base["ind_cf"] if base["ind_cf"] else float("nan")
    table["bleu_ratio"] = table["bleu1"] / base["bleu1"] if base["bleu1"] else float("nan")
    table = table[["lam", "ind_cf_ratio", "bleu_ratio", "ind_cf", "bleu1"]].copy()
    best = best_lambda(table)
    table["best"] = table["lam"] == best
    paths = {"table": write_csv_atomic(table, out / "tradeoff.csv")}
    paths["plot"] = plot_tradeoff(table, out / "tradeoff.png")
    db.insert_reports(ledger, out / DB_FILE)
    print(f"\n📈 TRADE-OFF")
    print(table.to_string(index=False))
    if best is None:
        print(f"⚠️ Tidak ada lambda > 0 dengan penurunan BLEU-1 <= {MAX_BLEU_DROP:.0%}")
    else:
        print(f"🏆 lambda terbaik: {best:g}")
    return paths


def cmd_report(cfg: RunConfig, args=None) -> Dict[str, Path]:
    out = out_dir(cfg)
    df = db.load_reports(out / DB_FILE)
    if df.empty:
        raise ArtifactMissingError(f"no reports recorded in {out / DB_FILE}")
    summary = db.summarize_reports(df)
    path = write_csv_atomic(summary, out / "report_summary.csv")
    print(f"\n📋 {len(df)} report rows, {len(summary)} groups")
    print(summary.to_string(index=False))
    return {"summary": path}


COMMANDS = {
    "corpus": cmd_corpus,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


# =========================
# MAIN
# =========================
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', required=True, help='Path ke file config key = value')
    common.add_argument('--seed', type=int, default=None, help='Override seed dari config')
    common.add_argument('--out', type=str, default=None, help='Override output directory')
    common.add_argument('--verbose', '-v', action='store_true', help='Log level DEBUG')

    parser = argparse.ArgumentParser(
        description='Counterfactually fair explanation generation',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s corpus   --config runs/games.cfg
  %(prog)s pretrain --config runs/games.cfg --seed 1
  %(prog)s finetune --config runs/games.cfg --out runs/games-s1
  %(prog)s eval     --config runs/games.cfg --checkpoint runs/games-s1/finetune.cffe
  %(prog)s sweep    --config runs/games.cfg
  %(prog)s report   --config runs/games.cfg
        """
    )
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('corpus', parents=[common], help='Synthesize, split and save a bias-controlled corpus')
    p = sub.add_parser('pretrain', parents=[common], help='Pretrain the selected baseline')
    p.add_argument('--resume', type=str, default=None, help='Continue from this checkpoint')
    for name, help_text in (('finetune', 'Counterfactual-fairness fine-tuning'),
                            ('eval', 'Fairness + generation report on the test split'),
                            ('sweep', 'Fine-tune per lambda and emit the trade-off table')):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument('--checkpoint', type=str, default=None, help='Checkpoint to start from')
    sub.add_parser('report', parents=[common], help='Aggregate the sqlite run ledger')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out_dir": args.out})
        print(f"""
{'='*60}
FAIRGEN :: {args.command.upper()}
{'='*60}
Config     : {args.config}
Baseline   : {cfg.baseline} ({cfg.arch}, {cfg.dims} dims)
Quality    : {cfg.quality}   lambda={cfg.lam}  eta={cfg.eta}  lambda_D={cfg.lambda_d}
Seed       : {cfg.seed}
Output Dir : {cfg.out_dir}
{'='*60}""")
        paths = COMMANDS[args.command](cfg, args)
        if paths:
            print(f"\n💾 FILE DISIMPAN:")
            for key, path in paths.items():
                print(f"  • {key}: {path}")
        print("✅ SELESAI")
        return EXIT_OK
    except FairgenError as e:
        print(f"❌ ERROR: {e}", file=sys.stderr)
        LOG.debug("details", exc_info=True)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"❌ ERROR: {e}", file=sys.stderr)
        return EXIT_ARTIFACT
    except KeyboardInterrupt:
        print("\n❌ Proses dihentikan oleh pengguna", file=sys.stderr)
        return 130
    except Exception as e:
        print(f"❌ ERROR: {e}", file=sys.stderr)
        LOG.error(f"Unexpected error in {args.command}: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
