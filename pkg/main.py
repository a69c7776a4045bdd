"""
Main entry point per il Residual Speaker Module.

Comandi:
- extract:     WAV → feature log-mel (MELF)
- train:       training desk-scale → checkpoint RSMC + metriche JSON-lines
- weights:     matrice K x n dei pesi dei token (CSV, opzionale container)
- edit:        editing dei pesi per layer → embedding editato + provenance
- analyze-std: deviazione standard dei contributi per layer (tabella per sistema)
- gradcheck:   backward esplicito vs differenze finite in tutti i residual mode
- gen-corpus:  corpus sintetico di speaker (WAV + corpus.json)
- evaluate:    accuratezza nearest-centroid e gap di similarità di un checkpoint

Exit code: 0 successo, 1 errore di runtime/dati, 2 errore di configurazione/schema.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from analysis import compute_std_report, format_std_table
from config import NORMALIZATIONS, ConfigError, MelConfig, RunConfig, config_to_dict, get_settings, mel_config_from_dict
from control import (
    EditScriptError,
    apply_edits,
    cosine_distance,
    edit_to_dict,
    extract_weights,
    layer_contributions,
    load_edit_script,
    recompose,
    validate_simplex,
    weight_cosine,
)
from features import MelSpectrogram, extract_features, load_wav, read_melf, write_matrix_container, write_melf
from gradcheck import run_gradcheck
from rsm_core import ResidualSpeakerModule, load_checkpoint, save_checkpoint
from storage import atomic_write_text, sha256_file, write_json, write_matrix_csv
from training import (
    CORPUS_MANIFEST,
    Corpus,
    compute_features,
    evaluate_embeddings,
    gen_corpus,
    load_corpus,
    save_corpus,
    split_corpus,
    train,
)

logger = logging.getLogger("main")

LOG_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)-20s | %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"
BASE_DIR = Path(__file__).resolve().parent
GRADCHECK_CONFIG = BASE_DIR / "configs" / "gradcheck.json"
DEFAULT_TRAIN_CONFIG = BASE_DIR / "configs" / "default_train.json"

# Config usata quando --config non è indicato
DEFAULT_CONFIGS = {
    "train": DEFAULT_TRAIN_CONFIG,
    "gen-corpus": DEFAULT_TRAIN_CONFIG,
    "gradcheck": GRADCHECK_CONFIG,
}

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def setup_logging(level: str) -> None:
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, datefmt=LOG_DATEFMT, force=True)


# =====================
# Helper
# =====================


def load_run_config(path: Optional[str], seed: Optional[int]) -> RunConfig:
    """
    Carica il file JSON di configurazione (o i default).

    Raises:
        ConfigError: file mancante, JSON non valido o schema violato
    """
    if path is None:
        data: Dict = {"seed": seed if seed is not None else get_settings().seed}
    else:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError("config", f"file non trovato: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"JSON non valido ({e})") from e

    config = RunConfig.from_dict(data)
    if seed is not None:
        config.seed = seed
        config.model.seed = seed
        config.train.seed = seed
    return config


def resolve_config_path(command: str, path: Optional[str]) -> Optional[str]:
    if path is not None:
        return path
    default = DEFAULT_CONFIGS.get(command)
    return str(default) if default is not None else None


def output_dir(args: argparse.Namespace, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(get_settings().output_dir) / default_name


def checkpoint_mel_config(manifest: Dict, model: ResidualSpeakerModule) -> MelConfig:
    """Front-end salvato nel checkpoint, altrimenti i default con le bande del modello."""
    mel = manifest.get("extra", {}).get("mel")
    if mel is not None:
        return mel_config_from_dict(mel)
    return MelConfig(mel_bins=model.config.mel_bins)


def load_features(path: Path, mel_cfg: MelConfig) -> MelSpectrogram:
    """Legge un file MELF o estrae le feature da un WAV."""
    if path.suffix.lower() == ".wav":
        return extract_features(load_wav(path), mel_cfg)
    return read_melf(path)


def collect_wavs(inputs: Sequence[str]) -> List[Tuple[Path, Path]]:
    """Coppie (file, percorso relativo di output) per ogni WAV in ingresso."""
    found = []
    for entry in inputs:
        path = Path(entry)
        if path.is_dir():
            found.extend((wav, wav.relative_to(path)) for wav in sorted(path.rglob("*.wav")))
        else:
            found.append((path, Path(path.name)))
    return found


def load_feature_set(path: Path, mel_cfg: MelConfig) -> Tuple[List[MelSpectrogram], Optional[List[int]]]:
    """
    Feature di un corpus: cartella con corpus.json, cartella di MELF/WAV o file singolo.

    Returns:
        (feature, etichette speaker o None se non note)
    """
    if path.is_dir() and (path / CORPUS_MANIFEST).is_file():
        corpus = load_corpus(path)
        return compute_features(corpus, mel_cfg), list(corpus.labels)
    if path.is_dir():
        files = sorted(p for p in path.rglob("*") if p.suffix.lower() in (".melf", ".wav"))
    elif path.exists():
        files = [path]
    else:
        raise FileNotFoundError(f"corpus non trovato: {path}")
    return [load_features(p, mel_cfg) for p in files], None


# =====================
# Comandi
# =====================


def cmd_extract(args: argparse.Namespace, run_cfg: RunConfig) -> int:
    mel_cfg = run_cfg.mel
    if args.normalization:
        mel_cfg = replace(mel_cfg, normalization=args.normalization)
    if args.mel_bins:
        mel_cfg = replace(mel_cfg, mel_bins=args.mel_bins)
    errors = mel_cfg.validate()
    if errors:
        raise ConfigError("mel", errors[0])

    inputs = collect_wavs(args.inputs)
    if not inputs:
        logger.error("Nessun input (no inputs): nessun file WAV trovato")
        return EXIT_RUNTIME

    single_target = args.out and len(inputs) == 1 and args.out.endswith(".melf")
    out_root = output_dir(args, "features")
    failures = []
    for wav_path, relative in inputs:
        target = Path(args.out) if single_target else out_root / relative.with_suffix(".melf")
        try:
            mel = extract_features(load_wav(wav_path), mel_cfg)
            write_melf(target, mel)
            logger.info(f"✓ {wav_path} → {target} ({mel.num_frames} frame)")
        except (ValueError, OSError) as e:
            failures.append((wav_path, str(e)))
            logger.error(f"✗ {wav_path}: {e}")

    logger.info(f"Estrazione: {len(inputs) - len(failures)}/{len(inputs)} file riusciti")
    if failures:
        for wav_path, message in failures:
            logger.error(f"  - {wav_path}: {message}")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_train(args: argparse.Namespace, run_cfg: RunConfig) -> int:
    tcfg = run_cfg.train
    durations = (tcfg.min_duration, tcfg.max_duration)
    unseen: Optional[Corpus] = None

    if run_cfg.corpus_dir is not None:
        corpus_path = Path(run_cfg.corpus_dir)
        if not corpus_path.is_dir():
            raise ConfigError("corpus_dir", f"percorso inesistente: {corpus_path}")
        corpus = load_corpus(corpus_path)
    else:
        total = tcfg.utterances_per_speaker + run_cfg.heldout_per_speaker
        corpus = gen_corpus(run_cfg.seed, tcfg.num_speakers, total, durations)
        if run_cfg.unseen_speakers >= 2:
            unseen = gen_corpus(
                run_cfg.seed,
                run_cfg.unseen_speakers,
                max(2, run_cfg.heldout_per_speaker),
                durations,
                speaker_offset=tcfg.num_speakers,
            )

    if run_cfg.heldout_per_speaker > 0:
        train_corpus, heldout = split_corpus(corpus, run_cfg.heldout_per_speaker)
    else:
        train_corpus, heldout = corpus, None

    out = output_dir(args, "train")
    model = ResidualSpeakerModule(run_cfg.model)
    logger.info("=" * 60)
    logger.info(f"TRAINING - mode={run_cfg.model.residual_mode}, seed={run_cfg.seed}")
    logger.info("=" * 60)

    result = train(train_corpus, model, tcfg, run_cfg.mel, metrics_path=out / "metrics.jsonl")
    save_checkpoint(out / "checkpoint.rsmc", model, extra={"mel": config_to_dict(run_cfg.mel)})
    logger.info(f"Loss: iniziale {result.initial_loss:.4f} → finale {result.final_loss:.4f}")

    if heldout is not None and run_cfg.heldout_per_speaker >= 2:
        report = evaluate_embeddings(model, heldout, unseen, run_cfg.mel)
        write_json(out / "evaluation.json", {
            "initial_loss": result.initial_loss,
            "final_loss": result.final_loss,
            **report.to_dict(),
        })
    return EXIT_OK


def cmd_weights(args: argparse.Namespace, run_cfg: RunConfig) -> int:
    model, manifest = load_checkpoint(args.checkpoint)
    mel_cfg = checkpoint_mel_config(manifest, model)
    paths = [Path(p) for p in args.features]

    single_target = args.out and len(paths) == 1 and args.out.endswith(".csv")
    out_root = output_dir(args, "weights")
    matrices = {}
    for path in paths:
        weights = validate_simplex(extract_weights(load_features(path, mel_cfg), model))
        target = Path(args.out) if single_target else out_root / f"{path.stem}.csv"
        write_matrix_csv(target, weights)
        if args.json:
            write_matrix_container(target.with_suffix(".weights"), weights, {
                "format": "MELF",
                "kind": "token_weights",
                "residual_mode": model.config.residual_mode,
                "source": path.name,
            })
        matrices[path.stem] = weights
        logger.info(f"✓ {path.name}: pesi {weights.shape[0]} x {weights.shape[1]} → {target}")

    if len(matrices) >= 2:
        names = list(matrices)
        table = pd.DataFrame(
            [[weight_cosine(matrices[a], matrices[b]) for b in names] for a in names],
            index=names,
            columns=names,
        )
        similarity_path = (Path(args.out).parent if single_target else out_root) / "similarity.csv"
        atomic_write_text(similarity_path, table.to_csv(float_format="%.9g"))
        print(table.to_string(float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK


def cmd_edit(args: argparse.Namespace, run_cfg: RunConfig) -> int:
    script = load_edit_script(args.script)
    model, manifest = load_checkpoint(args.checkpoint)
    mel_cfg = checkpoint_mel_config(manifest, model)

    src_weights = extract_weights(load_features(Path(args.src), mel_cfg), model)
    tgt_weights = extract_weights(load_features(Path(args.tgt), mel_cfg), model)
    edited_weights = apply_edits(src_weights, tgt_weights, script)

    edited = recompose(edited_weights, model)
    src_embedding = recompose(src_weights, model)
    tgt_embedding = recompose(tgt_weights, model)

    edited_rows = layer_contributions(edited_weights, model)
    src_rows = layer_contributions(src_weights, model)
    tgt_rows = layer_contributions(tgt_weights, model)
    per_layer = [
        {
            "layer": i,
            "distance_to_source": cosine_distance(edited_rows[i], src_rows[i]),
            "distance_to_target": cosine_distance(edited_rows[i], tgt_rows[i]),
        }
        for i in range(model.config.n_layers)
    ]

    out = Path(args.out) if args.out else Path(get_settings().output_dir) / "edit" / "edited_embedding.json"
    write_json(out, {"embedding": edited, "weights": edited_weights})

    provenance = {
        "script": [edit_to_dict(e) for e in script],
        "inputs": {
            "checkpoint": sha256_file(args.checkpoint),
            "src": sha256_file(args.src),
            "tgt": sha256_file(args.tgt),
            "script": sha256_file(args.script),
        },
        "residual_mode": model.config.residual_mode,
        "distance_to_source": cosine_distance(edited, src_embedding),
        "distance_to_target": cosine_distance(edited, tgt_embedding),
        "per_layer": per_layer,
    }
    write_json(out.with_name(f"{out.stem}.provenance.json"), provenance)
    logger.info(
        f"Edit applicati: {len(script)} | d(src)={provenance['distance_to_source']:.4f} "
        f"d(tgt)={provenance['distance_to_target']:.4f} → {out}"
    )
    return EXIT_OK


def cmd_analyze_std(args: argparse.Namespace, run_cfg: RunConfig) -> int:
    reports = []
    for checkpoint in args.checkpoint:
        model, manifest = load_checkpoint(checkpoint)
        mels, _ = load_feature_set(Path(args.corpus), checkpoint_mel_config(manifest, model))
        if not mels:
            logger.error(f"Corpus vuoto: {args.corpus}")
            return EXIT_RUNTIME
        label = f"{Path(checkpoint).stem} [{model.config.residual_mode}]"
        reports.append(compute_std_report(model, mels, label))

    table = format_std_table(reports)
    out = output_dir(args, "analysis")
    atomic_write_text(out / "std_report.csv", table.to_csv(float_format="%.9g"))
    write_json(out / "std_report.json", [r.to_dict() for r in reports])
    print(table.to_string(float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, run_cfg: RunConfig) -> int:
    report = run_gradcheck(run_cfg.model, num_frames=args.num_frames)
    for mode in report.modes:
        status = "OK" if mode.passed else "FALLITO"
        print(f"\n=== {mode.residual_mode} ({status}) ===")
        print(mode.to_frame().to_string(float_format=lambda v: f"{v:.3e}"))
    if args.out:
        write_json(Path(args.out), report.to_dict())
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_gen_corpus(args: argparse.Namespace, run_cfg: RunConfig) -> int:
    tcfg = run_cfg.train
    corpus = gen_corpus(
        run_cfg.seed,
        args.num_speakers if args.num_speakers is not None else tcfg.num_speakers,
        args.utterances if args.utterances is not None else tcfg.utterances_per_speaker,
        (tcfg.min_duration, tcfg.max_duration),
        speaker_offset=args.speaker_offset,
    )
    save_corpus(corpus, output_dir(args, "corpus"), seed=run_cfg.seed)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, run_cfg: RunConfig) -> int:
    model, manifest = load_checkpoint(args.checkpoint)
    mel_cfg = checkpoint_mel_config(manifest, model)
    corpus = load_corpus(args.corpus)
    unseen = load_corpus(args.unseen) if args.unseen else None
    report = evaluate_embeddings(model, corpus, unseen, mel_cfg)
    if args.out:
        write_json(Path(args.out), report.to_dict())
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


COMMANDS = {
    "extract": cmd_extract,
    "train": cmd_train,
    "weights": cmd_weights,
    "edit": cmd_edit,
    "analyze-std": cmd_analyze_std,
    "gradcheck": cmd_gradcheck,
    "gen-corpus": cmd_gen_corpus,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    # Le opzioni globali valgono sia prima sia dopo il sottocomando
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed globale")
    common.add_argument("--config", default=argparse.SUPPRESS, help="file JSON di configurazione")
    common.add_argument("--out", default=argparse.SUPPRESS, help="file o cartella di output")
    common.add_argument("--log-level", default=argparse.SUPPRESS, help="DEBUG, INFO, WARNING, ...")

    parser = argparse.ArgumentParser(
        prog="rsm", description="Residual Speaker Module: training, estrazione ed editing del timbro",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[common], help="WAV → MELF")
    p.add_argument("inputs", nargs="*", help="file WAV o cartelle")
    p.add_argument("--normalization", choices=NORMALIZATIONS, default=None)
    p.add_argument("--mel-bins", type=int, default=None)

    sub.add_parser("train", parents=[common], help="training desk-scale")

    p = sub.add_parser("weights", parents=[common], help="matrice dei pesi dei token")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("features", nargs="+", help="file MELF o WAV")
    p.add_argument("--json", action="store_true", help="scrive anche il container float32")

    p = sub.add_parser("edit", parents=[common], help="editing dei pesi per layer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--script", required=True)

    p = sub.add_parser("analyze-std", parents=[common], help="deviazione standard per layer")
    p.add_argument("--checkpoint", action="append", required=True, help="ripetibile: un sistema per checkpoint")
    p.add_argument("--corpus", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="verifica dei gradienti")
    p.add_argument("--num-frames", type=int, default=3)

    p = sub.add_parser("gen-corpus", parents=[common], help="corpus sintetico")
    p.add_argument("--num-speakers", type=int, default=None)
    p.add_argument("--utterances", type=int, default=None)
    p.add_argument("--speaker-offset", type=int, default=0)

    p = sub.add_parser("evaluate", parents=[common], help="valutazione degli embedding")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--unseen", default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point: restituisce l'exit code."""
    args = build_parser().parse_args(argv)
    for name in ("seed", "config", "out", "log_level"):
        if not hasattr(args, name):
            setattr(args, name, None)
    setup_logging(args.log_level or get_settings().log_level)

    try:
        run_cfg = load_run_config(resolve_config_path(args.command, args.config), args.seed)
        return COMMANDS[args.command](args, run_cfg)
    except (ConfigError, EditScriptError) as e:
        logger.error(f"Errore di configurazione: {e}")
        return EXIT_CONFIG
    except (ValueError, RuntimeError, ArithmeticError, OSError, KeyError) as e:
        logger.error(f"Errore: {e}")
        logger.debug("Dettagli", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
