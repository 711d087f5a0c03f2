"""softvad command line: simulate, pretrain-vad, train-sv, adapt, evaluate, sweep.

Exit codes: 0 success, 2 invalid configuration, 1 runtime error.
"""

import argparse
import copy
import json
import logging
import sys
import time
from pathlib import Path

import torch

from softvad import checkpoint, corpus, dataset, evaluate, plotting, train
from softvad.config import (HARD_POOLS, POOLING_MODES, PRESETS, RESULT_ROWS, ConfigError,
                            RunConfig, load_config, sv_pooling, table_columns, validate)
from softvad.embedder import SpeakerModel
from softvad.vad import VadNet

log = logging.getLogger("softvad")

COMMANDS = ("simulate", "pretrain-vad", "train-sv", "adapt", "evaluate", "sweep", "recipe")


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output (run or corpus) directory")
    common.add_argument("--preset", choices=PRESETS, help="model/scale preset (default tiny)")
    common.add_argument("--corpus", help="simulated corpus directory")
    common.add_argument("--pooling", choices=POOLING_MODES)
    common.add_argument("--hard-pool", choices=HARD_POOLS,
                        help="pooling applied after a hard VAD (hard-* modes)")
    common.add_argument("--da", choices=train.DA_MODES)
    common.add_argument("--row", choices=sorted(RESULT_ROWS),
                        help="set da/pooling/hard-pool from a named results-table row")
    common.add_argument("--lambda", dest="lam", type=float, help="SP loss weight")
    common.add_argument("--delta", type=float, help="pseudo-label posterior threshold")
    common.add_argument("--vad", help="VAD checkpoint")
    common.add_argument("--sv", help="speaker model checkpoint")
    common.add_argument("--epochs", type=int, help="epoch budget of this command")
    common.add_argument("--lambdas", help="comma-separated loss weights for sweep")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="softvad", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "render the noisy SV corpus, VAD source corpus, labels and trials",
        "pretrain-vad": "train the DNN VAD on the labeled source corpus",
        "train-sv": "train the speaker model with a frozen VAD (or none)",
        "adapt": "joint self-adaptive soft VAD training",
        "evaluate": "score trials: EER, VAD AUC, report row",
        "sweep": "adapt + evaluate once per loss weight; CSV and figure",
        "recipe": "toy end-to-end run: simulate, pretrain, train, adapt, evaluate",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return p


def resolve_config(args) -> RunConfig:
    overrides = {"seed": args.seed, "out": args.out, "corpus": args.corpus,
                 "pooling": args.pooling, "hard_pool": args.hard_pool, "da": args.da,
                 "vad_checkpoint": args.vad, "sv_checkpoint": args.sv,
                 "hp.lam": args.lam, "hp.delta": args.delta}
    if args.row:
        da, pooling, hard_pool = RESULT_ROWS[args.row]
        for k, v in (("da", da), ("pooling", pooling), ("hard_pool", hard_pool)):
            if overrides[k] is None:
                overrides[k] = v
    if args.lambdas:
        try:
            overrides["lambdas"] = [float(v) for v in args.lambdas.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--lambdas must be comma-separated numbers, got {args.lambdas!r}")
    if args.epochs is not None:
        key = {"pretrain-vad": "hp.epochs_vad", "train-sv": "hp.epochs_sv",
               "adapt": "hp.epochs_adapt", "sweep": "hp.epochs_adapt"}.get(args.command)
        if key:
            overrides[key] = args.epochs
    cfg = load_config(args.config, args.preset, overrides)
    if cfg.hp.seed != cfg.seed:
        cfg.hp.seed = cfg.seed
    return cfg


def _run_dir(cfg):
    out = Path(cfg.out)
    if out.exists() and not out.is_dir():
        raise NotADirectoryError(f"output path {out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    return out


def _sv_manifest(cfg):
    path = Path(cfg.corpus) / "sv" / "manifest.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"no SV manifest at {path}; run 'softvad simulate' first")
    return corpus.CorpusManifest.from_jsonl(path)


def _trials(cfg):
    root = Path(cfg.corpus) / "sv"
    return corpus.TrialList.read(root / "trials.txt", root / "enroll.txt")


def _load_vad(cfg):
    return checkpoint.load_model(cfg.vad_checkpoint, "vad") if cfg.vad_checkpoint else None


def _new_sv(cfg, n_speakers, pooling):
    return SpeakerModel(n_speakers, pooling, cfg.model.preset, cfg.model.attention_dim,
                        cfg.model.gsoft_normalize, seed=cfg.component_seed("sv-init"))


# ------------------------------------------------------------------ commands

def cmd_simulate(cfg: RunConfig):
    out = _run_dir(cfg)
    sim = cfg.simulation
    sv = corpus.synth_corpus(sim.sv, cfg.component_seed("sv-corpus"), out / "sv")
    trials = corpus.make_trials(sv, sim.trials.n_enroll, sim.trials.n_target,
                                sim.trials.n_impostor, seed=cfg.component_seed("trials"))
    sv = corpus.mark_enrollment(sv, trials)
    sv.to_jsonl(out / "sv" / "manifest.jsonl")
    trials.write(out / "sv" / "trials.txt", out / "sv" / "enroll.txt")
    src = corpus.synth_corpus(sim.vad, cfg.component_seed("vad-corpus"), out / "vad")
    src.to_jsonl(out / "vad" / "manifest.jsonl")
    n_tar = sum(t.is_target for t in trials.trials)
    print(f"sv corpus: {len(sv.select('train'))} train, {len(sv.select('enroll'))} enroll, "
          f"{len(sv.select('test'))} test utterances; {len(sv.speakers('train'))} train / "
          f"{len(sv.speakers('test', 'enroll'))} test speakers")
    print(f"trials: {len(trials)} ({n_tar} target, {len(trials) - n_tar} nontarget)")
    print(f"vad source corpus: {len(src)} utterances")
    return {"sv": sv, "vad": src, "trials": trials}


def cmd_pretrain_vad(cfg: RunConfig):
    out = _run_dir(cfg)
    src = corpus.CorpusManifest.from_jsonl(Path(cfg.corpus) / "vad" / "manifest.jsonl")
    utts = dataset.load_split(src)
    X, Y = train.frames_from_utterances(utts)
    model = VadNet(hidden=cfg.model.vad_hidden, seed=cfg.component_seed("vad-init"))
    model, history = train.pretrain_vad(model, X, Y, cfg.hp, run_dir=out)
    checkpoint.save(out / "vad.pt", {"vad": model}, config=cfg.to_dict(),
                    extra={"history": history})
    fields = ["epoch", "train_ce", "heldout_ce", "heldout_acc"]
    train.TrainState(model, None, history).write_history(out / "history.csv", fields)
    metrics = {"heldout_ce": history[-1]["heldout_ce"], "heldout_acc": history[-1]["heldout_acc"]}
    target = dataset.load_split(_sv_manifest(cfg), "test", "enroll")
    metrics["target_auc_percent"] = evaluate.vad_auc(model, target)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    print(f"vad: held-out ce {metrics['heldout_ce']:.4f} acc {metrics['heldout_acc']:.4f}; "
          f"target-domain AUC {metrics['target_auc_percent']:.2f}%")
    return model


def cmd_train_sv(cfg: RunConfig):
    out = _run_dir(cfg)
    pool, selection = sv_pooling(cfg)
    utts = dataset.load_split(_sv_manifest(cfg), "train")
    vad = _load_vad(cfg)
    sv = _new_sv(cfg, len(dataset.speaker_index(utts)), pool)
    before = checkpoint.fingerprint(vad) if vad is not None else None
    state = train.train_sv(sv, utts, cfg.hp, vad=vad, selection=selection, run_dir=out,
                           config=cfg.to_dict())
    if vad is not None and checkpoint.fingerprint(vad) != before:
        raise RuntimeError("frozen VAD was modified during SV training")
    checkpoint.save(out / "final.pt", {"sv": sv, "vad": vad}, config=cfg.to_dict())
    plotting.plot_history(state.history, out / "history.png", keys=("L_s",))
    print(f"sv: {state.epoch} epochs, final loss {state.history[-1]['L_s']:.4f}")
    return state


def cmd_adapt(cfg: RunConfig):
    out = _run_dir(cfg)
    utts = dataset.load_split(_sv_manifest(cfg), "train")
    vad = _load_vad(cfg)
    if cfg.sv_checkpoint:
        sv = checkpoint.load_model(cfg.sv_checkpoint, "sv")
        if sv.pooling != sv_pooling(cfg)[0]:
            raise ConfigError(f"pooling={cfg.pooling} conflicts with sv checkpoint pooling "
                              f"{sv.pooling}")
    else:
        sv = _new_sv(cfg, len(dataset.speaker_index(utts)), sv_pooling(cfg)[0])
    state = train.adapt_joint(vad, sv, utts, cfg.hp, da=cfg.da, run_dir=out,
                              config=cfg.to_dict())
    checkpoint.save(out / "final.pt", {"sv": sv, "vad": vad}, config=cfg.to_dict())
    plotting.plot_history(state.history, out / "history.png")
    last = state.history[-1]
    print(f"adapt ({cfg.da}, lambda={cfg.hp.lam}): {state.epoch} epochs, "
          f"L_JL {last['L_JL']:.4f} L_SP {last['L_SP']:.4f}")
    return state


def _eval_models(cfg):
    payload = checkpoint.load(cfg.sv_checkpoint)
    sv = checkpoint.build(payload["models"]["sv"])
    vad = _load_vad(cfg)
    if vad is None and "vad" in payload["models"]:
        vad = checkpoint.build(payload["models"]["vad"])
    return sv, vad, payload.get("config") or {}


def cmd_evaluate(cfg: RunConfig, pooling_given=True):
    out = _run_dir(cfg)
    sv, vad, trained_cfg = _eval_models(cfg)
    if not pooling_given and trained_cfg:
        cfg.pooling = trained_cfg.get("pooling", cfg.pooling)
        cfg.hard_pool = trained_cfg.get("hard_pool", cfg.hard_pool)
    if cfg.da == "none" and trained_cfg.get("da", "none") != "none":
        cfg.da = trained_cfg["da"]
    pool, selection = sv_pooling(cfg)
    if sv.pooling != pool:
        raise ConfigError(f"pooling={cfg.pooling} (hard_pool={cfg.hard_pool}) conflicts with "
                          f"the checkpoint's pooling {sv.pooling}")
    if (sv.uses_posteriors or selection == "dnn") and vad is None:
        raise ConfigError(f"pooling={cfg.pooling} needs a VAD (vad_checkpoint)")
    utts = dataset.load_split(_sv_manifest(cfg), "test", "enroll")
    report, scores = evaluate.run_trials(sv, vad, utts, _trials(cfg), selection, cfg.hp)
    evaluate.write_scores(out / "scores.txt", scores)
    evaluate.write_report(out / "report.csv", [evaluate.report_row(report, *table_columns(cfg))])
    (out / "metrics.json").write_text(json.dumps(report.__dict__, indent=2))
    auc = "n/a" if report.auc_percent is None else f"{report.auc_percent:.2f}%"
    print(f"EER {report.eer_percent:.2f}%  VAD AUC {auc}  "
          f"({report.n_target} target / {report.n_impostor} nontarget trials)")
    return report


def cmd_sweep(cfg: RunConfig):
    out = _run_dir(cfg)
    manifest = _sv_manifest(cfg)
    train_utts = dataset.load_split(manifest, "train")
    eval_utts = dataset.load_split(manifest, "test", "enroll")
    vad = _load_vad(cfg)
    sv = checkpoint.load_model(cfg.sv_checkpoint, "sv")
    rows = evaluate.lambda_sweep(vad, sv, train_utts, eval_utts, _trials(cfg), cfg.hp,
                                 cfg.lambdas, run_dir=out)
    for r in rows:
        auc = "n/a" if r["auc_percent"] is None else f"{r['auc_percent']:.2f}%"
        print(f"lambda={r['lam']:<5g} EER {r['eer_percent']:.2f}%  AUC {auc}")
    return rows


def cmd_recipe(cfg: RunConfig):
    """simulate -> pretrain-vad -> train-sv -> adapt -> evaluate under one root."""
    root = Path(cfg.out)
    t0 = time.time()
    steps = {}

    def sub(name, **changes):
        c = copy.deepcopy(cfg)
        c.__dict__.update(changes)
        c.out = str(root / name)
        return c

    cmd_simulate(sub("corpus"))
    corpus_dir = str(root / "corpus")
    cmd_pretrain_vad(sub("vad", corpus=corpus_dir))
    vad_ckpt = str(root / "vad" / "vad.pt")
    cmd_train_sv(sub("sv", corpus=corpus_dir, vad_checkpoint=vad_ckpt, pooling="asoft", da="none"))
    sv_ckpt = str(root / "sv" / "final.pt")
    steps["before"] = cmd_evaluate(sub("eval-before", corpus=corpus_dir, sv_checkpoint=sv_ckpt,
                                       vad_checkpoint=None, pooling="asoft", da="none"))
    cmd_adapt(sub("adapt", corpus=corpus_dir, vad_checkpoint=vad_ckpt, sv_checkpoint=sv_ckpt,
                  pooling="asoft", da="self-adaptive"))
    steps["after"] = cmd_evaluate(sub("eval-after", corpus=corpus_dir,
                                      sv_checkpoint=str(root / "adapt" / "final.pt"),
                                      vad_checkpoint=None, pooling="asoft", da="self-adaptive"))
    rows = [evaluate.report_row(steps["before"], "No", "SAP", "A-soft VAD"),
            evaluate.report_row(steps["after"], "Yes", "SAP", "Self-adaptive + A-soft VAD")]
    evaluate.write_report(root / "report.csv", rows)
    print(f"recipe finished in {time.time() - t0:.1f} s; summary in {root / 'report.csv'}")
    return steps


HANDLERS = {"simulate": cmd_simulate, "pretrain-vad": cmd_pretrain_vad,
            "train-sv": cmd_train_sv, "adapt": cmd_adapt, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep, "recipe": cmd_recipe}


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        cfg = resolve_config(args)
        errs = validate(cfg, args.command)
        if errs:
            raise ConfigError("; ".join(errs))
        if args.command == "evaluate":
            cmd_evaluate(cfg, pooling_given=bool(args.pooling or args.row))
        else:
            HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"softvad {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        if args.verbose:
            log.exception("command failed")
        print(f"softvad {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
