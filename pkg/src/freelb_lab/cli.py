"""``freelb-lab`` command line: train, eval, attack, compare, gen-data, presets."""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from . import model as M
from . import robustness as R
from . import trainers as T
from .config import ConfigError, RunConfig, format_config, parse_config, require
from .tensor import NonFiniteError, RngState

SUBCOMMANDS = ("train", "eval", "attack", "compare", "gen-data", "presets")
OUT_ENV = "FREELB_LAB_OUT"


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config -> library objects


def adv_config(cfg: RunConfig) -> T.AdvConfig:
    return T.AdvConfig(method=cfg.method, steps=cfg.steps, alpha=cfg.alpha, eps=cfg.eps,
                       inner_steps=cfg.inner_steps, split_after=cfg.split_after, lr=cfg.lr,
                       optimizer=cfg.optimizer, epochs=cfg.epochs, batch_size=cfg.batch_size,
                       seed=cfg.seed, reuse_mask=cfg.reuse_mask)


def model_config(cfg: RunConfig, vocab_size: int, num_classes: int) -> M.ModelConfig:
    return M.ModelConfig(vocab_size=vocab_size, dim=cfg.dim, heads=cfg.heads, blocks=cfg.blocks,
                         ff_dim=cfg.ff_dim, max_len=cfg.max_len, dropout=cfg.dropout,
                         num_classes=num_classes)


def attack_config(cfg: RunConfig) -> R.AttackConfig:
    return R.AttackConfig(steps=cfg.attack_steps, step_size=cfg.attack_step_size, eps_mode=cfg.eps_mode,
                          eps=cfg.attack_eps, restarts=cfg.restarts, eps_start_factor=cfg.eps_start_factor,
                          decrement=cfg.eps_decrement or None)


def out_dir(cfg: RunConfig, sub: str) -> Path:
    if cfg.out_dir:
        path = Path(cfg.out_dir)
    else:
        path = Path(os.environ.get(OUT_ENV, "runs")) / sub
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8")


def _eval_corpus(cfg: RunConfig) -> D.LabeledCorpus:
    path = cfg.eval_path or cfg.dev_path
    if not path:
        raise ConfigError("missing required key(s): eval_path (or dev_path)")
    corpus = D.read_tsv(path)
    if cfg.max_eval_samples and len(corpus) > cfg.max_eval_samples:
        corpus = D.LabeledCorpus(corpus.examples[:cfg.max_eval_samples], corpus.num_classes,
                                 corpus.split, corpus.meta)
    return corpus


def _load_model(path):
    params, header = M.load_checkpoint(path)
    meta = header.get("meta") or {}
    if "vocab" not in meta:
        raise UsageError(f"checkpoint {path} carries no vocabulary")
    return params, D.Vocab(meta["vocab"]), meta


def _parse_models(spec: str) -> dict:
    models = {}
    for item in filter(None, (s.strip() for s in spec.split(","))):
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"models entry {item!r} must look like name=path")
        if name in models:
            raise ConfigError(f"duplicate model name {name!r}")
        models[name] = path
    if not models:
        raise ConfigError("missing required key(s): models")
    return models


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    require(cfg, "train_path", "dev_path")
    train_c, dev_c = D.read_tsv(cfg.train_path, "train"), D.read_tsv(cfg.dev_path, "dev")
    vocab = D.build_vocab(train_c, cfg.min_count)
    mc = model_config(cfg, len(vocab), max(train_c.num_classes, dev_c.num_classes))
    acfg = adv_config(cfg)
    init = M.init_params(mc, RngState(acfg.seed).child("init"))
    if cfg.preset:
        scale = T.embedding_scale(init) if cfg.preset_scale == "auto" else float(cfg.preset_scale)
        acfg = T.apply_preset(acfg, cfg.preset, scale)
    train_b, dev_b = D.encode(train_c, vocab, cfg.max_len), D.encode(dev_c, vocab, cfg.max_len)
    metrics = (out / "metrics.jsonl").open("w", encoding="utf-8")
    try:
        result = T.train(acfg, mc, train_b, dev_b, record_timing=cfg.record_timing, init=init,
                         log=lambda rec: (metrics.write(json.dumps(rec, sort_keys=True) + "\n"), metrics.flush()))
    finally:
        metrics.close()
    adv = {k: getattr(acfg, k) for k in acfg.__dataclass_fields__}
    meta = {"vocab": vocab.tokens, "adv_config": adv}
    M.save_checkpoint(out / "best.ckpt", result.best, acfg.seed, dict(meta, which="best"))
    M.save_checkpoint(out / "last.ckpt", result.last, acfg.seed, dict(meta, which="last"))
    vocab.save(out / "vocab.json")
    _write(out / "report.json", result.report.to_json() + "\n")
    if cfg.figures:
        from .plotting import plot_training
        plot_training(result.report, out / "figures" / "training.png")
    return {"best_dev_acc": result.report.best_dev_acc, "final_dev_acc": result.report.final_dev_acc,
            "eps": acfg.eps, "alpha": acfg.alpha, "steps": acfg.steps}


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    require(cfg, "checkpoint")
    params, vocab, _ = _load_model(cfg.checkpoint)
    corpus = _eval_corpus(cfg)
    res = T.evaluate(params, D.encode(corpus, vocab, params.config.max_len))
    res = {"checkpoint": cfg.checkpoint, **res}
    _write(out / "eval.json", json.dumps(res, sort_keys=True, indent=2) + "\n")
    return res


def _eps_start(cfg: RunConfig, metas: list) -> float | None:
    if cfg.eps_mode != "searched":
        return None
    if cfg.eps_start > 0:
        return cfg.eps_start
    train_eps = [m.get("adv_config", {}).get("eps", 0.0) for m in metas
                 if m.get("adv_config", {}).get("method", "natural") != "natural"]
    base = max(train_eps) if train_eps else cfg.eps
    return cfg.eps_start_factor * base


def _write_reports(out: Path, comparison: dict, cfg: RunConfig):
    payload = {ref: {name: json.loads(rep.to_json()) for name, rep in reps.items()}
               for ref, reps in comparison.items()}
    _write(out / "compare.json", json.dumps(payload, sort_keys=True, indent=2) + "\n")
    _write(out / "table.txt", R.render_table(comparison))
    with (out / "metrics.jsonl").open("w", encoding="utf-8") as fh:
        for ref, reps in comparison.items():
            for name in sorted(reps):
                fh.write(json.dumps(R._jsonable({"reference": ref, "model": name, **reps[name].aggregate}),
                                    sort_keys=True) + "\n")
    if cfg.figures:
        from .plotting import plot_increments
        plot_increments(comparison, out / "figures" / "increments.png")


def cmd_attack(cfg: RunConfig, out: Path) -> dict:
    require(cfg, "checkpoint")
    params, vocab, meta = _load_model(cfg.checkpoint)
    batch = D.encode(_eval_corpus(cfg), vocab, params.config.max_len)
    name = Path(cfg.checkpoint).stem
    reports = R.robustness_report({name: params}, batch, name, attack_config(cfg),
                                  RngState(cfg.attack_seed), _eps_start(cfg, [meta]))
    _write(out / "eval_report.json", reports[name].to_json() + "\n")
    _write_reports(out, {name: reports}, cfg)
    if cfg.figures:
        from .plotting import plot_budgets
        plot_budgets(reports[name], out / "figures" / "budgets.png")
    return R._jsonable(reports[name].aggregate)


def cmd_compare(cfg: RunConfig, out: Path) -> dict:
    paths = _parse_models(cfg.models)
    corpus = _eval_corpus(cfg)
    targets, metas = {}, []
    for name, path in paths.items():
        params, vocab, meta = _load_model(path)
        targets[name] = R.ClassifierTarget(params, D.encode(corpus, vocab, params.config.max_len))
        metas.append(meta)
    refs = [r.strip() for r in cfg.references.split(",") if r.strip()] or list(paths)
    unknown = [r for r in refs if r not in paths]
    if unknown:
        raise ConfigError(f"references {unknown} are not among the models {sorted(paths)}")
    first = next(iter(targets.values()))
    comparison = R.compare(targets, first.batch, refs, attack_config(cfg), RngState(cfg.attack_seed),
                           _eps_start(cfg, metas))
    _write_reports(out, comparison, cfg)
    return {ref: {m: R._jsonable(rep.aggregate["median_delta_loss_max"]) for m, rep in reps.items()}
            for ref, reps in comparison.items()}


def cmd_gen_data(cfg: RunConfig, out: Path) -> dict:
    written = {}
    for split, size in (("train", cfg.train_size), ("dev", cfg.dev_size), ("test", cfg.test_size)):
        if size <= 0:
            continue
        corpus = D.gen_synthetic(cfg.task, size, cfg.seq_len, cfg.vocab_size, cfg.noise, cfg.gen_seed, split)
        path = out / f"{split}.tsv"
        D.write_tsv(corpus, path)
        written[split] = str(path)
    if not written:
        raise ConfigError("gen-data needs at least one positive split size")
    return written


def cmd_presets(cfg: RunConfig, out: Path | None = None) -> None:
    print("preset\teps\talpha\tsteps")
    for name, p in T.PRESETS.items():
        print(f"{name}\t{p.eps:g}\t{p.alpha:g}\t{p.steps}")


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "attack": cmd_attack, "compare": cmd_compare,
            "gen-data": cmd_gen_data}


def dispatch(sub: str, cfg: RunConfig) -> int:
    """Run one subcommand; returns the process exit code."""
    if sub not in SUBCOMMANDS:
        raise UsageError(f"unknown subcommand {sub!r}; expected one of {SUBCOMMANDS}")
    if sub == "presets":
        cmd_presets(cfg)
        return 0
    out = out_dir(cfg, sub)
    _write(out / "config.txt", format_config(cfg))
    summary = COMMANDS[sub](cfg, out)
    print(json.dumps({"status": "ok", "command": sub, "out_dir": str(out), "summary": summary},
                     sort_keys=True))
    return 0


def _error(kind: str, exc: Exception, code: int) -> int:
    msg = str(exc).replace("\n", " ")
    print(json.dumps({"status": "error", "kind": kind, "message": msg}, sort_keys=True), file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="freelb-lab", description=__doc__)
    p.add_argument("command", choices=SUBCOMMANDS)
    p.add_argument("-c", "--config", help="key = value config file")
    p.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    return p


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def main(argv=None) -> int:
    parser = build_parser()
    parser.__class__ = _Parser
    try:
        args = parser.parse_args(argv)
        cfg = parse_config(args.config, args.set)
        return dispatch(args.command, cfg)
    except (T.TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        return _error("numerical", exc, 2)
    except (ConfigError, UsageError, R.ProtocolError) as exc:
        return _error(type(exc).__name__, exc, 1)
    except (ValueError, KeyError, OSError) as exc:
        return _error(type(exc).__name__, exc, 1)


if __name__ == "__main__":
    sys.exit(main())
