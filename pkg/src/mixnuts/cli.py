"""Command-line entry point: ``mixnuts <command> ...``.

Every command writes into ``--out`` (a directory) and records each artifact's
XXH64 digest in ``manifest.json`` there. Exit codes: 0 success, 2 invalid
input, 3 contract violation, 4 internal failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data_io as io
from .attack import AttackConfig, Norm, minimum_margin_attack
from .errors import ContractError, InvalidInputError, MixnutsError
from .logits import Clamp, TransformParams
from .models import Activation, MlpModel, make_synthetic_problem
from .optimizer import (
    PRESETS,
    GridSearchResult,
    SearchGrid,
    Variant,
    build_margin_sets,
    constraint_activeness_check,
    grid_search,
    preset_grid,
)
from .report import evaluate_adaptive, evaluate_table, margin_rows, tradeoff, write_margin_csv
from .training import train

log = logging.getLogger("mixnuts")

LN_HEAD = TransformParams()


# -- output helpers ----------------------------------------------------------------


class Outputs:
    def __init__(self, out):
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.written: dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.dir / name

    def done(self, name: str) -> Path:
        p = self.path(name)
        self.written[name] = io.content_hash(p)
        return p

    def json(self, name: str, doc) -> Path:
        io.dump_json(doc, self.path(name))
        return self.done(name)

    def close(self):
        mpath = self.dir / "manifest.json"
        manifest = {"artifacts": {}}
        if mpath.exists():
            manifest = io.load_json(mpath)
        manifest.setdefault("artifacts", {}).update(self.written)
        manifest["artifacts"] = dict(sorted(manifest["artifacts"].items()))
        io.dump_json(manifest, mpath)


def _grid(args, beta: float) -> SearchGrid:
    clamp = Clamp.parse(args.clamp)
    if args.grid_file:
        doc = io.load_json(args.grid_file, io.GRID_SCHEMA, "grid file")
        return _grid_from_doc(doc, beta, clamp, args.ln_top_k)
    return preset_grid(args.grid_preset, beta, clamp, args.ln_top_k)


def _grid_from_doc(doc: dict, beta: float, clamp: Clamp, ln_top_k) -> SearchGrid:
    clamp = Clamp.parse(doc.get("clamp", clamp))
    ln_top_k = doc.get("ln_top_k", ln_top_k)
    if "preset" in doc:
        return preset_grid(doc["preset"], beta, clamp, ln_top_k)
    return SearchGrid(doc["s"], doc["p"], doc["c"], clamp, beta, ln_top_k)


def _attack_cfg(args) -> AttackConfig:
    step = args.step_size if args.step_size == "auto" else float(args.step_size)
    return AttackConfig(Norm(args.norm), args.eps, args.steps, args.restarts, step, args.seed,
                        args.targets)


def _read_features(path):
    ds = io.read_logit_dataset(path)
    if not ds.flags & io.FLAG_FEATURES:
        raise InvalidInputError(f"{path} holds logits, not input features")
    return ds.as_features()


def _g_correct(args, clean: io.LogitDataset):
    if not getattr(args, "g_logits", None):
        return None
    g = io.read_logit_dataset(args.g_logits).aligned_to(clean.ids)
    return np.argmax(g.logits, axis=1) == clean.labels


def _check_cache(run, args):
    model_hash = io.content_hash(args.model) if getattr(args, "model", None) else None
    data_hash = io.content_hash(args.dataset) if getattr(args, "dataset", None) else None
    io.check_cache(run, model_hash, data_hash, args.allow_cache_mismatch)


def _require_ln_cache(run, override: bool):
    head = run.meta.get("head")
    if head is None or TransformParams.from_dict(head) != LN_HEAD:
        if not override:
            raise ContractError("the optimizer needs an attack cache against the layer-normed "
                                "robust model (attack --head ln)")
        log.warning("attack cache head %s is not plain layer norm", head)


# -- commands ----------------------------------------------------------------------


def cmd_gen_synthetic(args, out: Outputs):
    data, planted = make_synthetic_problem(args.seed, args.classes, args.dim, args.samples,
                                           args.separation)
    io.write_logit_dataset(io.LogitDataset.from_features(data), out.path("data.mxnl"))
    out.done("data.mxnl")
    sizes = [args.dim, args.hidden, args.classes]
    g0 = MlpModel.random(sizes, Activation.TANH, seed=args.seed * 2 + 1)
    h0 = MlpModel.random(sizes, Activation.TANH, seed=args.seed * 2 + 2)
    g = train(g0, data, epochs=args.epochs)
    h = train(h0, data, epochs=args.epochs, adv_epsilon=args.adv_eps)
    for name, model in (("g", g), ("h", h)):
        io.write_model(model, out.path(f"{name}.mxnm"))
        out.done(f"{name}.mxnm")
        logits = io.LogitDataset(data.ids, data.y, model.forward(data.x))
        io.write_logit_dataset(logits, out.path(f"{name}_logits.mxnl"))
        out.done(f"{name}_logits.mxnl")
        log.info("%s clean accuracy %.4f", name,
                 np.mean(np.argmax(logits.logits, axis=1) == data.y))
    out.json("planted.json", {"means": planted.means.tolist(),
                              "separation": planted.separation, "seed": args.seed})


def _head(spec: str):
    if spec == "none":
        return None
    if spec == "ln":
        return LN_HEAD
    return GridSearchResult.from_dict(io.load_json(spec, io.RESULT_SCHEMA, "result")).params


def cmd_attack(args, out: Outputs):
    model = io.read_model(args.model)
    data = _read_features(args.dataset)
    run = minimum_margin_attack(model, data, _attack_cfg(args), head=_head(args.head))
    run.meta.update(model_hash=io.content_hash(args.model),
                    dataset_hash=io.content_hash(args.dataset))
    name = args.name or "attack.mxna"
    io.write_attack_run(run, out.path(name))
    out.done(name)
    log.info("robust accuracy under attack: %.4f", run.robust_accuracy)


def _optimize(clean, run, grid, variant, g_correct, out: Outputs, name="result.json"):
    sets = build_margin_sets(clean, run, grid.ln_top_k, g_correct)
    result = grid_search(sets, grid, variant)
    act = constraint_activeness_check(result, sets, grid)
    if not act.passed:
        log.warning("robustness constraint is %s at the optimum", act.status)
    out.json(name, result.to_dict())
    out.json("activeness.json", act.to_dict())
    return result


def cmd_optimize(args, out: Outputs):
    clean = io.read_logit_dataset(args.clean_logits)
    run = io.read_attack_run(args.attack_cache)
    _check_cache(run, args)
    _require_ln_cache(run, args.allow_cache_mismatch)
    _optimize(clean, run, _grid(args, args.beta), Variant(args.variant),
              _g_correct(args, clean), out)


def _result(path) -> GridSearchResult:
    return GridSearchResult.from_dict(io.load_json(path, io.RESULT_SCHEMA, "result"))


def cmd_evaluate(args, out: Outputs):
    result = _result(args.result)
    if args.adaptive:
        if not (args.g_model and args.h_model and args.dataset):
            raise InvalidInputError("--adaptive needs --g-model, --h-model and --dataset")
        rep = evaluate_adaptive(result, io.read_model(args.g_model), io.read_model(args.h_model),
                                _read_features(args.dataset), _attack_cfg(args), args.rd,
                                args.alpha_d, args.printed_formula, with_bound=not args.no_bound)
    else:
        if not args.attack_cache:
            raise InvalidInputError("table mode needs --attack-cache (or pass --adaptive)")
        run = io.read_attack_run(args.attack_cache)
        _check_cache(run, args)
        g = io.read_logit_dataset(args.g_logits)
        h = io.read_logit_dataset(args.h_logits)
        rep = evaluate_table(result, g, h, run)
    out.json(args.name or "report.json", rep.to_dict())


def cmd_margins(args, out: Outputs):
    clean = io.read_logit_dataset(args.logits)
    run = io.read_attack_run(args.attack_cache) if args.attack_cache else None
    transform = args.transform if args.transform in ("none", "ln") else _result(args.transform).params
    rows, medians = margin_rows(clean, transform, run)
    write_margin_csv(rows, out.path("margins.csv"))
    out.done("margins.csv")
    out.json("margin_medians.json", medians)


def cmd_tradeoff(args, out: Outputs):
    clean = io.read_logit_dataset(args.clean_logits)
    g = io.read_logit_dataset(args.g_logits)
    run = io.read_attack_run(args.attack_cache)
    _check_cache(run, args)
    _require_ln_cache(run, args.allow_cache_mismatch)
    try:
        betas = [float(b) for b in args.betas.split(",")]
    except ValueError:
        raise InvalidInputError(f"bad --betas {args.betas!r}") from None
    grid = _grid(args, max(betas))
    sets = build_margin_sets(clean, run, grid.ln_top_k, _g_correct(args, clean))
    curve = tradeoff(sets, grid, betas, g, clean, run, Variant(args.variant))
    out.json("tradeoff.json", curve.to_dict())


def cmd_export_csv(args, out: Outputs):
    ds = io.read_logit_dataset(args.logits)
    name = Path(args.logits).with_suffix(".csv").name
    io.write_logit_csv(ds, out.path(name))
    out.done(name)


def cmd_run(args, out: Outputs):
    cfg = io.read_run_config(args.config)
    base = Path(args.config).parent
    resolve = lambda p: Path(p) if Path(p).is_absolute() else base / p
    out = Outputs(resolve(cfg["output_dir"]) if args.out is None else args.out)
    data = _read_features(resolve(cfg["dataset"]))
    g_model = io.read_model(resolve(cfg["accurate_model"]))
    h_model = io.read_model(resolve(cfg["robust_model"]))
    acfg = AttackConfig.from_dict({"restarts": 1, "seed": 0, "targets": 3, **cfg["attack"]})
    variant = Variant(cfg.get("variant", "independent"))
    grid = _grid_from_doc(cfg["transform_grid"], cfg["beta"], Clamp.GELU, None)

    h_clean = io.LogitDataset(data.ids, data.y, h_model.forward(data.x))
    g_clean = io.LogitDataset(data.ids, data.y, g_model.forward(data.x))
    for name, ds in (("g_logits.mxnl", g_clean), ("h_logits.mxnl", h_clean)):
        io.write_logit_dataset(ds, out.path(name))
        out.done(name)
    # stored logits are f32; re-read so every later step sees the on-disk values
    h_clean = io.read_logit_dataset(out.path("h_logits.mxnl"))
    g_clean = io.read_logit_dataset(out.path("g_logits.mxnl"))

    ln_run = minimum_margin_attack(h_model, data, acfg, head=LN_HEAD)
    io.write_attack_run(ln_run, out.path("attack_ln.mxna"))
    ln_run = io.read_attack_run(out.done("attack_ln.mxna"))
    g_ok = np.argmax(g_clean.logits, axis=1) == g_clean.labels
    result = _optimize(h_clean, ln_run, grid, variant, g_ok, out)

    m_run = minimum_margin_attack(h_model, data, acfg, head=result.params)
    io.write_attack_run(m_run, out.path("attack_m.mxna"))
    m_run = io.read_attack_run(out.done("attack_m.mxna"))
    rep = evaluate_table(result, g_clean, h_clean, m_run)
    out.json("report.json", rep.to_dict())
    return out


# -- parser ------------------------------------------------------------------------


def _add_attack_flags(p, required=True):
    p.add_argument("--norm", choices=[n.value for n in Norm], default="Linf")
    p.add_argument("--eps", type=float, required=required, default=0.3)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--step-size", default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--targets", type=int, default=3)


def _add_grid_flags(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--grid-preset", choices=sorted(PRESETS), default="toy")
    g.add_argument("--grid-file")
    p.add_argument("--clamp", choices=[c.value for c in Clamp], default="gelu")
    p.add_argument("--ln-top-k", type=int)
    p.add_argument("--variant", choices=[v.value for v in Variant], default="independent")
    p.add_argument("--g-logits", help="accurate model logits (conditional variant)")


def _add_cache_flags(p):
    p.add_argument("--model", help="robust model checkpoint, to validate the cache")
    p.add_argument("--dataset", help="feature dataset, to validate the cache")
    p.add_argument("--allow-cache-mismatch", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mixnuts", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="planted Gaussian mixture plus two trained MLPs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--separation", type=float, default=2.5)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--adv-eps", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("attack", help="margin-tracking PGD against a model checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--head", default="ln",
                   help="'none', 'ln', or a result JSON whose transform is attacked")
    p.add_argument("--name", help="output file name (default attack.mxna)")
    _add_attack_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("optimize", help="grid search for the transform and mixing weight")
    p.add_argument("--clean-logits", required=True)
    p.add_argument("--attack-cache", required=True)
    p.add_argument("--beta", type=float, required=True)
    _add_grid_flags(p)
    _add_cache_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("evaluate", help="clean accuracy and robust lower bound or adaptive attack")
    p.add_argument("--result", required=True)
    p.add_argument("--g-logits")
    p.add_argument("--h-logits")
    p.add_argument("--attack-cache")
    p.add_argument("--adaptive", action="store_true")
    p.add_argument("--g-model")
    p.add_argument("--h-model")
    p.add_argument("--rd", type=float, default=0.9)
    p.add_argument("--alpha-d", type=float)
    p.add_argument("--printed-formula", action="store_true")
    p.add_argument("--no-bound", action="store_true")
    p.add_argument("--name", help="output file name (default report.json)")
    _add_attack_flags(p, required=False)
    _add_cache_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("margins", help="per-example confidence margins by group")
    p.add_argument("--logits", required=True)
    p.add_argument("--attack-cache")
    p.add_argument("--transform", default="none", help="'none', 'ln' or a result JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_margins)

    p = sub.add_parser("tradeoff", help="beta sweep over one cached attack")
    p.add_argument("--clean-logits", required=True)
    p.add_argument("--attack-cache", required=True)
    p.add_argument("--betas", required=True)
    _add_grid_flags(p)
    _add_cache_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tradeoff)

    p = sub.add_parser("export-csv", help="MXNL file to CSV")
    p.add_argument("--logits", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_csv)

    p = sub.add_parser("run", help="whole pipeline from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="overrides output_dir from the config")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "run":
            out = cmd_run(args, None)
        else:
            out = Outputs(args.out)
            args.func(args, out)
        out.close()
    except MixnutsError as e:
        log.error("%s", e)
        return e.exit_code
    except (OSError, json.JSONDecodeError) as e:
        log.error("%s", e)
        return 2
    except Exception:
        log.exception("internal error")
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
