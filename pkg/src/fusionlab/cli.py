"""Batch experiment driver: one subcommand per experiment, CSV and SVG outputs in --out."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, defense, theory
from .attack import BACKENDS, apply_trigger
from .config import ConfigError, ExperimentConfig, load_config, validate
from .data import SyntheticDataset, generate_dataset, load_checkpoint, save_checkpoint
from .report import line_plot_svg, read_csv, write_csv, write_svg
from .state import ModelState
from .training import new_attack_state, train_clean_baseline, train_joint
from .vit import MicroViT

log = logging.getLogger("fusionlab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class RunError(RuntimeError):
    """A subcommand could not complete (missing checkpoint, mismatched seed, ...)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


@dataclass
class Run:
    cfg: ExperimentConfig
    out: Path
    command: str
    backend_given: bool = False
    _data: SyntheticDataset | None = field(default=None, repr=False)

    @property
    def seed(self) -> int:
        return self.cfg.seed

    @property
    def kind(self) -> str:
        return self.cfg.attack.kind

    @property
    def data(self) -> SyntheticDataset:
        if self._data is None:
            self._data = generate_dataset(self.cfg.data)
        return self._data

    def path(self, name: str) -> Path:
        return self.out / name

    def csv(self, name, columns, rows, **notes) -> Path:
        p = write_csv(self.path(name), columns, rows, self.cfg.to_dict(), self.seed, self.command, notes)
        log.info("wrote %s", p)
        return p

    def backbone_path(self) -> Path:
        return self.path("backbone.flab")

    def attack_path(self, kind: str | None = None) -> Path:
        return self.path(f"attack_{kind or self.kind}.flab")

    def load(self, path: Path) -> ModelState:
        if not path.exists():
            raise RunError(f"{path} not found")
        state = load_checkpoint(path)
        if state.seed != self.seed:
            raise RunError(f"{path} was trained with seed {state.seed}, this run uses seed {self.seed}")
        return state

    def load_attack(self, kind: str | None = None) -> ModelState:
        path = self.attack_path(kind)
        if not path.exists():
            raise RunError(f"{path} not found; run `fusionlab attack --backend {kind or self.kind}` first")
        return self.load(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(run: Run) -> None:
    t = run.cfg.train
    backbone = MicroViT(run.cfg.model, seed=run.seed)
    backbone, acc = train_clean_baseline(backbone, run.data, epochs=t.pretrain_epochs, lr=t.pretrain_lr,
                                         seed=run.seed, label_smoothing=t.label_smoothing)
    state = ModelState(backbone, seed=run.seed, config=run.cfg.to_dict())
    save_checkpoint(state, run.backbone_path())
    run.csv("pretrain.csv", ("metric", "value"), [
        ("clean_acc", acc),
        ("backbone_parameters", backbone.count_parameters()),
        ("theta_checksum", backbone.checksum()),
    ])


def cmd_attack(run: Run) -> None:
    if not run.backbone_path().exists():
        log.info("no backbone in %s; pretraining first", run.out)
        cmd_pretrain(run)
    backbone = run.load(run.backbone_path()).backbone
    before = backbone.checksum()
    tc = run.cfg.train_config()
    state = new_attack_state(backbone, tc, **run.cfg.attack_kwargs())
    state.config = run.cfg.to_dict()
    state, report = train_joint(state, run.data, tc)
    if backbone.checksum() != before:
        raise RunError("backbone changed during attack training")
    save_checkpoint(state, run.attack_path())
    run.csv(f"train_loss_{run.kind}.csv", ("epoch", "l_clean", "l_attack", "l_total"),
            [(e, c, a, tot) for e, c, a, tot in report.epoch_means()],
            max_trigger_linf=report.max_trigger_linf, theta_checksum=before)


def cmd_eval(run: Run) -> None:
    state = run.load_attack()
    ds = run.data
    full = analysis.evaluate_state(state, ds.test_x, ds.test_y)
    base = analysis.evaluate_state(state, ds.test_x, ds.test_y, attacked=False)
    run.csv(f"metrics_{run.kind}.csv",
            ("backend", "seed", "baseline_acc", "acc", "asr", "baseline_asr", "attack_parameters",
             "theta_checksum"),
            [(run.kind, run.seed, base.acc, full.acc, full.asr, base.asr,
              analysis.count_parameters(state, "attack"), state.backbone.checksum())])


def cmd_dissect(run: Run) -> None:
    state = run.load_attack()
    rep = analysis.dissect(state, run.data.test_x, run.data.test_y)
    spars = analysis.weight_sparsity_stats(state.attack.flat())
    run.csv("dissection.csv", ("config", "acc", "asr", "param_fraction"), rep.rows(),
            backend=run.kind, near_zero_fraction=spars.near_zero_fraction)


def cmd_perturb(run: Run) -> None:
    state = run.load_attack()
    ds = run.data
    before, after, _ = analysis.perturbative_finetune_test(state, ds.train_x, ds.test_x, ds.test_y,
                                                           seed=run.seed)
    run.csv("perturb.csv", ("phase", "acc", "asr"),
            [("before", before.acc, before.asr), ("after", after.acc, after.asr)], backend=run.kind)


def cmd_prune_sweep(run: Run) -> None:
    kinds = [run.kind] if run.backend_given else [k for k in BACKENDS if run.attack_path(k).exists()]
    if not kinds:
        raise RunError(f"no attack checkpoints in {run.out}")
    rows = []
    for kind in kinds:
        curve = analysis.prune_sweep(run.load_attack(kind), run.data.test_x, run.data.test_y)
        rows += [(r, acc, asr, kind) for r, acc, asr in curve.rows]
    run.csv("prune_sweep.csv", ("ratio", "acc", "asr", "backend"), rows)


def _probe_split(run: Run):
    """Defender's clean probe set: the few-shot training split (they never see the trigger)."""
    return run.data.train_x, run.data.train_y


def cmd_nc_defense(run: Run) -> None:
    state = run.load_attack()
    model = defense.DeployedModel.from_state(state)
    probe_x, _ = _probe_split(run)
    ds = run.data
    res = defense.neural_cleanse(model, probe_x, ds.test_x, ds.test_y, steps=run.cfg.defense.nc_steps,
                                 l1_weight=run.cfg.defense.lambda_l1, seed=run.seed)
    true = analysis.evaluate_state(state, ds.test_x, ds.test_y)
    run.csv("nc_report.csv", ("class", "l1", "anomaly_index", "flagged", "recovered_asr"), list(res.rows()),
            backend=run.kind, true_target=state.target_class, true_trigger_asr=true.asr,
            target_flagged=state.target_class in res.anomaly.flagged)


def cmd_proximity(run: Run) -> None:
    state = run.load_attack()
    model = defense.DeployedModel.from_state(state)
    ds = run.data
    rep = defense.feature_proximity(model, state.trigger.delta.data, state.target_class, ds.test_x, ds.test_y)
    rows = [(c, rep.per_class_fraction[c], rep.per_class_mean_ratio[c]) for c in sorted(rep.per_class_fraction)]
    run.csv("proximity.csv", ("class", "fraction_closer_to_target", "mean_ratio"), rows,
            backend=run.kind, target=rep.target, fraction_closer_to_target=rep.fraction_closer_to_target)


def cmd_theory(run: Run) -> None:
    th = run.cfg.theory
    seeds = range(run.seed, run.seed + th.seeds)
    rows = theory.monte_carlo(seeds, th.ratios, th.p, th.k_shared, th.n_rows, th.n_rows, th.lam)
    means = theory.mean_fraction_by_ratio(rows)
    run.csv("theory_report.csv", theory.THEORY_COLUMNS, [r.as_tuple() for r in rows],
            mean_energy_fraction={str(k): v for k, v in means.items()})


def cmd_report(run: Run) -> None:
    out = run.out
    lines = [f"# Run summary for {out}", ""]
    summary_rows = []

    def table(title, path, cols):
        if not path.exists():
            return None
        _, rows = read_csv(path)
        lines.extend([f"## {title}", "", "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)])
        for r in rows:
            lines.append("| " + " | ".join(_short(r[c]) for c in cols) + " |")
        lines.append("")
        return rows

    for kind in BACKENDS:
        rows = table(f"Metrics ({kind})", out / f"metrics_{kind}.csv", ("backend", "baseline_acc", "acc", "asr"))
        for r in rows or []:
            summary_rows.append((f"{kind}.acc", r["acc"]))
            summary_rows.append((f"{kind}.asr", r["asr"]))
    for r in table("Core / periphery dissection", out / "dissection.csv", ("config", "acc", "asr", "param_fraction")) or []:
        summary_rows.append((f"dissect.{r['config']}.asr", r["asr"]))
    for r in table("Perturbative fine-tuning", out / "perturb.csv", ("phase", "acc", "asr")) or []:
        summary_rows.append((f"perturb.{r['phase']}.acc", r["acc"]))
    prune_rows = table("Pruning sweep", out / "prune_sweep.csv", ("backend", "ratio", "acc", "asr"))
    table("Trigger reversal", out / "nc_report.csv", ("class", "l1", "anomaly_index", "flagged", "recovered_asr"))
    table("Feature proximity", out / "proximity.csv", ("class", "fraction_closer_to_target", "mean_ratio"))

    plots = []
    if prune_rows:
        series = {}
        for r in prune_rows:
            xs, ys = series.setdefault(r["backend"], ([], []))
            xs.append(float(r["ratio"]))
            ys.append(float(r["asr"]))
        plots.append(write_svg(out / "prune_sweep.svg", line_plot_svg(
            series, "ASR under magnitude pruning", "pruning ratio", "ASR", ylim=(0.0, 1.0))))
    theory_path = out / "theory_report.csv"
    if theory_path.exists():
        _, rows = read_csv(theory_path)
        by_ratio: dict[float, list[float]] = {}
        for r in rows:
            by_ratio.setdefault(float(r["ratio"]), []).append(float(r["energy_fraction"]))
        xs = sorted(by_ratio)
        ys = [float(np.mean(by_ratio[x])) for x in xs]
        lines.extend(["## Shared-direction energy fraction", "", "| ratio | mean fraction |", "|---|---|"])
        lines.extend(f"| {x:g} | {y:.4f} |" for x, y in zip(xs, ys))
        lines.append("")
        summary_rows.extend((f"theory.energy_fraction.ratio_{x:g}", y) for x, y in zip(xs, ys))
        plots.append(write_svg(out / "theory_energy.svg", line_plot_svg(
            {"mean over seeds": (xs, ys)}, "Energy on shared directions", "strength ratio",
            "energy fraction", ylim=(0.0, 1.0))))
    for kind in BACKENDS:
        path = out / f"train_loss_{kind}.csv"
        if path.exists():
            _, rows = read_csv(path)
            ep = [float(r["epoch"]) for r in rows]
            plots.append(write_svg(out / f"train_loss_{kind}.svg", line_plot_svg(
                {"clean": (ep, [float(r["l_clean"]) for r in rows]),
                 "attack": (ep, [float(r["l_attack"]) for r in rows])},
                f"Training loss ({kind})", "epoch", "loss")))
    if len(lines) == 2:
        raise RunError(f"no result CSVs found in {out}")
    if plots:
        lines.extend(["## Plots", ""] + [f"- {p.name}" for p in plots] + [""])
    (out / "summary.md").write_text("\n".join(lines), encoding="utf-8")
    run.csv("summary.csv", ("quantity", "value"), summary_rows)


def _short(v: str) -> str:
    try:
        return f"{float(v):.4g}"
    except (TypeError, ValueError):
        return str(v)


COMMANDS = {
    "pretrain": (cmd_pretrain, "train the clean backbone and freeze it"),
    "attack": (cmd_attack, "jointly train the trigger and the attack module"),
    "eval": (cmd_eval, "clean accuracy and attack success rate of a trained attack"),
    "dissect": (cmd_dissect, "evaluate the weight core and periphery separately"),
    "perturb-test": (cmd_perturb, "one epoch of random-label fine-tuning on triggered inputs"),
    "prune-sweep": (cmd_prune_sweep, "magnitude-prune the attack module at ratios 0.0 to 0.9"),
    "nc-defense": (cmd_nc_defense, "mask/pattern trigger reversal with MAD outlier scores"),
    "proximity": (cmd_proximity, "centroid distance ratio of triggered features"),
    "theory": (cmd_theory, "ridge energy-concentration Monte Carlo"),
    "report": (cmd_report, "aggregate CSVs in --out into summary.md and SVG plots"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusionlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None, help="YAML or JSON config (defaults if omitted)")
        p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--backend", choices=BACKENDS, default=None, help="overrides attack.kind")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.backend is not None:
            cfg = cfg.with_backend(args.backend)
        validate(cfg)
    except ConfigError as exc:
        print(f"fusionlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(cfg, args.out, args.command, backend_given=args.backend is not None)
    try:
        run.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command][0](run)
    except ConfigError as exc:
        print(f"fusionlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every failure maps to one exit status
        log.debug("failure", exc_info=True)
        print(f"fusionlab: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
